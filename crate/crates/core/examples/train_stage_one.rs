//! A short stage-1 run on a small synthetic corpus, printing the loss curve.

use duocontrast::data::synth_generate;
use duocontrast::encoders::EncoderConfig;
use duocontrast::losses::Stage;
use duocontrast::numcore::Rng;
use duocontrast::trainer::{run_stage, StageConfig, TrainState};

fn main() -> duocontrast::Result<()> {
    let data = synth_generate(&mut Rng::new(1), 512, 8, 0.05)?;
    let cfg = StageConfig {
        total_steps: 150,
        batch_size_text: 32,
        batch_size_img: 32,
        ..StageConfig::desk(Stage::One)
    };
    let state = TrainState::init(1, &EncoderConfig::default())?;
    let out = run_stage(&cfg, state, &data.train)?;
    for (i, chunk) in out.losses.chunks(25).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        println!("steps {:>3}..{:>3}: mean loss {mean:.4}", i * 25, i * 25 + chunk.len());
    }
    println!("image temperature now {:.4}", out.state.tau_img.tau());
    Ok(())
}
