//! The full desk-scale pipeline on a reduced corpus, evaluated after each
//! stage. Pass `full` to train on 4096 items with the default step counts.

use duocontrast::data::synth_generate;
use duocontrast::encoders::EncoderConfig;
use duocontrast::eval::{cross_modal_eval, EvalOptions, Towers};
use duocontrast::numcore::Rng;
use duocontrast::trainer::{run_pipeline, StageConfig, TrainState};

fn main() -> duocontrast::Result<()> {
    let full = std::env::args().any(|a| a == "full");
    let n = if full { 4096 } else { 1024 };
    let data = synth_generate(&mut Rng::new(42), n, 8, 0.05)?;
    let mut configs = StageConfig::desk_pipeline();
    if !full {
        configs.iter_mut().for_each(|c| c.total_steps /= 4);
    }
    let out = run_pipeline(&configs, TrainState::init(42, &EncoderConfig::default())?, &data.train)?;
    let opts = EvalOptions {
        index_size: Some(256),
        ..EvalOptions::default()
    };
    for ck in &out.checkpoints {
        let towers = Towers {
            text: &ck.state.text,
            image: &ck.state.image,
        };
        println!(
            "after stage {}:\n{}",
            ck.stage,
            cross_modal_eval(&towers, &data.eval, &opts)?.render()
        );
    }
    Ok(())
}
