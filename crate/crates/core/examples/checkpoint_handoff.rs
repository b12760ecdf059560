//! Save a stage-1 checkpoint, resume stage 2 from the file, and show that the
//! reloaded towers reproduce the saved ones exactly.

use duocontrast::data::{synth_generate, tokenize_batch};
use duocontrast::encoders::{encode_text, EncoderConfig};
use duocontrast::losses::Stage;
use duocontrast::numcore::Rng;
use duocontrast::trainer::{run_pipeline, Checkpoint, InitFrom, StageConfig, TrainState};

fn main() -> duocontrast::Result<()> {
    let data = synth_generate(&mut Rng::new(5), 256, 8, 0.05)?;
    let short = |stage| StageConfig {
        total_steps: 10,
        batch_size_text: 16,
        batch_size_img: 16,
        ..StageConfig::desk(stage)
    };
    let first = run_pipeline(
        &[short(Stage::One)],
        TrainState::init(5, &EncoderConfig::default())?,
        &data.train,
    )?;
    let path = std::env::temp_dir().join("duocontrast_stage1.jck");
    first.checkpoints[0].save(&path)?;

    let loaded = Checkpoint::load(&path)?;
    let probe = tokenize_batch(&["probe one", "probe two"], 77)?;
    let same = encode_text(&probe, &loaded.state.text)? == encode_text(&probe, &first.state.text)?;
    println!(
        "reloaded stage {} checkpoint at step {}, outputs identical: {same}",
        loaded.stage, loaded.state.step
    );

    let mut second = short(Stage::Two);
    second.init_from = InitFrom::Checkpoint(path);
    let out = run_pipeline(&[second], TrainState::init(0, &EncoderConfig::default())?, &data.train)?;
    println!("stage 2 resumed and finished at step {}", out.state.step);
    Ok(())
}
