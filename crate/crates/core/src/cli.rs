//! Command-line surface: `gen-data`, `train`, `eval`, `encode`, `selfcheck`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{
    parse_image_corpus, parse_pair_corpus, parse_triplet_corpus, synth_generate, EvalSplit, TrainingCorpora,
    LONG_MAX_LEN,
};
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::{cross_modal_eval, Embedder, EvalOptions, Towers};
use crate::losses::Stage;
use crate::numcore::{write_tensor_file, Rng, Tensor};
use crate::trainer::{run_pipeline, Checkpoint, InitFrom, StageConfig, TrainState};

#[derive(Parser, Debug)]
#[command(
    name = "duocontrast",
    version,
    about = "Train and evaluate a text/image dual encoder"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic train corpora and a held-out split.
    GenData(GenDataArgs),
    /// Run one stage or the whole three-stage pipeline.
    Train(TrainArgs),
    /// Score a checkpoint on the held-out split.
    Eval(EvalArgs),
    /// Embed a corpus file with a checkpoint's towers.
    Encode(EncodeArgs),
    /// Gradient checks and invariant suite; exits 0 iff all pass.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 4096)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub latent_dim: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Stage config file; repeat for several stages.
    #[arg(long)]
    pub config: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = StageArg::All)]
    pub stage: StageArg,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Starting weights for a single stage after the first.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score only the first N held-out items.
    #[arg(long)]
    pub index_size: Option<usize>,
    #[arg(long)]
    pub long_captions: bool,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A pair, triplet or image-caption corpus file.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = LONG_MAX_LEN)]
    pub max_seq_len: usize,
}

#[derive(Args, Debug)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Random instances per gradient check.
    #[arg(long, default_value_t = 8)]
    pub cases: usize,
}

/// Parses `argv` (including the program name), runs the command, and
/// returns the process exit code. Messages go to stdout and stderr.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{}", out.stdout);
            if out.success {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// What a successful command prints, and whether it counts as a pass.
#[derive(Debug, Default)]
pub struct Outcome {
    pub stdout: String,
    pub success: bool,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self { stdout, success: true }
    }
}

pub fn run(command: Command) -> Result<Outcome> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Encode(a) => encode(&a),
        Command::Selfcheck(a) => {
            let report = crate::selfcheck::run(a.seed, a.cases);
            Ok(Outcome {
                stdout: report.render(),
                success: report.passed(),
            })
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn gen_data(a: &GenDataArgs) -> Result<Outcome> {
    let data = synth_generate(&mut Rng::new(a.seed), a.n, a.latent_dim, a.noise)?;
    data.write_dir(&a.out)?;
    Ok(Outcome::ok(format!(
        "wrote {} train and {} eval items to {}\n",
        a.n - data.eval.len(),
        data.eval.len(),
        a.out.display()
    )))
}

/// Stage configs for a `train` invocation: desk defaults, overridden by any
/// config files, restricted to the requested stages.
pub fn resolve_configs(stage: StageArg, files: &[PathBuf], checkpoint: Option<&Path>) -> Result<Vec<StageConfig>> {
    let mut all = StageConfig::desk_pipeline();
    let mut seen = Vec::new();
    for path in files {
        let cfg = StageConfig::load(path)?;
        if seen.contains(&cfg.stage) {
            return Err(Error::Config(format!(
                "{}: stage {} is configured twice",
                path.display(),
                cfg.stage
            )));
        }
        seen.push(cfg.stage);
        let i = cfg.stage.number() as usize - 1;
        all[i] = cfg;
    }
    let mut chosen: Vec<StageConfig> = match stage {
        StageArg::All => all.to_vec(),
        StageArg::One => vec![all[0].clone()],
        StageArg::Two => vec![all[1].clone()],
        StageArg::Three => vec![all[2].clone()],
    };
    for cfg in files.iter().zip(&seen) {
        if !chosen.iter().any(|c| c.stage == *cfg.1) {
            return Err(Error::Config(format!(
                "{} configures stage {}, which this run does not train",
                cfg.0.display(),
                cfg.1
            )));
        }
    }
    if let Some(path) = checkpoint {
        chosen[0].init_from = InitFrom::Checkpoint(path.to_path_buf());
    }
    Ok(chosen)
}

pub fn checkpoint_name(stage: Stage) -> String {
    format!("stage{stage}.jck")
}

pub fn loss_trace_name(stage: Stage) -> String {
    format!("stage{stage}_loss.txt")
}

fn train(a: &TrainArgs) -> Result<Outcome> {
    let configs = resolve_configs(a.stage, &a.config, a.checkpoint.as_deref())?;
    let corpora = TrainingCorpora::load_dir(&a.data)?.with_seed(a.seed);
    let initial = TrainState::init(a.seed, &EncoderConfig::default())?;
    let result = run_pipeline(&configs, initial, &corpora)?;
    create_dir(&a.out)?;
    let mut stdout = String::new();
    for (ck, losses) in result.checkpoints.iter().zip(&result.losses) {
        let path = a.out.join(checkpoint_name(ck.stage));
        ck.save(&path)?;
        let trace: String = losses.iter().map(|l| format!("{l}\n")).collect();
        let trace_path = a.out.join(loss_trace_name(ck.stage));
        std::fs::write(&trace_path, trace).map_err(|e| Error::io(&trace_path, e))?;
        let last = losses.last().map_or("n/a".to_string(), |l| format!("{l:.6}"));
        writeln!(
            stdout,
            "stage {}: {} steps, final loss {last}, wrote {}",
            ck.stage,
            losses.len(),
            path.display()
        )
        .unwrap();
    }
    Ok(Outcome::ok(stdout))
}

pub const METRICS_FILE: &str = "metrics.txt";

fn eval(a: &EvalArgs) -> Result<Outcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let split = EvalSplit::load_dir(&a.data)?;
    let opts = EvalOptions {
        index_size: a.index_size,
        long_captions: a.long_captions,
        max_seq_len: if a.long_captions {
            LONG_MAX_LEN
        } else {
            EvalOptions::default().max_seq_len
        },
        ..EvalOptions::default()
    };
    let towers = Towers {
        text: &ck.state.text,
        image: &ck.state.image,
    };
    let report = cross_modal_eval(&towers, &split, &opts)?;
    create_dir(&a.out)?;
    let path = a.out.join(METRICS_FILE);
    let text = report.render();
    std::fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
    Ok(Outcome::ok(text))
}

enum CorpusFile {
    Pairs,
    Triplets,
    Images,
}

fn sniff(path: &Path) -> Result<CorpusFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (i, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| crate::data::parse_error(path, 1, "corpus is empty"))?;
    let v: serde_json::Value =
        serde_json::from_str(line).map_err(|e| crate::data::parse_error(path, i + 1, e.to_string()))?;
    let has = |k: &str| v.get(k).is_some();
    match () {
        _ if has("negatives") => Ok(CorpusFile::Triplets),
        _ if has("image_ref") => Ok(CorpusFile::Images),
        _ if has("query") => Ok(CorpusFile::Pairs),
        _ => Err(crate::data::parse_error(
            path,
            i + 1,
            "not a pair, triplet or image-caption record",
        )),
    }
}

fn encode(a: &EncodeArgs) -> Result<Outcome> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let towers = Towers {
        text: &ck.state.text,
        image: &ck.state.image,
    };
    let len = a.max_seq_len;
    let mut outputs: Vec<(&str, Tensor)> = Vec::new();
    match sniff(&a.corpus)? {
        CorpusFile::Pairs => {
            let c = parse_pair_corpus(&a.corpus)?;
            let q: Vec<&str> = c.records().iter().map(|r| r.query.as_str()).collect();
            let p: Vec<&str> = c.records().iter().map(|r| r.positive.as_str()).collect();
            outputs.push(("queries", towers.embed_texts(&q, len)?));
            outputs.push(("positives", towers.embed_texts(&p, len)?));
        }
        CorpusFile::Triplets => {
            let c = parse_triplet_corpus(&a.corpus)?;
            let q: Vec<&str> = c.records().iter().map(|r| r.query.as_str()).collect();
            let p: Vec<&str> = c.records().iter().map(|r| r.positive.as_str()).collect();
            let n: Vec<&str> = c
                .records()
                .iter()
                .flat_map(|r| r.negatives.iter().map(String::as_str))
                .collect();
            outputs.push(("queries", towers.embed_texts(&q, len)?));
            outputs.push(("positives", towers.embed_texts(&p, len)?));
            outputs.push(("negatives", towers.embed_texts(&n, len)?));
        }
        CorpusFile::Images => {
            let c = parse_image_corpus(&a.corpus)?;
            let caps: Vec<&str> = c.records().iter().map(|r| r.caption.as_str()).collect();
            let imgs = Tensor::stack(&c.records().iter().map(|r| r.image.clone()).collect::<Vec<_>>())?;
            outputs.push(("captions", towers.embed_texts(&caps, len)?));
            outputs.push(("images", towers.embed_images(&imgs)?));
        }
    }
    create_dir(&a.out)?;
    let mut stdout = String::new();
    for (name, t) in outputs {
        let path = a.out.join(format!("{name}.jct"));
        write_tensor_file(&path, &t)?;
        writeln!(stdout, "{name}: {:?} -> {}", t.shape(), path.display()).unwrap();
    }
    Ok(Outcome::ok(stdout))
}
