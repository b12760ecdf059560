use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::{LONG_MAX_LEN, SHORT_MAX_LEN};
use crate::error::{Error, Result};
use crate::losses::Stage;

/// Where a stage takes its starting weights from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InitFrom {
    Random,
    /// The final state of the preceding stage in the same pipeline.
    Previous,
    Checkpoint(PathBuf),
}

impl InitFrom {
    fn parse(value: &str) -> Self {
        match value {
            "random" => InitFrom::Random,
            "previous" => InitFrom::Previous,
            path => InitFrom::Checkpoint(PathBuf::from(path)),
        }
    }

    fn render(&self) -> String {
        match self {
            InitFrom::Random => "random".into(),
            InitFrom::Previous => "previous".into(),
            InitFrom::Checkpoint(p) => p.display().to_string(),
        }
    }
}

/// Hyper-parameters for one training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub batch_size_text: usize,
    pub batch_size_img: usize,
    pub total_steps: usize,
    pub max_seq_len: usize,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_steps: usize,
    pub init_from: InitFrom,
    /// Lifts the fixed per-stage `max_seq_len`.
    pub test_mode: bool,
}

const FULL_LR: [f64; 3] = [1e-4, 5e-6, 1e-6];
const FULL_BATCH: [usize; 3] = [32768, 8192, 1024];
const FULL_STEPS: [usize; 3] = [60_000, 1_500, 7_000];

const DESK_LR: [f64; 3] = [2e-3, 1e-4, 5e-4];
const DESK_BATCH: [usize; 3] = [64, 32, 16];
const DESK_STEPS: [usize; 3] = [600, 50, 100];

const KEYS: [&str; 13] = [
    "stage",
    "peak_lr",
    "batch_size_text",
    "batch_size_img",
    "total_steps",
    "max_seq_len",
    "weight_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "warmup_steps",
    "init_from",
    "test_mode",
];

impl StageConfig {
    /// The sequence length a stage trains at.
    pub fn stage_seq_len(stage: Stage) -> usize {
        match stage {
            Stage::One => SHORT_MAX_LEN,
            Stage::Two | Stage::Three => LONG_MAX_LEN,
        }
    }

    fn base(stage: Stage, lr: f64, batch: usize, steps: usize) -> Self {
        Self {
            stage,
            peak_lr: lr,
            batch_size_text: batch,
            batch_size_img: batch,
            total_steps: steps,
            max_seq_len: Self::stage_seq_len(stage),
            weight_decay: 0.025,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-6,
            warmup_steps: 0,
            init_from: match stage {
                Stage::One => InitFrom::Random,
                _ => InitFrom::Previous,
            },
            test_mode: false,
        }
    }

    /// Full-scale settings.
    pub fn full_scale(stage: Stage) -> Self {
        let i = stage.number() as usize - 1;
        Self::base(stage, FULL_LR[i], FULL_BATCH[i], FULL_STEPS[i])
    }

    /// Single-core settings: batches 64/32/16, steps 600/50/100.
    pub fn desk(stage: Stage) -> Self {
        let i = stage.number() as usize - 1;
        Self::base(stage, DESK_LR[i], DESK_BATCH[i], DESK_STEPS[i])
    }

    pub fn desk_pipeline() -> [StageConfig; 3] {
        Stage::ALL.map(Self::desk)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |arg: &'static str, reason: String| Err(Error::invalid(arg, reason));
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return bad(
                "peak_lr",
                format!("must be finite and non-negative, got {}", self.peak_lr),
            );
        }
        if self.batch_size_text == 0 || self.batch_size_img == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta", "betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("adam_eps", "eps must be positive and weight_decay non-negative".into());
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return bad(
                "warmup_steps",
                format!("{} must be below total_steps {}", self.warmup_steps, self.total_steps),
            );
        }
        let expected = Self::stage_seq_len(self.stage);
        if self.max_seq_len == 0 || (!self.test_mode && self.max_seq_len != expected) {
            return bad(
                "max_seq_len",
                format!("stage {} trains at {expected}, got {}", self.stage, self.max_seq_len),
            );
        }
        Ok(())
    }

    /// Canonical `key = value` text; every field appears once, in a fixed order.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        line("stage", self.stage.to_string());
        line("peak_lr", format!("{:e}", self.peak_lr));
        line("batch_size_text", self.batch_size_text.to_string());
        line("batch_size_img", self.batch_size_img.to_string());
        line("total_steps", self.total_steps.to_string());
        line("max_seq_len", self.max_seq_len.to_string());
        line("weight_decay", format!("{:e}", self.weight_decay));
        line("adam_beta1", format!("{:e}", self.adam_beta1));
        line("adam_beta2", format!("{:e}", self.adam_beta2));
        line("adam_eps", format!("{:e}", self.adam_eps));
        line("warmup_steps", self.warmup_steps.to_string());
        line("init_from", self.init_from.render());
        line("test_mode", self.test_mode.to_string());
        s
    }

    /// First eight bytes of the SHA-256 of the canonical text, leaving out
    /// `init_from` so a stage resumed from a file hashes like its pipeline run.
    pub fn hash(&self) -> [u8; 8] {
        let text = self.to_config_text();
        let kept: Vec<&str> = text.lines().filter(|l| !l.starts_with("init_from ")).collect();
        let digest = Sha256::digest(kept.join("\n").as_bytes());
        digest[..8].try_into().unwrap()
    }

    /// Parses `key = value` lines. `stage` is required; other keys fall back
    /// to the desk defaults of that stage. `#` starts a comment.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (k, v) = content
                .split_once('=')
                .ok_or_else(|| err(i + 1, format!("expected `key = value`, got `{content}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(err(i + 1, format!("unknown key `{k}`")));
            }
            if entries.iter().any(|(_, seen, _)| *seen == k) {
                return Err(err(i + 1, format!("duplicate key `{k}`")));
            }
            entries.push((i + 1, k, v));
        }
        let &(stage_line, _, stage_value) = entries
            .iter()
            .find(|(_, k, _)| *k == "stage")
            .ok_or_else(|| err(0, "missing required key `stage`".into()))?;
        let stage = stage_value
            .parse::<u8>()
            .map_err(|e| err(stage_line, e.to_string()))
            .and_then(|n| Stage::try_from(n).map_err(|e| err(stage_line, e.to_string())))?;

        let mut cfg = Self::desk(stage);
        for &(line, k, v) in &entries {
            let float = || v.parse::<f64>().map_err(|e| err(line, format!("{k}: {e}")));
            let int = || v.parse::<usize>().map_err(|e| err(line, format!("{k}: {e}")));
            match k {
                "stage" => {}
                "peak_lr" => cfg.peak_lr = float()?,
                "batch_size_text" => cfg.batch_size_text = int()?,
                "batch_size_img" => cfg.batch_size_img = int()?,
                "total_steps" => cfg.total_steps = int()?,
                "max_seq_len" => cfg.max_seq_len = int()?,
                "weight_decay" => cfg.weight_decay = float()?,
                "adam_beta1" => cfg.adam_beta1 = float()?,
                "adam_beta2" => cfg.adam_beta2 = float()?,
                "adam_eps" => cfg.adam_eps = float()?,
                "warmup_steps" => cfg.warmup_steps = int()?,
                "init_from" => cfg.init_from = InitFrom::parse(v),
                "test_mode" => cfg.test_mode = v.parse::<bool>().map_err(|e| err(line, format!("{k}: {e}")))?,
                _ => unreachable!("keys are checked above"),
            }
        }
        cfg.validate().map_err(|e| err(0, e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        for stage in Stage::ALL {
            StageConfig::full_scale(stage).validate().unwrap();
            StageConfig::desk(stage).validate().unwrap();
        }
        assert_eq!(StageConfig::full_scale(Stage::Two).batch_size_text, 8192);
        assert_eq!(StageConfig::desk(Stage::Three).total_steps, 100);
    }

    #[test]
    fn sequence_length_is_pinned_outside_test_mode() {
        let mut cfg = StageConfig::desk(Stage::One);
        cfg.max_seq_len = 512;
        assert!(cfg.validate().is_err());
        cfg.test_mode = true;
        cfg.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut cfg = StageConfig::desk(Stage::Two);
        cfg.init_from = InitFrom::Checkpoint("runs/a.jck".into());
        cfg.peak_lr = 3.25e-5;
        let back = StageConfig::parse(&cfg.to_config_text(), Path::new("x")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_ignores_the_weight_source() {
        let mut a = StageConfig::desk(Stage::Two);
        let mut b = a.clone();
        b.init_from = InitFrom::Checkpoint("runs/stage1.jck".into());
        assert_eq!(a.hash(), b.hash());
        a.peak_lr *= 2.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn partial_file_uses_stage_defaults() {
        let cfg = StageConfig::parse("stage = 3\ntotal_steps = 7 # short\n", Path::new("c")).unwrap();
        assert_eq!(cfg.total_steps, 7);
        assert_eq!(cfg.batch_size_text, 16);
        assert_eq!(cfg.max_seq_len, 512);
    }

    #[test]
    fn unknown_and_missing_keys() {
        let e = StageConfig::parse("stage = 1\nlearning_rate = 1\n", Path::new("c.cfg")).unwrap_err();
        assert!(e.to_string().contains("c.cfg:2"), "{e}");
        assert!(StageConfig::parse("peak_lr = 1e-3\n", Path::new("c")).is_err());
        assert!(StageConfig::parse("stage = 4\n", Path::new("c")).is_err());
    }
}
