//! Tokenization, corpus files, batching and synthetic data.
//!
//! A dataset directory holds line-delimited corpora plus the images they
//! reference:
//!
//! ```text
//! train_pairs.jsonl            {"query": .., "positive": ..}
//! train_triplets.jsonl         {"query": .., "positive": .., "negatives": [7 × ..]}
//! train_captions_short.jsonl   {"caption": .., "image_ref": "images/000000.jct"}
//! train_captions_long.jsonl
//! eval_pairs.jsonl
//! eval_captions_short.jsonl
//! eval_captions_long.jsonl
//! eval_latents.jct             [n_eval, d] unit latents
//! images/*.jct
//! ```
//!
//! Any train file may be absent; the stages that need it then fail to start.

mod corpus;
mod records;
mod synth;
mod tokenize;

use std::path::Path;

pub use corpus::{
    parse_image_corpus, parse_pair_corpus, parse_triplet_corpus, CorpusHandle, ImageCaptionCorpus, PairCorpus,
    TripletCorpus,
};
pub use records::{CorpusKind, ImageCaptionRecord, PairRecord, Record, TripletRecord};
pub use synth::{
    decode_code, decode_image, latent_code, synth_generate, synth_generate_with, SynthOptions, LONG_REPEATS,
    PAIR_QUERY_NOISE, QUERY_NOISE,
};
pub use tokenize::{tokenize, tokenize_batch, TokenRow, LONG_MAX_LEN, SHORT_MAX_LEN};

pub(crate) use records::parse_error;

use crate::error::{Error, Result};
use crate::numcore::{read_tensor_file, write_tensor_file, Tensor};

/// The corpora a training run may draw from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingCorpora {
    pub pairs: Option<PairCorpus>,
    pub captions_short: Option<ImageCaptionCorpus>,
    pub captions_long: Option<ImageCaptionCorpus>,
    pub triplets: Option<TripletCorpus>,
}

/// Held-out items with their generating latents.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSplit {
    pub pairs: Vec<PairRecord>,
    pub captions_short: Vec<ImageCaptionRecord>,
    pub captions_long: Vec<ImageCaptionRecord>,
    pub latents: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: TrainingCorpora,
    pub eval: EvalSplit,
}

const TRAIN_PAIRS: &str = "train_pairs.jsonl";
const TRAIN_TRIPLETS: &str = "train_triplets.jsonl";
const TRAIN_SHORT: &str = "train_captions_short.jsonl";
const TRAIN_LONG: &str = "train_captions_long.jsonl";
const EVAL_PAIRS: &str = "eval_pairs.jsonl";
const EVAL_SHORT: &str = "eval_captions_short.jsonl";
const EVAL_LONG: &str = "eval_captions_long.jsonl";
const EVAL_LATENTS: &str = "eval_latents.jct";

fn optional<R: Record>(path: &Path) -> Result<Option<CorpusHandle<R>>> {
    if path.exists() {
        CorpusHandle::parse(path).map(Some)
    } else {
        Ok(None)
    }
}

impl TrainingCorpora {
    /// Gives each corpus its own epoch seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        let mut rng = crate::numcore::Rng::new(seed);
        let mut next = |salt| rng.fork(salt).next_u64();
        self.pairs = self.pairs.map(|c| c.with_epoch_seed(next(11)));
        self.captions_short = self.captions_short.map(|c| c.with_epoch_seed(next(12)));
        self.captions_long = self.captions_long.map(|c| c.with_epoch_seed(next(13)));
        self.triplets = self.triplets.map(|c| c.with_epoch_seed(next(14)));
        self
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            pairs: optional(&dir.join(TRAIN_PAIRS))?,
            captions_short: optional(&dir.join(TRAIN_SHORT))?,
            captions_long: optional(&dir.join(TRAIN_LONG))?,
            triplets: optional(&dir.join(TRAIN_TRIPLETS))?,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        if let Some(c) = &self.pairs {
            c.write(&dir.join(TRAIN_PAIRS))?;
        }
        if let Some(c) = &self.triplets {
            c.write(&dir.join(TRAIN_TRIPLETS))?;
        }
        if let Some(c) = &self.captions_short {
            c.write_with_images(&dir.join(TRAIN_SHORT))?;
        }
        if let Some(c) = &self.captions_long {
            c.write_with_images(&dir.join(TRAIN_LONG))?;
        }
        Ok(())
    }
}

impl EvalSplit {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let split = Self {
            pairs: parse_pair_corpus(&dir.join(EVAL_PAIRS))?.records().to_vec(),
            captions_short: parse_image_corpus(&dir.join(EVAL_SHORT))?.records().to_vec(),
            captions_long: parse_image_corpus(&dir.join(EVAL_LONG))?.records().to_vec(),
            latents: read_tensor_file(&dir.join(EVAL_LATENTS))?,
        };
        let n = split.pairs.len();
        let consistent = split.captions_short.len() == n
            && split.captions_long.len() == n
            && split.latents.rank() == 2
            && split.latents.shape()[0] == n;
        if !consistent {
            return Err(Error::Config(format!(
                "eval files in {} disagree on the number of items",
                dir.display()
            )));
        }
        Ok(split)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        CorpusHandle::new(self.pairs.clone(), 0).write(&dir.join(EVAL_PAIRS))?;
        CorpusHandle::new(self.captions_short.clone(), 0).write_with_images(&dir.join(EVAL_SHORT))?;
        CorpusHandle::new(self.captions_long.clone(), 0).write_with_images(&dir.join(EVAL_LONG))?;
        write_tensor_file(&dir.join(EVAL_LATENTS), &self.latents)
    }
}

impl Dataset {
    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: TrainingCorpora::load_dir(dir)?,
            eval: EvalSplit::load_dir(dir)?,
        })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        self.train.write_dir(dir)?;
        self.eval.write_dir(dir)
    }
}
