use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::NEGATIVES_PER_QUERY;
use crate::numcore::Tensor;

/// Which record type a corpus holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    Pairs,
    ImageCaptions,
    Triplets,
}

/// A record type that can live in a line-delimited corpus file.
pub trait Record: Sized + Clone {
    const KIND: CorpusKind;

    /// Parses one line; `dir` resolves relative file references.
    fn parse_line(line: &str, dir: &Path) -> Result<Self, String>;

    fn to_line(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub query: String,
    pub positive: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TripletRecord {
    pub query: String,
    pub positive: String,
    pub negatives: Vec<String>,
}

/// A caption and the image it describes. `image_ref` is the path as written
/// in the corpus file (relative to that file's directory); `image` is the
/// loaded `[C, H, W]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageCaptionRecord {
    pub caption: String,
    pub image_ref: String,
    pub image: Tensor,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageCaptionLine {
    caption: String,
    image_ref: String,
}

fn non_empty(field: &str, value: &str) -> Result<(), String> {
    if value.is_empty() {
        Err(format!("field `{field}` is empty"))
    } else {
        Ok(())
    }
}

impl PairRecord {
    pub fn validate(&self) -> Result<(), String> {
        non_empty("query", &self.query)?;
        non_empty("positive", &self.positive)
    }
}

impl TripletRecord {
    pub fn validate(&self) -> Result<(), String> {
        non_empty("query", &self.query)?;
        non_empty("positive", &self.positive)?;
        if self.negatives.len() != NEGATIVES_PER_QUERY {
            return Err(format!(
                "expected {NEGATIVES_PER_QUERY} negatives, found {}",
                self.negatives.len()
            ));
        }
        for n in &self.negatives {
            non_empty("negatives", n)?;
        }
        if self.negatives.contains(&self.positive) {
            return Err("a negative duplicates the positive".into());
        }
        Ok(())
    }
}

impl ImageCaptionRecord {
    pub fn validate(&self) -> Result<(), String> {
        non_empty("caption", &self.caption)?;
        non_empty("image_ref", &self.image_ref)?;
        if self.image.rank() != 3 {
            return Err(format!("image must be [C, H, W], got {:?}", self.image.shape()));
        }
        crate::encoders::check_pixel_range(&self.image).map_err(|e| e.to_string())
    }
}

impl Record for PairRecord {
    const KIND: CorpusKind = CorpusKind::Pairs;

    fn parse_line(line: &str, _dir: &Path) -> Result<Self, String> {
        let r: PairRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        r.validate()?;
        Ok(r)
    }

    fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain strings serialize")
    }
}

impl Record for TripletRecord {
    const KIND: CorpusKind = CorpusKind::Triplets;

    fn parse_line(line: &str, _dir: &Path) -> Result<Self, String> {
        let r: TripletRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
        r.validate()?;
        Ok(r)
    }

    fn to_line(&self) -> String {
        serde_json::to_string(self).expect("plain strings serialize")
    }
}

impl Record for ImageCaptionRecord {
    const KIND: CorpusKind = CorpusKind::ImageCaptions;

    fn parse_line(line: &str, dir: &Path) -> Result<Self, String> {
        let l: ImageCaptionLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let path = dir.join(&l.image_ref);
        let image = crate::numcore::read_tensor_file(&path).map_err(|e| format!("image_ref: {e}"))?;
        let r = ImageCaptionRecord {
            caption: l.caption,
            image_ref: l.image_ref,
            image,
        };
        r.validate()?;
        Ok(r)
    }

    fn to_line(&self) -> String {
        serde_json::to_string(&ImageCaptionLine {
            caption: self.caption.clone(),
            image_ref: self.image_ref.clone(),
        })
        .expect("plain strings serialize")
    }
}

pub(crate) fn parse_error(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}
