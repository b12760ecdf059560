use std::path::Path;

use super::records::{parse_error, CorpusKind, ImageCaptionRecord, PairRecord, Record, TripletRecord};
use crate::error::{Error, Result};
use crate::numcore::{write_tensor_file, Rng};

/// An ordered, validated list of records plus the seed of its epoch shuffles.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusHandle<R> {
    records: Vec<R>,
    epoch_seed: u64,
}

pub type PairCorpus = CorpusHandle<PairRecord>;
pub type ImageCaptionCorpus = CorpusHandle<ImageCaptionRecord>;
pub type TripletCorpus = CorpusHandle<TripletRecord>;

impl<R: Record> CorpusHandle<R> {
    pub fn new(records: Vec<R>, epoch_seed: u64) -> Self {
        Self { records, epoch_seed }
    }

    pub fn kind(&self) -> CorpusKind {
        R::KIND
    }

    pub fn records(&self) -> &[R] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn epoch_seed(&self) -> u64 {
        self.epoch_seed
    }

    pub fn with_epoch_seed(mut self, seed: u64) -> Self {
        self.epoch_seed = seed;
        self
    }

    /// Reads a line-delimited corpus. Blank lines are skipped; every other
    /// line must hold one valid record.
    pub fn parse(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(R::parse_line(line, dir).map_err(|msg| parse_error(path, i + 1, msg))?);
        }
        Ok(Self::new(records, 0))
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.serialize()).map_err(|e| Error::io(path, e))
    }

    /// Record positions for batch `step`.
    ///
    /// Positions `step·b .. step·b + b` of an endless stream are mapped to
    /// `(epoch, offset)`; each epoch visits the records in its own shuffled
    /// order, derived from `(epoch_seed, epoch)`.
    pub fn batch_indices(&self, batch_size: usize, step: usize) -> Result<Vec<usize>> {
        let n = self.records.len();
        if batch_size == 0 || batch_size > n {
            return Err(Error::invalid(
                "batch_size",
                format!("{batch_size} does not fit a corpus of {n} records"),
            ));
        }
        let start = step * batch_size;
        let mut out = Vec::with_capacity(batch_size);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for pos in start..start + batch_size {
            let epoch = pos / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                cached = Some((epoch, self.epoch_order(epoch)));
            }
            out.push(cached.as_ref().unwrap().1[pos % n]);
        }
        Ok(out)
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        let mut rng = Rng::new(self.epoch_seed ^ (epoch as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
        rng.shuffle(&mut order);
        order
    }

    /// The records of batch `step`.
    pub fn next_batch(&self, batch_size: usize, step: usize) -> Result<Vec<&R>> {
        Ok(self
            .batch_indices(batch_size, step)?
            .into_iter()
            .map(|i| &self.records[i])
            .collect())
    }
}

impl ImageCaptionCorpus {
    /// Writes the corpus file and every referenced image below its directory.
    pub fn write_with_images(&self, path: &Path) -> Result<()> {
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        for r in &self.records {
            let img = dir.join(&r.image_ref);
            if let Some(parent) = img.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            write_tensor_file(&img, &r.image)?;
        }
        self.write(path)
    }
}

pub fn parse_pair_corpus(path: &Path) -> Result<PairCorpus> {
    CorpusHandle::parse(path)
}

pub fn parse_triplet_corpus(path: &Path) -> Result<TripletCorpus> {
    CorpusHandle::parse(path)
}

pub fn parse_image_corpus(path: &Path) -> Result<ImageCaptionCorpus> {
    CorpusHandle::parse(path)
}
