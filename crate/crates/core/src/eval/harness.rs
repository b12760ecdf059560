use std::fmt::Write as _;
use std::path::Path;

use super::metrics::{ndcg_from_scores, recall_from_scores, Grades, RetrievalTask, StsTask};
use crate::data::{tokenize_batch, EvalSplit, SHORT_MAX_LEN};
use crate::encoders::{encode_image, encode_text, ImageEncoderParams, TextEncoderParams};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Anything that maps texts and images into a shared embedding space.
pub trait Embedder {
    fn embed_texts(&self, texts: &[&str], max_len: usize) -> Result<Tensor>;
    /// `images` is `[B, C, H, W]`.
    fn embed_images(&self, images: &Tensor) -> Result<Tensor>;
}

/// The trained towers.
#[derive(Clone, Copy, Debug)]
pub struct Towers<'a> {
    pub text: &'a TextEncoderParams,
    pub image: &'a ImageEncoderParams,
}

const CHUNK: usize = 128;

impl Embedder for Towers<'_> {
    fn embed_texts(&self, texts: &[&str], max_len: usize) -> Result<Tensor> {
        let mut parts = Vec::new();
        for chunk in texts.chunks(CHUNK) {
            parts.push(encode_text(&tokenize_batch(chunk, max_len)?, self.text)?);
        }
        concat_rows(parts)
    }

    fn embed_images(&self, images: &Tensor) -> Result<Tensor> {
        let per = images.numel() / images.shape()[0];
        let mut parts = Vec::new();
        for chunk in images.data().chunks(CHUNK * per) {
            let mut shape = images.shape().to_vec();
            shape[0] = chunk.len() / per;
            parts.push(encode_image(&Tensor::new(shape, chunk.to_vec())?, self.image)?);
        }
        concat_rows(parts)
    }
}

fn concat_rows(parts: Vec<Tensor>) -> Result<Tensor> {
    let cols = parts.first().map_or(0, Tensor::cols);
    let rows = parts.iter().map(Tensor::rows).sum();
    Tensor::new(
        vec![rows, cols],
        parts.into_iter().flat_map(Tensor::into_data).collect(),
    )
}

/// Knobs for [`cross_modal_eval`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    /// Evaluate on the first `n` held-out items only.
    pub index_size: Option<usize>,
    pub max_seq_len: usize,
    /// Score the long captions instead of the short ones.
    pub long_captions: bool,
    /// Besides its own passage, each text query counts this many passages
    /// of the nearest other latents as partially relevant (grade 1).
    pub graded_neighbours: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            index_size: None,
            max_seq_len: SHORT_MAX_LEN,
            long_captions: false,
            graded_neighbours: 3,
        }
    }
}

/// `metric.name = value` lines in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub entries: Vec<(String, f64)>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    fn push(&mut self, name: &str, value: f64) {
        self.entries.push((name.to_string(), value));
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, v) in &self.entries {
            writeln!(s, "{name} = {v:.6}").unwrap();
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let err = |msg: String| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err("expected `name = value`".into()))?;
            let v = v.trim().parse::<f64>().map_err(|e| err(e.to_string()))?;
            entries.push((k.trim().to_string(), v));
        }
        Ok(Self { entries })
    }
}

pub const TXT_IMG_R1: &str = "txt_img.recall@1";
pub const TXT_IMG_R5: &str = "txt_img.recall@5";
pub const IMG_TXT_R1: &str = "img_txt.recall@1";
pub const IMG_TXT_R5: &str = "img_txt.recall@5";
pub const TXT_TXT_R1: &str = "txt_txt.recall@1";
pub const TXT_TXT_R5: &str = "txt_txt.recall@5";
pub const TXT_TXT_NDCG10: &str = "txt_txt.ndcg@10";
pub const STS_SPEARMAN: &str = "sts.spearman";

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Graded relevance for text retrieval: the item's own passage grades 2 and
/// the passages of its `neighbours` closest latents grade 1.
pub fn graded_relevance(latents: &Tensor, neighbours: usize) -> Vec<Grades> {
    let n = latents.rows();
    (0..n)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (cosine(latents.row(i), latents.row(j)), j))
                .collect();
            others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut g: Grades = others.iter().take(neighbours).map(|&(_, j)| (j, 1)).collect();
            g.insert(i, 2);
            g
        })
        .collect()
}

/// Every retrieval task the harness scores, built from one set of embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalTasks {
    pub text_to_image: RetrievalTask,
    pub image_to_text: RetrievalTask,
    pub text_to_text: RetrievalTask,
    pub sts: StsTask,
}

pub fn build_tasks(model: &impl Embedder, split: &EvalSplit, opts: &EvalOptions) -> Result<EvalTasks> {
    let n = opts.index_size.map_or(split.len(), |k| k.min(split.len()));
    if n < 3 {
        return Err(Error::invalid("eval split", format!("need at least 3 items, got {n}")));
    }
    if split.captions_short.len() < n || split.captions_long.len() < n || split.latents.rows() < n {
        return Err(Error::Config("eval split files disagree on the number of items".into()));
    }
    let captions = if opts.long_captions {
        &split.captions_long[..n]
    } else {
        &split.captions_short[..n]
    };
    let caption_text: Vec<&str> = captions.iter().map(|r| r.caption.as_str()).collect();
    let images = Tensor::stack(&captions.iter().map(|r| r.image.clone()).collect::<Vec<_>>())?;
    let queries: Vec<&str> = split.pairs[..n].iter().map(|r| r.query.as_str()).collect();
    let passages: Vec<&str> = split.pairs[..n].iter().map(|r| r.positive.as_str()).collect();

    let cap_emb = model.embed_texts(&caption_text, opts.max_seq_len)?;
    let img_emb = model.embed_images(&images)?;
    let q_emb = model.embed_texts(&queries, opts.max_seq_len)?;
    let p_emb = model.embed_texts(&passages, opts.max_seq_len)?;

    let latents = Tensor::new(
        vec![n, split.latents.cols()],
        split.latents.data()[..n * split.latents.cols()].to_vec(),
    )?;
    let d = p_emb.cols();
    let left = Tensor::new(vec![n - 1, d], p_emb.data()[..(n - 1) * d].to_vec())?;
    let right = Tensor::new(vec![n - 1, d], p_emb.data()[d..].to_vec())?;
    let gold = (0..n - 1).map(|i| cosine(latents.row(i), latents.row(i + 1))).collect();

    Ok(EvalTasks {
        text_to_image: RetrievalTask::paired(cap_emb.clone(), img_emb.clone())?,
        image_to_text: RetrievalTask::paired(img_emb, cap_emb)?,
        text_to_text: RetrievalTask::new(q_emb, p_emb, graded_relevance(&latents, opts.graded_neighbours))?,
        sts: StsTask::new(left, right, gold)?,
    })
}

/// Scores the tasks. Recall on the text task counts only the item's own
/// passage as a hit.
pub fn score_tasks(tasks: &EvalTasks) -> Result<MetricsReport> {
    let mut report = MetricsReport::default();
    let ti = tasks.text_to_image.scores()?;
    let it = tasks.image_to_text.scores()?;
    let tt = tasks.text_to_text.scores()?;
    let own: Vec<Grades> = (0..tt.rows()).map(|i| Grades::from([(i, 1)])).collect();
    let k5 = 5.min(ti.cols());
    report.push(TXT_IMG_R1, recall_from_scores(&ti, &tasks.text_to_image.relevance, 1)?);
    report.push(TXT_IMG_R5, recall_from_scores(&ti, &tasks.text_to_image.relevance, k5)?);
    report.push(IMG_TXT_R1, recall_from_scores(&it, &tasks.image_to_text.relevance, 1)?);
    report.push(IMG_TXT_R5, recall_from_scores(&it, &tasks.image_to_text.relevance, k5)?);
    report.push(TXT_TXT_R1, recall_from_scores(&tt, &own, 1)?);
    report.push(TXT_TXT_R5, recall_from_scores(&tt, &own, k5)?);
    report.push(
        TXT_TXT_NDCG10,
        ndcg_from_scores(&tt, &tasks.text_to_text.relevance, 10)?,
    );
    report.push(STS_SPEARMAN, tasks.sts.spearman()?);
    Ok(report)
}

/// Encodes the held-out split with `model` and scores every task.
pub fn cross_modal_eval(model: &impl Embedder, split: &EvalSplit, opts: &EvalOptions) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(Error::invalid("eval split", "is empty"));
    }
    score_tasks(&build_tasks(model, split, opts)?)
}
