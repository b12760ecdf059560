use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::losses::{cosine_matrix, EmbeddingBatch};
use crate::numcore::Tensor;

/// Graded relevance of corpus items for one query; absent items grade 0.
pub type Grades = BTreeMap<usize, u32>;

/// Queries, a corpus, and which corpus items are relevant to each query.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalTask {
    pub query_embeddings: Tensor,
    pub corpus_embeddings: Tensor,
    pub relevance: Vec<Grades>,
}

impl RetrievalTask {
    pub fn new(query_embeddings: Tensor, corpus_embeddings: Tensor, relevance: Vec<Grades>) -> Result<Self> {
        if query_embeddings.rank() != 2 || corpus_embeddings.rank() != 2 {
            return Err(Error::shape("RetrievalTask", "embeddings must be matrices"));
        }
        if query_embeddings.cols() != corpus_embeddings.cols() {
            return Err(Error::shape(
                "RetrievalTask",
                format!(
                    "query dim {} vs corpus dim {}",
                    query_embeddings.cols(),
                    corpus_embeddings.cols()
                ),
            ));
        }
        check_relevance(&relevance, query_embeddings.rows(), corpus_embeddings.rows())?;
        Ok(Self {
            query_embeddings,
            corpus_embeddings,
            relevance,
        })
    }

    /// Query `i` is relevant to corpus item `i` only.
    pub fn paired(query_embeddings: Tensor, corpus_embeddings: Tensor) -> Result<Self> {
        let n = query_embeddings.rows();
        let relevance = (0..n).map(|i| Grades::from([(i, 1)])).collect();
        Self::new(query_embeddings, corpus_embeddings, relevance)
    }

    pub fn num_queries(&self) -> usize {
        self.query_embeddings.rows()
    }

    pub fn corpus_size(&self) -> usize {
        self.corpus_embeddings.rows()
    }

    /// Cosine similarity of every query to every corpus item.
    pub fn scores(&self) -> Result<Tensor> {
        cosine_matrix(
            &EmbeddingBatch::new(self.query_embeddings.clone())?,
            &EmbeddingBatch::new(self.corpus_embeddings.clone())?,
        )
    }
}

fn check_relevance(relevance: &[Grades], queries: usize, corpus: usize) -> Result<()> {
    if relevance.len() != queries {
        return Err(Error::invalid(
            "relevance",
            format!("{} entries for {queries} queries", relevance.len()),
        ));
    }
    for (q, grades) in relevance.iter().enumerate() {
        if let Some((&i, _)) = grades.iter().find(|(&i, _)| i >= corpus) {
            return Err(Error::invalid(
                "relevance",
                format!("query {q} names item {i} of a {corpus}-item corpus"),
            ));
        }
        if grades.values().all(|&g| g == 0) {
            return Err(Error::invalid("relevance", format!("query {q} has no relevant item")));
        }
    }
    Ok(())
}

/// Corpus indices by descending score; equal scores keep ascending index.
pub fn rank_corpus(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn check_scores(scores: &Tensor, relevance: &[Grades]) -> Result<()> {
    if scores.rank() != 2 {
        return Err(Error::shape("retrieval scores", "expected a [queries × corpus] matrix"));
    }
    check_relevance(relevance, scores.rows(), scores.cols())
}

/// Fraction of queries with at least one relevant item among the top `k`.
pub fn recall_from_scores(scores: &Tensor, relevance: &[Grades], k: usize) -> Result<f64> {
    check_scores(scores, relevance)?;
    if k == 0 || k > scores.cols() {
        return Err(Error::invalid(
            "k",
            format!("must be in [1, {}], got {k}", scores.cols()),
        ));
    }
    let mut hits = 0usize;
    for (q, grades) in relevance.iter().enumerate() {
        let top = &rank_corpus(scores.row(q))[..k];
        if top.iter().any(|i| grades.get(i).is_some_and(|&g| g > 0)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / relevance.len() as f64)
}

fn dcg(grades: impl Iterator<Item = u32>) -> f64 {
    grades
        .enumerate()
        .map(|(i, g)| g as f64 / ((i + 2) as f64).log2())
        .sum()
}

/// Mean nDCG@k with linear gain and `log₂(rank + 1)` discount. Lists shorter
/// than `k` are scored over their full length.
pub fn ndcg_from_scores(scores: &Tensor, relevance: &[Grades], k: usize) -> Result<f64> {
    check_scores(scores, relevance)?;
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    let mut total = 0.0;
    for (q, grades) in relevance.iter().enumerate() {
        let ranked = rank_corpus(scores.row(q));
        let gained = dcg(ranked.iter().take(k).map(|i| grades.get(i).copied().unwrap_or(0)));
        let mut ideal: Vec<u32> = grades.values().copied().collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        total += gained / dcg(ideal.into_iter().take(k));
    }
    Ok(total / relevance.len() as f64)
}

pub fn recall_at_k(task: &RetrievalTask, k: usize) -> Result<f64> {
    recall_from_scores(&task.scores()?, &task.relevance, k)
}

pub fn ndcg_at_k(task: &RetrievalTask, k: usize) -> Result<f64> {
    ndcg_from_scores(&task.scores()?, &task.relevance, k)
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let mean_rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = mean_rank;
        }
        start = end;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of the average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 3 {
        return Err(Error::invalid(
            "scores",
            format!(
                "need two equal-length lists of at least 3, got {} and {}",
                x.len(),
                y.len()
            ),
        ));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "spearman" });
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let mean = (x.len() + 1) as f64 / 2.0;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        let (da, db) = (a - mean, b - mean);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::invalid(
            "scores",
            "all values tie, so rank correlation is undefined",
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Embedding pairs with gold similarity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct StsTask {
    pub left: Tensor,
    pub right: Tensor,
    pub gold: Vec<f64>,
}

impl StsTask {
    pub fn new(left: Tensor, right: Tensor, gold: Vec<f64>) -> Result<Self> {
        if left.shape() != right.shape() || left.rank() != 2 || left.rows() != gold.len() {
            return Err(Error::shape(
                "StsTask",
                format!(
                    "{:?} and {:?} with {} gold scores",
                    left.shape(),
                    right.shape(),
                    gold.len()
                ),
            ));
        }
        if gold.len() < 3 {
            return Err(Error::invalid("gold", "need at least 3 pairs"));
        }
        Ok(Self { left, right, gold })
    }

    /// Cosine similarity of each pair.
    pub fn predicted(&self) -> Result<Vec<f64>> {
        let a = crate::numcore::l2_normalize_rows(&self.left)?;
        let b = crate::numcore::l2_normalize_rows(&self.right)?;
        Ok((0..a.rows())
            .map(|i| a.row(i).iter().zip(b.row(i)).map(|(x, y)| x * y).sum())
            .collect())
    }

    pub fn spearman(&self) -> Result<f64> {
        spearman(&self.predicted()?, &self.gold)
    }
}
