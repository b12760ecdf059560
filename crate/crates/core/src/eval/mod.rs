//! Retrieval and similarity metrics, and the held-out evaluation harness.

mod harness;
mod metrics;

pub use harness::{
    build_tasks, cross_modal_eval, graded_relevance, score_tasks, Embedder, EvalOptions, EvalTasks, MetricsReport,
    Towers, IMG_TXT_R1, IMG_TXT_R5, STS_SPEARMAN, TXT_IMG_R1, TXT_IMG_R5, TXT_TXT_NDCG10, TXT_TXT_R1, TXT_TXT_R5,
};
pub use metrics::{
    average_ranks, ndcg_at_k, ndcg_from_scores, rank_corpus, recall_at_k, recall_from_scores, spearman, Grades,
    RetrievalTask, StsTask,
};
