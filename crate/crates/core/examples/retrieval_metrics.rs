//! recall@k, nDCG@10 and Spearman correlation on hand-made inputs.

use duocontrast::eval::{ndcg_from_scores, recall_from_scores, spearman, Grades};
use duocontrast::numcore::Tensor;

fn main() -> duocontrast::Result<()> {
    // Two queries over a corpus of four items.
    let scores = Tensor::new(vec![2, 4], vec![0.9, 0.1, 0.5, 0.3, 0.2, 0.8, 0.7, 0.1])?;
    let relevance = vec![Grades::from([(2, 1)]), Grades::from([(1, 2), (3, 1)])];
    for k in [1, 2, 4] {
        println!("recall@{k} = {:.3}", recall_from_scores(&scores, &relevance, k)?);
    }
    println!("nDCG@10 = {:.5}", ndcg_from_scores(&scores, &relevance, 10)?);
    println!("spearman = {:.3}", spearman(&[1., 2., 3., 4.], &[1., 3., 2., 4.])?);
    Ok(())
}
