//! Bidirectional InfoNCE, the hard-negative variant, and the effect of the
//! temperature on both.

use duocontrast::losses::{nce_bidirectional, nce_hard_negatives, EmbeddingBatch, Temperature, TripletBatch};
use duocontrast::numcore::{randn_init, Rng, Tensor};

fn main() -> duocontrast::Result<()> {
    let mut rng = Rng::new(3);
    let (k, d) = (4, 8);
    let q = randn_init(&mut rng, &[k, d], 1.0)?;
    let noise = randn_init(&mut rng, &[k, d], 0.3)?;
    let p = Tensor::new(
        vec![k, d],
        q.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect(),
    )?;
    let negatives = randn_init(&mut rng, &[k, 7, d], 1.0)?;

    let (qb, pb) = (EmbeddingBatch::new(q.clone())?, EmbeddingBatch::new(p.clone())?);
    let triplets = TripletBatch::new(q, p, negatives)?;
    for tau in [0.05, 0.2, 1.0] {
        let t = Temperature::fixed(tau)?;
        println!(
            "tau {tau:>4}: in-batch {:.4}  with hard negatives {:.4}",
            nce_bidirectional(&qb, &pb, &t)?,
            nce_hard_negatives(&triplets, &t)?
        );
    }
    let img = Temperature::image();
    println!("trainable image temperature starts at {:.3}", img.tau());
    Ok(())
}
