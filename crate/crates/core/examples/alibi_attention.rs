//! Per-head ALiBi slopes and a masked self-attention forward pass.

use duocontrast::encoders::{alibi_slopes, attention_forward};
use duocontrast::numcore::{randn_init, Rng};

fn main() -> duocontrast::Result<()> {
    for heads in [1, 2, 4, 8] {
        println!("{heads} heads: slopes {:?}", alibi_slopes(heads)?);
    }

    let (batch, len, d, heads) = (2, 5, 8, 2);
    let mut rng = Rng::new(1);
    let x = randn_init(&mut rng, &[batch, len, d], 1.0)?;
    let w_qkv = randn_init(&mut rng, &[d, 3 * d], 0.3)?;
    let w_out = randn_init(&mut rng, &[d, d], 0.3)?;
    // The second sequence has two padding positions.
    let mask = [true, true, true, true, true, true, true, true, false, false];
    let y = attention_forward(&x, &w_qkv, &w_out, heads, Some(&mask), true)?;
    println!("output shape {:?}", y.shape());
    println!("first row {:?}", &y.data()[..d]);
    Ok(())
}
