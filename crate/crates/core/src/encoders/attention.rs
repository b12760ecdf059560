use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

/// Per-head ALiBi slopes: head `i` (1-based) of `h` gets `2^(−8i/h)`.
pub fn alibi_slopes(heads: usize) -> Result<Vec<f64>> {
    if heads == 0 {
        return Err(Error::invalid("heads", "need at least one head"));
    }
    Ok((1..=heads).map(|i| (-8.0 * i as f64 / heads as f64).exp2()).collect())
}

/// One attention block with a residual connection, on the tape.
///
/// `x` is `[(B·L) × d_m]`; returns `x + attn(x)·W_out` of the same shape.
#[allow(clippy::too_many_arguments)]
pub fn attention_block(
    g: &mut Graph,
    x: Var,
    w_qkv: Var,
    w_out: Var,
    batch: usize,
    len: usize,
    heads: usize,
    mask: Option<&[bool]>,
    alibi: bool,
) -> Result<Var> {
    let slopes = if alibi { Some(alibi_slopes(heads)?) } else { None };
    let qkv = g.matmul(x, w_qkv)?;
    let ctx = g.attention(qkv, batch, len, heads, mask, slopes.as_deref())?;
    let out = g.matmul(ctx, w_out)?;
    g.add(x, out)
}

/// Eager form of [`attention_block`] for a `[B × L × d_m]` tensor.
pub fn attention_forward(
    x: &Tensor,
    w_qkv: &Tensor,
    w_out: &Tensor,
    heads: usize,
    mask: Option<&[bool]>,
    alibi: bool,
) -> Result<Tensor> {
    let [batch, len, d] = *x.shape() else {
        return Err(Error::shape(
            "attention_forward",
            format!("expected [B,L,d], got {:?}", x.shape()),
        ));
    };
    let mut g = Graph::new();
    let xv = g.constant(x.clone().reshape(vec![batch * len, d])?);
    let (q, o) = (g.constant(w_qkv.clone()), g.constant(w_out.clone()));
    let y = attention_block(&mut g, xv, q, o, batch, len, heads, mask, alibi)?;
    g.value(y).clone().reshape(vec![batch, len, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check_multi, randn_init, Rng, DEFAULT_STEP};

    #[test]
    fn slopes_closed_form() {
        assert_eq!(alibi_slopes(4).unwrap(), vec![0.25, 0.0625, 0.015625, 0.00390625]);
        assert_eq!(alibi_slopes(1).unwrap(), vec![2f64.powi(-8)]);
        let s8 = alibi_slopes(8).unwrap();
        assert_eq!(s8[0], 0.5);
        assert_eq!(s8[7], 2f64.powi(-8));
        assert!(s8.windows(2).all(|w| w[0] > w[1]));
        assert!(alibi_slopes(0).is_err());
    }

    fn weights(rng: &mut Rng, d: usize) -> (Tensor, Tensor) {
        (
            randn_init(rng, &[d, 3 * d], 0.3).unwrap(),
            randn_init(rng, &[d, d], 0.3).unwrap(),
        )
    }

    #[test]
    fn singleton_sequence_is_value_projection_plus_residual() {
        let mut rng = Rng::new(3);
        let (wq, wo) = weights(&mut rng, 4);
        let x = randn_init(&mut rng, &[1, 1, 4], 1.0).unwrap();
        let y = attention_forward(&x, &wq, &wo, 2, None, true).unwrap();
        // v = x · W_qkv[:, 8..12]; expected = x + v · W_out
        let xs = x.data();
        let v: Vec<f64> = (0..4)
            .map(|c| (0..4).map(|r| xs[r] * wq.data()[r * 12 + 8 + c]).sum())
            .collect();
        for (c, &xc) in xs.iter().enumerate().take(4) {
            let expect = xc + (0..4).map(|r| v[r] * wo.data()[r * 4 + c]).sum::<f64>();
            assert!((y.data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn trailing_masked_positions_do_not_leak() {
        let mut rng = Rng::new(4);
        let (wq, wo) = weights(&mut rng, 8);
        let long = randn_init(&mut rng, &[1, 5, 8], 1.0).unwrap();
        let short = Tensor::new(vec![1, 3, 8], long.data()[..24].to_vec()).unwrap();
        let a = attention_forward(&long, &wq, &wo, 2, Some(&[true, true, true, false, false]), true).unwrap();
        let b = attention_forward(&short, &wq, &wo, 2, Some(&[true, true, true]), true).unwrap();
        assert_eq!(&a.data()[..24], b.data());
    }

    #[test]
    fn fully_masked_sequence_is_an_error() {
        let mut rng = Rng::new(4);
        let (wq, wo) = weights(&mut rng, 4);
        let x = randn_init(&mut rng, &[2, 2, 4], 1.0).unwrap();
        let err = attention_forward(&x, &wq, &wo, 2, Some(&[true, true, false, false]), false).unwrap_err();
        assert!(matches!(err, Error::EmptyAttentionRow { row: 1 }));
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let mut rng = Rng::new(8);
        let (wq, wo) = weights(&mut rng, 8);
        let x = randn_init(&mut rng, &[6, 8], 1.0).unwrap();
        let probe = randn_init(&mut rng, &[6, 8], 1.0).unwrap();
        let mask = [true, true, true, true, true, false];
        let err = grad_check_multi(
            |g, v| {
                let y = attention_block(g, v[0], v[1], v[2], 2, 3, 4, Some(&mask), true)?;
                let p = g.constant(probe.clone());
                let m = g.mul(y, p)?;
                g.sum(m)
            },
            &[x, wq, wo],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
