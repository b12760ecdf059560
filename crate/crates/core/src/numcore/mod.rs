//! Dense `f64` tensors, a reverse-mode tape, and the finite-difference oracle
//! used to verify it.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod rng;
mod tensor;
pub mod tensorfile;

pub use gradcheck::{grad_check, grad_check_multi, DEFAULT_STEP};
pub use graph::{log_sum_exp, Gradients, Graph, PatchGeometry, Var};
pub use rng::{randn_init, Rng};
pub use tensor::Tensor;
pub use tensorfile::{read_tensor_file, tensor_from_bytes, tensor_to_bytes, write_tensor_file};

use crate::error::Result;

/// Eager matrix product.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    eager2(a, b, Graph::matmul)
}

/// Eager row normalization.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    eager1(x, Graph::l2_normalize_rows)
}

/// Eager per-row log-sum-exp; returns a `[rows]` tensor.
pub fn log_sum_exp_rows(x: &Tensor) -> Result<Tensor> {
    eager1(x, Graph::log_sum_exp_rows)
}

fn eager1(x: &Tensor, op: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = op(&mut g, v)?;
    Ok(g.value(out).clone())
}

fn eager2(a: &Tensor, b: &Tensor, op: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = op(&mut g, va, vb)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn rand(rng: &mut Rng, shape: &[usize]) -> Tensor {
        randn_init(rng, shape, 1.0).unwrap()
    }

    #[test]
    fn matmul_identity_and_orthogonal() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let eye = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let z = matmul(&t(&[&[1.0, 0.0]]), &t(&[&[0.0], &[5.0]])).unwrap();
        assert_eq!(z.data(), &[0.0]);
        assert!(matmul(&a, &t(&[&[1.0, 2.0, 3.0]])).is_err());
    }

    #[test]
    fn normalize_examples() {
        let y = l2_normalize_rows(&t(&[&[3.0, 4.0], &[0.6, 0.8]])).unwrap();
        assert!((y.data()[0] - 0.6).abs() < 1e-15 && (y.data()[1] - 0.8).abs() < 1e-15);
        assert!((y.data()[2] - 0.6).abs() < 1e-15 && (y.data()[3] - 0.8).abs() < 1e-15);
        assert!(matches!(
            l2_normalize_rows(&t(&[&[1.0, 1.0], &[0.0, 0.0]])),
            Err(crate::Error::DegenerateRow { row: 1, .. })
        ));
    }

    #[test]
    fn lse_examples() {
        let out = log_sum_exp_rows(&t(&[&[0.0, 0.0], &[1000.0, 1000.0]])).unwrap();
        assert!((out.data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((out.data()[1] - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
        assert_eq!(log_sum_exp_rows(&t(&[&[5.0]])).unwrap().data(), &[5.0]);
    }

    #[test]
    fn forward_ops_reject_non_finite() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1e300, 1e300]]));
        let b = g.constant(t(&[&[1e300], &[1e300]]));
        assert!(matches!(g.matmul(a, b), Err(crate::Error::NonFinite { .. })));
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        let a = rand(&mut rng, &[3, 4]);
        let b = rand(&mut rng, &[4, 2]);
        let err = grad_check_multi(
            |g, v| {
                let c = g.matmul(v[0], v[1])?;
                let sq = g.mul(c, c)?;
                g.sum(sq)
            },
            &[a.clone(), b],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "matmul {err}");

        let c = rand(&mut rng, &[2, 4]);
        let err = grad_check_multi(
            |g, v| {
                let s = g.matmul_nt(v[0], v[1])?;
                let s = g.transpose(s)?;
                let l = g.log_sum_exp_rows(s)?;
                g.mean(l)
            },
            &[a.clone(), c],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "matmul_nt/transpose/lse {err}");

        let x = rand(&mut rng, &[5, 8]);
        let w = rand(&mut rng, &[5, 8]);
        let err = grad_check_multi(
            |g, v| {
                let y = g.l2_normalize_rows(v[0])?;
                let p = g.mul(y, v[1])?;
                g.sum(p)
            },
            &[x, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "l2 normalize {err}");
    }

    #[test]
    fn composite_ops_gradients() {
        let mut rng = Rng::new(5);
        let table = rand(&mut rng, &[6, 3]);
        let weights = rand(&mut rng, &[2, 3]);
        let mask = [true, true, false, true, false, false];
        let err = grad_check_multi(
            |g, v| {
                let e = g.gather_rows(v[0], &[0, 5, 5, 2, 1, 3])?;
                let p = g.masked_mean_pool(e, &mask, 3)?;
                let m = g.mul(p, v[1])?;
                let c = g.concat_rows(m, v[1])?;
                let sq = g.matmul_nt(c, c)?;
                let d = g.diagonal(sq)?;
                g.sum(d)
            },
            &[table, weights],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "gather/pool/concat/diag {err}");

        let x = rand(&mut rng, &[2, 3]);
        let s = Tensor::scalar(0.3);
        let err = grad_check_multi(
            |g, v| {
                let y = g.scale_by_exp(v[0], v[1], 100f64.ln())?;
                let y = g.scale(y, 0.5)?;
                let l = g.log_sum_exp_rows(y)?;
                g.mean(l)
            },
            &[x, s],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "scale_by_exp {err}");
    }

    #[test]
    fn attention_and_patchify_gradients() {
        let mut rng = Rng::new(9);
        let qkv = rand(&mut rng, &[6, 12]);
        let w = rand(&mut rng, &[6, 4]);
        let mask = [true, true, false, true, true, true];
        let slopes = [0.5, 0.25];
        let err = grad_check_multi(
            |g, v| {
                let o = g.attention(v[0], 2, 3, 2, Some(&mask), Some(&slopes))?;
                let p = g.mul(o, v[1])?;
                g.sum(p)
            },
            &[qkv, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "attention {err}");

        let img = rand(&mut rng, &[2, 1, 4, 4]);
        let w = rand(&mut rng, &[8, 4]);
        let err = grad_check_multi(
            |g, v| {
                let p = g.patchify(v[0], 2)?;
                let m = g.mul(p, v[1])?;
                g.sum(m)
            },
            &[img, w],
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-4, "patchify {err}");
    }

    #[test]
    fn patchify_layout() {
        // 1×1×4×4 image holding 0..16; 2×2 patches in raster order.
        let img = Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let mut g = Graph::new();
        let v = g.constant(img);
        let p = g.patchify(v, 2).unwrap();
        assert_eq!(g.value(p).shape(), &[4, 4]);
        assert_eq!(g.value(p).row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(g.value(p).row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(g.value(p).row(3), &[10.0, 11.0, 14.0, 15.0]);
        assert!(g.patchify(v, 3).is_err());
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap().with_requires_grad(true);
        let mut g = Graph::new();
        let v = g.input(&x);
        let a = g.add(v, v).unwrap();
        let s = g.sum(a).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(v).unwrap(), &[2.0, 2.0]);
        let mut param = x.clone();
        grads.accumulate_into(v, &mut param).unwrap();
        grads.accumulate_into(v, &mut param).unwrap();
        assert_eq!(param.grad().unwrap(), &[4.0, 4.0]);
        param.zero_grad();
        assert!(param.grad().is_none());
    }
}
