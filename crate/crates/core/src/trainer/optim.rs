use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Learning rate at `step` of a `total`-step run.
///
/// Linear ramp from 0 over `warmup` steps, then half-cosine from `peak`
/// down to 0 at `step == total`.
pub fn cosine_lr(step: usize, total: usize, peak: f64, warmup: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("total", "schedule needs at least one step"));
    }
    if step > total {
        return Err(Error::invalid(
            "step",
            format!("{step} is past the end of a {total}-step schedule"),
        ));
    }
    if warmup >= total {
        return Err(Error::invalid(
            "warmup",
            format!("{warmup} must be below total {total}"),
        ));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied since the moments were last reset.
    pub t: u64,
}

impl AdamMoments {
    pub fn zeros_like<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self { v: m.clone(), m, t: 0 }
    }

    pub fn reset(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        self.t = 0;
    }

    /// One AdamW update with decoupled weight decay:
    /// `w ← w − lr·(m̂/(√v̂ + ε) + λ·w)`.
    ///
    /// `decay[i] == false` exempts parameter `i` from weight decay. Every
    /// gradient is checked before anything is written, so an error leaves
    /// parameters and moments untouched.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        decay: &[bool],
        lr: f64,
        hp: &AdamHyper,
    ) -> Result<()> {
        let n = self.m.len();
        if params.len() != n || grads.len() != n || decay.len() != n {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "{n} moments, {} params, {} grads, {} decay flags",
                    params.len(),
                    grads.len(),
                    decay.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adamw_step",
                    format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    op: "adamw_step gradient",
                });
            }
        }
        self.t += 1;
        let bc1 = 1.0 - hp.beta1.powi(self.t as i32);
        let bc2 = 1.0 - hp.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let lambda = if decay[i] { hp.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[j];
                m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
                v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
                let (m_hat, v_hat) = (m[j] / bc1, v[j] / bc2);
                *w -= lr * (m_hat / (v_hat.sqrt() + hp.eps) + lambda * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const HP: AdamHyper = AdamHyper {
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-6,
        weight_decay: 0.025,
    };

    #[test]
    fn schedule_points() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 0).unwrap(), 1e-3);
        assert!(cosine_lr(100, 100, 1e-3, 0).unwrap().abs() <= 1e-15);
        assert!((cosine_lr(50, 100, 1e-3, 0).unwrap() - 5e-4).abs() < 1e-15);
        assert_eq!(cosine_lr(5, 100, 1.0, 10).unwrap(), 0.5);
        assert_eq!(cosine_lr(10, 100, 1.0, 10).unwrap(), 1.0);
        assert!(cosine_lr(0, 0, 1.0, 0).is_err());
        assert!(cosine_lr(101, 100, 1.0, 0).is_err());
        assert!(cosine_lr(0, 10, 1.0, 10).is_err());
    }

    #[test]
    fn zero_gradient_is_pure_decay() {
        let mut w = Tensor::scalar(1.0);
        let mut mom = AdamMoments::zeros_like([&w]);
        mom.step(&mut [&mut w], &[Tensor::scalar(0.0)], &[true], 0.1, &HP)
            .unwrap();
        assert!((w.data()[0] - 0.9975).abs() < 1e-15);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let hp = AdamHyper {
            weight_decay: 0.0,
            ..HP
        };
        let mut w = Tensor::scalar(0.0);
        let mut mom = AdamMoments::zeros_like([&w]);
        mom.step(&mut [&mut w], &[Tensor::scalar(1.0)], &[true], 1e-3, &hp)
            .unwrap();
        // m̂ = v̂ = 1 after bias correction.
        let expected = -1e-3 / (1.0 + 1e-6);
        assert_eq!(w.data()[0], expected);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(2.0);
        let mut mom = AdamMoments::zeros_like([&a, &b]);
        let before = mom.clone();
        let grads = [Tensor::scalar(1.0), Tensor::scalar(f64::NAN)];
        assert!(mom
            .step(&mut [&mut a, &mut b], &grads, &[true, true], 0.1, &HP)
            .is_err());
        assert_eq!((a.data()[0], b.data()[0]), (1.0, 2.0));
        assert_eq!(mom, before);
    }
}
