//! Contrastive objectives: bidirectional InfoNCE over in-batch candidates,
//! the hard-negative variant used with text triplets, and the per-stage
//! joint losses that add a text term and an image–caption term.
//!
//! All losses work on cosine similarities (rows are L2-normalized first),
//! divide by a temperature, and evaluate `−ln softmax` through log-sum-exp.
//! The batch expectation is the arithmetic mean over rows.

use std::fmt;

use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor, Var};

/// Hard negatives per triplet record.
pub const NEGATIVES_PER_QUERY: usize = 7;
/// Fixed temperature of the text–text objectives.
pub const TEXT_TEMPERATURE: f64 = 0.05;
/// Starting temperature of the trainable image–text objective.
pub const INITIAL_IMAGE_TEMPERATURE: f64 = 0.07;
/// Upper bound on `1/τ` for a trainable temperature.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// `k × d` encoder outputs for one side of a pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    vectors: Tensor,
}

impl EmbeddingBatch {
    pub fn new(vectors: Tensor) -> Result<Self> {
        match vectors.shape() {
            [k, d] if *k >= 1 && *d >= 1 => Ok(Self { vectors }),
            s => Err(Error::shape(
                "EmbeddingBatch",
                format!("expected [k, d] with k ≥ 1, got {s:?}"),
            )),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn into_tensor(self) -> Tensor {
        self.vectors
    }

    pub fn k(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

/// Queries, positives and seven hard negatives per query.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletBatch {
    pub queries: Tensor,
    pub positives: Tensor,
    /// `[k, 7, d]`; entry `(i, j)` is the `j`-th negative of query `i`.
    pub negatives: Tensor,
}

impl TripletBatch {
    pub fn new(queries: Tensor, positives: Tensor, negatives: Tensor) -> Result<Self> {
        let (k, d) = match queries.shape() {
            [k, d] => (*k, *d),
            s => return Err(Error::shape("TripletBatch", format!("queries have shape {s:?}"))),
        };
        if positives.shape() != [k, d] {
            return Err(Error::shape(
                "TripletBatch",
                format!("positives {:?} vs queries [{k}, {d}]", positives.shape()),
            ));
        }
        match negatives.shape() {
            [nk, n, nd] if *nk == k && *nd == d && *n == NEGATIVES_PER_QUERY => {}
            [_, n, _] if *n != NEGATIVES_PER_QUERY => {
                return Err(Error::invalid(
                    "negatives",
                    format!("expected {NEGATIVES_PER_QUERY} negatives per query, got {n}"),
                ))
            }
            s => return Err(Error::shape("TripletBatch", format!("negatives have shape {s:?}"))),
        }
        Ok(Self {
            queries,
            positives,
            negatives,
        })
    }

    pub fn k(&self) -> usize {
        self.queries.shape()[0]
    }

    /// Negatives as a `[(k·7) × d]` matrix.
    pub fn flat_negatives(&self) -> Tensor {
        let d = self.queries.shape()[1];
        self.negatives
            .clone()
            .reshape(vec![self.k() * NEGATIVES_PER_QUERY, d])
            .expect("validated at construction")
    }
}

/// Softmax temperature, either constant or learned.
///
/// A trainable temperature is stored as `s` with `1/τ = exp(s)`; `s` is
/// capped at `ln 100` so `1/τ` never exceeds [`MAX_LOGIT_SCALE`].
#[derive(Clone, Debug, PartialEq)]
pub enum Temperature {
    Fixed(f64),
    Trainable { logit_scale: Tensor },
}

impl Temperature {
    pub fn fixed(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::invalid("tau", format!("must be positive and finite, got {tau}")));
        }
        Ok(Temperature::Fixed(tau))
    }

    /// The text-side temperature, τ = 0.05.
    pub fn text() -> Self {
        Temperature::Fixed(TEXT_TEMPERATURE)
    }

    pub fn trainable(initial_tau: f64) -> Result<Self> {
        Self::fixed(initial_tau)?;
        let s = (1.0 / initial_tau).ln().min(MAX_LOGIT_SCALE.ln());
        Ok(Temperature::Trainable {
            logit_scale: Tensor::scalar(s).with_requires_grad(true),
        })
    }

    /// Trainable temperature starting at τ = 0.07.
    pub fn image() -> Self {
        Self::trainable(INITIAL_IMAGE_TEMPERATURE).expect("constant is valid")
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Temperature::Trainable { .. })
    }

    /// Current `1/τ`.
    pub fn inverse(&self) -> f64 {
        match self {
            Temperature::Fixed(t) => 1.0 / t,
            Temperature::Trainable { logit_scale } => logit_scale.data()[0].min(MAX_LOGIT_SCALE.ln()).exp(),
        }
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.inverse()
    }

    pub fn logit_scale_mut(&mut self) -> Option<&mut Tensor> {
        match self {
            Temperature::Fixed(_) => None,
            Temperature::Trainable { logit_scale } => Some(logit_scale),
        }
    }

    /// Restores the `1/τ ≤ 100` invariant after a parameter update.
    pub fn clamp(&mut self) {
        if let Some(s) = self.logit_scale_mut() {
            let cap = MAX_LOGIT_SCALE.ln();
            s.data_mut().iter_mut().for_each(|v| *v = v.min(cap));
        }
    }

    /// Puts the temperature on the tape; trainable ones become leaves.
    pub fn bind(&self, g: &mut Graph) -> TempVar {
        match self {
            Temperature::Fixed(t) => TempVar::Fixed(*t),
            Temperature::Trainable { logit_scale } => TempVar::Trainable(g.param(logit_scale)),
        }
    }

    pub fn bind_frozen(&self) -> TempVar {
        TempVar::Fixed(self.tau())
    }
}

/// A [`Temperature`] bound to a [`Graph`].
#[derive(Clone, Copy, Debug)]
pub enum TempVar {
    Fixed(f64),
    Trainable(Var),
}

impl TempVar {
    /// `logits / τ`.
    pub fn apply(self, g: &mut Graph, logits: Var) -> Result<Var> {
        match self {
            TempVar::Fixed(t) => g.scale(logits, 1.0 / t),
            TempVar::Trainable(s) => g.scale_by_exp(logits, s, MAX_LOGIT_SCALE.ln()),
        }
    }
}

/// Training stage, which selects the joint loss combination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    One = 1,
    Two = 2,
    Three = 3,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    pub fn number(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Stage {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            other => Err(Error::invalid("stage", format!("expected 1, 2 or 3, got {other}"))),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

// ---- tape-level losses -------------------------------------------------

/// `S[i][j] = cos(a_i, b_j)`.
pub fn cosine_matrix_on(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let an = g.l2_normalize_rows(a)?;
    let bn = g.l2_normalize_rows(b)?;
    g.matmul_nt(an, bn)
}

/// Mean over rows `r` of `lse(S[r]/τ) − S[r][r]/τ` for `S: [k × m]`, `m ≥ k`.
fn info_nce_rows(g: &mut Graph, sims: Var, temp: TempVar) -> Result<Var> {
    let logits = temp.apply(g, sims)?;
    let lse = g.log_sum_exp_rows(logits)?;
    let target = g.diagonal(logits)?;
    let per_row = g.sub(lse, target)?;
    g.mean(per_row)
}

/// One direction of InfoNCE on a square similarity matrix.
pub fn nce_directional_on(g: &mut Graph, sims: Var, temp: TempVar) -> Result<Var> {
    match g.value(sims).shape() {
        [r, c] if r == c => info_nce_rows(g, sims, temp),
        s => Err(Error::shape(
            "nce_directional",
            format!("similarity matrix must be square, got {s:?}"),
        )),
    }
}

/// InfoNCE summed over both directions of the pairing `(q, p)`.
pub fn nce_bidirectional_on(g: &mut Graph, q: Var, p: Var, temp: TempVar) -> Result<Var> {
    let (qs, ps) = (g.value(q).shape().to_vec(), g.value(p).shape().to_vec());
    if qs != ps {
        return Err(Error::shape(
            "nce_bidirectional",
            format!("queries {qs:?} vs targets {ps:?}"),
        ));
    }
    let forward_sims = cosine_matrix_on(g, q, p)?;
    let forward = nce_directional_on(g, forward_sims, temp)?;
    let backward_sims = g.transpose(forward_sims)?;
    let backward = nce_directional_on(g, backward_sims, temp)?;
    g.add(forward, backward)
}

/// Hard-negative InfoNCE.
///
/// The query→passage term scores each query against every positive in the
/// batch and every negative of every row. The passage→query term is the
/// plain in-batch loss with no extra negatives. `negatives` is
/// `[(k·7) × d]` with row `i·7 + j` holding negative `j` of query `i`.
pub fn nce_hard_negatives_on(g: &mut Graph, q: Var, p: Var, negatives: Var, temp: TempVar) -> Result<Var> {
    let (qs, ps, ns) = (
        g.value(q).shape().to_vec(),
        g.value(p).shape().to_vec(),
        g.value(negatives).shape().to_vec(),
    );
    if qs != ps || ns.len() != 2 || ns[1] != qs[1] {
        return Err(Error::shape(
            "nce_hard_negatives",
            format!("q {qs:?}, p {ps:?}, negatives {ns:?}"),
        ));
    }
    if ns[0] != qs[0] * NEGATIVES_PER_QUERY {
        return Err(Error::invalid(
            "negatives",
            format!(
                "expected {} negative rows for {} queries, got {}",
                qs[0] * NEGATIVES_PER_QUERY,
                qs[0],
                ns[0]
            ),
        ));
    }
    let candidates = g.concat_rows(p, negatives)?;
    let forward_sims = cosine_matrix_on(g, q, candidates)?;
    let forward = info_nce_rows(g, forward_sims, temp)?;
    let backward_sims = cosine_matrix_on(g, p, q)?;
    let backward = info_nce_rows(g, backward_sims, temp)?;
    g.add(forward, backward)
}

/// Text-side inputs to a stage loss, already on the tape.
#[derive(Clone, Copy, Debug)]
pub enum TextSideVars {
    Pairs {
        queries: Var,
        positives: Var,
    },
    Triplets {
        queries: Var,
        positives: Var,
        negatives: Var,
    },
}

/// Joint stage objective: stages 1 and 2 add in-batch InfoNCE on text pairs
/// and on caption–image pairs; stage 3 swaps the text term for the
/// hard-negative loss over triplets.
pub fn stage_joint_loss_on(
    g: &mut Graph,
    stage: Stage,
    text: TextSideVars,
    captions: Var,
    images: Var,
    tau_text: TempVar,
    tau_img: TempVar,
) -> Result<Var> {
    let text_loss = match (stage, text) {
        (Stage::One | Stage::Two, TextSideVars::Pairs { queries, positives }) => {
            nce_bidirectional_on(g, queries, positives, tau_text)?
        }
        (
            Stage::Three,
            TextSideVars::Triplets {
                queries,
                positives,
                negatives,
            },
        ) => nce_hard_negatives_on(g, queries, positives, negatives, tau_text)?,
        (Stage::Three, _) => {
            return Err(Error::invalid("text_batch", "stage 3 requires a triplet batch"));
        }
        (_, _) => {
            return Err(Error::invalid(
                "text_batch",
                format!("stage {stage} trains on text pairs, not triplets"),
            ));
        }
    };
    let image_loss = nce_bidirectional_on(g, captions, images, tau_img)?;
    g.add(text_loss, image_loss)
}

// ---- eager wrappers ----------------------------------------------------

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Eager cosine similarity matrix.
pub fn cosine_matrix(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<Tensor> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "cosine_matrix",
            format!("dims {} and {}", a.dim(), b.dim()),
        ));
    }
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.vectors.clone()), g.constant(b.vectors.clone()));
    let s = cosine_matrix_on(&mut g, va, vb)?;
    Ok(g.value(s).clone())
}

/// Eager one-direction InfoNCE over a precomputed similarity matrix.
pub fn nce_directional(sims: &Tensor, temp: &Temperature) -> Result<f64> {
    let mut g = Graph::new();
    let s = g.constant(sims.clone());
    let out = nce_directional_on(&mut g, s, temp.bind_frozen())?;
    Ok(scalar(&g, out))
}

pub fn nce_bidirectional(q: &EmbeddingBatch, p: &EmbeddingBatch, temp: &Temperature) -> Result<f64> {
    if q.k() != p.k() {
        return Err(Error::shape(
            "nce_bidirectional",
            format!("batch sizes {} and {}", q.k(), p.k()),
        ));
    }
    let mut g = Graph::new();
    let (vq, vp) = (g.constant(q.vectors.clone()), g.constant(p.vectors.clone()));
    let out = nce_bidirectional_on(&mut g, vq, vp, temp.bind_frozen())?;
    Ok(scalar(&g, out))
}

pub fn nce_hard_negatives(batch: &TripletBatch, temp: &Temperature) -> Result<f64> {
    let mut g = Graph::new();
    let q = g.constant(batch.queries.clone());
    let p = g.constant(batch.positives.clone());
    let n = g.constant(batch.flat_negatives());
    let out = nce_hard_negatives_on(&mut g, q, p, n, temp.bind_frozen())?;
    Ok(scalar(&g, out))
}

/// Text-side embeddings for an eager stage loss.
#[derive(Clone, Debug)]
pub enum TextSide {
    Pairs(EmbeddingBatch, EmbeddingBatch),
    Triplets(TripletBatch),
}

pub fn stage_joint_loss(
    stage: Stage,
    text: &TextSide,
    captions: &EmbeddingBatch,
    images: &EmbeddingBatch,
    tau_text: &Temperature,
    tau_img: &Temperature,
) -> Result<f64> {
    let mut g = Graph::new();
    let text_vars = match text {
        TextSide::Pairs(q, p) => TextSideVars::Pairs {
            queries: g.constant(q.vectors.clone()),
            positives: g.constant(p.vectors.clone()),
        },
        TextSide::Triplets(t) => TextSideVars::Triplets {
            queries: g.constant(t.queries.clone()),
            positives: g.constant(t.positives.clone()),
            negatives: g.constant(t.flat_negatives()),
        },
    };
    let c = g.constant(captions.vectors.clone());
    let i = g.constant(images.vectors.clone());
    let out = stage_joint_loss_on(
        &mut g,
        stage,
        text_vars,
        c,
        i,
        tau_text.bind_frozen(),
        tau_img.bind_frozen(),
    )?;
    Ok(scalar(&g, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check_multi, randn_init, Rng};

    fn batch(rows: &[&[f64]]) -> EmbeddingBatch {
        EmbeddingBatch::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn cosine_examples() {
        let eye = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let swap = batch(&[&[0.0, 1.0], &[1.0, 0.0]]);
        assert_eq!(cosine_matrix(&eye, &eye).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(cosine_matrix(&eye, &swap).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        let zero = batch(&[&[0.0, 0.0], &[0.0, 1.0]]);
        assert!(cosine_matrix(&zero, &eye).is_err());
    }

    #[test]
    fn directional_closed_forms() {
        let t = |v: &[f64]| Tensor::new(vec![2, 2], v.to_vec()).unwrap();
        let single = Tensor::new(vec![1, 1], vec![0.3]).unwrap();
        assert_eq!(nce_directional(&single, &Temperature::text()).unwrap(), 0.0);
        // ln(1 + e^-20)
        let expected = (-20f64).exp().ln_1p();
        let got = nce_directional(&t(&[1.0, 0.0, 0.0, 1.0]), &Temperature::text()).unwrap();
        assert!(close(got, expected, 1e-6), "{got} vs {expected}");
        assert!(close(got, 2.0612e-9, 1e-4));
        let uniform = nce_directional(&t(&[0.0; 4]), &Temperature::fixed(1.0).unwrap()).unwrap();
        assert!(close(uniform, std::f64::consts::LN_2, 1e-12));
        let rect = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(nce_directional(&rect, &Temperature::text()).is_err());
    }

    #[test]
    fn bidirectional_examples() {
        let eye = batch(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let v = nce_bidirectional(&eye, &eye, &Temperature::text()).unwrap();
        assert!(close(v, 2.0 * (-20f64).exp().ln_1p(), 1e-6));
        let a = batch(&[&[0.3, -1.0]]);
        let b = batch(&[&[2.0, 5.0]]);
        assert_eq!(nce_bidirectional(&a, &b, &Temperature::text()).unwrap(), 0.0);
        let three = batch(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]);
        assert!(nce_bidirectional(&eye, &three, &Temperature::text()).is_err());
    }

    fn unit(d: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn hard_negative_closed_forms() {
        // Seven negatives orthogonal to q: −ln(e / (e + 7)).
        let q = Tensor::from_rows(&[unit(8, 0)]).unwrap();
        let negs = Tensor::new(vec![1, 7, 8], (1..8).flat_map(|i| unit(8, i)).collect()).unwrap();
        let t = TripletBatch::new(q.clone(), q.clone(), negs).unwrap();
        let v = nce_hard_negatives(&t, &Temperature::fixed(1.0).unwrap()).unwrap();
        let e = std::f64::consts::E;
        assert!(close(v, -(e / (e + 7.0)).ln(), 1e-12));
        assert!(close(v, 1.2740, 1e-4));

        let same = Tensor::new(vec![1, 7, 8], unit(8, 0).repeat(7)).unwrap();
        let t = TripletBatch::new(q.clone(), q.clone(), same).unwrap();
        let v = nce_hard_negatives(&t, &Temperature::fixed(1.0).unwrap()).unwrap();
        assert!(close(v, 8f64.ln(), 1e-12));
    }

    #[test]
    fn wrong_negative_count() {
        let q = Tensor::from_rows(&[unit(4, 0)]).unwrap();
        let six = Tensor::new(vec![1, 6, 4], unit(4, 1).repeat(6)).unwrap();
        let err = TripletBatch::new(q.clone(), q, six).unwrap_err();
        assert!(err.to_string().contains("expected 7 negatives"), "{err}");
    }

    #[test]
    fn stage_three_needs_triplets() {
        let e = batch(&[&[1.0, 0.0]]);
        let pairs = TextSide::Pairs(e.clone(), e.clone());
        let (tt, ti) = (Temperature::text(), Temperature::image());
        assert_eq!(stage_joint_loss(Stage::One, &pairs, &e, &e, &tt, &ti).unwrap(), 0.0);
        assert!(stage_joint_loss(Stage::Three, &pairs, &e, &e, &tt, &ti).is_err());
        assert!(Stage::try_from(4).is_err());
    }

    #[test]
    fn trainable_temperature_is_capped() {
        let mut t = Temperature::image();
        assert!(close(t.tau(), 0.07, 1e-12));
        t.logit_scale_mut().unwrap().data_mut()[0] = 10.0;
        assert!(close(t.inverse(), 100.0, 1e-12));
        t.clamp();
        assert!(close(t.logit_scale_mut().unwrap().data()[0], 100f64.ln(), 1e-15));
        assert!(Temperature::fixed(0.0).is_err());
    }

    #[test]
    fn trainable_temperature_gradient() {
        let mut rng = Rng::new(21);
        let q = randn_init(&mut rng, &[4, 8], 1.0).unwrap();
        let p = randn_init(&mut rng, &[4, 8], 1.0).unwrap();
        let err = grad_check_multi(
            |g, v| nce_bidirectional_on(g, v[0], v[1], TempVar::Trainable(v[2])),
            &[q, p, Tensor::scalar((1.0f64 / 0.07).ln())],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
