//! Randomized gradient checks and loss invariants, runnable from the CLI.
//!
//! Every check draws its own random instances from a seed, so a report is
//! reproducible.

use std::fmt::Write as _;

use crate::encoders::{alibi_slopes, EncoderConfig, ImageEncoderParams, TextEncoderParams, TokenBatch, PAD};
use crate::error::Result;
use crate::losses::{
    nce_bidirectional, nce_bidirectional_on, nce_hard_negatives, nce_hard_negatives_on, stage_joint_loss_on,
    EmbeddingBatch, Stage, TempVar, Temperature, TextSideVars, TripletBatch, MAX_LOGIT_SCALE, NEGATIVES_PER_QUERY,
};
use crate::numcore::{grad_check_multi, randn_init, Graph, Rng, Tensor, Var};
use crate::trainer::{cosine_lr, AdamHyper, AdamMoments, Checkpoint, TrainState};

/// Largest relative gradient error accepted.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Outcome of one named check over several random instances.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    /// Worst observed deviation.
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub error: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.worst <= self.tolerance
    }

    pub fn line(&self) -> String {
        let verdict = if self.passed() { "PASS" } else { "FAIL" };
        match &self.error {
            Some(e) => format!("{verdict} {}: {e}", self.name),
            None => format!(
                "{verdict} {}: worst {:.3e} (tolerance {:.0e}, {} cases)",
                self.name, self.worst, self.tolerance, self.cases
            ),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelfCheckReport {
    pub checks: Vec<Check>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for c in &self.checks {
            writeln!(s, "{}", c.line()).unwrap();
        }
        let failed = self.checks.iter().filter(|c| !c.passed()).count();
        writeln!(s, "{} checks, {failed} failed", self.checks.len()).unwrap();
        s
    }
}

/// Runs `cases` instances of `case`, keeping the worst value or the first
/// error.
fn run_check(
    name: impl Into<String>,
    tolerance: f64,
    cases: usize,
    mut case: impl FnMut(usize) -> Result<f64>,
) -> Check {
    let mut check = Check {
        name: name.into(),
        worst: 0.0,
        tolerance,
        cases,
        error: None,
    };
    for i in 0..cases {
        match case(i) {
            Ok(v) if v.is_nan() => {
                check.error = Some(format!("case {i}: NaN"));
                break;
            }
            Ok(v) => check.worst = check.worst.max(v),
            Err(e) => {
                check.error = Some(format!("case {i}: {e}"));
                break;
            }
        }
    }
    check
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

fn randn(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    randn_init(rng, shape, std).expect("shape and std are valid")
}

/// `Σ y ⊙ w` for a fixed pseudo-random `w`, so every output element
/// contributes a distinct weight to the gradient.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let w = randn(&mut Rng::new(seed), g.value(y).shape(), 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum(p)
}

type Body = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

struct Instance {
    inputs: Vec<Tensor>,
    f: Body,
}

fn grad_error(inst: Instance, step: f64) -> Result<f64> {
    grad_check_multi(|g, v| (inst.f)(g, v), &inst.inputs, step)
}

fn op_instance(name: &str, rng: &mut Rng) -> Instance {
    let seed = rng.next_u64();
    let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let body = |f: Body, inputs: Vec<Tensor>| Instance { inputs, f };
    match name {
        "matmul" => body(
            Box::new(move |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, seed)
            }),
            vec![randn(rng, &[m, k], 1.0), randn(rng, &[k, n], 1.0)],
        ),
        "matmul_nt" => body(
            Box::new(move |g, v| {
                let y = g.matmul_nt(v[0], v[1])?;
                project(g, y, seed)
            }),
            vec![randn(rng, &[m, k], 1.0), randn(rng, &[n, k], 1.0)],
        ),
        "add" | "sub" | "mul" => {
            let op = name.to_string();
            body(
                Box::new(move |g, v| {
                    let y = match op.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        _ => g.mul(v[0], v[1])?,
                    };
                    project(g, y, seed)
                }),
                vec![randn(rng, &[m, k], 1.0), randn(rng, &[m, k], 1.0)],
            )
        }
        "scale" => {
            let factor = rng.normal() * 2.0;
            body(
                Box::new(move |g, v| {
                    let y = g.scale(v[0], factor)?;
                    project(g, y, seed)
                }),
                vec![randn(rng, &[m, k], 1.0)],
            )
        }
        "scale_by_exp" => {
            let s = Tensor::scalar(-1.0 + 4.0 * rng.uniform());
            body(
                Box::new(move |g, v| {
                    let y = g.scale_by_exp(v[0], v[1], MAX_LOGIT_SCALE.ln())?;
                    project(g, y, seed)
                }),
                vec![randn(rng, &[m, k], 1.0), s],
            )
        }
        "transpose" => body(
            Box::new(move |g, v| {
                let y = g.transpose(v[0])?;
                project(g, y, seed)
            }),
            vec![randn(rng, &[m, k], 1.0)],
        ),
        "reshape" => body(
            Box::new(move |g, v| {
                let y = g.reshape(v[0], &[k, m])?;
                project(g, y, seed)
            }),
            vec![randn(rng, &[m, k], 1.0)],
        ),
        "concat_rows" => body(
            Box::new(move |g, v| {
                let y = g.concat_rows(v[0], v[1])?;
                project(g, y, seed)
            }),
            vec![randn(rng, &[m, k], 1.0), randn(rng, &[n, k], 1.0)],
        ),
        "gather_rows" => {
            let ids: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| rng.below(m)).collect();
            body(
                Box::new(move |g, v| {
                    let y = g.gather_rows(v[0], &ids)?;
                    project(g, y, seed)
                }),
                vec![randn(rng, &[m, k], 1.0)],
            )
        }
        "masked_mean_pool" => {
            let (batch, len) = (m, dim(rng, 1, 5));
            let mut mask: Vec<bool> = (0..batch * len).map(|_| rng.uniform() < 0.6).collect();
            for b in 0..batch {
                mask[b * len + rng.below(len)] = true;
            }
            body(
                Box::new(move |g, v| {
                    let y = g.masked_mean_pool(v[0], &mask, len)?;
                    project(g, y, seed)
                }),
                vec![randn(rng, &[batch * len, k], 1.0)],
            )
        }
        "l2_normalize_rows" => body(
            Box::new(move |g, v| {
                let y = g.l2_normalize_rows(v[0])?;
                project(g, y, seed)
            }),
            vec![randn(rng, &[m, k + 1], 2.0)],
        ),
        "log_sum_exp_rows" => body(
            Box::new(move |g, v| {
                let y = g.log_sum_exp_rows(v[0])?;
                project(g, y, seed)
            }),
            vec![randn(rng, &[m, k], 2.0)],
        ),
        "diagonal" => body(
            Box::new(move |g, v| {
                let y = g.diagonal(v[0])?;
                project(g, y, seed)
            }),
            vec![randn(rng, &[m, m + k - 1], 1.0)],
        ),
        "sum" => body(Box::new(|g, v| g.sum(v[0])), vec![randn(rng, &[m, k], 1.0)]),
        "mean" => body(Box::new(|g, v| g.mean(v[0])), vec![randn(rng, &[m, k], 1.0)]),
        "attention" => {
            let heads = dim(rng, 1, 3);
            let d = heads * dim(rng, 1, 3);
            let (batch, len) = (dim(rng, 1, 3), dim(rng, 1, 5));
            let mut mask: Vec<bool> = (0..batch * len).map(|_| rng.uniform() < 0.7).collect();
            for b in 0..batch {
                mask[b * len] = true;
            }
            let slopes = alibi_slopes(heads).expect("heads is positive");
            let use_mask = rng.uniform() < 0.5;
            let use_slopes = rng.uniform() < 0.5;
            body(
                Box::new(move |g, v| {
                    let y = g.attention(
                        v[0],
                        batch,
                        len,
                        heads,
                        use_mask.then_some(mask.as_slice()),
                        use_slopes.then_some(slopes.as_slice()),
                    )?;
                    project(g, y, seed)
                }),
                vec![randn(rng, &[batch * len, 3 * d], 1.0)],
            )
        }
        "patchify" => {
            let p = dim(rng, 1, 3);
            let (c, h, w) = (dim(rng, 1, 2), p * dim(rng, 1, 2), p * dim(rng, 1, 2));
            body(
                Box::new(move |g, v| {
                    let y = g.patchify(v[0], p)?;
                    project(g, y, seed)
                }),
                vec![randn(rng, &[m, c, h, w], 1.0)],
            )
        }
        other => unreachable!("no instance generator for {other}"),
    }
}

/// Every differentiable tape operation.
pub const OPS: [&str; 19] = [
    "matmul",
    "matmul_nt",
    "add",
    "sub",
    "mul",
    "scale",
    "scale_by_exp",
    "transpose",
    "reshape",
    "concat_rows",
    "gather_rows",
    "masked_mean_pool",
    "l2_normalize_rows",
    "log_sum_exp_rows",
    "diagonal",
    "sum",
    "mean",
    "attention",
    "patchify",
];

/// Temperature settings the loss checks cover.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TauMode {
    Fixed(f64),
    Trainable,
}

impl TauMode {
    pub const ALL: [TauMode; 3] = [TauMode::Fixed(0.05), TauMode::Fixed(1.0), TauMode::Trainable];

    fn label(self) -> String {
        match self {
            TauMode::Fixed(t) => format!("tau={t}"),
            TauMode::Trainable => "tau=trainable".into(),
        }
    }

    /// Extra input for the trainable case: a random logit scale below the cap.
    fn extra(self, rng: &mut Rng) -> Option<Tensor> {
        matches!(self, TauMode::Trainable).then(|| Tensor::scalar(4.0 * rng.uniform()))
    }

    fn bind(self, vars: &[Var], at: usize) -> TempVar {
        match self {
            TauMode::Fixed(t) => TempVar::Fixed(t),
            TauMode::Trainable => TempVar::Trainable(vars[at]),
        }
    }
}

/// Embedding magnitude for loss instances; keeps rows away from the origin,
/// where normalization curvature would swamp the finite-difference step.
const EMBED_STD: f64 = 2.0;

fn loss_instance(kind: &str, tau: TauMode, rng: &mut Rng) -> Instance {
    let (k, d) = (dim(rng, 1, 8), dim(rng, 2, 16));
    let mut inputs = vec![randn(rng, &[k, d], EMBED_STD), randn(rng, &[k, d], EMBED_STD)];
    let f: Body = match kind {
        "nce_bidirectional" => Box::new(move |g, v| nce_bidirectional_on(g, v[0], v[1], tau.bind(v, 2))),
        "nce_hard_negatives" => {
            inputs.push(randn(rng, &[k * NEGATIVES_PER_QUERY, d], EMBED_STD));
            Box::new(move |g, v| nce_hard_negatives_on(g, v[0], v[1], v[2], tau.bind(v, 3)))
        }
        "stage_joint_loss[stage=3]" | "stage_joint_loss[stage=1]" => {
            let stage = if kind.ends_with("3]") { Stage::Three } else { Stage::One };
            let kb = dim(rng, 1, 8);
            if stage == Stage::Three {
                inputs.push(randn(rng, &[k * NEGATIVES_PER_QUERY, d], EMBED_STD));
            }
            let base = inputs.len();
            inputs.push(randn(rng, &[kb, d], EMBED_STD));
            inputs.push(randn(rng, &[kb, d], EMBED_STD));
            Box::new(move |g, v| {
                let text = if stage == Stage::Three {
                    TextSideVars::Triplets {
                        queries: v[0],
                        positives: v[1],
                        negatives: v[2],
                    }
                } else {
                    TextSideVars::Pairs {
                        queries: v[0],
                        positives: v[1],
                    }
                };
                stage_joint_loss_on(
                    g,
                    stage,
                    text,
                    v[base],
                    v[base + 1],
                    TempVar::Fixed(0.05),
                    tau.bind(v, base + 2),
                )
            })
        }
        other => unreachable!("no loss instance for {other}"),
    };
    inputs.extend(tau.extra(rng));
    Instance { inputs, f }
}

pub const LOSSES: [&str; 4] = [
    "nce_bidirectional",
    "nce_hard_negatives",
    "stage_joint_loss[stage=1]",
    "stage_joint_loss[stage=3]",
];

/// Finite-difference step for the tape checks.
pub const GRAD_STEP: f64 = 1e-5;

/// Gradient checks for every tape op and every loss under every
/// temperature mode, `cases` random instances each.
pub fn gradient_suite(seed: u64, cases: usize) -> Vec<Check> {
    let mut root = Rng::new(seed);
    let mut checks = Vec::new();
    for op in OPS {
        let mut rng = root.fork(checks.len() as u64);
        checks.push(run_check(format!("grad {op}"), GRAD_TOLERANCE, cases, |_| {
            grad_error(op_instance(op, &mut rng), GRAD_STEP)
        }));
    }
    for loss in LOSSES {
        for tau in TauMode::ALL {
            let mut rng = root.fork(checks.len() as u64);
            checks.push(run_check(
                format!("grad {loss}[{}]", tau.label()),
                GRAD_TOLERANCE,
                cases,
                |_| grad_error(loss_instance(loss, tau, &mut rng), GRAD_STEP),
            ));
        }
    }
    checks
}

fn tiny_config() -> EncoderConfig {
    EncoderConfig {
        d_model: 8,
        d_out: 4,
        heads: 2,
        patch_size: 2,
        channels: 1,
        image_size: 4,
        init_std: 0.5,
    }
}

/// Gradient checks through both towers end to end, on small random towers.
pub fn tower_suite(seed: u64, cases: usize) -> Vec<Check> {
    let cfg = tiny_config();
    let mut rng = Rng::new(seed);
    let text = run_check("grad text tower", GRAD_TOLERANCE, cases, |_| {
        let p = TextEncoderParams::init(&mut rng, &cfg)?;
        let (batch, len) = (2, 4);
        let ids: Vec<u16> = (0..batch * len)
            .map(|i| {
                if i % len == 3 && i > len {
                    PAD
                } else {
                    rng.below(256) as u16
                }
            })
            .collect();
        let tokens = TokenBatch::new(ids, batch, len)?;
        let proj_seed = rng.next_u64();
        let inputs: Vec<Tensor> = p.tensors().iter().map(|(_, t)| (*t).clone()).collect();
        let heads = p.heads;
        grad_check_multi(
            |g, v| {
                let vars = crate::encoders::TextVars {
                    token_embedding: v[0],
                    attn_qkv: v[1],
                    attn_out: v[2],
                    proj: v[3],
                    heads,
                };
                let y = vars.encode(g, &tokens)?;
                project(g, y, proj_seed)
            },
            &inputs,
            GRAD_STEP,
        )
    });
    let image = run_check("grad image tower", GRAD_TOLERANCE, cases, |_| {
        let p = ImageEncoderParams::init(&mut rng, &cfg)?;
        let images = Tensor::new(vec![2, 1, 4, 4], (0..32).map(|_| rng.uniform()).collect())?;
        let proj_seed = rng.next_u64();
        let mut inputs: Vec<Tensor> = p.tensors().iter().map(|(_, t)| (*t).clone()).collect();
        inputs.push(images);
        grad_check_multi(
            |g, v| {
                let vars = crate::encoders::ImageVars {
                    patch_proj: v[0],
                    attn_qkv: v[1],
                    attn_out: v[2],
                    proj: v[3],
                    heads: p.heads,
                    patch_size: p.patch_size,
                    channels: p.channels,
                };
                let y = vars.encode(g, v[4])?;
                project(g, y, proj_seed)
            },
            &inputs,
            GRAD_STEP,
        )
    });
    vec![text, image]
}

fn random_pair(rng: &mut Rng, k: usize, d: usize) -> (EmbeddingBatch, EmbeddingBatch) {
    (
        EmbeddingBatch::new(randn(rng, &[k, d], 1.0)).unwrap(),
        EmbeddingBatch::new(randn(rng, &[k, d], 1.0)).unwrap(),
    )
}

fn random_triplets(rng: &mut Rng, k: usize, d: usize) -> TripletBatch {
    TripletBatch::new(
        randn(rng, &[k, d], 1.0),
        randn(rng, &[k, d], 1.0),
        randn(rng, &[k, NEGATIVES_PER_QUERY, d], 1.0),
    )
    .unwrap()
}

fn random_tau(rng: &mut Rng) -> Temperature {
    match rng.below(3) {
        0 => Temperature::text(),
        1 => Temperature::fixed(1.0).unwrap(),
        _ => Temperature::trainable(0.01 + rng.uniform()).unwrap(),
    }
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A vector whose cosine with every row of `queries` is strictly higher
/// than that of `n`, or `None` if the simple construction fails.
pub fn closer_to_all(n: &[f64], queries: &Tensor, rng: &mut Rng) -> Option<Vec<f64>> {
    let nh = unit(n);
    let qs: Vec<Vec<f64>> = (0..queries.rows()).map(|r| unit(queries.row(r))).collect();
    // Push along the sum of the query directions with the n̂ component removed.
    let mut u = vec![0.0; n.len()];
    for q in &qs {
        let c = dot(q, &nh);
        let mut perp: Vec<f64> = q.iter().zip(&nh).map(|(a, b)| a - c * b).collect();
        let len = dot(&perp, &perp).sqrt();
        if len < 1e-9 {
            continue;
        }
        perp.iter_mut().for_each(|x| *x /= len);
        u.iter_mut().zip(&perp).for_each(|(a, b)| *a += b);
    }
    if dot(&u, &u).sqrt() < 1e-9 {
        return None;
    }
    let u = unit(&u);
    let mut t = 0.05 + 0.5 * rng.uniform();
    for _ in 0..30 {
        let cand: Vec<f64> = nh.iter().zip(&u).map(|(a, b)| a + t * b).collect();
        let ch = unit(&cand);
        if qs.iter().all(|q| dot(q, &ch) > dot(q, &nh)) {
            let scale = n.iter().map(|x| x * x).sum::<f64>().sqrt();
            return Some(cand.iter().map(|x| x * scale).collect());
        }
        t /= 2.0;
    }
    None
}

/// The loss invariants, `cases` random batches each.
pub fn loss_invariant_suite(seed: u64, cases: usize) -> Vec<Check> {
    let mut root = Rng::new(seed);
    let mut salt = 0;
    let mut next_rng = || {
        salt += 1;
        root.fork(salt)
    };
    let mut checks = Vec::new();

    let mut rng = next_rng();
    checks.push(run_check("loss non-negativity", 0.0, cases, |_| {
        let (k, d) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 16));
        let tau = random_tau(&mut rng);
        let (q, p) = random_pair(&mut rng, k, d);
        let t = random_triplets(&mut rng, k, d);
        let worst = (-nce_bidirectional(&q, &p, &tau)?).max(-nce_hard_negatives(&t, &tau)?);
        Ok(worst.max(0.0))
    }));

    let mut rng = next_rng();
    checks.push(run_check("batch-size-1 loss is zero", 0.0, cases, |_| {
        let d = dim(&mut rng, 1, 16);
        let (q, p) = random_pair(&mut rng, 1, d);
        Ok(nce_bidirectional(&q, &p, &random_tau(&mut rng))?.abs())
    }));

    let mut rng = next_rng();
    checks.push(run_check("positive row rescaling invariance", 1e-10, cases, |_| {
        let (k, d) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 16));
        let tau = random_tau(&mut rng);
        let (q, p) = random_pair(&mut rng, k, d);
        let t = random_triplets(&mut rng, k, d);
        let mut rescale = |x: &Tensor| {
            let mut y = x.clone();
            let cols = *x.shape().last().unwrap();
            for row in y.data_mut().chunks_mut(cols) {
                let c = (4.0 * rng.normal()).exp();
                row.iter_mut().for_each(|v| *v *= c);
            }
            y
        };
        let q2 = EmbeddingBatch::new(rescale(q.vectors()))?;
        let p2 = EmbeddingBatch::new(rescale(p.vectors()))?;
        let t2 = TripletBatch::new(rescale(&t.queries), rescale(&t.positives), rescale(&t.negatives))?;
        let a = (nce_bidirectional(&q, &p, &tau)? - nce_bidirectional(&q2, &p2, &tau)?).abs();
        let b = (nce_hard_negatives(&t, &tau)? - nce_hard_negatives(&t2, &tau)?).abs();
        Ok(a.max(b))
    }));

    let mut rng = next_rng();
    checks.push(run_check("query/passage swap symmetry", 1e-12, cases, |_| {
        let (k, d) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 16));
        let tau = random_tau(&mut rng);
        let (q, p) = random_pair(&mut rng, k, d);
        Ok((nce_bidirectional(&q, &p, &tau)? - nce_bidirectional(&p, &q, &tau)?).abs())
    }));

    let mut rng = next_rng();
    checks.push(run_check("row permutation invariance", 1e-12, cases, |_| {
        let (k, d) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 16));
        let tau = random_tau(&mut rng);
        let (q, p) = random_pair(&mut rng, k, d);
        let mut perm: Vec<usize> = (0..k).collect();
        rng.shuffle(&mut perm);
        let permute = |x: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).to_vec()).collect();
            EmbeddingBatch::new(Tensor::from_rows(&rows).unwrap())
        };
        let (q2, p2) = (permute(q.vectors())?, permute(p.vectors())?);
        Ok((nce_bidirectional(&q, &p, &tau)? - nce_bidirectional(&q2, &p2, &tau)?).abs())
    }));

    let mut rng = next_rng();
    checks.push(run_check("hard-negative monotonicity", 1e-12, cases, |_| loop {
        let (k, d) = (dim(&mut rng, 1, 8), dim(&mut rng, 2, 16));
        let tau = random_tau(&mut rng);
        let t = random_triplets(&mut rng, k, d);
        let row = rng.below(k * NEGATIVES_PER_QUERY);
        let flat = t.flat_negatives();
        let Some(closer) = closer_to_all(flat.row(row), &t.queries, &mut rng) else {
            continue;
        };
        let mut negatives = t.negatives.clone();
        negatives.data_mut()[row * d..(row + 1) * d].copy_from_slice(&closer);
        let harder = TripletBatch::new(t.queries.clone(), t.positives.clone(), negatives)?;
        let drop = nce_hard_negatives(&t, &tau)? - nce_hard_negatives(&harder, &tau)?;
        return Ok(drop.max(0.0));
    }));

    let mut rng = next_rng();
    checks.push(run_check("negatives never lower the loss", 1e-12, cases, |_| {
        let (k, d) = (dim(&mut rng, 1, 8), dim(&mut rng, 1, 16));
        let tau = random_tau(&mut rng);
        let t = random_triplets(&mut rng, k, d);
        let plain = nce_bidirectional(
            &EmbeddingBatch::new(t.queries.clone())?,
            &EmbeddingBatch::new(t.positives.clone())?,
            &tau,
        )?;
        Ok((plain - nce_hard_negatives(&t, &tau)?).max(0.0))
    }));
    checks
}

/// Schedule, optimizer and checkpoint spot checks.
pub fn trainer_checks(seed: u64) -> Vec<Check> {
    let exact = |name: &str, f: &dyn Fn() -> Result<f64>| run_check(name, 1e-15, 1, |_| f());
    let mut out = vec![
        exact("cosine_lr start is peak", &|| {
            Ok((cosine_lr(0, 100, 1e-3, 0)? - 1e-3).abs())
        }),
        exact("cosine_lr midpoint is half peak", &|| {
            Ok((cosine_lr(50, 100, 1e-3, 0)? - 5e-4).abs())
        }),
        exact("cosine_lr end is zero", &|| Ok(cosine_lr(100, 100, 1e-3, 0)?.abs())),
        exact("adamw zero-gradient decay", &|| {
            let mut w = Tensor::scalar(1.0);
            let mut mom = AdamMoments::zeros_like([&w]);
            let hp = AdamHyper {
                beta1: 0.9,
                beta2: 0.98,
                eps: 1e-6,
                weight_decay: 0.025,
            };
            mom.step(&mut [&mut w], &[Tensor::scalar(0.0)], &[true], 0.1, &hp)?;
            Ok((w.data()[0] - 1.0 * (1.0 - 0.1 * 0.025)).abs())
        }),
    ];
    out.push(run_check("checkpoint byte round trip", 0.0, 1, |_| {
        let state = TrainState::init(seed, &tiny_config())?;
        let ck = Checkpoint {
            state,
            stage: Stage::One,
            config_hash: [7; 8],
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes)?;
        Ok(if back == ck && back.to_bytes() == bytes {
            0.0
        } else {
            1.0
        })
    }));
    out
}

/// The full suite behind `selfcheck`.
pub fn run(seed: u64, cases: usize) -> SelfCheckReport {
    let mut checks = gradient_suite(seed, cases);
    checks.extend(tower_suite(seed ^ 1, cases.clamp(1, 3)));
    checks.extend(loss_invariant_suite(seed ^ 2, cases * 10));
    checks.extend(trainer_checks(seed));
    SelfCheckReport { checks }
}
