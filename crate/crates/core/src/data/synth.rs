//! Synthetic aligned text/image data with a known latent ground truth.
//!
//! Every item starts from a unit latent `z`. Its caption spells out a
//! quantized copy of `z`, one character per coordinate, drawn from an
//! alphabet slice reserved for that coordinate so the text is readable as an
//! unordered bag of tokens. Its image is a grid of patches; patch `k` carries
//! coordinate `k mod d` as a brightness level on the pixels whose in-patch
//! index is congruent to that coordinate, so patch means encode `z` as well.

use super::corpus::CorpusHandle;
use super::records::{ImageCaptionRecord, PairRecord, TripletRecord};
use super::{Dataset, EvalSplit, TrainingCorpora};
use crate::error::{Error, Result};
use crate::losses::NEGATIVES_PER_QUERY;
use crate::numcore::{Rng, Tensor};

/// First printable, non-space ASCII byte.
const ALPHABET_START: u8 = b'!';
const ALPHABET_SIZE: usize = 94;
const MAX_LEVELS: usize = 16;
/// Latent coordinates are scaled by `√d` and clipped to `±CODE_RANGE`
/// before quantization.
const CODE_RANGE: f64 = 2.0;
/// Norm of the latent perturbation that separates a query from its passage.
pub const QUERY_NOISE: f64 = 0.5;
/// Query noise of the training pairs, which are looser than the triplets
/// and the held-out queries.
pub const PAIR_QUERY_NOISE: f64 = 1.5;
/// Long captions repeat the short code this many times.
pub const LONG_REPEATS: usize = 4;

/// Generation knobs beyond the size/noise triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    pub n: usize,
    pub latent_dim: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    pub image_size: usize,
    pub patch_size: usize,
    pub query_noise: f64,
    /// Query noise of the training pairs.
    pub pair_query_noise: f64,
}

impl SynthOptions {
    pub fn new(n: usize, latent_dim: usize, noise: f64) -> Self {
        Self {
            n,
            latent_dim,
            noise,
            image_size: 16,
            patch_size: 4,
            query_noise: QUERY_NOISE,
            pair_query_noise: PAIR_QUERY_NOISE,
        }
    }

    /// Held-out items: one in eight.
    pub fn eval_count(&self) -> usize {
        self.n / 8
    }

    fn levels(&self) -> usize {
        (ALPHABET_SIZE / self.latent_dim).min(MAX_LEVELS)
    }

    fn validate(&self) -> Result<()> {
        if self.n < 16 {
            return Err(Error::invalid(
                "n",
                format!("need at least 16 items to hold out an eval split, got {}", self.n),
            ));
        }
        let patches = (self.image_size / self.patch_size.max(1)).pow(2);
        let max_dim = patches.min(self.patch_size * self.patch_size);
        if self.latent_dim < 4 || self.latent_dim > max_dim {
            return Err(Error::invalid(
                "latent_dim",
                format!(
                    "must be in [4, {max_dim}] for this image geometry, got {}",
                    self.latent_dim
                ),
            ));
        }
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid("patch_size", "must divide image_size"));
        }
        if !(self.noise >= 0.0) || !(self.query_noise >= 0.0) || !(self.pair_query_noise >= 0.0) {
            return Err(Error::invalid("noise", "must be non-negative"));
        }
        Ok(())
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scaled, clipped coordinate in `[−1, 1]`.
fn squash(z: f64, dim: usize) -> f64 {
    (z * (dim as f64).sqrt() / CODE_RANGE).clamp(-1.0, 1.0)
}

/// Quantized caption of a unit latent.
pub fn latent_code(z: &[f64], levels: usize) -> String {
    let d = z.len();
    z.iter()
        .enumerate()
        .map(|(j, &v)| {
            let level = (((squash(v, d) + 1.0) / 2.0 * levels as f64).floor() as usize).min(levels - 1);
            char::from(ALPHABET_START + (j * levels + level) as u8)
        })
        .collect()
}

/// Inverse of [`latent_code`] up to quantization: bin centres in the scaled
/// coordinate system.
pub fn decode_code(code: &str, dim: usize) -> Option<Vec<f64>> {
    let levels = (ALPHABET_SIZE / dim).min(MAX_LEVELS);
    let mut out = vec![f64::NAN; dim];
    for b in code.bytes() {
        let idx = b.checked_sub(ALPHABET_START)? as usize;
        let (j, level) = (idx / levels, idx % levels);
        if j >= dim {
            return None;
        }
        out[j] = (level as f64 + 0.5) / levels as f64 * 2.0 - 1.0;
    }
    out.iter().all(|v| v.is_finite()).then_some(out)
}

fn long_caption(short: &str) -> String {
    [short; LONG_REPEATS].join(" ")
}

fn pixel_level(z: f64, dim: usize) -> f64 {
    0.5 + 0.45 * squash(z, dim)
}

/// Renders the `[1, H, W]` image of latent `z`.
fn render(z: &[f64], opts: &SynthOptions, rng: &mut Rng) -> Tensor {
    let (size, p, d) = (opts.image_size, opts.patch_size, z.len());
    let grid = size / p;
    let mut px = vec![0.5; size * size];
    for k in 0..grid * grid {
        let j = k % d;
        let (py, pxo) = ((k / grid) * p, (k % grid) * p);
        for t in (0..p * p).filter(|t| t % d == j) {
            px[(py + t / p) * size + pxo + t % p] = pixel_level(z[j], d);
        }
    }
    if opts.noise > 0.0 {
        px.iter_mut()
            .for_each(|v| *v = (*v + opts.noise * rng.normal()).clamp(0.0, 1.0));
    }
    Tensor::new(vec![1, size, size], px).expect("image dims are consistent")
}

/// Recovers the scaled, clipped latent from a noise-free image.
pub fn decode_image(image: &Tensor, dim: usize, patch: usize) -> Vec<f64> {
    let size = image.shape()[2];
    let grid = size / patch;
    let mut sums = vec![0.0; dim];
    let mut counts = vec![0usize; dim];
    for k in 0..grid * grid {
        let j = k % dim;
        let (py, pxo) = ((k / grid) * patch, (k % grid) * patch);
        for t in (0..patch * patch).filter(|t| t % dim == j) {
            sums[j] += image.data()[(py + t / patch) * size + pxo + t % patch];
            counts[j] += 1;
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| (s / c as f64 - 0.5) / 0.45)
        .collect()
}

/// Generates train corpora and a held-out split from `n` random latents.
pub fn synth_generate(rng: &mut Rng, n: usize, latent_dim: usize, noise: f64) -> Result<Dataset> {
    synth_generate_with(rng, &SynthOptions::new(n, latent_dim, noise))
}

pub fn synth_generate_with(rng: &mut Rng, opts: &SynthOptions) -> Result<Dataset> {
    opts.validate()?;
    let (n, d, levels) = (opts.n, opts.latent_dim, opts.levels());

    let mut latent_rng = rng.fork(1);
    let mut query_rng = rng.fork(2);
    let mut pixel_rng = rng.fork(3);

    let latents: Vec<Vec<f64>> = (0..n)
        .map(|_| unit((0..d).map(|_| latent_rng.normal()).collect()))
        .collect();
    let query_latents: Vec<Vec<f64>> = latents
        .iter()
        .map(|z| {
            let step = opts.query_noise / (d as f64).sqrt();
            unit(z.iter().map(|v| v + step * query_rng.normal()).collect())
        })
        .collect();
    let queries: Vec<String> = query_latents.iter().map(|q| latent_code(q, levels)).collect();
    let mut weak_rng = rng.fork(4);
    let weak_queries: Vec<String> = latents
        .iter()
        .map(|z| {
            let step = opts.pair_query_noise / (d as f64).sqrt();
            latent_code(&unit(z.iter().map(|v| v + step * weak_rng.normal()).collect()), levels)
        })
        .collect();
    let codes: Vec<String> = latents.iter().map(|z| latent_code(z, levels)).collect();
    let images: Vec<Tensor> = latents.iter().map(|z| render(z, opts, &mut pixel_rng)).collect();

    let pair = |i: usize| PairRecord {
        query: queries[i].clone(),
        positive: codes[i].clone(),
    };
    let weak_pair = |i: usize| PairRecord {
        query: weak_queries[i].clone(),
        positive: codes[i].clone(),
    };
    let captioned = |i: usize, long: bool| ImageCaptionRecord {
        caption: if long {
            long_caption(&codes[i])
        } else {
            codes[i].clone()
        },
        image_ref: format!("images/{i:06}.jct"),
        image: images[i].clone(),
    };

    let decoded: Vec<Vec<f64>> = codes.iter().map(|c| decoded_unit(c, d)).collect();
    let decoded_queries: Vec<Vec<f64>> = queries.iter().map(|c| decoded_unit(c, d)).collect();

    let n_eval = opts.eval_count();
    let train: Vec<usize> = (0..n - n_eval).collect();
    let held: Vec<usize> = (n - n_eval..n).collect();

    let triplets = train
        .iter()
        .map(|&i| TripletRecord {
            query: queries[i].clone(),
            positive: codes[i].clone(),
            negatives: hard_negatives(i, &train, &decoded, &decoded_queries[i], &codes),
        })
        .collect();

    let training = TrainingCorpora {
        pairs: Some(CorpusHandle::new(train.iter().map(|&i| weak_pair(i)).collect(), 0)),
        captions_short: Some(CorpusHandle::new(
            train.iter().map(|&i| captioned(i, false)).collect(),
            0,
        )),
        captions_long: Some(CorpusHandle::new(
            train.iter().map(|&i| captioned(i, true)).collect(),
            0,
        )),
        triplets: Some(CorpusHandle::new(triplets, 0)),
    };
    let eval = EvalSplit {
        pairs: held.iter().map(|&i| pair(i)).collect(),
        captions_short: held.iter().map(|&i| captioned(i, false)).collect(),
        captions_long: held.iter().map(|&i| captioned(i, true)).collect(),
        latents: Tensor::new(vec![n_eval, d], held.iter().flat_map(|&i| latents[i].clone()).collect())?,
    };
    Ok(Dataset { train: training, eval })
}

fn decoded_unit(code: &str, dim: usize) -> Vec<f64> {
    unit(decode_code(code, dim).expect("generated codes decode"))
}

/// Passages of the seven items whose decoded codes are closest to the query
/// of item `i` while still ranking below its own positive. Candidates ranked
/// at or above the positive would be false negatives and are used only if too
/// few remain.
fn hard_negatives(i: usize, pool: &[usize], decoded: &[Vec<f64>], query: &[f64], codes: &[String]) -> Vec<String> {
    let own = cosine(query, &decoded[i]);
    let mut others: Vec<(f64, usize)> = pool
        .iter()
        .filter(|&&j| j != i && codes[j] != codes[i])
        .map(|&j| (cosine(query, &decoded[j]), j))
        .collect();
    others.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let (below, above): (Vec<_>, Vec<_>) = others.into_iter().partition(|&(c, _)| c < own);
    below
        .into_iter()
        .chain(above.into_iter().rev())
        .take(NEGATIVES_PER_QUERY)
        .map(|(_, j)| codes[j].clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rule() {
        let data = synth_generate(&mut Rng::new(1), 64, 8, 0.0).unwrap();
        assert_eq!(data.eval.pairs.len(), 8);
        assert_eq!(data.train.pairs.as_ref().unwrap().len(), 56);
        assert!(synth_generate(&mut Rng::new(1), 15, 8, 0.0).is_err());
        assert!(synth_generate(&mut Rng::new(1), 64, 3, 0.0).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = synth_generate(&mut Rng::new(4), 32, 8, 0.05).unwrap();
        let b = synth_generate(&mut Rng::new(4), 32, 8, 0.05).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn triplets_have_seven_distinct_hard_negatives() {
        let data = synth_generate(&mut Rng::new(2), 128, 8, 0.05).unwrap();
        for t in data.train.triplets.as_ref().unwrap().records() {
            assert_eq!(t.negatives.len(), 7);
            assert!(!t.negatives.contains(&t.positive));
            t.validate().unwrap();
        }
    }

    #[test]
    fn negatives_rank_below_the_positive() {
        let opts = SynthOptions::new(256, 8, 0.05);
        let data = synth_generate_with(&mut Rng::new(5), &opts).unwrap();
        let dec = |s: &str| decode_code(s, 8).unwrap();
        let mut above = 0;
        let recs = data.train.triplets.as_ref().unwrap().records();
        for t in recs {
            let (q, p) = (dec(&t.query), dec(&t.positive));
            let own = cosine(&unit(q.clone()), &unit(p));
            above += t
                .negatives
                .iter()
                .filter(|n| cosine(&unit(q.clone()), &unit(dec(n))) > own)
                .count();
        }
        // Quantization can still reorder a few near-ties.
        assert!(above * 20 < recs.len(), "{above} of {}", recs.len());
    }

    #[test]
    fn codes_and_images_decode_to_their_latent() {
        let opts = SynthOptions::new(64, 8, 0.0);
        let data = synth_generate_with(&mut Rng::new(3), &opts).unwrap();
        let latents = &data.eval.latents;
        for (i, rec) in data.eval.captions_short.iter().enumerate() {
            let z = latents.row(i);
            let scaled: Vec<f64> = z.iter().map(|&v| squash(v, 8)).collect();
            let from_image = decode_image(&rec.image, 8, 4);
            for (a, b) in from_image.iter().zip(&scaled) {
                assert!((a - b).abs() < 1e-12);
            }
            let from_text = decode_code(&rec.caption, 8).unwrap();
            let half_bin = 1.0 / opts.levels() as f64;
            for (a, b) in from_text.iter().zip(&scaled) {
                assert!((a - b).abs() <= half_bin + 1e-12);
            }
            assert_eq!(data.eval.captions_long[i].caption.len(), 4 * 8 + 3);
        }
    }
}
