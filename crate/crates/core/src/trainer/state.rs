use std::path::Path;

use super::optim::AdamMoments;
use crate::encoders::{EncoderConfig, ImageEncoderParams, TextEncoderParams};
use crate::error::{Error, Result};
use crate::losses::{Stage, Temperature};
use crate::numcore::tensorfile::{encode_tensor, Reader};
use crate::numcore::{Rng, Tensor};

/// Name of the image-side logit scale in parameter lists and checkpoints.
pub const LOGIT_SCALE_NAME: &str = "tau_img.logit_scale";

/// Everything a training run mutates.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub text: TextEncoderParams,
    pub image: ImageEncoderParams,
    pub tau_text: Temperature,
    pub tau_img: Temperature,
    pub moments: AdamMoments,
    /// Optimizer steps taken over the whole pipeline.
    pub step: u64,
}

impl TrainState {
    /// Fresh towers drawn from `seed`, τ_text = 0.05 and τ_img = 0.07.
    pub fn init(seed: u64, cfg: &EncoderConfig) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let text = TextEncoderParams::init(&mut rng.fork(1), cfg)?;
        let image = ImageEncoderParams::init(&mut rng.fork(2), cfg)?;
        Ok(Self::from_parts(text, image, Temperature::text(), Temperature::image()))
    }

    pub fn from_parts(
        text: TextEncoderParams,
        image: ImageEncoderParams,
        tau_text: Temperature,
        tau_img: Temperature,
    ) -> Self {
        let mut state = Self {
            text,
            image,
            tau_text,
            tau_img,
            moments: AdamMoments {
                m: Vec::new(),
                v: Vec::new(),
                t: 0,
            },
            step: 0,
        };
        state.moments = AdamMoments::zeros_like(state.params().into_iter().map(|(_, t)| t));
        state
    }

    /// Trainable tensors in a fixed order: text tower, image tower, then the
    /// image logit scale when it is trainable.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out: Vec<_> = self.text.tensors().into_iter().chain(self.image.tensors()).collect();
        if let Temperature::Trainable { logit_scale } = &self.tau_img {
            out.push((LOGIT_SCALE_NAME, logit_scale));
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        let mut out: Vec<_> = self
            .text
            .tensors_mut()
            .into_iter()
            .chain(self.image.tensors_mut())
            .collect();
        if let Some(s) = self.tau_img.logit_scale_mut() {
            out.push((LOGIT_SCALE_NAME, s));
        }
        out
    }

    pub fn reset_optimizer(&mut self) {
        self.moments.reset();
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"JCK1";
const META_TEXT_HEADS: &str = "meta.text_heads";
const META_IMAGE_HEADS: &str = "meta.image_heads";
const META_PATCH: &str = "meta.patch_size";
const META_CHANNELS: &str = "meta.channels";
const TAU_TEXT: &str = "tau_text.value";
const ADAM_T: &str = "adam.t";

/// A saved [`TrainState`] plus the stage and config that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub stage: Stage,
    pub config_hash: [u8; 8],
}

fn small_int(x: usize) -> Tensor {
    Tensor::scalar(x as f64)
}

impl Checkpoint {
    /// Named tensors in file order.
    fn entries(&self) -> Vec<(String, Tensor)> {
        let s = &self.state;
        let mut out: Vec<(String, Tensor)> = s
            .params()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (i, (name, _)) in s.params().into_iter().enumerate() {
            out.push((format!("adam.m.{name}"), s.moments.m[i].clone()));
            out.push((format!("adam.v.{name}"), s.moments.v[i].clone()));
        }
        out.push((ADAM_T.into(), Tensor::scalar(s.moments.t as f64)));
        out.push((TAU_TEXT.into(), Tensor::scalar(s.tau_text.tau())));
        out.push((META_TEXT_HEADS.into(), small_int(s.text.heads)));
        out.push((META_IMAGE_HEADS.into(), small_int(s.image.heads)));
        out.push((META_PATCH.into(), small_int(s.image.patch_size)));
        out.push((META_CHANNELS.into(), small_int(s.image.channels)));
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in &entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            encode_tensor(&t.clone().with_requires_grad(false), &mut out);
        }
        out.push(self.stage.number());
        out.extend_from_slice(&self.state.step.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail(0, "bad checkpoint magic, expected JCK1"));
        }
        let count = r.u32()? as usize;
        let mut entries: Vec<(String, Tensor, usize)> = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let at = r.pos;
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.fail(at + 2, "entry name is not UTF-8"))?
                .to_string();
            if entries.iter().any(|(n, _, _)| *n == name) {
                return Err(r.fail(at, format!("duplicate entry `{name}`")));
            }
            let t = r.tensor()?;
            entries.push((name, t, at));
        }
        let trailer = r.pos;
        let stage_byte = r.u8()?;
        let step = r.u64()?;
        let config_hash: [u8; 8] = r.take(8)?.try_into().unwrap();
        if r.pos != bytes.len() {
            return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let stage = Stage::try_from(stage_byte).map_err(|e| r.fail(trailer, e.to_string()))?;

        let mut take = |name: &str| -> Result<Tensor> {
            let i = entries
                .iter()
                .position(|(n, _, _)| n == name)
                .ok_or_else(|| r.fail(trailer, format!("missing entry `{name}`")))?;
            Ok(entries.swap_remove(i).1)
        };
        let int = |t: Tensor, name: &str| -> Result<usize> {
            let v = t.data()[0];
            if t.numel() != 1 || v < 1.0 || v.fract() != 0.0 {
                return Err(Error::Format {
                    what: "checkpoint",
                    offset: trailer,
                    msg: format!("`{name}` must be a positive integer scalar"),
                });
            }
            Ok(v as usize)
        };

        let text = TextEncoderParams {
            token_embedding: take("text.token_embedding")?,
            attn_qkv: take("text.attn_qkv")?,
            attn_out: take("text.attn_out")?,
            proj: take("text.proj")?,
            heads: int(take(META_TEXT_HEADS)?, META_TEXT_HEADS)?,
        };
        let image = ImageEncoderParams {
            patch_proj: take("image.patch_proj")?,
            attn_qkv: take("image.attn_qkv")?,
            attn_out: take("image.attn_out")?,
            proj: take("image.proj")?,
            heads: int(take(META_IMAGE_HEADS)?, META_IMAGE_HEADS)?,
            patch_size: int(take(META_PATCH)?, META_PATCH)?,
            channels: int(take(META_CHANNELS)?, META_CHANNELS)?,
        };
        let tau_text = Temperature::fixed(take(TAU_TEXT)?.data()[0])?;
        let tau_img = Temperature::Trainable {
            logit_scale: take(LOGIT_SCALE_NAME)?.with_requires_grad(true),
        };
        let mut state = TrainState::from_parts(text, image, tau_text, tau_img);
        state.step = step;
        state.moments.t = take(ADAM_T)?.data()[0] as u64;
        let names: Vec<&str> = state.params().into_iter().map(|(n, _)| n).collect();
        for (i, name) in names.iter().enumerate() {
            let m = take(&format!("adam.m.{name}"))?;
            let v = take(&format!("adam.v.{name}"))?;
            if m.shape() != state.moments.m[i].shape() || v.shape() != state.moments.m[i].shape() {
                return Err(r.fail(
                    trailer,
                    format!("moment shapes for `{name}` do not match the parameter"),
                ));
            }
            state.moments.m[i] = m;
            state.moments.v[i] = v;
        }
        if let Some((name, _, at)) = entries.first() {
            return Err(r.fail(*at, format!("unexpected entry `{name}`")));
        }
        Ok(Self {
            state,
            stage,
            config_hash,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn checkpoint_save(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    checkpoint.save(path)
}

pub fn checkpoint_load(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
