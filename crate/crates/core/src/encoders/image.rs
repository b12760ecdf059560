use super::{attention_block, EncoderConfig};
use crate::error::{Error, Result};
use crate::numcore::{randn_init, Graph, Rng, Tensor, Var};

/// Patch image tower: `P×P` patches → linear → attention → mean → projection.
///
/// Patches carry no positional embedding, so the tower sees an unordered set
/// of patches.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderParams {
    pub patch_proj: Tensor,
    pub attn_qkv: Tensor,
    pub attn_out: Tensor,
    pub proj: Tensor,
    pub heads: usize,
    pub patch_size: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ImageVars {
    pub patch_proj: Var,
    pub attn_qkv: Var,
    pub attn_out: Var,
    pub proj: Var,
    pub heads: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl ImageEncoderParams {
    pub fn init(rng: &mut Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, s) = (cfg.d_model, cfg.init_std);
        let patch_dim = cfg.patch_size * cfg.patch_size * cfg.channels;
        Ok(Self {
            patch_proj: randn_init(rng, &[patch_dim, d], s)?,
            attn_qkv: randn_init(rng, &[d, 3 * d], s)?,
            attn_out: randn_init(rng, &[d, d], s)?,
            proj: randn_init(rng, &[d, cfg.d_out], s)?,
            heads: cfg.heads,
            patch_size: cfg.patch_size,
            channels: cfg.channels,
        })
    }

    pub fn d_out(&self) -> usize {
        self.proj.cols()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("image.patch_proj", &self.patch_proj),
            ("image.attn_qkv", &self.attn_qkv),
            ("image.attn_out", &self.attn_out),
            ("image.proj", &self.proj),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("image.patch_proj", &mut self.patch_proj),
            ("image.attn_qkv", &mut self.attn_qkv),
            ("image.attn_out", &mut self.attn_out),
            ("image.proj", &mut self.proj),
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> ImageVars {
        self.bind_with(g, true)
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> ImageVars {
        self.bind_with(g, false)
    }

    fn bind_with(&self, g: &mut Graph, trainable: bool) -> ImageVars {
        let mut leaf = |t: &Tensor| if trainable { g.param(t) } else { g.constant(t.clone()) };
        ImageVars {
            patch_proj: leaf(&self.patch_proj),
            attn_qkv: leaf(&self.attn_qkv),
            attn_out: leaf(&self.attn_out),
            proj: leaf(&self.proj),
            heads: self.heads,
            patch_size: self.patch_size,
            channels: self.channels,
        }
    }
}

/// Checks the `[B, C, H, W]` contract against the tower's geometry.
fn check_images(images: &Tensor, patch: usize, channels: usize) -> Result<()> {
    let [_, c, h, w] = *images.shape() else {
        return Err(Error::shape(
            "encode_image",
            format!("expected [B,C,H,W], got {:?}", images.shape()),
        ));
    };
    if c != channels {
        return Err(Error::shape(
            "encode_image",
            format!("{c} channels, encoder expects {channels}"),
        ));
    }
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(
            "images",
            format!("{h}x{w} is not divisible into {patch}x{patch} patches"),
        ));
    }
    Ok(())
}

/// Rejects pixels outside `[0, 1]`.
pub(crate) fn check_pixel_range(images: &Tensor) -> Result<()> {
    match images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::invalid("images", format!("pixel value {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

impl ImageVars {
    /// Raw `[B × d_out]` embeddings. `images` must already be on the tape.
    pub fn encode(&self, g: &mut Graph, images: Var) -> Result<Var> {
        check_images(g.value(images), self.patch_size, self.channels)?;
        let [batch, _, h, w] = *g.value(images).shape() else {
            unreachable!()
        };
        let n = (h / self.patch_size) * (w / self.patch_size);
        let patches = g.patchify(images, self.patch_size)?;
        // Pixels in [0, 1] are centred to [−1, 1] before the patch projection.
        let scaled = g.scale(patches, 2.0)?;
        let ones = g.constant(Tensor::new(
            g.value(scaled).shape().to_vec(),
            vec![1.0; g.value(scaled).numel()],
        )?);
        let centred = g.sub(scaled, ones)?;
        let x = g.matmul(centred, self.patch_proj)?;
        let h = attention_block(g, x, self.attn_qkv, self.attn_out, batch, n, self.heads, None, false)?;
        let pooled = g.masked_mean_pool(h, &vec![true; batch * n], n)?;
        g.matmul(pooled, self.proj)
    }
}

/// Eager image encoding.
pub fn encode_image(images: &Tensor, params: &ImageEncoderParams) -> Result<Tensor> {
    check_pixel_range(images)?;
    let mut g = Graph::new();
    let vars = params.bind_frozen(&mut g);
    let x = g.constant(images.clone());
    let out = vars.encode(&mut g, x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check_multi;

    fn image(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn shape_contract() {
        let p = ImageEncoderParams::init(&mut Rng::new(1), &EncoderConfig::default()).unwrap();
        let img = image(&mut Rng::new(2), &[1, 1, 8, 8]);
        assert_eq!(encode_image(&img, &p).unwrap().shape(), &[1, 32]);
        let odd = image(&mut Rng::new(2), &[1, 1, 8, 6]);
        assert!(encode_image(&odd, &p).is_err());
    }

    #[test]
    fn identical_images_identical_embeddings() {
        let p = ImageEncoderParams::init(&mut Rng::new(1), &EncoderConfig::default()).unwrap();
        let one = image(&mut Rng::new(3), &[1, 1, 16, 16]);
        let chw = one.reshape(vec![1, 16, 16]).unwrap();
        let two = Tensor::stack(&[chw.clone(), chw]).unwrap();
        let e = encode_image(&two, &p).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn out_of_range_pixels_rejected() {
        let p = ImageEncoderParams::init(&mut Rng::new(1), &EncoderConfig::default()).unwrap();
        let mut img = image(&mut Rng::new(3), &[1, 1, 8, 8]);
        img.data_mut()[5] = 1.5;
        assert!(encode_image(&img, &p).is_err());
    }

    #[test]
    fn full_tower_gradient() {
        let cfg = EncoderConfig {
            d_model: 8,
            d_out: 4,
            heads: 2,
            ..EncoderConfig::default()
        };
        let mut rng = Rng::new(6);
        let mut p = ImageEncoderParams::init(&mut rng, &cfg).unwrap();
        for (_, t) in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= 20.0);
        }
        let img = image(&mut rng, &[1, 1, 8, 8]);
        let probe = randn_init(&mut rng, &[1, 4], 1.0).unwrap();
        // Weights are scaled up so attention is far from uniform; the
        // curvature that buys needs a finer step than the default.
        let err = grad_check_multi(
            |g, v| {
                let vars = ImageVars {
                    patch_proj: v[0],
                    attn_qkv: v[1],
                    attn_out: v[2],
                    proj: v[3],
                    heads: 2,
                    patch_size: 4,
                    channels: 1,
                };
                let e = vars.encode(g, v[4])?;
                let pr = g.constant(probe.clone());
                let m = g.mul(e, pr)?;
                g.sum(m)
            },
            &[
                p.patch_proj.clone(),
                p.attn_qkv.clone(),
                p.attn_out.clone(),
                p.proj.clone(),
                img.clone(),
            ],
            1e-4,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}
