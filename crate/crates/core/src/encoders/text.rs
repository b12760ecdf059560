use super::{attention_block, EncoderConfig};
use crate::error::{Error, Result};
use crate::numcore::{randn_init, Graph, Rng, Tensor, Var};

/// 256 byte values plus the padding id.
pub const VOCAB_SIZE: usize = 257;
pub const PAD: u16 = 256;

/// A `B × L` matrix of byte ids with its padding mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<u16>,
    mask: Vec<bool>,
    batch: usize,
    len: usize,
}

impl TokenBatch {
    /// Builds a batch from `batch` rows of `len` ids each. The mask is
    /// derived: a position is real exactly when its id is not [`PAD`].
    pub fn new(ids: Vec<u16>, batch: usize, len: usize) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(Error::shape(
                "TokenBatch",
                format!("{} ids for a {batch}x{len} batch", ids.len()),
            ));
        }
        if let Some(bad) = ids.iter().find(|&&i| i > PAD) {
            return Err(Error::invalid("ids", format!("token id {bad} outside [0, 256]")));
        }
        let mask = ids.iter().map(|&i| i != PAD).collect();
        Ok(Self { ids, mask, batch, len })
    }

    /// Stacks equal-length rows.
    pub fn from_rows<R: AsRef<[u16]>>(rows: &[R]) -> Result<Self> {
        let len = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != len) {
            return Err(Error::shape("TokenBatch::from_rows", "rows differ in length"));
        }
        let ids = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(ids, rows.len(), len)
    }

    pub fn ids(&self) -> &[u16] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Drops trailing columns that are padding in every row.
    pub fn trimmed(&self) -> TokenBatch {
        let keep = (0..self.batch)
            .filter_map(|b| self.mask[b * self.len..(b + 1) * self.len].iter().rposition(|&m| m))
            .max()
            .map_or(1, |p| p + 1);
        if keep == self.len {
            return self.clone();
        }
        let ids = (0..self.batch)
            .flat_map(|b| self.ids[b * self.len..b * self.len + keep].iter().copied())
            .collect();
        TokenBatch::new(ids, self.batch, keep).expect("trimmed batch keeps its invariants")
    }
}

/// Byte-level text tower: embed → ALiBi attention → masked mean → projection.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderParams {
    pub token_embedding: Tensor,
    pub attn_qkv: Tensor,
    pub attn_out: Tensor,
    pub proj: Tensor,
    pub heads: usize,
}

/// Tape handles for a bound [`TextEncoderParams`].
#[derive(Clone, Copy, Debug)]
pub struct TextVars {
    pub token_embedding: Var,
    pub attn_qkv: Var,
    pub attn_out: Var,
    pub proj: Var,
    pub heads: usize,
}

impl TextEncoderParams {
    pub fn init(rng: &mut Rng, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, s) = (cfg.d_model, cfg.init_std);
        Ok(Self {
            token_embedding: randn_init(rng, &[VOCAB_SIZE, d], s)?,
            attn_qkv: randn_init(rng, &[d, 3 * d], s)?,
            attn_out: randn_init(rng, &[d, d], s)?,
            proj: randn_init(rng, &[d, cfg.d_out], s)?,
            heads: cfg.heads,
        })
    }

    pub fn d_out(&self) -> usize {
        self.proj.cols()
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("text.token_embedding", &self.token_embedding),
            ("text.attn_qkv", &self.attn_qkv),
            ("text.attn_out", &self.attn_out),
            ("text.proj", &self.proj),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [
            ("text.token_embedding", &mut self.token_embedding),
            ("text.attn_qkv", &mut self.attn_qkv),
            ("text.attn_out", &mut self.attn_out),
            ("text.proj", &mut self.proj),
        ]
    }

    /// Registers the parameters as differentiable leaves.
    pub fn bind(&self, g: &mut Graph) -> TextVars {
        TextVars {
            token_embedding: g.param(&self.token_embedding),
            attn_qkv: g.param(&self.attn_qkv),
            attn_out: g.param(&self.attn_out),
            proj: g.param(&self.proj),
            heads: self.heads,
        }
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> TextVars {
        TextVars {
            token_embedding: g.constant(self.token_embedding.clone()),
            attn_qkv: g.constant(self.attn_qkv.clone()),
            attn_out: g.constant(self.attn_out.clone()),
            proj: g.constant(self.proj.clone()),
            heads: self.heads,
        }
    }
}

impl TextVars {
    /// Raw (un-normalized) `[B × d_out]` embeddings for `tokens`.
    pub fn encode(&self, g: &mut Graph, tokens: &TokenBatch) -> Result<Var> {
        let tokens = tokens.trimmed();
        let (batch, len) = (tokens.batch(), tokens.len());
        if let Some(b) = (0..batch).find(|b| !tokens.mask()[b * len..(b + 1) * len].contains(&true)) {
            return Err(Error::invalid("tokens", format!("row {b} has no real tokens")));
        }
        let ids: Vec<usize> = tokens.ids().iter().map(|&i| i as usize).collect();
        let x = g.gather_rows(self.token_embedding, &ids)?;
        let h = attention_block(
            g,
            x,
            self.attn_qkv,
            self.attn_out,
            batch,
            len,
            self.heads,
            Some(tokens.mask()),
            true,
        )?;
        let pooled = g.masked_mean_pool(h, tokens.mask(), len)?;
        g.matmul(pooled, self.proj)
    }
}

/// Eager text encoding.
pub fn encode_text(tokens: &TokenBatch, params: &TextEncoderParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let vars = params.bind_frozen(&mut g);
    let out = vars.encode(&mut g, tokens)?;
    Ok(g.value(out).clone())
}
