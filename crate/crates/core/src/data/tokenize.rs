use crate::encoders::{TokenBatch, PAD};
use crate::error::{Error, Result};

/// Stage-1 text length.
pub const SHORT_MAX_LEN: usize = 77;
/// Stage-2 and stage-3 text length.
pub const LONG_MAX_LEN: usize = 512;

/// One tokenized text: byte ids right-padded with [`PAD`] to `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenRow {
    pub ids: Vec<u16>,
    pub mask: Vec<bool>,
}

/// Byte-level tokenization with truncation to `max_len`.
pub fn tokenize(text: &str, max_len: usize) -> Result<TokenRow> {
    if text.is_empty() {
        return Err(Error::invalid("text", "cannot tokenize empty text"));
    }
    if max_len == 0 {
        return Err(Error::invalid("max_len", "must be positive"));
    }
    let mut ids: Vec<u16> = text.bytes().take(max_len).map(u16::from).collect();
    let mut mask = vec![true; ids.len()];
    ids.resize(max_len, PAD);
    mask.resize(max_len, false);
    Ok(TokenRow { ids, mask })
}

/// Tokenizes and stacks `texts` into a batch of width `max_len`.
pub fn tokenize_batch<S: AsRef<str>>(texts: &[S], max_len: usize) -> Result<TokenBatch> {
    let rows = texts
        .iter()
        .map(|t| tokenize(t.as_ref(), max_len).map(|r| r.ids))
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::invalid("texts", "empty batch"));
    }
    TokenBatch::from_rows(&rows)
}
