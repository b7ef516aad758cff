use crate::error::{Error, Result};

/// Split of token indices into exact-softmax tokens and linear tokens.
///
/// Indices are 0-based: the softmax set holds every multiple of the rate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenPartition {
    rate: usize,
    n_tokens: usize,
    softmax_indices: Vec<usize>,
    linear_indices: Vec<usize>,
}

impl TokenPartition {
    pub fn rate(&self) -> usize {
        self.rate
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn softmax_indices(&self) -> &[usize] {
        &self.softmax_indices
    }

    pub fn linear_indices(&self) -> &[usize] {
        &self.linear_indices
    }
}

pub fn partition_tokens(n_tokens: usize, rate: usize) -> Result<TokenPartition> {
    if n_tokens == 0 {
        return Err(Error::Argument("token count must be at least 1".into()));
    }
    if rate == 0 {
        return Err(Error::Argument("hybrid rate must be at least 1".into()));
    }
    let (softmax_indices, linear_indices) = (0..n_tokens).partition(|i| i % rate == 0);
    Ok(TokenPartition {
        rate,
        n_tokens,
        softmax_indices,
        linear_indices,
    })
}
