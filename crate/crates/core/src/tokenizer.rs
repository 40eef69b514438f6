//! Token layout of feature vectors and prefix truncation of compressed codes.
//!
//! A `D`-vector is split into `T` contiguous tokens of width `d = D / T`.
//! Compression ratios are quantised to whole tokens: ratio `r` keeps
//! `floor(T * (1 - r))` tokens, never fewer than one.

use serde::{Deserialize, Serialize};

use crate::error::{ArfcError, Result};

/// `T` contiguous chunks of width `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    tokens: Vec<Vec<f64>>,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[Vec<f64>] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.first().map_or(0, Vec::len)
    }
}

/// Fraction of the feature dimension removed, in `[0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Ratio(f64);

impl Ratio {
    pub fn new(r: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&r) || r.is_nan() {
            return Err(ArfcError::invalid(format!(
                "compression ratio {r} outside [0, 1)"
            )));
        }
        Ok(Ratio(r))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Grid ratio that keeps exactly `kept` of `tokens` tokens.
    pub fn from_token_count(kept: usize, tokens: usize) -> Result<Self> {
        if kept == 0 || kept > tokens {
            return Err(ArfcError::invalid(format!(
                "token count {kept} outside [1, {tokens}]"
            )));
        }
        Ratio::new(1.0 - kept as f64 / tokens as f64)
    }

    /// This ratio moved onto the token grid.
    pub fn snap(self, tokens: usize) -> Ratio {
        Ratio(1.0 - ratio_to_token_count(self, tokens) as f64 / tokens as f64)
    }

    /// Grid point `floor(T * r) / T`. Maps `[0, 1)` evenly onto every grid
    /// ratio, including `0`, which [`Ratio::snap`] only reaches at exactly zero.
    pub fn floor_to_grid(self, tokens: usize) -> Ratio {
        let k = ((tokens as f64 * self.0 + GRID_EPS).floor() as usize).min(tokens - 1);
        Ratio::from_token_count(tokens - k, tokens).expect("grid token count in range")
    }
}

fn check_layout(dim: usize, tokens: usize) -> Result<usize> {
    if tokens == 0 || dim == 0 || !dim.is_multiple_of(tokens) {
        return Err(ArfcError::shape(format!(
            "feature length {dim} not divisible into {tokens} tokens"
        )));
    }
    Ok(dim / tokens)
}

/// Split `f` into `tokens` equal chunks.
pub fn tokenize(f: &[f64], tokens: usize) -> Result<TokenSequence> {
    let d = check_layout(f.len(), tokens)?;
    Ok(TokenSequence {
        tokens: f.chunks(d).map(<[f64]>::to_vec).collect(),
    })
}

/// Concatenate a token sequence back into one vector.
pub fn detokenize(s: &TokenSequence) -> Vec<f64> {
    s.tokens.concat()
}

/// Slack so grid ratios such as `1 - 2/6` still floor to their own count.
const GRID_EPS: f64 = 1e-9;

fn raw_kept(r: Ratio, tokens: usize) -> f64 {
    (tokens as f64 * (1.0 - r.value()) + GRID_EPS).floor()
}

/// `floor(T * (1 - r))` clamped to `[1, T]`.
pub fn ratio_to_token_count(r: Ratio, tokens: usize) -> usize {
    (raw_kept(r, tokens) as usize).clamp(1, tokens)
}

/// Prefix of a compressed code for ratio `r`. Errors when fewer than one
/// whole token would remain.
pub fn truncate(code: &[f64], tokens: usize, r: Ratio) -> Result<Vec<f64>> {
    let d = check_layout(code.len(), tokens)?;
    if raw_kept(r, tokens) < 1.0 {
        return Err(ArfcError::invalid(format!(
            "ratio {} leaves no whole token out of {tokens}",
            r.value()
        )));
    }
    Ok(code[..d * ratio_to_token_count(r, tokens)].to_vec())
}

/// The `T` grid ratios `{1 - j/T : j = 1..T}`, ordered by increasing kept tokens.
pub fn ratio_grid(tokens: usize) -> Vec<Ratio> {
    (1..=tokens)
        .map(|j| Ratio(1.0 - j as f64 / tokens as f64))
        .collect()
}
