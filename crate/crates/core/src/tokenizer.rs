//! Uniform per-dimension binning between continuous actions and tokens.

use serde::{Deserialize, Serialize};

use crate::config::{parse_value, FlatConfig};
use crate::env::{ContinuousAction, ACTION_DIMS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub bins: u32,
    pub low: f64,
    pub high: f64,
    pub dims: usize,
    pub gripper_dim: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            bins: 256,
            low: -1.0,
            high: 1.0,
            dims: ACTION_DIMS,
            gripper_dim: 2,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config("bins must be >= 2".into()));
        }
        if self.low.partial_cmp(&self.high) != Some(std::cmp::Ordering::Less) {
            return Err(Error::Config("low must be < high".into()));
        }
        if self.dims != ACTION_DIMS || self.gripper_dim >= self.dims {
            return Err(Error::Config(format!(
                "dims must be {ACTION_DIMS} with gripper_dim < dims"
            )));
        }
        Ok(())
    }

    fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn encode_value(&self, v: f64) -> Result<u32> {
        if !v.is_finite() {
            return Err(Error::NonFinite(v));
        }
        let b = f64::from(self.bins);
        let raw = ((v - self.low) / self.width() * b).floor();
        Ok(raw.clamp(0.0, b - 1.0) as u32)
    }

    pub fn decode_value(&self, token: u32) -> Result<f64> {
        if token >= self.bins {
            return Err(Error::TokenOutOfRange {
                token,
                bins: self.bins,
            });
        }
        Ok(self.low + self.width() * (f64::from(token) + 0.5) / f64::from(self.bins))
    }

    pub fn encode(&self, a: &ContinuousAction) -> Result<ActionTokens> {
        let v = a.to_array();
        let mut tokens = Vec::with_capacity(self.dims);
        for x in v.iter().take(self.dims) {
            tokens.push(self.encode_value(*x)?);
        }
        Ok(ActionTokens(tokens))
    }

    pub fn decode(&self, t: &ActionTokens) -> Result<ContinuousAction> {
        if t.0.len() != self.dims {
            return Err(Error::ShapeMismatch(format!(
                "expected {} tokens, got {}",
                self.dims,
                t.0.len()
            )));
        }
        let mut v = [0.0; ACTION_DIMS];
        for (slot, tok) in v.iter_mut().zip(&t.0) {
            *slot = self.decode_value(*tok)?;
        }
        Ok(ContinuousAction::from_array(v))
    }
}

impl FlatConfig for TokenizerConfig {
    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("bins".into(), self.bins.to_string()),
            ("low".into(), self.low.to_string()),
            ("high".into(), self.high.to_string()),
            ("dims".into(), self.dims.to_string()),
            ("gripper_dim".into(), self.gripper_dim.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "bins" => self.bins = parse_value(key, value)?,
            "low" => self.low = parse_value(key, value)?,
            "high" => self.high = parse_value(key, value)?,
            "dims" => self.dims = parse_value(key, value)?,
            "gripper_dim" => self.gripper_dim = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown tokenizer key `{key}`"))),
        }
        Ok(())
    }
}

/// One token per action dimension, in decoding order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ActionTokens(pub Vec<u32>);

impl ActionTokens {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
