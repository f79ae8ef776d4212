//! Autoregressive token policy with hand-written backpropagation.
//!
//! The observation passes through a two-layer tanh encoder. Action dimension
//! `d` is then predicted by an affine head over `[encoder(o); embed(token_{d-1})]`,
//! where dimension 0 uses a fixed all-zero start embedding. All parameters
//! live in one flat `f64` buffer so optimizers and finite-difference checks
//! can treat them uniformly.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{parse_value, FlatConfig};
use crate::env::{ACTION_DIMS, OBS_DIM};
use crate::error::{Error, Result};
use crate::tokenizer::ActionTokens;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HAPOPOLI";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub obs_dim: usize,
    pub hidden: usize,
    pub embed: usize,
    pub bins: usize,
    pub dims: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        Self {
            obs_dim: OBS_DIM,
            hidden: 128,
            embed: 32,
            bins: 256,
            dims: ACTION_DIMS,
        }
    }
}

impl FlatConfig for PolicyDims {
    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("obs_dim".into(), self.obs_dim.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("embed".into(), self.embed.to_string()),
            ("bins".into(), self.bins.to_string()),
            ("dims".into(), self.dims.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "obs_dim" => self.obs_dim = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "embed" => self.embed = parse_value(key, value)?,
            "bins" => self.bins = parse_value(key, value)?,
            "dims" => self.dims = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown policy key `{key}`"))),
        }
        Ok(())
    }
}

/// Offsets of each tensor inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    embed: usize,
    heads: usize,
    head_stride: usize,
    total: usize,
}

impl Layout {
    fn new(d: &PolicyDims) -> Self {
        let w1 = 0;
        let b1 = w1 + d.hidden * d.obs_dim;
        let w2 = b1 + d.hidden;
        let b2 = w2 + d.hidden * d.hidden;
        let embed = b2 + d.hidden;
        let heads = embed + d.bins * d.embed;
        let head_stride = d.bins * (d.hidden + d.embed) + d.bins;
        Self {
            w1,
            b1,
            w2,
            b2,
            embed,
            heads,
            head_stride,
            total: heads + d.dims * head_stride,
        }
    }

    fn head_w(&self, d: usize) -> usize {
        self.heads + d * self.head_stride
    }

    fn head_b(&self, d: usize, dims: &PolicyDims) -> usize {
        self.head_w(d) + dims.bins * (dims.hidden + dims.embed)
    }
}

/// Weights of the token policy; also used for the frozen reference copy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    dims: PolicyDims,
    layout: Layout,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogProbResult {
    pub total: f64,
    pub per_dim: Vec<f64>,
}

/// Gradient with the same flat layout as [`PolicyParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros_like(p: &PolicyParams) -> Self {
        Gradient(vec![0.0; p.len()])
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

struct Encoded {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stabilized log-softmax; errors on non-finite output.
fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NumericOverflow);
    }
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let out: Vec<f64> = logits.iter().map(|l| l - lse).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericOverflow);
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl PolicyParams {
    pub fn zeros(dims: PolicyDims) -> Self {
        let layout = Layout::new(&dims);
        Self {
            dims,
            layout,
            values: vec![0.0; layout.total],
        }
    }

    /// Scaled-uniform initialization. Heads start small so the initial
    /// token distribution is close to uniform.
    pub fn init(seed: u64, dims: PolicyDims) -> Self {
        let mut p = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = p.layout;
        let d = dims;
        let mut fill = |vals: &mut [f64], bound: f64| {
            for v in vals {
                *v = rng.random_range(-bound..bound);
            }
        };
        fill(
            &mut p.values[l.w1..l.b1],
            1.0 / (d.obs_dim as f64).sqrt(),
        );
        fill(&mut p.values[l.w2..l.b2], 1.0 / (d.hidden as f64).sqrt());
        fill(&mut p.values[l.embed..l.heads], 0.1);
        let head_bound = 0.1 / ((d.hidden + d.embed) as f64).sqrt();
        for k in 0..d.dims {
            let (w, b) = (l.head_w(k), l.head_b(k, &d));
            fill(&mut p.values[w..b], head_bound);
        }
        p
    }

    pub fn dims(&self) -> &PolicyDims {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Mutable view of head `d`'s bias (one entry per bin).
    pub fn head_bias_mut(&mut self, d: usize) -> &mut [f64] {
        let start = self.layout.head_b(d, &self.dims);
        &mut self.values[start..start + self.dims.bins]
    }

    /// Offset of head `d`'s bias inside the flat buffer.
    pub fn head_bias_offset(&self, d: usize) -> usize {
        self.layout.head_b(d, &self.dims)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_obs(&self, obs: &[f64]) -> Result<()> {
        if obs.len() != self.dims.obs_dim {
            return Err(Error::ShapeMismatch(format!(
                "observation has {} dims, policy expects {}",
                obs.len(),
                self.dims.obs_dim
            )));
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &ActionTokens) -> Result<()> {
        if tokens.len() != self.dims.dims {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens for {} action dims",
                tokens.len(),
                self.dims.dims
            )));
        }
        if let Some(&t) = tokens.0.iter().find(|&&t| t as usize >= self.dims.bins) {
            return Err(Error::TokenOutOfRange {
                token: t,
                bins: self.dims.bins as u32,
            });
        }
        Ok(())
    }

    fn encode(&self, obs: &[f64]) -> Encoded {
        let (d, l) = (&self.dims, &self.layout);
        let v = &self.values;
        let h1: Vec<f64> = (0..d.hidden)
            .map(|i| {
                let row = &v[l.w1 + i * d.obs_dim..l.w1 + (i + 1) * d.obs_dim];
                (v[l.b1 + i] + dot(row, obs)).tanh()
            })
            .collect();
        let h2: Vec<f64> = (0..d.hidden)
            .map(|i| {
                let row = &v[l.w2 + i * d.hidden..l.w2 + (i + 1) * d.hidden];
                (v[l.b2 + i] + dot(row, &h1)).tanh()
            })
            .collect();
        Encoded { h1, h2 }
    }

    fn embedding(&self, prev: Option<u32>) -> Option<&[f64]> {
        prev.map(|t| {
            let e = self.dims.embed;
            let start = self.layout.embed + t as usize * e;
            &self.values[start..start + e]
        })
    }

    fn logits(&self, d: usize, h2: &[f64], prev: Option<u32>) -> Vec<f64> {
        let dims = &self.dims;
        let width = dims.hidden + dims.embed;
        let w = self.layout.head_w(d);
        let b = self.layout.head_b(d, dims);
        let emb = self.embedding(prev);
        (0..dims.bins)
            .map(|k| {
                let row = &self.values[w + k * width..w + (k + 1) * width];
                let mut z = self.values[b + k] + dot(&row[..dims.hidden], h2);
                if let Some(e) = emb {
                    z += dot(&row[dims.hidden..], e);
                }
                z
            })
            .collect()
    }

    pub fn log_prob(&self, obs: &[f64], tokens: &ActionTokens) -> Result<LogProbResult> {
        self.check_obs(obs)?;
        self.check_tokens(tokens)?;
        let enc = self.encode(obs);
        let mut per_dim = Vec::with_capacity(self.dims.dims);
        let mut prev = None;
        for (d, &tok) in tokens.0.iter().enumerate() {
            let lp = log_softmax(&self.logits(d, &enc.h2, prev))?;
            per_dim.push(lp[tok as usize]);
            prev = Some(tok);
        }
        Ok(LogProbResult {
            total: per_dim.iter().sum(),
            per_dim,
        })
    }

    /// Per-dimension probability vectors under teacher forcing on `tokens`.
    pub fn distributions(&self, obs: &[f64], tokens: &ActionTokens) -> Result<Vec<Vec<f64>>> {
        self.check_obs(obs)?;
        self.check_tokens(tokens)?;
        let enc = self.encode(obs);
        let mut prev = None;
        let mut out = Vec::with_capacity(self.dims.dims);
        for (d, &tok) in tokens.0.iter().enumerate() {
            let lp = log_softmax(&self.logits(d, &enc.h2, prev))?;
            out.push(lp.into_iter().map(f64::exp).collect());
            prev = Some(tok);
        }
        Ok(out)
    }

    pub fn greedy_decode(&self, obs: &[f64]) -> ActionTokens {
        let enc = self.encode(obs);
        let mut prev = None;
        let mut out = Vec::with_capacity(self.dims.dims);
        for d in 0..self.dims.dims {
            let tok = argmax(&self.logits(d, &enc.h2, prev)) as u32;
            out.push(tok);
            prev = Some(tok);
        }
        ActionTokens(out)
    }

    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> ActionTokens {
        self.sample_tempered(obs, 1.0, rng)
    }

    /// Autoregressive categorical sampling from `softmax(logits / temperature)`.
    pub fn sample_tempered<R: Rng + ?Sized>(
        &self,
        obs: &[f64],
        temperature: f64,
        rng: &mut R,
    ) -> ActionTokens {
        let enc = self.encode(obs);
        let mut prev = None;
        let mut out = Vec::with_capacity(self.dims.dims);
        for d in 0..self.dims.dims {
            let logits = self.logits(d, &enc.h2, prev);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits
                .iter()
                .map(|l| ((l - m) / temperature).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut tok = weights.len() - 1;
            for (k, w) in weights.iter().enumerate() {
                if u < *w {
                    tok = k;
                    break;
                }
                u -= w;
            }
            out.push(tok as u32);
            prev = Some(tok as u32);
        }
        ActionTokens(out)
    }

    pub fn grad_log_prob(&self, obs: &[f64], tokens: &ActionTokens) -> Result<Gradient> {
        let mut g = Gradient::zeros_like(self);
        let weights = vec![1.0; self.dims.dims];
        self.accumulate_grad(obs, tokens, &weights, &mut g)?;
        Ok(g)
    }

    /// Adds `Σ_d dim_weights[d] · ∇ log π(token_d | o, token_{<d})` into `grad`
    /// and returns the forward log-probabilities.
    pub fn accumulate_grad(
        &self,
        obs: &[f64],
        tokens: &ActionTokens,
        dim_weights: &[f64],
        grad: &mut Gradient,
    ) -> Result<LogProbResult> {
        self.check_obs(obs)?;
        self.check_tokens(tokens)?;
        let dims = self.dims;
        let l = self.layout;
        let v = &self.values;
        let g = &mut grad.0;
        let width = dims.hidden + dims.embed;
        let enc = self.encode(obs);
        let mut per_dim = Vec::with_capacity(dims.dims);
        let mut dh2 = vec![0.0; dims.hidden];
        let mut prev: Option<u32> = None;
        for (d, &tok) in tokens.0.iter().enumerate() {
            let lp = log_softmax(&self.logits(d, &enc.h2, prev))?;
            per_dim.push(lp[tok as usize]);
            let wd = dim_weights[d];
            if wd != 0.0 {
                let w = l.head_w(d);
                let b = l.head_b(d, &dims);
                let emb_off = prev.map(|t| l.embed + t as usize * dims.embed);
                let mut demb = vec![0.0; dims.embed];
                for (k, lpk) in lp.iter().enumerate() {
                    let target = if k == tok as usize { 1.0 } else { 0.0 };
                    let dz = wd * (target - lpk.exp());
                    if dz == 0.0 {
                        continue;
                    }
                    g[b + k] += dz;
                    let row = w + k * width;
                    for j in 0..dims.hidden {
                        g[row + j] += dz * enc.h2[j];
                        dh2[j] += dz * v[row + j];
                    }
                    if let Some(eo) = emb_off {
                        for j in 0..dims.embed {
                            g[row + dims.hidden + j] += dz * v[eo + j];
                            demb[j] += dz * v[row + dims.hidden + j];
                        }
                    }
                }
                if let Some(eo) = emb_off {
                    for j in 0..dims.embed {
                        g[eo + j] += demb[j];
                    }
                }
            }
            prev = Some(tok);
        }
        let dz2: Vec<f64> = (0..dims.hidden)
            .map(|i| dh2[i] * (1.0 - enc.h2[i] * enc.h2[i]))
            .collect();
        let mut dh1 = vec![0.0; dims.hidden];
        for i in 0..dims.hidden {
            if dz2[i] == 0.0 {
                continue;
            }
            g[l.b2 + i] += dz2[i];
            let row = l.w2 + i * dims.hidden;
            for j in 0..dims.hidden {
                g[row + j] += dz2[i] * enc.h1[j];
                dh1[j] += dz2[i] * v[row + j];
            }
        }
        for i in 0..dims.hidden {
            let dz1 = dh1[i] * (1.0 - enc.h1[i] * enc.h1[i]);
            if dz1 == 0.0 {
                continue;
            }
            g[l.b1 + i] += dz1;
            let row = l.w1 + i * dims.obs_dim;
            for j in 0..dims.obs_dim {
                g[row + j] += dz1 * obs[j];
            }
        }
        Ok(LogProbResult {
            total: per_dim.iter().sum(),
            per_dim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::with_capacity(64 + 8 * self.values.len());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let d = self.dims;
        for x in [d.obs_dim, d.hidden, d.embed, d.bins, d.dims] {
            buf.extend_from_slice(&(x as u32).to_le_bytes());
        }
        buf.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Loads a checkpoint, rejecting it when `expected` is given and differs.
    pub fn load(path: &Path, expected: Option<&PolicyDims>) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let bad = |msg: &str| Error::Parse {
            line: 0,
            msg: format!("{}: {msg}", path.display()),
        };
        if bytes.len() < 40 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a policy checkpoint"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(8);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let dims = PolicyDims {
            obs_dim: u32_at(12) as usize,
            hidden: u32_at(16) as usize,
            embed: u32_at(20) as usize,
            bins: u32_at(24) as usize,
            dims: u32_at(28) as usize,
        };
        if let Some(e) = expected {
            if *e != dims {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint {dims:?} does not match expected {e:?}"
                )));
            }
        }
        let count = u64::from_le_bytes(bytes[32..40].try_into().unwrap()) as usize;
        let mut p = Self::zeros(dims);
        if count != p.len() || bytes.len() != 40 + 8 * count {
            return Err(bad("parameter count does not match header"));
        }
        for (i, v) in p.values.iter_mut().enumerate() {
            let o = 40 + 8 * i;
            *v = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PolicyDims {
        PolicyDims {
            obs_dim: 4,
            hidden: 6,
            embed: 3,
            bins: 5,
            dims: 3,
        }
    }

    fn obs(n: usize, k: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 7 + k * 3) % 11) as f64 / 11.0 - 0.4).collect()
    }

    #[test]
    fn zero_weights_are_uniform() {
        let p = PolicyParams::zeros(PolicyDims {
            bins: 2,
            ..tiny()
        });
        let r = p.log_prob(&obs(4, 0), &ActionTokens(vec![0, 1, 1])).unwrap();
        for lp in &r.per_dim {
            assert!((lp - 0.5f64.ln()).abs() < 1e-15);
        }
        assert_eq!(p.greedy_decode(&obs(4, 1)), ActionTokens(vec![0, 0, 0]));
    }

    #[test]
    fn init_is_seeded_and_near_uniform() {
        let d = PolicyDims::default();
        let a = PolicyParams::init(3, d);
        assert_eq!(a, PolicyParams::init(3, d));
        assert_ne!(a, PolicyParams::init(4, d));
        let o = [0.3, 0.2, 0.1, 0.5, 0.7, 0.5, 0.0, 0.05, -0.02, 0.01, 0.0];
        for t in [0u32, 17, 128, 255] {
            let r = a.log_prob(&o, &ActionTokens(vec![t, 255 - t, t])).unwrap();
            for lp in r.per_dim {
                assert!((lp + 256f64.ln()).abs() < 1.0, "{lp}");
            }
        }
    }

    #[test]
    fn uniform_bias_gradient_identity() {
        let d = tiny();
        let p = PolicyParams::zeros(d);
        let toks = ActionTokens(vec![2, 4, 0]);
        let g = p.grad_log_prob(&obs(4, 2), &toks).unwrap();
        for (dim, &tok) in toks.0.iter().enumerate() {
            let off = p.head_bias_offset(dim);
            for k in 0..d.bins {
                let expect = if k == tok as usize { 1.0 } else { 0.0 } - 1.0 / d.bins as f64;
                assert!((g.0[off + k] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn saturated_logit_always_sampled() {
        let mut p = PolicyParams::zeros(tiny());
        for d in 0..3 {
            p.head_bias_mut(d)[3] = 50.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            assert_eq!(p.sample(&obs(4, 0), &mut rng), ActionTokens(vec![3, 3, 3]));
        }
    }

    #[test]
    fn shift_invariance_of_log_prob() {
        let mut p = PolicyParams::init(5, tiny());
        let toks = ActionTokens(vec![1, 2, 3]);
        let before = p.log_prob(&obs(4, 3), &toks).unwrap();
        p.head_bias_mut(1).iter_mut().for_each(|b| *b += 7.5);
        let after = p.log_prob(&obs(4, 3), &toks).unwrap();
        for (a, b) in before.per_dim.iter().zip(&after.per_dim) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn overflow_is_reported() {
        let mut p = PolicyParams::init(5, tiny());
        p.head_bias_mut(0)[0] = f64::INFINITY;
        assert!(matches!(
            p.log_prob(&obs(4, 0), &ActionTokens(vec![0, 0, 0])),
            Err(Error::NumericOverflow)
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.bin");
        let p = PolicyParams::init(9, tiny());
        p.save(&path).unwrap();
        assert_eq!(PolicyParams::load(&path, Some(&tiny())).unwrap(), p);
        let other = PolicyDims {
            hidden: 7,
            ..tiny()
        };
        assert!(matches!(
            PolicyParams::load(&path, Some(&other)),
            Err(Error::ShapeMismatch(_))
        ));
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            PolicyParams::load(&path, None),
            Err(Error::Version { found: 9, .. })
        ));
    }
}
