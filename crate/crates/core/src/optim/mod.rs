//! Training objectives and the parameter update rule.
//!
//! Every objective is exposed both as a free function and as an
//! [`Objective`] registered by name in an [`ObjectiveRegistry`], so the loop
//! and CLI can pick one at runtime (`hapo`, `bc`, `dagger`, `sirius`,
//! `dpo_synth`, `kto_vanilla`).

mod adam;
mod baselines;
mod hapo;
mod objective;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use baselines::{
    baseline_loss, bc_loss_and_grad, dpo_loss_and_grad, make_dpo_pairs, weighted_bc_loss_and_grad,
    BaselineKind,
};
pub use hapo::{
    adaptive_weights, hapo_loss_and_grad, kl_estimate, lambdas_from_weights, preference_loss_and_grad,
    reward, reward_mask,
};
pub use objective::{Objective, ObjectiveContext, ObjectiveRegistry};

use crate::config::{parse_value, FlatConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HapoConfig {
    /// Desirable sharpness; `None` means "equal to the batch size".
    pub beta_d: Option<f64>,
    /// Undesirable sharpness; `None` means "equal to the batch size".
    pub beta_u: Option<f64>,
    pub lr: f64,
    pub batch: usize,
    pub k: usize,
    pub exclude_gripper_reject: bool,
    pub kl_detached: bool,
    /// Inverse temperature applied to `r - z0` inside the sigmoid.
    pub reward_scale: f64,
    /// Let autonomous `c=1` interaction steps join the desirable pool.
    pub include_policy_steps: bool,
    pub sirius_weight: f64,
    /// Decay the learning rate linearly to zero over one optimization phase.
    pub lr_decay: bool,
    pub dpo_beta: f64,
    pub dpo_noise: f64,
}

impl Default for HapoConfig {
    fn default() -> Self {
        Self {
            beta_d: None,
            beta_u: None,
            lr: 5e-5,
            batch: 8,
            k: 10,
            exclude_gripper_reject: true,
            kl_detached: true,
            reward_scale: 1.0,
            include_policy_steps: false,
            sirius_weight: 2.0,
            lr_decay: false,
            dpo_beta: 0.1,
            dpo_noise: 0.1,
        }
    }
}

impl HapoConfig {
    pub fn beta_d(&self) -> f64 {
        self.beta_d.unwrap_or(self.batch as f64)
    }

    pub fn beta_u(&self) -> f64 {
        self.beta_u.unwrap_or(self.batch as f64)
    }

    /// Learning rate for `step` of a `steps`-long optimization phase.
    pub fn lr_at(&self, step: usize, steps: usize) -> f64 {
        if self.lr_decay && steps > 0 {
            self.lr * (1.0 - step as f64 / steps as f64)
        } else {
            self.lr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta_D", self.beta_d()),
            ("beta_U", self.beta_u()),
            ("lr", self.lr),
            ("reward_scale", self.reward_scale),
            ("sirius_weight", self.sirius_weight),
            ("dpo_beta", self.dpo_beta),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.dpo_noise < 0.0 {
            return Err(Error::Config("dpo_noise must be >= 0".into()));
        }
        Ok(())
    }
}

fn parse_beta(key: &str, value: &str) -> Result<Option<f64>> {
    if value.trim() == "batch" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

impl FlatConfig for HapoConfig {
    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("beta_D".into(), self.beta_d.map_or("batch".into(), |b| b.to_string())),
            ("beta_U".into(), self.beta_u.map_or("batch".into(), |b| b.to_string())),
            ("lr".into(), self.lr.to_string()),
            ("batch".into(), self.batch.to_string()),
            ("K".into(), self.k.to_string()),
            ("exclude_gripper_reject".into(), self.exclude_gripper_reject.to_string()),
            ("kl_detached".into(), self.kl_detached.to_string()),
            ("reward_scale".into(), self.reward_scale.to_string()),
            ("include_policy_steps".into(), self.include_policy_steps.to_string()),
            ("sirius_weight".into(), self.sirius_weight.to_string()),
            ("lr_decay".into(), self.lr_decay.to_string()),
            ("dpo_beta".into(), self.dpo_beta.to_string()),
            ("dpo_noise".into(), self.dpo_noise.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            // `batch` ties the sharpness to the batch size.
            "beta_D" | "beta_d" => self.beta_d = parse_beta(key, value)?,
            "beta_U" | "beta_u" => self.beta_u = parse_beta(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "batch" => self.batch = parse_value(key, value)?,
            "K" | "k" => self.k = parse_value(key, value)?,
            "exclude_gripper_reject" => self.exclude_gripper_reject = parse_value(key, value)?,
            "kl_detached" => self.kl_detached = parse_value(key, value)?,
            "reward_scale" => self.reward_scale = parse_value(key, value)?,
            "include_policy_steps" => self.include_policy_steps = parse_value(key, value)?,
            "sirius_weight" => self.sirius_weight = parse_value(key, value)?,
            "lr_decay" => self.lr_decay = parse_value(key, value)?,
            "dpo_beta" => self.dpo_beta = parse_value(key, value)?,
            "dpo_noise" => self.dpo_noise = parse_value(key, value)?,
            _ => return Err(Error::Config(format!("unknown hapo key `{key}`"))),
        }
        Ok(())
    }
}

/// Per-sample L1 errors, normalized weights and the resulting λ values.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeights {
    pub l: Vec<f64>,
    pub w: Vec<f64>,
    pub lambda: Vec<f64>,
    /// Set when every L1 error was zero and uniform weights were used.
    pub uniform_fallback: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleDiag {
    pub desirable: bool,
    pub reward: f64,
    pub lambda: f64,
    pub utility: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub mean_reward_desirable: f64,
    pub mean_reward_undesirable: f64,
    pub z0: f64,
    pub samples: Vec<SampleDiag>,
}

impl LossReport {
    pub(crate) fn plain(loss: f64) -> Self {
        Self {
            loss,
            mean_reward_desirable: 0.0,
            mean_reward_undesirable: 0.0,
            z0: 0.0,
            samples: Vec::new(),
        }
    }

    /// Mean λ over desirable and undesirable samples (0 when a side is absent).
    pub fn lambda_means(&self) -> (f64, f64) {
        let mean = |want: bool| {
            let v: Vec<f64> = self
                .samples
                .iter()
                .filter(|s| s.desirable == want)
                .map(|s| s.lambda)
                .collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        (mean(true), mean(false))
    }

    /// One line-delimited metrics record.
    pub fn metrics_record(&self, step: usize, objective: &str) -> serde_json::Value {
        let (ld, lu) = self.lambda_means();
        serde_json::json!({
            "step": step,
            "objective": objective,
            "loss": self.loss,
            "z0": self.z0,
            "mean_reward_desirable": self.mean_reward_desirable,
            "mean_reward_undesirable": self.mean_reward_undesirable,
            "lambda_desirable_mean": ld,
            "lambda_undesirable_mean": lu,
        })
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln σ(x)`, computed without overflow.
pub(crate) fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}
