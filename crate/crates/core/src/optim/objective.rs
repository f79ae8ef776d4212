use std::collections::BTreeMap;

use tracing::warn;

use super::{
    baseline_loss, bc_loss_and_grad, hapo_loss_and_grad, make_dpo_pairs, BaselineKind, HapoConfig,
    LossReport,
};
use crate::data::{Dataset, Quota, Sample, StepClass};
use crate::error::{Error, Result};
use crate::policy::{Gradient, PolicyParams};
use crate::rng::LabRng;
use crate::tokenizer::TokenizerConfig;

/// Everything an objective may read while drawing a batch or computing a loss.
#[derive(Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub params: &'a PolicyParams,
    pub reference: &'a PolicyParams,
    pub cfg: &'a HapoConfig,
    pub tokenizer: &'a TokenizerConfig,
}

/// A training objective: how to draw its batch and how to score it.
pub trait Objective: Send + Sync {
    fn name(&self) -> &'static str;

    fn draw_batch(&self, ds: &Dataset, ctx: &ObjectiveContext<'_>, rng: &mut LabRng) -> Result<Vec<Sample>>;

    fn loss_and_grad(&self, ctx: &ObjectiveContext<'_>, batch: &[Sample]) -> Result<(LossReport, Gradient)>;
}

const DESIRABLE_POOL: [StepClass; 3] = [StepClass::Expert, StepClass::Intervention, StepClass::Policy];

fn require(ds: &Dataset, class: StepClass) -> Result<()> {
    if ds.index().get(class).is_empty() {
        return Err(Error::EmptyClass(class.name()));
    }
    Ok(())
}

/// Balanced 50/25/25 batch; an empty failure class moves its share onto
/// interventions, an empty intervention class is an error.
fn preference_batch(ds: &Dataset, cfg: &HapoConfig, rng: &mut LabRng) -> Result<Vec<Sample>> {
    let mut quota = Quota::balanced(cfg.batch)?;
    if ds.index().intervention.is_empty() {
        return Err(Error::NoInterventions);
    }
    if ds.index().failure.is_empty() {
        warn!("failure class empty; assigning its batch share to interventions");
        quota = quota.without_failures();
    }
    ds.sample_quota(quota, cfg.include_policy_steps, rng)
}

pub struct Bc;

impl Objective for Bc {
    fn name(&self) -> &'static str {
        "bc"
    }

    fn draw_batch(&self, ds: &Dataset, ctx: &ObjectiveContext<'_>, rng: &mut LabRng) -> Result<Vec<Sample>> {
        require(ds, StepClass::Expert)?;
        ds.sample_classes(&[StepClass::Expert], ctx.cfg.batch, rng)
    }

    fn loss_and_grad(&self, ctx: &ObjectiveContext<'_>, batch: &[Sample]) -> Result<(LossReport, Gradient)> {
        bc_loss_and_grad(ctx.params, batch)
    }
}

pub struct Hapo;

impl Objective for Hapo {
    fn name(&self) -> &'static str {
        "hapo"
    }

    fn draw_batch(&self, ds: &Dataset, ctx: &ObjectiveContext<'_>, rng: &mut LabRng) -> Result<Vec<Sample>> {
        preference_batch(ds, ctx.cfg, rng)
    }

    fn loss_and_grad(&self, ctx: &ObjectiveContext<'_>, batch: &[Sample]) -> Result<(LossReport, Gradient)> {
        hapo_loss_and_grad(ctx.params, ctx.reference, batch, ctx.cfg, ctx.tokenizer)
    }
}

/// Wraps a [`BaselineKind`] with its data selection.
pub struct Baseline(pub BaselineKind);

impl Objective for Baseline {
    fn name(&self) -> &'static str {
        self.0.name()
    }

    fn draw_batch(&self, ds: &Dataset, ctx: &ObjectiveContext<'_>, rng: &mut LabRng) -> Result<Vec<Sample>> {
        match self.0 {
            BaselineKind::Dagger | BaselineKind::Sirius => {
                ds.sample_classes(&DESIRABLE_POOL, ctx.cfg.batch, rng)
            }
            BaselineKind::DpoSynth => {
                let mut batch = ds.sample_classes(
                    &[StepClass::Expert, StepClass::Intervention],
                    ctx.cfg.batch,
                    rng,
                )?;
                make_dpo_pairs(ctx.reference, &mut batch, ctx.tokenizer, ctx.cfg.dpo_noise, rng)?;
                Ok(batch)
            }
            BaselineKind::KtoVanilla => preference_batch(ds, ctx.cfg, rng),
        }
    }

    fn loss_and_grad(&self, ctx: &ObjectiveContext<'_>, batch: &[Sample]) -> Result<(LossReport, Gradient)> {
        baseline_loss(self.0, ctx.params, ctx.reference, batch, ctx.cfg, ctx.tokenizer)
    }
}

/// Objectives selectable by name.
pub struct ObjectiveRegistry {
    entries: BTreeMap<&'static str, Box<dyn Objective>>,
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Bc));
        r.register(Box::new(Hapo));
        for k in [
            BaselineKind::Dagger,
            BaselineKind::Sirius,
            BaselineKind::DpoSynth,
            BaselineKind::KtoVanilla,
        ] {
            r.register(Box::new(Baseline(k)));
        }
        r
    }
}

impl ObjectiveRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Adds or replaces an objective under its own name.
    pub fn register(&mut self, objective: Box<dyn Objective>) {
        self.entries.insert(objective.name(), objective);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Objective> {
        self.entries
            .get(name)
            .map(|b| b.as_ref())
            .ok_or_else(|| Error::Unknown {
                kind: "objective",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.keys().copied().collect()
    }
}
