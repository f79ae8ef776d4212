//! Intervenors: who takes over a rollout, when, and with which action.

use std::collections::BTreeMap;

use crate::env::{self, ContinuousAction, EnvState, TaskSpec};
use crate::error::{Error, Result};

/// One executed step of the current episode.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub state: EnvState,
    pub action: ContinuousAction,
    pub by_intervenor: bool,
}

/// Headless stand-in for a human supervising a rollout.
pub trait Intervenor: Send {
    fn name(&self) -> &str;

    /// Called at the start of every episode.
    fn reset(&mut self, _spec: &TaskSpec) {}

    /// Queried each step while the policy is in control.
    fn wants_control(&mut self, state: &EnvState, trace: &[TraceEntry], spec: &TaskSpec) -> bool;

    /// Action to execute while in control; must respect action bounds.
    fn corrective_action(&mut self, state: &EnvState, spec: &TaskSpec) -> Result<ContinuousAction>;

    /// Queried each step while in control, before acting.
    fn should_release(&mut self, state: &EnvState, trace: &[TraceEntry], spec: &TaskSpec) -> bool;
}

/// Never intervenes.
pub struct NullIntervenor;

impl Intervenor for NullIntervenor {
    fn name(&self) -> &str {
        "null"
    }

    fn wants_control(&mut self, _: &EnvState, _: &[TraceEntry], _: &TaskSpec) -> bool {
        false
    }

    fn corrective_action(&mut self, _: &EnvState, _: &TaskSpec) -> Result<ContinuousAction> {
        Err(Error::IntervenorUnavailable)
    }

    fn should_release(&mut self, _: &EnvState, _: &[TraceEntry], _: &TaskSpec) -> bool {
        true
    }
}

/// Holds control for the whole episode and acts as the scripted expert.
pub struct ExpertIntervenor;

impl Intervenor for ExpertIntervenor {
    fn name(&self) -> &str {
        "expert"
    }

    fn wants_control(&mut self, _: &EnvState, _: &[TraceEntry], _: &TaskSpec) -> bool {
        true
    }

    fn corrective_action(&mut self, state: &EnvState, spec: &TaskSpec) -> Result<ContinuousAction> {
        Ok(env::expert_action(state, spec).clamped())
    }

    fn should_release(&mut self, _: &EnvState, _: &[TraceEntry], _: &TaskSpec) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntervenorConfig {
    /// L1 gap between policy and expert action that counts as a deviation.
    pub deviation_threshold: f64,
    /// Consecutive deviating policy steps that trigger a takeover.
    pub deviation_steps: usize,
    /// Consecutive policy steps without subgoal progress that trigger a takeover.
    pub stall_steps: usize,
    /// Steps the intervenor keeps control before releasing.
    pub hold_steps: usize,
    /// `(start step, length)` windows for the schedule intervenor.
    pub schedule: Vec<(u32, u32)>,
}

impl Default for IntervenorConfig {
    fn default() -> Self {
        Self {
            deviation_threshold: 0.8,
            deviation_steps: 3,
            stall_steps: 15,
            hold_steps: 10,
            schedule: Vec::new(),
        }
    }
}

/// Takes over after sustained deviation from the expert or a stall, acts as
/// the expert for a fixed number of steps, then hands control back.
pub struct ThresholdIntervenor {
    cfg: IntervenorConfig,
    deviations: usize,
    stalled: usize,
    last_distance: Option<(bool, f64)>,
    held: usize,
}

impl ThresholdIntervenor {
    pub fn new(cfg: IntervenorConfig) -> Self {
        Self {
            cfg,
            deviations: 0,
            stalled: 0,
            last_distance: None,
            held: 0,
        }
    }

    fn clear(&mut self) {
        self.deviations = 0;
        self.stalled = 0;
        self.last_distance = None;
        self.held = 0;
    }
}

impl Intervenor for ThresholdIntervenor {
    fn name(&self) -> &str {
        "threshold"
    }

    fn reset(&mut self, _spec: &TaskSpec) {
        self.clear();
    }

    fn wants_control(&mut self, state: &EnvState, trace: &[TraceEntry], spec: &TaskSpec) -> bool {
        if let Some(last) = trace.last().filter(|e| !e.by_intervenor) {
            let gap = last.action.l1_distance(&env::expert_action(&last.state, spec));
            if gap > self.cfg.deviation_threshold {
                self.deviations += 1;
            } else {
                self.deviations = 0;
            }
            let d = env::subgoal_distance(state);
            match self.last_distance {
                Some((holding, prev)) if holding == state.holding && d >= prev => self.stalled += 1,
                _ => self.stalled = 0,
            }
            self.last_distance = Some((state.holding, d));
        }
        let take = self.deviations >= self.cfg.deviation_steps || self.stalled >= self.cfg.stall_steps;
        if take {
            self.clear();
        }
        take
    }

    fn corrective_action(&mut self, state: &EnvState, spec: &TaskSpec) -> Result<ContinuousAction> {
        self.held += 1;
        Ok(env::expert_action(state, spec).clamped())
    }

    fn should_release(&mut self, _: &EnvState, _: &[TraceEntry], _: &TaskSpec) -> bool {
        if self.held >= self.cfg.hold_steps {
            self.clear();
            true
        } else {
            false
        }
    }
}

/// Takes control on fixed step windows and acts as the expert.
pub struct ScheduleIntervenor {
    windows: Vec<(u32, u32)>,
}

impl ScheduleIntervenor {
    pub fn new(windows: Vec<(u32, u32)>) -> Self {
        Self { windows }
    }

    fn inside(&self, t: u32) -> bool {
        self.windows.iter().any(|&(s, len)| t >= s && t < s + len)
    }
}

impl Intervenor for ScheduleIntervenor {
    fn name(&self) -> &str {
        "schedule"
    }

    fn wants_control(&mut self, state: &EnvState, _: &[TraceEntry], _: &TaskSpec) -> bool {
        self.inside(state.t)
    }

    fn corrective_action(&mut self, state: &EnvState, spec: &TaskSpec) -> Result<ContinuousAction> {
        Ok(env::expert_action(state, spec).clamped())
    }

    fn should_release(&mut self, state: &EnvState, _: &[TraceEntry], _: &TaskSpec) -> bool {
        !self.inside(state.t)
    }
}

type Factory = Box<dyn Fn(&IntervenorConfig) -> Box<dyn Intervenor> + Send + Sync>;

/// Intervenors constructible by name.
pub struct IntervenorRegistry {
    factories: BTreeMap<String, Factory>,
}

impl Default for IntervenorRegistry {
    fn default() -> Self {
        let mut r = Self {
            factories: BTreeMap::new(),
        };
        r.register("null", |_| Box::new(NullIntervenor));
        r.register("expert", |_| Box::new(ExpertIntervenor));
        r.register("threshold", |c| Box::new(ThresholdIntervenor::new(c.clone())));
        r.register("schedule", |c| Box::new(ScheduleIntervenor::new(c.schedule.clone())));
        r
    }
}

impl IntervenorRegistry {
    pub fn register<F>(&mut self, name: &str, factory: F)
    where
        F: Fn(&IntervenorConfig) -> Box<dyn Intervenor> + Send + Sync + 'static,
    {
        self.factories.insert(name.to_string(), Box::new(factory));
    }

    pub fn build(&self, name: &str, cfg: &IntervenorConfig) -> Result<Box<dyn Intervenor>> {
        self.factories
            .get(name)
            .map(|f| f(cfg))
            .ok_or_else(|| Error::Unknown {
                kind: "intervenor",
                name: name.to_string(),
            })
    }

    pub fn names(&self) -> Vec<&str> {
        self.factories.keys().map(String::as_str).collect()
    }
}
