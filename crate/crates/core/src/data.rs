//! Intervention-labeled trajectories, K-window relabeling, balanced sampling
//! and the line-delimited dataset file.

use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ContinuousAction, TaskSpec};
use crate::error::{Error, Result};
use crate::tokenizer::{ActionTokens, TokenizerConfig};

pub const DATASET_VERSION: u32 = 1;

/// Desirability label `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Label {
    /// Inside the K-step window before an intervention onset.
    Failure = 0,
    /// Expert or autonomous step.
    Acceptable = 1,
    /// Executed while the intervenor held control.
    Intervention = 2,
}

impl Label {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Label::Failure),
            1 => Some(Label::Acceptable),
            2 => Some(Label::Intervention),
            _ => None,
        }
    }

    pub fn is_desirable(self) -> bool {
        self != Label::Failure
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Expert,
    Interaction,
}

/// The four partitions of all stored steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepClass {
    Expert,
    Intervention,
    Policy,
    Failure,
}

impl StepClass {
    pub fn name(self) -> &'static str {
        match self {
            StepClass::Expert => "expert",
            StepClass::Intervention => "intervention",
            StepClass::Policy => "policy",
            StepClass::Failure => "failure",
        }
    }

    pub fn of(source: Source, c: Label) -> Self {
        match (source, c) {
            (_, Label::Intervention) => StepClass::Intervention,
            (_, Label::Failure) => StepClass::Failure,
            (Source::Expert, Label::Acceptable) => StepClass::Expert,
            (Source::Interaction, Label::Acceptable) => StepClass::Policy,
        }
    }
}

impl fmt::Display for StepClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub o: Vec<f64>,
    pub a: ContinuousAction,
    pub tokens: ActionTokens,
    pub c: Label,
    pub t: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub spec: TaskSpec,
    pub rollout_id: u64,
    /// Deployment-optimization iteration that produced the trajectory.
    pub iteration: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub source: Source,
    pub success: bool,
    pub meta: EpisodeMeta,
}

impl Trajectory {
    pub fn labels(&self) -> Vec<Label> {
        self.steps.iter().map(|s| s.c).collect()
    }
}

/// Applies the K-window rule to a label sequence: every maximal run of
/// interventions starting at `s` marks `max(0, s-K)..s` as failures, without
/// ever downgrading an intervention label. Everything else becomes acceptable.
pub fn relabel_labels(labels: &[Label], k: usize) -> Vec<Label> {
    let mut out = vec![Label::Acceptable; labels.len()];
    // Walk backwards: `remaining` counts window steps left before the next onset.
    let mut remaining = 0usize;
    for i in (0..labels.len()).rev() {
        if labels[i] == Label::Intervention {
            out[i] = Label::Intervention;
            let onset = i == 0 || labels[i - 1] != Label::Intervention;
            remaining = if onset { k } else { 0 };
        } else if remaining > 0 {
            out[i] = Label::Failure;
            remaining -= 1;
        }
    }
    out
}

pub fn relabel_interventions(traj: &Trajectory, k: usize) -> Result<Trajectory> {
    if traj.source != Source::Interaction {
        return Err(Error::RelabelExpert);
    }
    let labels = relabel_labels(&traj.labels(), k);
    let mut out = traj.clone();
    for (s, c) in out.steps.iter_mut().zip(labels) {
        s.c = c;
    }
    Ok(out)
}

/// Position of a step inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StepRef {
    pub traj: usize,
    pub step: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassIndex {
    pub expert: Vec<StepRef>,
    pub intervention: Vec<StepRef>,
    pub policy: Vec<StepRef>,
    pub failure: Vec<StepRef>,
}

impl ClassIndex {
    pub fn get(&self, class: StepClass) -> &[StepRef] {
        match class {
            StepClass::Expert => &self.expert,
            StepClass::Intervention => &self.intervention,
            StepClass::Policy => &self.policy,
            StepClass::Failure => &self.failure,
        }
    }

    fn push(&mut self, class: StepClass, r: StepRef) {
        match class {
            StepClass::Expert => self.expert.push(r),
            StepClass::Intervention => self.intervention.push(r),
            StepClass::Policy => self.policy.push(r),
            StepClass::Failure => self.failure.push(r),
        }
    }

    pub fn total(&self) -> usize {
        self.expert.len() + self.intervention.len() + self.policy.len() + self.failure.len()
    }
}

/// One training example drawn from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub o: Vec<f64>,
    pub a: ContinuousAction,
    pub tokens: ActionTokens,
    pub c: Label,
    pub class: StepClass,
    /// Dispreferred tokens paired with this sample (pairwise objectives only).
    pub rejected: Option<ActionTokens>,
}

impl Sample {
    pub fn from_step(step: &Step, source: Source) -> Self {
        Self {
            o: step.o.clone(),
            a: step.a,
            tokens: step.tokens.clone(),
            c: step.c,
            class: StepClass::of(source, step.c),
            rejected: None,
        }
    }
}

/// Per-class draw counts for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Quota {
    pub expert: usize,
    pub intervention: usize,
    pub failure: usize,
}

impl Quota {
    /// 50% expert, 25% intervention, 25% failure.
    pub fn balanced(batch: usize) -> Result<Self> {
        if batch == 0 || !batch.is_multiple_of(4) {
            return Err(Error::BatchNotDivisible);
        }
        Ok(Self {
            expert: batch / 2,
            intervention: batch / 4,
            failure: batch / 4,
        })
    }

    /// Moves the failure share onto the intervention class.
    pub fn without_failures(self) -> Self {
        Self {
            expert: self.expert,
            intervention: self.intervention + self.failure,
            failure: 0,
        }
    }

    pub fn total(&self) -> usize {
        self.expert + self.intervention + self.failure
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub tokenizer: TokenizerConfig,
    pub env: TaskSpec,
    trajectories: Vec<Trajectory>,
    index: ClassIndex,
}

impl Dataset {
    pub fn new(tokenizer: TokenizerConfig, env: TaskSpec) -> Self {
        Self {
            tokenizer,
            env,
            trajectories: Vec::new(),
            index: ClassIndex::default(),
        }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn index(&self) -> &ClassIndex {
        &self.index
    }

    pub fn len_steps(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn push(&mut self, traj: Trajectory) {
        let ti = self.trajectories.len();
        for (si, s) in traj.steps.iter().enumerate() {
            self.index
                .push(StepClass::of(traj.source, s.c), StepRef { traj: ti, step: si });
        }
        self.trajectories.push(traj);
    }

    pub fn extend(&mut self, trajs: impl IntoIterator<Item = Trajectory>) {
        for t in trajs {
            self.push(t);
        }
    }

    pub fn step(&self, r: StepRef) -> (&Step, Source) {
        let t = &self.trajectories[r.traj];
        (&t.steps[r.step], t.source)
    }

    pub fn sample_at(&self, r: StepRef) -> Sample {
        let (s, src) = self.step(r);
        Sample::from_step(s, src)
    }

    /// Expert demonstrations plus the most recent interaction trajectories.
    pub fn mixture(&self, expert_limit: Option<usize>, interaction_last: Option<usize>) -> Dataset {
        let mut out = Dataset::new(self.tokenizer, self.env);
        let experts = self.trajectories.iter().filter(|t| t.source == Source::Expert);
        out.extend(experts.take(expert_limit.unwrap_or(usize::MAX)).cloned());
        let inter: Vec<&Trajectory> = self
            .trajectories
            .iter()
            .filter(|t| t.source == Source::Interaction)
            .collect();
        let skip = interaction_last.map_or(0, |n| inter.len().saturating_sub(n));
        out.extend(inter.into_iter().skip(skip).cloned());
        out
    }

    /// Uniform draws with replacement from the union of `classes`.
    pub fn sample_classes<R: Rng + ?Sized>(
        &self,
        classes: &[StepClass],
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<Sample>> {
        let sizes: Vec<usize> = classes.iter().map(|c| self.index.get(*c).len()).collect();
        let total: usize = sizes.iter().sum();
        if n > 0 && total == 0 {
            let name = classes.first().map_or("empty", |c| c.name());
            return Err(Error::EmptyClass(name));
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut u = rng.random_range(0..total);
            for (c, size) in classes.iter().zip(&sizes) {
                if u < *size {
                    out.push(self.sample_at(self.index.get(*c)[u]));
                    break;
                }
                u -= size;
            }
        }
        Ok(out)
    }

    /// Draws a batch with the given per-class counts. The desirable autonomous
    /// class (`policy`) joins the expert pool only when `include_policy` is set.
    pub fn sample_quota<R: Rng + ?Sized>(
        &self,
        quota: Quota,
        include_policy: bool,
        rng: &mut R,
    ) -> Result<Vec<Sample>> {
        let check = |class: StepClass, need: usize| -> Result<()> {
            let mut have = self.index.get(class).len();
            if class == StepClass::Expert && include_policy {
                have += self.index.policy.len();
            }
            if need > 0 && have == 0 {
                return Err(Error::EmptyClass(class.name()));
            }
            Ok(())
        };
        check(StepClass::Expert, quota.expert)?;
        check(StepClass::Intervention, quota.intervention)?;
        check(StepClass::Failure, quota.failure)?;
        let expert_pool: &[StepClass] = if include_policy {
            &[StepClass::Expert, StepClass::Policy]
        } else {
            &[StepClass::Expert]
        };
        let mut out = self.sample_classes(expert_pool, quota.expert, rng)?;
        out.extend(self.sample_classes(&[StepClass::Intervention], quota.intervention, rng)?);
        out.extend(self.sample_classes(&[StepClass::Failure], quota.failure, rng)?);
        Ok(out)
    }

    pub fn balanced_sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Sample>> {
        self.sample_quota(Quota::balanced(batch)?, false, rng)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let mut put = |r: &Record| -> Result<()> {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
            Ok(())
        };
        put(&Record::Header {
            version: DATASET_VERSION,
            tokenizer: self.tokenizer,
            env: self.env,
        })?;
        for t in &self.trajectories {
            put(&Record::TrajBegin {
                source: t.source,
                meta: t.meta,
            })?;
            for s in &t.steps {
                put(&Record::Step {
                    t: s.t,
                    o: s.o.clone(),
                    a: s.a.to_array().to_vec(),
                    tokens: s.tokens.0.clone(),
                    c: s.c.code(),
                })?;
            }
            put(&Record::TrajEnd { success: t.success })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let reader = BufReader::new(std::fs::File::open(path)?);
        let mut ds: Option<Dataset> = None;
        let mut open: Option<Trajectory> = None;
        let mut last_line = 0;
        for (i, line) in reader.lines().enumerate() {
            let n = i + 1;
            last_line = n;
            let err = |msg: String| Error::Parse { line: n, msg };
            let line = line?;
            let rec: Record =
                serde_json::from_str(&line).map_err(|e| err(format!("malformed record: {e}")))?;
            match rec {
                Record::Header {
                    version,
                    tokenizer,
                    env,
                } => {
                    if version != DATASET_VERSION {
                        return Err(Error::Version {
                            found: version,
                            expected: DATASET_VERSION,
                        });
                    }
                    if ds.is_some() {
                        return Err(err("duplicate header".into()));
                    }
                    ds = Some(Dataset::new(tokenizer, env));
                }
                Record::TrajBegin { source, meta } => {
                    if ds.is_none() {
                        return Err(err("record before header".into()));
                    }
                    if open.is_some() {
                        return Err(err("trajectory begins before previous ended".into()));
                    }
                    open = Some(Trajectory {
                        steps: Vec::new(),
                        source,
                        success: false,
                        meta,
                    });
                }
                Record::Step { t, o, a, tokens, c } => {
                    let tok_cfg = ds.as_ref().map(|d| d.tokenizer);
                    let traj = open
                        .as_mut()
                        .ok_or_else(|| err("step outside a trajectory".into()))?;
                    if t as usize != traj.steps.len() {
                        return Err(err(format!("step index {t} is not contiguous")));
                    }
                    let c = Label::from_code(c).ok_or_else(|| err(format!("bad label {c}")))?;
                    if traj.source == Source::Expert && c != Label::Acceptable {
                        return Err(err("expert step with label other than 1".into()));
                    }
                    let a: [f64; 3] = a
                        .try_into()
                        .map_err(|_| err("action must have 3 components".into()))?;
                    let a = ContinuousAction::from_array(a);
                    let tokens = ActionTokens(tokens);
                    if let Some(cfg) = tok_cfg {
                        if cfg.encode(&a)? != tokens {
                            return Err(err("tokens do not match encoded action".into()));
                        }
                    }
                    traj.steps.push(Step { o, a, tokens, c, t });
                }
                Record::TrajEnd { success } => {
                    let mut traj = open
                        .take()
                        .ok_or_else(|| err("trajectory end without begin".into()))?;
                    traj.success = success;
                    ds.as_mut().expect("header seen").push(traj);
                }
            }
        }
        if open.is_some() {
            return Err(Error::Parse {
                line: last_line + 1,
                msg: "unterminated trajectory (truncated file?)".into(),
            });
        }
        ds.ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum Record {
    #[serde(rename = "header")]
    Header {
        version: u32,
        tokenizer: TokenizerConfig,
        env: TaskSpec,
    },
    #[serde(rename = "traj-begin")]
    TrajBegin { source: Source, meta: EpisodeMeta },
    #[serde(rename = "step")]
    Step {
        t: u32,
        o: Vec<f64>,
        a: Vec<f64>,
        tokens: Vec<u32>,
        c: u8,
    },
    #[serde(rename = "traj-end")]
    TrajEnd { success: bool },
}
