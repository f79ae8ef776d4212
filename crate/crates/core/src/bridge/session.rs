use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{MessageKind, WireMessage, OBS_LAYOUT};
use crate::data::{relabel_interventions, Dataset, EpisodeMeta, Label, Source, Step, Trajectory};
use crate::env::{self, ContinuousAction, EnvState, TaskSpec, ACTION_DIMS};
use crate::error::{Error, Result};
use crate::lifelong::{rollout_env_seed, rollout_rng};
use crate::policy::PolicyParams;
use crate::rng::LabRng;
use crate::tokenizer::TokenizerConfig;

pub type ClientId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Control {
    Policy,
    Human,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionConfig {
    pub id: String,
    pub task: TaskSpec,
    pub tokenizer: TokenizerConfig,
    pub k: usize,
    pub master: u64,
    /// Rollout ids are `iteration * 1_000_000 + episode`, as in scripted deployment.
    pub iteration: u32,
    pub episodes: usize,
    pub tick_hz: f64,
}

/// Where an outgoing message goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    All,
    Client(ClientId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: Target,
    pub msg: WireMessage,
}

/// One replayable session event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum JournalEntry {
    Message { client: ClientId, msg: WireMessage },
    Tick,
}

/// Single-owner simulation state. Messages are applied between ticks, so a
/// control change takes effect on the next executed tick.
pub struct Session {
    cfg: SessionConfig,
    spec: TaskSpec,
    state: EnvState,
    rng: LabRng,
    control: Control,
    controller: Option<ClientId>,
    pending: Option<ContinuousAction>,
    tick: u64,
    episode: usize,
    steps: Vec<Step>,
    dataset: Dataset,
    journal: Vec<JournalEntry>,
}

impl Session {
    pub fn new(cfg: SessionConfig) -> Self {
        let dataset = Dataset::new(cfg.tokenizer, cfg.task);
        let (spec, state, rng) = Self::episode_start(&cfg, 0);
        Self {
            cfg,
            spec,
            state,
            rng,
            control: Control::Policy,
            controller: None,
            pending: None,
            tick: 0,
            episode: 0,
            steps: Vec::new(),
            dataset,
            journal: Vec::new(),
        }
    }

    fn rollout_id(cfg: &SessionConfig, episode: usize) -> u64 {
        u64::from(cfg.iteration) * 1_000_000 + episode as u64
    }

    fn episode_start(cfg: &SessionConfig, episode: usize) -> (TaskSpec, EnvState, LabRng) {
        let id = Self::rollout_id(cfg, episode);
        let spec = cfg.task.with_seed(rollout_env_seed(cfg.master, id));
        (spec, env::reset(&spec), rollout_rng(cfg.master, id))
    }

    pub fn id(&self) -> &str {
        &self.cfg.id
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn control(&self) -> Control {
        self.control
    }

    pub fn controller(&self) -> Option<ClientId> {
        self.controller
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn finished(&self) -> bool {
        self.episode >= self.cfg.episodes
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn journal(&self) -> &[JournalEntry] {
        &self.journal
    }

    pub fn into_parts(self) -> (Dataset, Vec<JournalEntry>) {
        (self.dataset, self.journal)
    }

    fn message(&self, kind: MessageKind, payload: serde_json::Value) -> WireMessage {
        WireMessage::new(kind, &self.cfg.id, self.tick, payload)
    }

    fn reply(&self, client: ClientId, kind: MessageKind, payload: serde_json::Value) -> Outbound {
        Outbound {
            to: Target::Client(client),
            msg: self.message(kind, payload),
        }
    }

    fn error(&self, client: ClientId, text: impl Into<String>) -> Outbound {
        self.reply(client, MessageKind::Error, json!({ "message": text.into() }))
    }

    /// Handshake record sent to every client on connect.
    pub fn config_message(&self) -> WireMessage {
        self.message(
            MessageKind::Config,
            json!({
                "obs_layout": OBS_LAYOUT,
                "action_dims": ACTION_DIMS,
                "tick_hz": self.cfg.tick_hz,
                "k": self.cfg.k,
                "episodes": self.cfg.episodes,
                "task": self.cfg.task,
            }),
        )
    }

    pub fn state_message(&self) -> WireMessage {
        self.message(
            MessageKind::State,
            json!({
                "state": self.state,
                "control": self.control,
                "episode": self.episode,
            }),
        )
    }

    /// Applies one client message. Invalid requests leave the session
    /// unchanged and produce an error reply.
    pub fn handle(&mut self, client: ClientId, msg: &WireMessage) -> Vec<Outbound> {
        self.journal.push(JournalEntry::Message {
            client,
            msg: msg.clone(),
        });
        if msg.session != self.cfg.id {
            return vec![self.error(client, format!("unknown session `{}`", msg.session))];
        }
        if self.finished() {
            return vec![self.error(client, "session finished")];
        }
        match msg.kind {
            MessageKind::TakeControl => match self.controller {
                Some(owner) if owner != client => {
                    vec![self.error(client, "control is held by another client")]
                }
                _ => {
                    self.control = Control::Human;
                    self.controller = Some(client);
                    vec![self.reply(client, MessageKind::TakeControl, json!({ "granted": true }))]
                }
            },
            MessageKind::ReleaseControl => {
                if self.controller != Some(client) {
                    return vec![self.error(client, "release_control without holding control")];
                }
                self.release();
                vec![self.reply(client, MessageKind::ReleaseControl, json!({ "released": true }))]
            }
            MessageKind::HumanAction => {
                if self.control != Control::Human || self.controller != Some(client) {
                    return vec![self.error(client, "human_action while the policy is in control")];
                }
                let raw: [f64; ACTION_DIMS] = match serde_json::from_value(msg.payload["action"].clone()) {
                    Ok(a) => a,
                    Err(_) => return vec![self.error(client, "human_action payload needs `action`: [dx, dy, gripper]")],
                };
                if raw.iter().any(|x| !x.is_finite()) {
                    return vec![self.error(client, "human_action components must be finite")];
                }
                let action = ContinuousAction::from_array(raw).clamped();
                let clamped = action.to_array() != raw;
                self.pending = Some(action);
                vec![self.reply(
                    client,
                    MessageKind::HumanAction,
                    json!({ "action": action.to_array(), "clamped": clamped }),
                )]
            }
            _ => vec![self.error(client, format!("clients may not send {:?} messages", msg.kind))],
        }
    }

    fn release(&mut self) {
        self.control = Control::Policy;
        self.controller = None;
        self.pending = None;
    }

    /// A client went away; control it held returns to the policy. Journaled
    /// as that client's release so replays see the same control changes.
    pub fn disconnect(&mut self, client: ClientId) {
        if self.controller == Some(client) {
            let msg = self.message(MessageKind::ReleaseControl, serde_json::Value::Null);
            self.handle(client, &msg);
        }
    }

    /// Executes one environment step and returns the broadcasts it produced.
    pub fn step(&mut self, params: &PolicyParams) -> Result<Vec<WireMessage>> {
        if self.finished() {
            return Err(Error::Bridge("session finished".into()));
        }
        self.journal.push(JournalEntry::Tick);
        let obs = self.state.observation();
        let (a, tokens, c) = match self.control {
            Control::Human => {
                // The human owns the step: no fresh input means no motion.
                let a = self.pending.take().unwrap_or(ContinuousAction::new(0.0, 0.0, 0.0));
                (a, self.cfg.tokenizer.encode(&a)?, Label::Intervention)
            }
            Control::Policy => {
                let tokens = params.sample(&obs, &mut self.rng);
                (self.cfg.tokenizer.decode(&tokens)?, tokens, Label::Acceptable)
            }
        };
        self.steps.push(Step {
            o: obs.to_vec(),
            a,
            tokens,
            c,
            t: self.state.t,
        });
        let out = env::step(&self.spec, &self.state, &a)?;
        self.state = out.state;
        self.tick += 1;
        let mut msgs = Vec::new();
        if out.done {
            let traj = Trajectory {
                steps: std::mem::take(&mut self.steps),
                source: Source::Interaction,
                success: out.success,
                meta: EpisodeMeta {
                    spec: self.spec,
                    rollout_id: Self::rollout_id(&self.cfg, self.episode),
                    iteration: self.cfg.iteration,
                },
            };
            let traj = relabel_interventions(&traj, self.cfg.k)?;
            let labels: String = traj.steps.iter().map(|s| char::from(b'0' + s.c.code())).collect();
            msgs.push(self.message(
                MessageKind::EpisodeEnd,
                json!({
                    "episode": self.episode,
                    "rollout_id": traj.meta.rollout_id,
                    "success": traj.success,
                    "steps": traj.steps.len(),
                    "labels": labels,
                }),
            ));
            self.dataset.push(traj);
            self.episode += 1;
            self.release();
            if !self.finished() {
                let (spec, state, rng) = Self::episode_start(&self.cfg, self.episode);
                self.spec = spec;
                self.state = state;
                self.rng = rng;
            }
        }
        msgs.push(self.state_message());
        Ok(msgs)
    }

    /// Re-runs a recorded journal on a fresh session.
    pub fn replay(cfg: SessionConfig, params: &PolicyParams, journal: &[JournalEntry]) -> Result<Session> {
        let mut s = Session::new(cfg);
        for e in journal {
            match e {
                JournalEntry::Message { client, msg } => {
                    s.handle(*client, msg);
                }
                JournalEntry::Tick => {
                    s.step(params)?;
                }
            }
        }
        Ok(s)
    }
}
