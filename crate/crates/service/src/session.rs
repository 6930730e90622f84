//! Session protocol. One JSON object per WebSocket text frame, tagged by
//! `type`.
//!
//! Client to server:
//!
//! ```json
//! {"type":"session_start","profile":{"gesture":"handheld","age":27,"gender":"female"},"scenario":"s-h","rate_hz":10}
//! {"type":"motion","frames":[{"acc":[0.1,-0.2,0.05]}]}
//! {"type":"trial_start","targets":[{"id":0,"center":[300,400],"size":95,"speed":550,"dir":[1,0],"intended":true}]}
//! {"type":"touch","point":[310,395],"t":1.2}
//! {"type":"export_log"}
//! ```
//!
//! Server to client: `ready`, `prediction`, `log` and `error`. Only
//! `session_start`, `touch` and `export_log` are answered; a malformed or
//! out-of-order message gets an `error` reply and leaves the session as it
//! was.

use std::collections::VecDeque;

use magnet::datagen::{vibration_channels, TargetRecord, TrialRecord, UserRecord};
use magnet::encoders::{EnvWindow, UserProfile, ACC_CHANNELS, VIB_CHANNELS};
use magnet::eval::rmsa;
use magnet::model::{MagnetModel, PredictionRecord};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionFrame {
    pub acc: [f64; ACC_CHANNELS],
    /// Derived from the buffered accelerations when any frame omits it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vib: Option<[f64; VIB_CHANNELS]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    SessionStart {
        profile: UserProfile,
        scenario: String,
        #[serde(default)]
        rate_hz: Option<f64>,
        #[serde(default)]
        user_id: Option<u32>,
    },
    Motion {
        frames: Vec<MotionFrame>,
    },
    TrialStart {
        targets: Vec<TargetRecord>,
        #[serde(default)]
        trial_id: Option<u64>,
    },
    /// `t` is seconds since `trial_start`. Without `targets`, target
    /// centers are advanced from the trial snapshot along `dir` at `speed`.
    Touch {
        point: Vec<f64>,
        t: f64,
        #[serde(default)]
        targets: Option<Vec<TargetRecord>>,
    },
    ExportLog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Ready {
        session_id: u64,
        rate_hz: f64,
        window: usize,
    },
    Prediction {
        trial_id: u64,
        /// Target ids, most likely first.
        ranked: Vec<u32>,
        target_ids: Vec<u32>,
        expert_ids: Vec<String>,
        /// Per target, one weight per expert.
        weights: Vec<Vec<f64>>,
        per_target_logp: Vec<f64>,
        /// Fewer than a full window of motion was buffered; the rest was
        /// zero-filled.
        motion_padded: bool,
        motion_frames: usize,
    },
    /// Completed trials with exactly one intended target, in the dataset
    /// line format.
    Log {
        records: Vec<TrialRecord>,
    },
    Error {
        code: String,
        msg: String,
    },
}

impl ServerMessage {
    pub fn error(code: &str, msg: impl Into<String>) -> Self {
        ServerMessage::Error { code: code.into(), msg: msg.into() }
    }

    pub fn from_prediction(p: &PredictionRecord, motion_padded: bool, motion_frames: usize) -> Self {
        ServerMessage::Prediction {
            trial_id: p.trial_id,
            ranked: p.ranking.clone(),
            target_ids: p.target_ids.clone(),
            expert_ids: p.expert_ids.clone(),
            weights: p.weights.clone(),
            per_target_logp: p.log_density.clone(),
            motion_padded,
            motion_frames,
        }
    }
}

struct Started {
    profile: UserProfile,
    user_id: u32,
    scenario: String,
    rate_hz: f64,
}

struct ActiveTrial {
    trial_id: u64,
    targets: Vec<TargetRecord>,
}

/// State of one connected client. Mutated only by its own handler.
pub struct Session {
    pub id: u64,
    started: Option<Started>,
    motion: VecDeque<MotionFrame>,
    window: usize,
    trial: Option<ActiveTrial>,
    next_trial: u64,
    log: Vec<TrialRecord>,
}

impl Session {
    pub fn new(id: u64) -> Self {
        Self { id, started: None, motion: VecDeque::new(), window: 0, trial: None, next_trial: 0, log: Vec::new() }
    }

    /// Frames currently buffered, oldest first.
    pub fn motion_len(&self) -> usize {
        self.motion.len()
    }

    pub fn log(&self) -> &[TrialRecord] {
        &self.log
    }

    /// Parses and applies one text frame.
    pub fn handle_text(&mut self, text: &str, model: &MagnetModel) -> Option<ServerMessage> {
        match serde_json::from_str::<ClientMessage>(text) {
            Ok(msg) => self.handle(msg, model),
            Err(e) => Some(ServerMessage::error("malformed", e.to_string())),
        }
    }

    pub fn handle(&mut self, msg: ClientMessage, model: &MagnetModel) -> Option<ServerMessage> {
        match self.apply(msg, model) {
            Ok(reply) => reply,
            Err(e) => Some(e),
        }
    }

    fn apply(&mut self, msg: ClientMessage, model: &MagnetModel) -> Result<Option<ServerMessage>, ServerMessage> {
        match msg {
            ClientMessage::SessionStart { profile, scenario, rate_hz, user_id } => {
                let rate_hz = rate_hz.unwrap_or(model.config.rate_hz);
                if !(rate_hz > 0.0 && rate_hz <= 1000.0) {
                    return Err(ServerMessage::error("invalid", format!("rate_hz {rate_hz} must be in (0, 1000]")));
                }
                self.window = EnvWindow::samples_for(rate_hz);
                self.started = Some(Started { profile, user_id: user_id.unwrap_or(0), scenario, rate_hz });
                self.motion.clear();
                self.trial = None;
                Ok(Some(ServerMessage::Ready { session_id: self.id, rate_hz, window: self.window }))
            }
            ClientMessage::Motion { frames } => {
                self.require_started()?;
                if let Some(bad) = frames.iter().position(|f| {
                    !f.acc.iter().all(|x| x.is_finite()) || f.vib.is_some_and(|v| !v.iter().all(|x| x.is_finite()))
                }) {
                    return Err(ServerMessage::error("invalid", format!("frame {bad} has a non-finite value")));
                }
                for f in frames {
                    if self.motion.len() == self.window {
                        self.motion.pop_front();
                    }
                    self.motion.push_back(f);
                }
                Ok(None)
            }
            ClientMessage::TrialStart { targets, trial_id } => {
                self.require_started()?;
                let dim = model.registry.dim();
                if targets.is_empty() {
                    return Err(ServerMessage::error("invalid", "trial needs at least one target"));
                }
                for t in &targets {
                    t.state.validate().map_err(|e| ServerMessage::error("invalid", e.to_string()))?;
                    if t.state.dim() != dim {
                        return Err(ServerMessage::error("invalid", format!("{}D target for a {dim}D model", t.state.dim())));
                    }
                }
                let trial_id = trial_id.unwrap_or(self.next_trial);
                self.next_trial = trial_id + 1;
                self.trial = Some(ActiveTrial { trial_id, targets });
                Ok(None)
            }
            ClientMessage::Touch { point, t, targets } => {
                self.require_started()?;
                let Some(active) = self.trial.as_ref() else {
                    return Err(ServerMessage::error("no_trial", "touch before trial_start"));
                };
                if !(t.is_finite() && t >= 0.0) {
                    return Err(ServerMessage::error("invalid", format!("touch time {t} must be >= 0")));
                }
                let targets = match targets {
                    Some(ts) => ts,
                    None => advance(&active.targets, t),
                };
                let (trial, padded, frames) = self.build_trial(active.trial_id, targets, point)?;
                let pred = model.predict(&trial).map_err(|e| ServerMessage::error("invalid", e.to_string()))?;
                // logged only when it is a complete dataset record
                if trial.validate().is_ok() {
                    self.log.push(trial);
                }
                self.trial = None;
                Ok(Some(ServerMessage::from_prediction(&pred, padded, frames)))
            }
            ClientMessage::ExportLog => Ok(Some(ServerMessage::Log { records: self.log.clone() })),
        }
    }

    fn require_started(&self) -> Result<&Started, ServerMessage> {
        self.started.as_ref().ok_or_else(|| ServerMessage::error("no_session", "send session_start first"))
    }

    /// Trial record for the buffered motion, zero-filled at the front when
    /// fewer than a window of frames has arrived.
    fn build_trial(
        &self,
        trial_id: u64,
        targets: Vec<TargetRecord>,
        point: Vec<f64>,
    ) -> Result<(TrialRecord, bool, usize), ServerMessage> {
        let s = self.require_started()?;
        let frames = self.motion.len();
        let pad = self.window - frames;
        let mut acc: Vec<[f64; ACC_CHANNELS]> = vec![[0.0; ACC_CHANNELS]; pad];
        acc.extend(self.motion.iter().map(|f| f.acc));
        let vib = if self.motion.iter().all(|f| f.vib.is_some()) {
            let mut v = vec![[0.0; VIB_CHANNELS]; pad];
            v.extend(self.motion.iter().filter_map(|f| f.vib));
            v
        } else {
            vibration_channels(&acc, s.rate_hz)
        };
        let rmsa = if frames > 0 { rmsa(&acc[pad..]).ok() } else { None };
        let trial = TrialRecord {
            trial_id,
            user: UserRecord { id: s.user_id, profile: s.profile.clone() },
            scenario_id: s.scenario.clone(),
            targets,
            endpoint: point,
            env: Some(EnvWindow { rate_hz: s.rate_hz, acc, vib }),
            rmsa,
        };
        trial.validate_scene().map_err(|e| ServerMessage::error("invalid", e.to_string()))?;
        Ok((trial, pad > 0, frames))
    }
}

/// Straight-line extrapolation of each target by `t` seconds.
fn advance(targets: &[TargetRecord], t: f64) -> Vec<TargetRecord> {
    targets
        .iter()
        .map(|r| {
            let mut r = r.clone();
            for (c, d) in r.state.center.iter_mut().zip(&r.state.dir) {
                *c += d * r.state.speed * t;
            }
            r
        })
        .collect()
}
