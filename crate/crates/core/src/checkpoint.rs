//! JSON checkpoints for denoisers and critics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critic::{CriticConfig, CriticState};
use crate::denoiser::{Denoiser, DenoiserConfig, Normalizer, TrainState};
use crate::error::{Error, Result};
use crate::nn::{FinalInit, ParamSet};
use crate::rng::SeededRng;

pub const FORMAT: &str = "swg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Denoiser,
    Critic,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    kind: CheckpointKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserCheckpoint {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: DenoiserConfig,
    pub normalizer: Normalizer,
    pub params: ParamSet,
    #[serde(default)]
    pub train_state: Option<TrainState>,
}

impl DenoiserCheckpoint {
    pub fn new(model: &Denoiser, train_state: Option<TrainState>) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: CheckpointKind::Denoiser,
            config: model.config.clone(),
            normalizer: model.normalizer.clone(),
            params: model.net.params.clone(),
            train_state,
        }
    }

    /// Rebuilds the model, rejecting parameters whose names or shapes do not
    /// match the architecture in the config.
    pub fn into_model(self) -> Result<(Denoiser, Option<TrainState>)> {
        let mut m = Denoiser::new(self.config, self.normalizer, FinalInit::Zero, &mut SeededRng::new(0, 0))
            .map_err(|e| Error::Checkpoint(format!("config does not build a model: {e}")))?;
        m.net.params.check_compatible(&self.params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        m.net.params = self.params;
        Ok((m, self.train_state))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        check_header(&text, CheckpointKind::Denoiser)?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticCheckpoint {
    pub format: String,
    pub version: u32,
    pub kind: CheckpointKind,
    pub config: CriticConfig,
    pub state: CriticState,
}

impl CriticCheckpoint {
    pub fn new(config: &CriticConfig, state: &CriticState) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: CheckpointKind::Critic,
            config: config.clone(),
            state: state.clone(),
        }
    }

    pub fn into_state(self) -> Result<CriticState> {
        let fresh = CriticState::new(&self.config, self.state.state_dim, self.state.action_dim)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let pairs = [
            (&fresh.q1, &self.state.q1),
            (&fresh.q2, &self.state.q2),
            (&fresh.q1, &self.state.q1_target),
            (&fresh.q2, &self.state.q2_target),
            (&fresh.v, &self.state.v),
        ];
        for (a, b) in pairs {
            a.params.check_compatible(&b.params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok(self.state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        check_header(&text, CheckpointKind::Critic)?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// Kind stored in a checkpoint file.
pub fn peek_kind(path: &Path) -> Result<CheckpointKind> {
    let text = std::fs::read_to_string(path)?;
    Ok(header(&text)?.kind)
}

fn header(text: &str) -> Result<Header> {
    #[derive(Deserialize)]
    struct Loose {
        format: String,
        version: u32,
        kind: CheckpointKind,
    }
    let h: Loose = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if h.format != FORMAT {
        return Err(Error::Checkpoint(format!("not a checkpoint (format `{}`)", h.format)));
    }
    if h.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {} (expected {VERSION})", h.version)));
    }
    Ok(Header {
        format: h.format,
        version: h.version,
        kind: h.kind,
    })
}

fn check_header(text: &str, want: CheckpointKind) -> Result<()> {
    let h = header(text)?;
    if h.kind != want {
        return Err(Error::Checkpoint(format!("expected a {want:?} checkpoint, found {:?}", h.kind)));
    }
    Ok(())
}
