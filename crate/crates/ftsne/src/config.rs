//! Run configuration: one JSON-serializable document holding every knob
//! of a generate/embed/evaluate pipeline. Unknown keys are rejected.

use crate::divergence::Divergence;
use crate::error::{FtsneError, Result};
use crate::primal::OptimizerSchedule;
use crate::variational::MinimaxConfig;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

/// Which objective form to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Primal,
    Variational,
}

impl FromStr for OptimizerKind {
    type Err = FtsneError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primal" => Ok(OptimizerKind::Primal),
            "variational" => Ok(OptimizerKind::Variational),
            other => Err(FtsneError::Parameter(format!(
                "unknown optimizer '{other}' (expected primal|variational)"
            ))),
        }
    }
}

/// Full experiment configuration. All fields have defaults, so a config
/// file may specify any subset; flags override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Divergence name: `kl`, `rkl`, `js`, `ch`, `hl` or `interp:ALPHA`.
    pub divergence: String,
    pub optimizer: OptimizerKind,
    pub perplexity: f64,
    pub d: usize,
    pub seed: u64,
    // gradient-descent schedule
    pub lr0: f64,
    pub momentum0: f64,
    pub lr_decay: f64,
    pub momentum_decay: f64,
    pub epochs: usize,
    /// Optional early exaggeration as `FACTOR:EPOCHS`.
    pub exaggeration: Option<String>,
    // minimax settings (variational optimizer only)
    pub j_steps: usize,
    pub k_steps: usize,
    pub disc_lr: f64,
    pub rounds: usize,
    pub encoder_widths: Vec<usize>,
    pub head_widths: Vec<usize>,
    pub plateau_detection: bool,
    // I/O
    pub input: Option<String>,
    pub output_embedding: Option<String>,
    pub output_trace: Option<String>,
    pub trace_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sched = OptimizerSchedule::default();
        let mm = MinimaxConfig::default();
        Self {
            divergence: "kl".into(),
            optimizer: OptimizerKind::Primal,
            perplexity: 30.0,
            d: 2,
            seed: 0,
            lr0: sched.lr0,
            momentum0: sched.momentum0,
            lr_decay: sched.lr_decay,
            momentum_decay: sched.momentum_decay,
            epochs: sched.epochs,
            exaggeration: None,
            j_steps: mm.j_steps,
            k_steps: mm.k_steps,
            disc_lr: mm.disc_lr,
            rounds: mm.rounds,
            encoder_widths: mm.encoder_widths,
            head_widths: mm.head_widths,
            plateau_detection: false,
            input: None,
            output_embedding: None,
            output_trace: None,
            trace_every: 1,
        }
    }
}

impl RunConfig {
    pub fn divergence(&self) -> Result<Divergence> {
        self.divergence.parse()
    }

    pub fn schedule(&self) -> OptimizerSchedule {
        OptimizerSchedule {
            lr0: self.lr0,
            momentum0: self.momentum0,
            lr_decay: self.lr_decay,
            momentum_decay: self.momentum_decay,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn minimax(&self) -> MinimaxConfig {
        MinimaxConfig {
            j_steps: self.j_steps,
            k_steps: self.k_steps,
            disc_lr: self.disc_lr,
            emb_schedule: self.schedule(),
            rounds: self.rounds,
            encoder_widths: self.encoder_widths.clone(),
            head_widths: self.head_widths.clone(),
            plateau_detection: self.plateau_detection,
        }
    }

    /// Parses the optional `FACTOR:EPOCHS` exaggeration setting.
    pub fn exaggeration(&self) -> Result<Option<(f64, usize)>> {
        let Some(ref raw) = self.exaggeration else {
            return Ok(None);
        };
        let err = || {
            FtsneError::Parameter(format!(
                "exaggeration must be FACTOR:EPOCHS, got '{raw}'"
            ))
        };
        let (f, e) = raw.split_once(':').ok_or_else(err)?;
        let factor: f64 = f.parse().map_err(|_| err())?;
        let epochs: usize = e.parse().map_err(|_| err())?;
        if !(factor > 0.0 && factor.is_finite()) {
            return Err(err());
        }
        Ok(Some((factor, epochs)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}
