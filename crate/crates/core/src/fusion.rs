//! Heterogeneous attention over memory-enhanced features.
//!
//! `Ṽ` (T×2D) and `Q̃` (N×2D) are concatenations of the memory reads of each
//! domain. Three linear maps bring `Ṽ`, `Q̃` and the original video features
//! `V` to a shared latent width, then three dot-product attention units
//! produce frame-wise outputs:
//!
//! - self-attention, shared between frame-frame (`Ṽ` over `Ṽ`) and
//!   word-word (`Q̃` over `Q̃`) pairs;
//! - inter-attention, frames querying words: keys come from the projected
//!   `Q̃`, values from the word-word self-attention output;
//! - calibration, where the projected `V` queries the projected `Ṽ` (or the
//!   reverse, see [`CalibrationQueries`]).
//!
//! `F` is the column concatenation of the enabled units' outputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Attention, Bound, Linear, ParamStore};
use crate::numcore::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Self-attention, inter-attention and calibration.
    #[default]
    Full,
    NoCalibration,
    NoSelf,
    InterOnly,
    /// No attention at all: projected `Ṽ` next to the mean projected `Q̃`.
    Plain,
}

impl FusionMode {
    pub fn units(self) -> usize {
        match self {
            FusionMode::Full => 3,
            FusionMode::NoCalibration | FusionMode::NoSelf | FusionMode::Plain => 2,
            FusionMode::InterOnly => 1,
        }
    }

    fn uses_self(self) -> bool {
        matches!(self, FusionMode::Full | FusionMode::NoCalibration)
    }

    fn uses_calibration(self) -> bool {
        matches!(self, FusionMode::Full | FusionMode::NoSelf)
    }
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => FusionMode::Full,
            "no-calibration" => FusionMode::NoCalibration,
            "no-self" => FusionMode::NoSelf,
            "inter-only" => FusionMode::InterOnly,
            "plain" => FusionMode::Plain,
            other => return Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        })
    }
}

/// Which stream supplies the queries of the calibration unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationQueries {
    /// Original `V` queries, enhanced `Ṽ` keys and values.
    #[default]
    Global,
    /// Enhanced `Ṽ` queries, original `V` keys and values.
    Enhanced,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionParams {
    pub proj_v_tilde: Linear,
    pub proj_q_tilde: Linear,
    pub proj_v: Linear,
    pub self_attention: Attention,
    pub inter_attention: Attention,
    pub calibration: Attention,
    pub mode: FusionMode,
    pub calibration_queries: CalibrationQueries,
    pub width: usize,
}

/// `F` plus every attention map that produced it.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    pub features: Var,
    pub attention_maps: Vec<Var>,
}

/// `ṽ_t = [(v_t)'; (q̂_t)']`, `q̃_n = [(q_n)'; (v̂_n)']`.
pub fn build_tilde(tape: &mut Tape, v: Var, q_hat: Var, v_hat: Var, q: Var) -> Result<(Var, Var)> {
    let v_tilde = tape.concat_cols(&[v, q_hat])?;
    let q_tilde = tape.concat_cols(&[q, v_hat])?;
    Ok((v_tilde, q_tilde))
}

impl FusionParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        d: usize,
        width: usize,
        mode: FusionMode,
        calibration_queries: CalibrationQueries,
    ) -> Self {
        Self {
            proj_v_tilde: Linear::new(store, rng, "fusion.proj_v_tilde", 2 * d, width, true),
            proj_q_tilde: Linear::new(store, rng, "fusion.proj_q_tilde", 2 * d, width, true),
            proj_v: Linear::new(store, rng, "fusion.proj_v", d, width, true),
            self_attention: Attention::new(store, rng, "fusion.self", width),
            inter_attention: Attention::new(store, rng, "fusion.inter", width),
            calibration: Attention::new(store, rng, "fusion.calibration", width),
            mode,
            calibration_queries,
            width,
        }
    }

    /// Columns of `F`.
    pub fn output_width(&self) -> usize {
        self.mode.units() * self.width
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, v_tilde: Var, q_tilde: Var, v: Var) -> Result<FusionOutput> {
        let (st, sv) = (tape.shape(v_tilde), tape.shape(v));
        if st.0 != sv.0 {
            return Err(Error::dim("heterogeneous_attention", st, sv));
        }
        let vt = self.proj_v_tilde.forward(tape, p, v_tilde)?;
        let qt = self.proj_q_tilde.forward(tape, p, q_tilde)?;
        let mut maps = Vec::new();
        let mut parts = Vec::new();

        if self.mode == FusionMode::Plain {
            let pooled = tape.mean_rows(qt);
            let pooled = tape.broadcast_rows(pooled, st.0)?;
            let features = tape.concat_cols(&[vt, pooled])?;
            return Ok(FusionOutput { features, attention_maps: maps });
        }

        let word_values = if self.mode.uses_self() {
            let frames = self.self_attention.self_attend(tape, p, vt)?;
            let words = self.self_attention.self_attend(tape, p, qt)?;
            maps.extend([frames.weights, words.weights]);
            parts.push(frames.output);
            words.output
        } else {
            qt
        };

        let inter = self.inter_attention.attend(tape, p, vt, qt, word_values)?;
        maps.push(inter.weights);
        parts.push(inter.output);

        if self.mode.uses_calibration() {
            let global = self.proj_v.forward(tape, p, v)?;
            let cal = match self.calibration_queries {
                CalibrationQueries::Global => self.calibration.attend(tape, p, global, vt, vt)?,
                CalibrationQueries::Enhanced => self.calibration.attend(tape, p, vt, global, global)?,
            };
            maps.push(cal.weights);
            parts.push(cal.output);
        }

        let features = tape.concat_cols(&parts)?;
        Ok(FusionOutput { features, attention_maps: maps })
    }
}
