//! The full network: encoders, alignment, memory, fusion and grounding heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::AlignmentParams;
use crate::config::ModelConfig;
use crate::encoders::EncoderParams;
use crate::error::{Error, Result};
use crate::fusion::{build_tilde, FusionParams};
use crate::grounding::{infer_top_n, total_loss, FrameTargets, HeadOutputs, HeadParams, Losses, LossWeights, PredictionSet};
use crate::layers::{Bound, ParamStore};
use crate::membank::{enhance, MemoryProjections, MemoryState, Mode};
use crate::numcore::{Tape, Var};
use crate::synthdata::GroundingSample;

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: EncoderParams,
    pub alignment: AlignmentParams,
    pub memory: Option<MemoryProjections>,
    pub fusion: FusionParams,
    pub heads: HeadParams,
}

/// Everything a forward pass leaves on the tape.
#[derive(Debug, Clone)]
pub struct Forward {
    pub heads: HeadOutputs,
    pub adjacency: (Var, Var),
    pub attention_maps: Vec<Var>,
}

impl Model {
    /// Fresh parameters and memory banks, both derived from `seed`.
    pub fn new(config: &ModelConfig, vocab_size: usize, frame_dim: usize, seed: u64) -> (Self, MemoryState) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.hidden;
        let encoders = EncoderParams::new(&mut store, &mut rng, vocab_size, frame_dim, config.embed_dim, d);
        let alignment = AlignmentParams::new(&mut store, &mut rng, d);
        let memory = config.memory.then(|| MemoryProjections::new(&mut store, &mut rng, d));
        let fusion = FusionParams::new(&mut store, &mut rng, d, config.latent, config.fusion, config.calibration);
        let heads = HeadParams::new(&mut store, &mut rng, fusion.output_width(), config.latent);
        if config.attention_init_gain > 0.0 {
            for unit in [encoders.video.attention, encoders.query.attention, fusion.self_attention, fusion.inter_attention, fusion.calibration] {
                unit.boost_identity(&mut store, config.attention_init_gain);
            }
        }
        let mut state = MemoryState::new(config.video_slots, config.query_slots, d, config.separate_memory, seed ^ 0x6d65_6d6f);
        state.set_sharpness(config.addressing_sharpness);
        let model = Self { config: config.clone(), store, encoders, alignment, memory, fusion, heads };
        (model, state)
    }

    /// Head outputs for one sample. In training mode the memory banks are
    /// written as a side effect.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: &mut MemoryState,
        sample: &GroundingSample,
        mode: Mode,
    ) -> Result<Forward> {
        if sample.words.is_empty() {
            return Err(Error::Input(format!("sample {} has an empty query", sample.id)));
        }
        let v = self.encoders.encode_video(tape, p, &sample.frames)?;
        let q = self.encoders.encode_query(tape, p, &sample.words)?;
        let (adj, aligned) = self.alignment.forward(tape, p, v, q)?;
        let (v_tilde, q_tilde) = match &self.memory {
            Some(proj) => {
                let e = enhance(tape, p, memory, proj, v, aligned.q_hat, q, aligned.v_hat, mode)?;
                build_tilde(tape, e.v, e.q_hat, e.v_hat, e.q)?
            }
            None => build_tilde(tape, v, aligned.q_hat, aligned.v_hat, q)?,
        };
        let fused = self.fusion.forward(tape, p, v_tilde, q_tilde, v)?;
        let heads = self.heads.forward(tape, p, fused.features)?;
        Ok(Forward { heads, adjacency: (adj.a1, adj.a2), attention_maps: fused.attention_maps })
    }

    pub fn loss(
        &self,
        tape: &mut Tape,
        p: &Bound,
        memory: &mut MemoryState,
        sample: &GroundingSample,
        weights: &LossWeights,
        mode: Mode,
    ) -> Result<Losses> {
        let out = self.forward(tape, p, memory, sample, mode)?;
        let targets = FrameTargets::new(sample.num_frames(), sample.gt)?;
        total_loss(tape, &out.heads, &targets, weights)
    }

    /// Ranked predictions without touching the memory.
    pub fn predict(&self, memory: &MemoryState, sample: &GroundingSample, top_n: usize) -> Result<PredictionSet> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape, false);
        let mut frozen = memory.clone();
        let out = self.forward(&mut tape, &p, &mut frozen, sample, Mode::Eval)?;
        infer_top_n(
            tape.value(out.heads.offsets),
            tape.value(out.heads.confidence_logits),
            tape.value(out.heads.iou),
            top_n,
        )
    }
}
