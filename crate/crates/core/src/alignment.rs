//! Cross-modal graph-convolutional alignment.
//!
//! Frame-word similarities `a_tn = φ1(v_t) · φ2(q_n)ᵀ` are computed once and
//! normalized in both directions: `A1` (T×N) over words for every frame,
//! `A2` (N×T) over frames for every word. The aligned features are
//! `V̂ = A2 · V · W_V` (one visual row per word) and `Q̂ = A1 · Q · W_Q`
//! (one textual row per frame).

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Bound, ParamId, ParamStore};
use crate::numcore::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct AlignmentParams {
    pub phi1: ParamId,
    pub phi2: ParamId,
    pub w_v: ParamId,
    pub w_q: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct Adjacency {
    /// T×N, rows sum to 1.
    pub a1: Var,
    /// N×T, rows sum to 1.
    pub a2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct Aligned {
    /// N×D
    pub v_hat: Var,
    /// T×D
    pub q_hat: Var,
}

impl AlignmentParams {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d: usize) -> Self {
        Self {
            phi1: store.add_uniform(rng, "align.phi1", d, d, d),
            phi2: store.add_uniform(rng, "align.phi2", d, d, d),
            w_v: store.add_uniform(rng, "align.w_v", d, d, d),
            w_q: store.add_uniform(rng, "align.w_q", d, d, d),
        }
    }

    pub fn adjacency(&self, tape: &mut Tape, p: &Bound, v: Var, q: Var) -> Result<Adjacency> {
        let (sv, sq) = (tape.shape(v), tape.shape(q));
        if sv.1 != sq.1 {
            return Err(Error::dim("cross_modal_adjacency", sv, sq));
        }
        let pv = tape.matmul(v, p.var(self.phi1))?;
        let pq = tape.matmul(q, p.var(self.phi2))?;
        let sim = tape.matmul_t(pv, pq)?;
        let a1 = tape.row_softmax(sim)?;
        let sim_t = tape.transpose(sim);
        let a2 = tape.row_softmax(sim_t)?;
        Ok(Adjacency { a1, a2 })
    }

    pub fn align(&self, tape: &mut Tape, p: &Bound, v: Var, q: Var, adj: Adjacency) -> Result<Aligned> {
        let frames_per_word = tape.matmul(adj.a2, v)?;
        let v_hat = tape.matmul(frames_per_word, p.var(self.w_v))?;
        let words_per_frame = tape.matmul(adj.a1, q)?;
        let q_hat = tape.matmul(words_per_frame, p.var(self.w_q))?;
        Ok(Aligned { v_hat, q_hat })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, v: Var, q: Var) -> Result<(Adjacency, Aligned)> {
        let adj = self.adjacency(tape, p, v, q)?;
        let aligned = self.align(tape, p, v, q, adj)?;
        Ok((adj, aligned))
    }
}
