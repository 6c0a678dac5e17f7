//! Persistent domain-specific memories.
//!
//! Each domain (video, query) owns a bank of `L` slots of width `D` that
//! lives across training batches. Features are mapped to a read key, a
//! write key, an erase value (through a sigmoid) and a write value.
//! Addressing is a softmax over cosine similarities between a key and every
//! slot; a write with weights `w`, value `u` and erase `e` performs
//! `m_l ← w_l·u + m_l ⊙ (1 − w_l·e)`; a read returns `Σ_l w_l·m_l`.
//!
//! In the video domain each frame position first writes its own feature
//! `v_t` and then the aligned word feature `q̂_t`; in the query domain each
//! word first writes `q_n` and then `v̂_n`. Reads follow the writes of the
//! same position. Evaluation never writes.
//!
//! Gradients flow through the writes and reads of the current sample only;
//! the bank state a sample starts from is a constant of that pass.

mod chain;
mod snapshot;

use ndarray::{Array1, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Bound, ParamId, ParamStore};
use crate::numcore::{Mat, Tape, Var};

use chain::{address, apply_update, run_chain, RoleItems};
pub use snapshot::{read_snapshot, write_snapshot, SNAPSHOT_MAGIC, SNAPSHOT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Video,
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Addressing weights over the slots of a bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Addressing {
    pub weights: Vec<f64>,
    /// The key had (near-)zero norm and the weights fell back to uniform.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    slots: Mat,
    domain: Domain,
    write_count: u64,
    seed: u64,
    skipped_updates: u64,
    #[serde(default = "unit_sharpness")]
    sharpness: f64,
}

fn unit_sharpness() -> f64 {
    1.0
}

impl MemoryBank {
    /// Slots uniform in `[-1/√D, 1/√D]` drawn from `seed`.
    pub fn new(slots: usize, width: usize, domain: Domain, seed: u64) -> Self {
        assert!(slots >= 1 && width >= 1, "memory bank needs at least one slot and one feature");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (width as f64).sqrt();
        let values = Mat::from_shape_simple_fn((slots, width), || rng.random_range(-bound..=bound));
        Self { slots: values, domain, write_count: 0, seed, skipped_updates: 0, sharpness: 1.0 }
    }

    pub fn from_slots(slots: Mat, domain: Domain, write_count: u64, seed: u64) -> Result<Self> {
        if slots.nrows() == 0 || slots.ncols() == 0 {
            return Err(Error::Input("memory bank needs at least one slot and one feature".into()));
        }
        if !slots.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("memory slots"));
        }
        Ok(Self { slots, domain, write_count, seed, skipped_updates: 0, sharpness: 1.0 })
    }

    pub fn slots(&self) -> &Mat {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.slots.ncols()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn write_count(&self) -> u64 {
        self.write_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Multiplier on the cosine similarities before the addressing softmax.
    pub fn sharpness(&self) -> f64 {
        self.sharpness
    }

    pub fn set_sharpness(&mut self, sharpness: f64) {
        assert!(sharpness.is_finite() && sharpness > 0.0, "addressing sharpness must be positive");
        self.sharpness = sharpness;
    }

    /// Updates rejected because their inputs were not finite.
    pub fn skipped_updates(&self) -> u64 {
        self.skipped_updates
    }

    fn check_width(&self, op: &'static str, v: &[f64]) -> Result<()> {
        if v.len() != self.width() {
            return Err(Error::dim(op, (1, v.len()), self.slots.dim()));
        }
        Ok(())
    }

    /// Softmax over the cosine similarity of `key` with every slot.
    pub fn addressing(&self, key: &[f64]) -> Result<Addressing> {
        self.check_width("addressing", key)?;
        if !key.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("memory key"));
        }
        let cache = address(ArrayView1::from(key), &self.slots, self.sharpness);
        Ok(Addressing { weights: cache.weights.to_vec(), degenerate: cache.degenerate_key })
    }

    /// `m_l ← w_l·u + m_l ⊙ (1 − w_l·e)`. Non-finite `u`/`e` leave the bank
    /// untouched, bump [`Self::skipped_updates`] and return an error.
    pub fn update(&mut self, w: &[f64], u: &[f64], e: &[f64]) -> Result<()> {
        if w.len() != self.len() {
            return Err(Error::dim("update", (1, w.len()), self.slots.dim()));
        }
        self.check_width("update", u)?;
        self.check_width("update", e)?;
        if !u.iter().chain(e).chain(w).all(|x| x.is_finite()) {
            self.skipped_updates += 1;
            log::warn!("skipping memory update with non-finite inputs");
            return Err(Error::NonFinite("memory update"));
        }
        self.slots = apply_update(&self.slots, &Array1::from(w.to_vec()), ArrayView1::from(u), ArrayView1::from(e));
        self.write_count += 1;
        Ok(())
    }

    /// Convex combination of the slots under the addressing weights of `key`.
    pub fn read(&self, key: &[f64]) -> Result<Vec<f64>> {
        let a = self.addressing(key)?;
        Ok(Array1::from(a.weights).dot(&self.slots).to_vec())
    }
}

/// Four D×D maps turning one feature into its memory items.
#[derive(Debug, Clone, Copy)]
pub struct RoleProjection {
    pub read_key: ParamId,
    pub write_key: ParamId,
    pub erase: ParamId,
    pub write_value: ParamId,
}

/// Memory items of a single feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryItems {
    pub read_key: Vec<f64>,
    pub write_key: Vec<f64>,
    /// Strictly inside (0, 1).
    pub erase: Vec<f64>,
    pub write_value: Vec<f64>,
}

impl RoleProjection {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize) -> Self {
        Self {
            read_key: store.add_uniform(rng, format!("{name}.read_key"), d, d, d),
            write_key: store.add_uniform(rng, format!("{name}.write_key"), d, d, d),
            erase: store.add_uniform(rng, format!("{name}.erase"), d, d, d),
            write_value: store.add_uniform(rng, format!("{name}.write_value"), d, d, d),
        }
    }

    /// Items of one feature vector from plain parameter values.
    pub fn items(&self, store: &ParamStore, feature: &[f64]) -> MemoryItems {
        let x = ArrayView1::from(feature);
        let map = |id: ParamId| x.dot(store.get(id)).to_vec();
        MemoryItems {
            read_key: map(self.read_key),
            write_key: map(self.write_key),
            erase: x.dot(store.get(self.erase)).mapv(crate::numcore::sigmoid).to_vec(),
            write_value: map(self.write_value),
        }
    }

    fn tape_items(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<[Var; 4]> {
        let rk = tape.matmul(x, p.var(self.read_key))?;
        let wk = tape.matmul(x, p.var(self.write_key))?;
        let e = tape.matmul(x, p.var(self.erase))?;
        let e = tape.sigmoid(e);
        let u = tape.matmul(x, p.var(self.write_value))?;
        Ok([rk, wk, e, u])
    }
}

/// Projections of the native feature and of its aligned cross-modal partner.
#[derive(Debug, Clone, Copy)]
pub struct DomainProjections {
    pub native: RoleProjection,
    pub partner: RoleProjection,
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryProjections {
    pub video: DomainProjections,
    pub query: DomainProjections,
}

impl MemoryProjections {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d: usize) -> Self {
        let domain = |store: &mut ParamStore, rng: &mut R, name: &str, native: &str, partner: &str| DomainProjections {
            native: RoleProjection::new(store, rng, &format!("memory.{name}.{native}"), d),
            partner: RoleProjection::new(store, rng, &format!("memory.{name}.{partner}"), d),
        };
        Self {
            video: domain(store, rng, "video", "frame", "aligned_query"),
            query: domain(store, rng, "query", "word", "aligned_video"),
        }
    }
}

/// The bank(s) of one domain: a single bank shared by both roles, or one
/// bank per role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMemory {
    pub native: MemoryBank,
    pub partner: Option<MemoryBank>,
}

impl DomainMemory {
    pub fn shared(bank: MemoryBank) -> Self {
        Self { native: bank, partner: None }
    }

    pub fn banks(&self) -> impl Iterator<Item = &MemoryBank> {
        std::iter::once(&self.native).chain(self.partner.as_ref())
    }

    fn partner_bank_mut(&mut self) -> &mut MemoryBank {
        match &mut self.partner {
            Some(b) => b,
            None => &mut self.native,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub video: DomainMemory,
    pub query: DomainMemory,
}

impl MemoryState {
    /// Fresh banks. With `separate` each role gets its own bank of the same size.
    pub fn new(slots_video: usize, slots_query: usize, width: usize, separate: bool, seed: u64) -> Self {
        let bank = |l, domain, k: u64| MemoryBank::new(l, width, domain, seed.wrapping_add(k));
        let domain = |l, domain, k| DomainMemory {
            native: bank(l, domain, k),
            partner: separate.then(|| bank(l, domain, k + 1)),
        };
        Self { video: domain(slots_video, Domain::Video, 0), query: domain(slots_query, Domain::Query, 2) }
    }

    pub fn set_sharpness(&mut self, sharpness: f64) {
        for d in [&mut self.video, &mut self.query] {
            d.native.set_sharpness(sharpness);
            if let Some(b) = d.partner.as_mut() {
                b.set_sharpness(sharpness);
            }
        }
    }
}

fn write_pair(
    bank: &mut DomainMemory,
    native: &[f64],
    partner: &[f64],
    proj: &DomainProjections,
    store: &ParamStore,
    mode: Mode,
) -> Result<()> {
    if mode != Mode::Train {
        return Err(Error::Mode { expected: "training" });
    }
    let n = proj.native.items(store, native);
    let a = bank.native.addressing(&n.write_key)?;
    bank.native.update(&a.weights, &n.write_value, &n.erase)?;
    let p = proj.partner.items(store, partner);
    let target = bank.partner_bank_mut();
    let a = target.addressing(&p.write_key)?;
    target.update(&a.weights, &p.write_value, &p.erase)
}

/// Video-domain write for one frame: the frame feature `v_t` first, then the
/// aligned word feature `q̂_t`.
pub fn write_pair_video(
    bank: &mut DomainMemory,
    q_hat_t: &[f64],
    v_t: &[f64],
    proj: &DomainProjections,
    store: &ParamStore,
    mode: Mode,
) -> Result<()> {
    write_pair(bank, v_t, q_hat_t, proj, store, mode)
}

/// Query-domain write for one word: the word feature `q_n` first, then the
/// aligned frame feature `v̂_n`.
pub fn write_pair_query(
    bank: &mut DomainMemory,
    v_hat_n: &[f64],
    q_n: &[f64],
    proj: &DomainProjections,
    store: &ParamStore,
    mode: Mode,
) -> Result<()> {
    write_pair(bank, q_n, v_hat_n, proj, store, mode)
}

/// Memory-enhanced features `(v_t)'`, `(q̂_t)'`, `(q_n)'`, `(v̂_n)'`.
#[derive(Debug, Clone, Copy)]
pub struct Enhanced {
    pub v: Var,
    pub q_hat: Var,
    pub q: Var,
    pub v_hat: Var,
}

fn role_items(m: &[Mat; 4]) -> RoleItems<'_> {
    RoleItems { read_key: &m[0], write_key: &m[1], erase: &m[2], write_value: &m[3] }
}

fn enhance_domain(
    tape: &mut Tape,
    p: &Bound,
    memory: &mut DomainMemory,
    proj: &DomainProjections,
    native: Var,
    partner: Var,
    mode: Mode,
) -> Result<(Var, Var)> {
    let width = memory.native.width();
    let (sn, sp) = (tape.shape(native), tape.shape(partner));
    if sn != sp || sn.1 != width {
        return Err(Error::dim("enhance", sn, (sp.0, width)));
    }
    let n = proj.native.tape_items(tape, p, native)?;
    let a = proj.partner.tape_items(tape, p, partner)?;
    let items = |v: &[Var; 4], tape: &Tape| [0, 1, 2, 3].map(|k| tape.value(v[k]).clone());
    let (ni, ai) = (items(&n, tape), items(&a, tape));

    let banks: Vec<Mat> = memory.banks().map(|b| b.slots.clone()).collect();
    let outcome = run_chain(banks, memory.native.sharpness, role_items(&ni), role_items(&ai), mode == Mode::Train);

    if mode == Mode::Train {
        let mut finals = outcome.banks.into_iter();
        let targets = std::iter::once(&mut memory.native).chain(memory.partner.as_mut());
        for ((bank, slots), count) in targets.zip(&mut finals).zip(&outcome.updates) {
            bank.slots = slots;
            bank.write_count += count;
        }
        memory.native.skipped_updates += outcome.skipped;
    }

    let inputs = [n[0], n[1], n[2], n[3], a[0], a[1], a[2], a[3]];
    let reads = tape.custom(&inputs, outcome.reads, Box::new(outcome.op));
    let native_read = tape.slice_cols(reads, 0, width)?;
    let partner_read = tape.slice_cols(reads, width, 2 * width)?;
    Ok((native_read, partner_read))
}

/// Writes-then-reads every frame position (video domain) and every word
/// position (query domain) in ascending order during training; reads only
/// during evaluation.
#[allow(clippy::too_many_arguments)]
pub fn enhance(
    tape: &mut Tape,
    p: &Bound,
    memory: &mut MemoryState,
    proj: &MemoryProjections,
    v: Var,
    q_hat: Var,
    q: Var,
    v_hat: Var,
    mode: Mode,
) -> Result<Enhanced> {
    let (v2, q_hat2) = enhance_domain(tape, p, &mut memory.video, &proj.video, v, q_hat, mode)?;
    let (q2, v_hat2) = enhance_domain(tape, p, &mut memory.query, &proj.query, q, v_hat, mode)?;
    Ok(Enhanced { v: v2, q_hat: q_hat2, q: q2, v_hat: v_hat2 })
}
