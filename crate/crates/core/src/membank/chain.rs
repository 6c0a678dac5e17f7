//! Differentiable replay of one sample's memory writes and reads.
//!
//! The bank state entering a sample is a constant of the pass. Within the
//! sample every write and every read is recorded so that gradients reach
//! the read keys, write keys, erase values and write values of that sample
//! through all the bank states it produced.

use ndarray::{s, Array1, ArrayView1, Axis};

use crate::numcore::{softmax_rows, CustomOp, Mat, DEGENERATE_NORM};

/// Cosine-softmax addressing together with what its backward pass needs.
#[derive(Debug, Clone)]
pub(crate) struct AddressCache {
    pub weights: Array1<f64>,
    sims: Array1<f64>,
    key_norm: f64,
    slot_norms: Array1<f64>,
    sharpness: f64,
    pub degenerate_key: bool,
}

/// `softmax(β·cos(key, slot_l))`; the plain rule is `β = 1`.
pub(crate) fn address(key: ArrayView1<f64>, slots: &Mat, sharpness: f64) -> AddressCache {
    let l = slots.nrows();
    let key_norm = key.dot(&key).sqrt();
    let slot_norms: Array1<f64> = slots.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if !(key_norm >= DEGENERATE_NORM) {
        log::warn!("degenerate memory key; using uniform addressing");
        return AddressCache {
            weights: Array1::from_elem(l, 1.0 / l as f64),
            sims: Array1::zeros(l),
            key_norm,
            slot_norms,
            sharpness,
            degenerate_key: true,
        };
    }
    let dots = slots.dot(&key);
    let sims: Array1<f64> = dots
        .iter()
        .zip(&slot_norms)
        .map(|(&dot, &n)| if n < DEGENERATE_NORM { 0.0 } else { (dot / (key_norm * n)).clamp(-1.0, 1.0) })
        .collect();
    let weights = softmax_rows(&(&sims * sharpness).insert_axis(Axis(0))).remove_axis(Axis(0));
    AddressCache { weights, sims, key_norm, slot_norms, sharpness, degenerate_key: false }
}

/// Accumulates the gradient of the addressing weights into the key and slots.
pub(crate) fn address_backward(
    cache: &AddressCache,
    key: ArrayView1<f64>,
    slots: &Mat,
    d_weights: &Array1<f64>,
    d_key: &mut Array1<f64>,
    d_slots: &mut Mat,
) {
    if cache.degenerate_key {
        return;
    }
    let w = &cache.weights;
    let mean = w.dot(d_weights);
    let nk = cache.key_norm;
    for (l, slot) in slots.rows().into_iter().enumerate() {
        let nl = cache.slot_norms[l];
        if nl < DEGENERATE_NORM {
            continue;
        }
        let ds = cache.sharpness * w[l] * (d_weights[l] - mean);
        if ds == 0.0 {
            continue;
        }
        let sim = cache.sims[l];
        let inv = 1.0 / (nk * nl);
        d_key.scaled_add(ds * inv, &slot);
        d_key.scaled_add(-ds * sim / (nk * nk), &key);
        let mut ds_row = d_slots.row_mut(l);
        ds_row.scaled_add(ds * inv, &key);
        ds_row.scaled_add(-ds * sim / (nl * nl), &slot);
    }
}

/// `m_l ← w_l·u + m_l ⊙ (1 − w_l·e)` for every slot.
pub(crate) fn apply_update(slots: &Mat, w: &Array1<f64>, u: ArrayView1<f64>, e: ArrayView1<f64>) -> Mat {
    let mut out = slots.clone();
    for (l, mut row) in out.rows_mut().into_iter().enumerate() {
        let wl = w[l];
        row.zip_mut_with(&e, |m, &ed| *m *= 1.0 - wl * ed);
        row.scaled_add(wl, &u);
    }
    out
}

/// Which bank an input role writes to and reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Role {
    Native = 0,
    Partner = 1,
}

#[derive(Debug)]
enum Event {
    Update { bank: usize, role: Role, pos: usize, before: Mat, cache: AddressCache },
    Skipped,
    Read { bank: usize, role: Role, pos: usize, state: Mat, cache: AddressCache },
}

/// Column blocks of the per-role item matrices (all P×D).
pub(crate) struct RoleItems<'a> {
    pub read_key: &'a Mat,
    pub write_key: &'a Mat,
    pub erase: &'a Mat,
    pub write_value: &'a Mat,
}

pub(crate) struct ChainOutcome {
    /// P×2D: native reads then partner reads.
    pub reads: Mat,
    /// Final state of each bank.
    pub banks: Vec<Mat>,
    pub updates: Vec<u64>,
    pub skipped: u64,
    pub op: MemoryChainOp,
}

/// Runs the per-position write-then-read schedule.
///
/// `banks[0]` serves the native role; the partner role uses `banks[1]` when
/// present and shares `banks[0]` otherwise. With `write` false only reads
/// happen.
pub(crate) fn run_chain(banks: Vec<Mat>, sharpness: f64, native: RoleItems, partner: RoleItems, write: bool) -> ChainOutcome {
    let positions = native.read_key.nrows();
    let d = native.read_key.ncols();
    let partner_bank = if banks.len() > 1 { 1 } else { 0 };
    let mut state = banks;
    let mut updates = vec![0u64; state.len()];
    let mut skipped = 0;
    let mut events = Vec::with_capacity(positions * 4);
    let mut reads = Mat::zeros((positions, 2 * d));

    for pos in 0..positions {
        if write {
            for (role, items, bank) in [(Role::Native, &native, 0), (Role::Partner, &partner, partner_bank)] {
                let key = items.write_key.row(pos);
                let u = items.write_value.row(pos);
                let e = items.erase.row(pos);
                if !(key.iter().chain(u.iter()).chain(e.iter()).all(|x| x.is_finite())) {
                    log::warn!("skipping memory update with non-finite inputs at position {pos}");
                    skipped += 1;
                    events.push(Event::Skipped);
                    continue;
                }
                let cache = address(key, &state[bank], sharpness);
                let next = apply_update(&state[bank], &cache.weights, u, e);
                let before = std::mem::replace(&mut state[bank], next);
                updates[bank] += 1;
                events.push(Event::Update { bank, role, pos, before, cache });
            }
        }
        for (role, items, bank) in [(Role::Native, &native, 0), (Role::Partner, &partner, partner_bank)] {
            let key = items.read_key.row(pos);
            let cache = address(key, &state[bank], sharpness);
            let out = cache.weights.dot(&state[bank]);
            let col = role as usize * d;
            reads.slice_mut(s![pos, col..col + d]).assign(&out);
            events.push(Event::Read { bank, role, pos, state: state[bank].clone(), cache });
        }
    }

    ChainOutcome {
        reads,
        banks: state.clone(),
        updates,
        skipped,
        op: MemoryChainOp { events, bank_shapes: state.iter().map(|m| m.dim()).collect() },
    }
}

/// Tape node for [`run_chain`]. Inputs, in order: native read key, write
/// key, erase, write value, then the same four for the partner role.
pub(crate) struct MemoryChainOp {
    events: Vec<Event>,
    bank_shapes: Vec<(usize, usize)>,
}

impl CustomOp for MemoryChainOp {
    fn name(&self) -> &'static str {
        "memory_chain"
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, grad: &Mat) -> Vec<Mat> {
        let d = inputs[0].ncols();
        let mut grads: Vec<Mat> = inputs.iter().map(|m| Mat::zeros(m.dim())).collect();
        let mut bank_grads: Vec<Mat> = self.bank_shapes.iter().map(|&s| Mat::zeros(s)).collect();
        let idx = |role: Role, k: usize| role as usize * 4 + k;

        for event in self.events.iter().rev() {
            match event {
                Event::Skipped => {}
                Event::Read { bank, role, pos, state, cache } => {
                    let col = *role as usize * d;
                    let dr = grad.slice(s![*pos, col..col + d]);
                    let d_weights = state.dot(&dr);
                    let g = &mut bank_grads[*bank];
                    for (l, mut row) in g.rows_mut().into_iter().enumerate() {
                        row.scaled_add(cache.weights[l], &dr);
                    }
                    let key = inputs[idx(*role, 0)].row(*pos);
                    let mut d_key = Array1::zeros(d);
                    address_backward(cache, key, state, &d_weights, &mut d_key, g);
                    let mut target = grads[idx(*role, 0)].row_mut(*pos);
                    target += &d_key;
                }
                Event::Update { bank, role, pos, before, cache } => {
                    let g_after = std::mem::replace(&mut bank_grads[*bank], Mat::zeros(before.dim()));
                    let w = &cache.weights;
                    let e = inputs[idx(*role, 2)].row(*pos);
                    let u = inputs[idx(*role, 3)].row(*pos);

                    // d/du, d/de and d/dw of w_l·u + m_l ⊙ (1 − w_l·e)
                    let d_u = w.dot(&g_after);
                    let mut d_e = Array1::<f64>::zeros(d);
                    let mut d_weights = Array1::<f64>::zeros(w.len());
                    let mut g_before = g_after.clone();
                    for l in 0..w.len() {
                        let gl = g_after.row(l);
                        let ml = before.row(l);
                        let mut dw = 0.0;
                        for k in 0..d {
                            dw += gl[k] * (u[k] - ml[k] * e[k]);
                            d_e[k] -= w[l] * gl[k] * ml[k];
                        }
                        d_weights[l] = dw;
                        let mut gb = g_before.row_mut(l);
                        gb.zip_mut_with(&e, |g, &ek| *g *= 1.0 - w[l] * ek);
                    }
                    let key = inputs[idx(*role, 1)].row(*pos);
                    let mut d_key = Array1::zeros(d);
                    address_backward(cache, key, before, &d_weights, &mut d_key, &mut g_before);
                    bank_grads[*bank] = g_before;

                    let mut t = grads[idx(*role, 1)].row_mut(*pos);
                    t += &d_key;
                    let mut t = grads[idx(*role, 2)].row_mut(*pos);
                    t += &d_e;
                    let mut t = grads[idx(*role, 3)].row_mut(*pos);
                    t += &d_u;
                }
            }
        }
        grads
    }
}
