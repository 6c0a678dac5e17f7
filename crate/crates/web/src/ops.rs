//! Plain-Rust demo operations over flat row-major buffers.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mgsl_core::eval::{interval_iou, memory_projection, Interval};
use mgsl_core::grounding::{nms, Prediction};
use mgsl_core::membank::{Domain, MemoryBank};

#[derive(Debug)]
pub struct DemoError(String);

impl fmt::Display for DemoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<mgsl_core::Error> for DemoError {
    fn from(e: mgsl_core::Error) -> Self {
        DemoError(e.to_string())
    }
}

type Result<T> = std::result::Result<T, DemoError>;

fn bank(slots: &[f64], width: usize, sharpness: f64) -> Result<MemoryBank> {
    if width == 0 || slots.is_empty() || slots.len() % width != 0 {
        return Err(DemoError(format!("{} values do not form rows of width {width}", slots.len())));
    }
    if !(sharpness > 0.0 && sharpness.is_finite()) {
        return Err(DemoError("sharpness must be positive".into()));
    }
    let m = Array2::from_shape_vec((slots.len() / width, width), slots.to_vec()).expect("checked shape");
    let mut b = MemoryBank::from_slots(m, Domain::Video, 0, 0)?;
    b.set_sharpness(sharpness);
    Ok(b)
}

pub fn random_bank(slots: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..slots * width).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

pub struct AddressView {
    pub weights: Vec<f64>,
    pub read: Vec<f64>,
}

pub fn address(slots: &[f64], width: usize, key: &[f64], sharpness: f64) -> Result<AddressView> {
    let b = bank(slots, width, sharpness)?;
    let weights = b.addressing(key)?.weights;
    let read = b.read(key)?;
    Ok(AddressView { weights, read })
}

/// One erase/add update with a constant erase value.
pub fn write(slots: &[f64], width: usize, key: &[f64], value: &[f64], erase: f64, sharpness: f64) -> Result<Vec<f64>> {
    if !(erase > 0.0 && erase < 1.0) {
        return Err(DemoError("erase must lie strictly between 0 and 1".into()));
    }
    let mut b = bank(slots, width, sharpness)?;
    let w = b.addressing(key)?.weights;
    b.update(&w, value, &vec![erase; width])?;
    Ok(b.slots().iter().copied().collect())
}

pub fn project(slots: &[f64], width: usize) -> Result<Vec<f64>> {
    let b = bank(slots, width, 1.0)?;
    Ok(memory_projection(b.slots())?.iter().copied().collect())
}

pub fn suppress(starts: &[f64], ends: &[f64], scores: &[f64], top_n: usize) -> Result<Vec<usize>> {
    if starts.len() != ends.len() || starts.len() != scores.len() {
        return Err(DemoError("starts, ends and scores differ in length".into()));
    }
    let cands = starts
        .iter()
        .zip(ends)
        .zip(scores)
        .enumerate()
        .map(|(i, ((&s, &e), &score))| Ok(Prediction { interval: Interval::new(s, e)?, score, frame: i }))
        .collect::<Result<Vec<_>>>()?;
    Ok(nms(cands, top_n).iter().map(|p| p.frame).collect())
}

pub fn iou(a_start: f64, a_end: f64, b_start: f64, b_end: f64) -> Result<f64> {
    Ok(interval_iou(Interval { start: a_start, end: a_end }, Interval { start: b_start, end: b_end })?)
}
