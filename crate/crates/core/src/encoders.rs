//! Contextual encoders for frame sequences and word sequences.
//!
//! Both modalities go through the same pipeline: an input map (a learned
//! frame projection for video, an embedding lookup for words), single-head
//! self-attention, then a bidirectional LSTM whose two directions each
//! contribute half of the output features.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Attended, Attention, Bound, Linear, ParamId, ParamStore};
use crate::numcore::{Mat, Tape, Var};

/// One direction of an LSTM: gates ordered input, forget, cell, output.
#[derive(Debug, Clone, Copy)]
pub struct Lstm {
    pub input: Linear,
    pub recurrent: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, hidden: usize) -> Self {
        let input = Linear::new(store, rng, &format!("{name}.input"), d_in, 4 * hidden, true);
        let recurrent = store.add_uniform(rng, format!("{name}.recurrent"), hidden, 4 * hidden, hidden);
        Self { input, recurrent, hidden }
    }

    /// Runs the recurrence over the rows of `x` from zero initial states;
    /// returns the S×hidden matrix of hidden states.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h_dim = self.hidden;
        let steps = tape.shape(x).0;
        let projected = self.input.forward(tape, p, x)?;
        let w_h = p.var(self.recurrent);
        let mut h = tape.constant(Mat::zeros((1, h_dim)));
        let mut c = tape.constant(Mat::zeros((1, h_dim)));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = tape.row(projected, t)?;
            let rec = tape.matmul(h, w_h)?;
            let z = tape.add(xt, rec)?;
            let sig = tape.sigmoid(z);
            let i = tape.slice_cols(sig, 0, h_dim)?;
            let f = tape.slice_cols(sig, h_dim, 2 * h_dim)?;
            let o = tape.slice_cols(sig, 3 * h_dim, 4 * h_dim)?;
            let zg = tape.slice_cols(z, 2 * h_dim, 3 * h_dim)?;
            let g = tape.tanh(zg);
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let tc = tape.tanh(c);
            h = tape.mul(o, tc)?;
            outputs.push(h);
        }
        tape.stack_rows(&outputs)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BiLstm {
    pub forward: Lstm,
    pub backward: Lstm,
}

impl BiLstm {
    /// `d_out` must be even; each direction gets `d_out / 2` hidden units.
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        assert!(d_out % 2 == 0, "BiLSTM width must be even");
        Self {
            forward: Lstm::new(store, rng, &format!("{name}.fwd"), d_in, d_out / 2),
            backward: Lstm::new(store, rng, &format!("{name}.bwd"), d_in, d_out / 2),
        }
    }

    pub fn run(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let fwd = self.forward.forward(tape, p, x)?;
        let reversed = tape.reverse_rows(x);
        let bwd = self.backward.forward(tape, p, reversed)?;
        let bwd = tape.reverse_rows(bwd);
        tape.concat_cols(&[fwd, bwd])
    }
}

/// Self-attention followed by a BiLSTM.
#[derive(Debug, Clone, Copy)]
pub struct ContextEncoder {
    pub attention: Attention,
    pub lstm: BiLstm,
}

impl ContextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            attention: Attention::new(store, rng, &format!("{name}.attn"), d_in),
            lstm: BiLstm::new(store, rng, &format!("{name}.bilstm"), d_in, d_out),
        }
    }

    pub fn self_attention(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Attended> {
        self.attention.self_attend(tape, p, x)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let attended = self.self_attention(tape, p, x)?.output;
        self.lstm.run(tape, p, attended)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub embed_table: ParamId,
    pub frame_proj: ParamId,
    pub video: ContextEncoder,
    pub query: ContextEncoder,
    pub vocab_size: usize,
    pub frame_dim: usize,
}

impl EncoderParams {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        vocab_size: usize,
        frame_dim: usize,
        d_in: usize,
        d: usize,
    ) -> Self {
        let embed_table = store.add_uniform(rng, "encoder.embed", vocab_size, d_in, d_in);
        let frame_proj = store.add_uniform(rng, "encoder.frame_proj", frame_dim, d_in, frame_dim);
        let video = ContextEncoder::new(store, rng, "encoder.video", d_in, d);
        let query = ContextEncoder::new(store, rng, "encoder.query", d_in, d);
        Self { embed_table, frame_proj, video, query, vocab_size, frame_dim }
    }

    /// Frames (T×frame_dim) → V (T×D).
    pub fn encode_video(&self, tape: &mut Tape, p: &Bound, frames: &Mat) -> Result<Var> {
        if frames.nrows() == 0 || frames.ncols() != self.frame_dim {
            return Err(Error::dim("encode_video", frames.dim(), (frames.nrows(), self.frame_dim)));
        }
        let x = tape.constant(frames.clone());
        let x = tape.matmul(x, p.var(self.frame_proj))?;
        self.video.forward(tape, p, x)
    }

    /// Word ids → Q (N×D).
    pub fn encode_query(&self, tape: &mut Tape, p: &Bound, words: &[usize]) -> Result<Var> {
        if let Some(&bad) = words.iter().find(|&&w| w >= self.vocab_size) {
            return Err(Error::Input(format!("word id {bad} outside vocabulary of {}", self.vocab_size)));
        }
        let x = tape.gather_rows(p.var(self.embed_table), words)?;
        self.query.forward(tape, p, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, sigmoid};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn single_position_attention_weight_is_one() {
        let mut store = ParamStore::new();
        let enc = ContextEncoder::new(&mut store, &mut rng(), "e", 4, 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(array![[0.3, -0.1, 0.8, 0.2]]);
        let a = enc.self_attention(&mut tape, &p, x).unwrap();
        assert_eq!(tape.value(a.weights), &array![[1.0]]);
        let expected = tape.value(x).dot(store.get(enc.attention.value.w));
        let diff = (tape.value(a.output) - &expected).mapv(f64::abs).sum();
        assert!(diff < 1e-15);
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut store = ParamStore::new();
        let enc = ContextEncoder::new(&mut store, &mut rng(), "e", 4, 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Mat::from_shape_fn((3, 4), |(_, j)| j as f64 * 0.25 - 0.4));
        let a = enc.self_attention(&mut tape, &p, x).unwrap();
        let out = tape.value(a.output);
        for r in 1..3 {
            assert_eq!(out.row(r), out.row(0));
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let enc = ContextEncoder::new(&mut store, &mut r, "e", 8, 8);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Mat::from_shape_simple_fn((4, 8), || r.random_range(-2.0..2.0)));
        let a = enc.self_attention(&mut tape, &p, x).unwrap();
        for row in tape.value(a.weights).rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn zero_lstm_outputs_zero() {
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, &mut rng(), "b", 3, 4);
        for v in store.values_mut() {
            v.fill(0.0);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(array![[1.0, 2.0, 3.0], [-1.0, 0.5, 2.0]]);
        let y = bi.run(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(y), (2, 4));
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    /// Plain scalar LSTM step, written out gate by gate.
    fn oracle_step(x: f64, h: f64, c: f64, wx: [f64; 4], wh: [f64; 4], b: [f64; 4]) -> (f64, f64) {
        let z: Vec<f64> = (0..4).map(|k| wx[k] * x + wh[k] * h + b[k]).collect();
        let (i, f, g, o) = (sigmoid(z[0]), sigmoid(z[1]), z[2].tanh(), sigmoid(z[3]));
        let c2 = f * c + i * g;
        (o * c2.tanh(), c2)
    }

    #[test]
    fn three_step_lstm_matches_hand_recurrence() {
        let wx = [0.5, -0.3, 0.8, 0.1];
        let wh = [0.2, 0.4, -0.6, 0.7];
        let b = [0.1, 0.2, -0.1, 0.05];
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, &mut rng(), "l", 1, 1);
        *store.get_mut(lstm.input.w) = Mat::from_shape_vec((1, 4), wx.to_vec()).unwrap();
        *store.get_mut(lstm.input.b.unwrap()) = Mat::from_shape_vec((1, 4), b.to_vec()).unwrap();
        *store.get_mut(lstm.recurrent) = Mat::from_shape_vec((1, 4), wh.to_vec()).unwrap();

        let xs = [1.0, -0.5, 2.0];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(Mat::from_shape_vec((3, 1), xs.to_vec()).unwrap());
        let y = lstm.forward(&mut tape, &p, x).unwrap();

        let (mut h, mut c) = (0.0, 0.0);
        for (t, &xt) in xs.iter().enumerate() {
            (h, c) = oracle_step(xt, h, c, wx, wh, b);
            assert!((tape.value(y)[[t, 0]] - h).abs() < 1e-14, "step {t}");
        }
    }

    #[test]
    fn single_step_bilstm_is_two_independent_cells() {
        let mut store = ParamStore::new();
        let bi = BiLstm::new(&mut store, &mut rng(), "b", 2, 4);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(array![[0.7, -0.2]]);
        let y = bi.run(&mut tape, &p, x).unwrap();
        let f = bi.forward.forward(&mut tape, &p, x).unwrap();
        let b = bi.backward.forward(&mut tape, &p, x).unwrap();
        let out = tape.value(y);
        assert_eq!(out.slice(ndarray::s![.., 0..2]), tape.value(f));
        assert_eq!(out.slice(ndarray::s![.., 2..4]), tape.value(b));
    }

    #[test]
    fn encoder_shapes_and_determinism() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, &mut rng(), 10, 5, 6, 8);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let v = enc.encode_video(&mut tape, &p, &Mat::ones((1, 5))).unwrap();
        assert_eq!(tape.shape(v), (1, 8));
        let q1 = enc.encode_query(&mut tape, &p, &[3, 1, 4]).unwrap();
        let q2 = enc.encode_query(&mut tape, &p, &[3, 1, 4]).unwrap();
        assert_eq!(tape.shape(q1), (3, 8));
        assert_eq!(tape.value(q1), tape.value(q2));
        assert!(matches!(enc.encode_query(&mut tape, &p, &[10]), Err(Error::Input(_))));
    }

    #[test]
    fn encode_query_gradients() {
        let mut store = ParamStore::new();
        let enc = EncoderParams::new(&mut store, &mut rng(), 6, 3, 4, 4);
        let report = grad_check(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let q = enc.encode_query(tape, &p, &[2, 5, 0])?;
                let sq = tape.mul(q, q)?;
                Ok(tape.sum(sq))
            },
            store.values(),
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }
}
