//! Reference models used for memory comparisons: a temporal self-attention
//! encoder with cross-attention text injection, and an LSTM.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{TmMamba, LOSS_EPS};
use crate::params::{BoundParams, Grads, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A network mapping `(motion [V, L, C_in], q [D_q])` to frame scores `[L]`.
pub trait FrameModel<T: Real> {
    fn params(&self) -> &ParamStore<T>;

    fn scores_on_tape(&self, tape: &mut Tape<T>, bound: &BoundParams, motion: Var, q: Var) -> Result<Var>;

    /// One forward and backward pass on `tape`; returns the loss and adds
    /// parameter gradients into `grads`.
    fn forward_backward(
        &self,
        tape: &mut Tape<T>,
        motion: &Tensor<T>,
        q: &[T],
        labels: &[T],
        grads: &mut Grads<T>,
    ) -> Result<T> {
        let bound = self.params().bind(tape)?;
        let m = tape.constant(motion)?;
        let qv = tape.constant(&Tensor::new([q.len()], q.to_vec())?)?;
        let s = self.scores_on_tape(tape, &bound, m, qv)?;
        let loss = tape.bce(s, labels, T::c(LOSS_EPS))?;
        let value = tape.value(loss)?[0];
        tape.backward(loss)?;
        bound.accumulate_grads(tape, grads)?;
        Ok(value)
    }
}

impl<T: Real> FrameModel<T> for TmMamba<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn scores_on_tape(&self, tape: &mut Tape<T>, bound: &BoundParams, motion: Var, q: Var) -> Result<Var> {
        TmMamba::scores_on_tape(self, tape, bound, motion, q)
    }
}

fn linear<T: Real, R: Rng + ?Sized>(
    p: &mut ParamStore<T>,
    name: &str,
    d_in: usize,
    d_out: usize,
    bias: bool,
    rng: &mut R,
) -> Result<()> {
    p.insert(
        format!("{name}.w"),
        Tensor::randn([d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng)?,
    )?;
    if bias {
        p.insert(format!("{name}.b"), Tensor::zeros([d_out])?)?;
    }
    Ok(())
}

fn apply<T: Real>(tape: &mut Tape<T>, bound: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = bound.get(&format!("{name}.w"))?;
    let b = bound.get(&format!("{name}.b")).ok();
    tape.linear(x, w, b)
}

fn head<T: Real>(tape: &mut Tape<T>, bound: &BoundParams, h: Var, len: usize) -> Result<Var> {
    let pooled = tape.mean_axis(h, 0)?;
    let hid = apply(tape, bound, "head.0", pooled)?;
    let hid = tape.silu(hid)?;
    let logit = apply(tape, bound, "head.1", hid)?;
    let logit = tape.reshape(logit, [len])?;
    tape.sigmoid(logit)
}

fn check_motion(shape: &[usize], v: usize, c_in: usize) -> Result<usize> {
    if shape.len() != 3 || shape[0] != v || shape[2] != c_in {
        return Err(Error::ShapeMismatch {
            op: "baseline input [V, L, C_in]",
            lhs: vec![v, 0, c_in],
            rhs: shape.to_vec(),
        });
    }
    Ok(shape[1])
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_nodes: usize,
    pub c_in: usize,
}

/// One pre-norm encoder layer: temporal self-attention per node,
/// cross-attention from frames to the query token, and a feed-forward block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBaseline<T: Real = f64> {
    pub config: AttentionConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> AttentionBaseline<T> {
    pub fn init<R: Rng + ?Sized>(config: AttentionConfig, rng: &mut R) -> Result<Self> {
        let d = config.d_model;
        if config.num_heads == 0 || d % config.num_heads != 0 {
            return Err(invalid("d_model must be a positive multiple of num_heads"));
        }
        let mut p = ParamStore::new();
        linear(&mut p, "embed", config.c_in, d, true, rng)?;
        for name in [
            "self.q", "self.k", "self.v", "self.o", "cross.q", "cross.k", "cross.v", "cross.o",
        ] {
            linear(&mut p, name, d, d, false, rng)?;
        }
        linear(&mut p, "ffn.0", d, 2 * d, true, rng)?;
        linear(&mut p, "ffn.1", 2 * d, d, true, rng)?;
        for name in ["norm.0.scale", "norm.1.scale", "norm.2.scale"] {
            p.insert(name, Tensor::ones([d])?)?;
        }
        linear(&mut p, "head.0", d, d, true, rng)?;
        linear(&mut p, "head.1", d, 1, true, rng)?;
        Ok(Self { config, params: p })
    }

    fn heads(&self, tape: &mut Tape<T>, x: Var, v: usize, l: usize) -> Result<Var> {
        let h = self.config.num_heads;
        let split = tape.reshape(x, [v, l, h, self.config.d_model / h])?;
        tape.swap_axes(split, 1, 2)
    }
}

impl<T: Real> FrameModel<T> for AttentionBaseline<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn scores_on_tape(&self, tape: &mut Tape<T>, bound: &BoundParams, motion: Var, q: Var) -> Result<Var> {
        let (v, d, heads) = (self.config.num_nodes, self.config.d_model, self.config.num_heads);
        let l = check_motion(tape.shape(motion)?, v, self.config.c_in)?;
        if tape.shape(q)? != [d] {
            return Err(invalid("query width must equal d_model"));
        }
        let eps = T::c(1e-5);
        let mut h = apply(tape, bound, "embed", motion)?;

        let x = tape.rms_norm(h, bound.get("norm.0.scale")?, eps)?;
        let qs = apply(tape, bound, "self.q", x)?;
        let ks = apply(tape, bound, "self.k", x)?;
        let vs = apply(tape, bound, "self.v", x)?;
        let qh = self.heads(tape, qs, v, l)?;
        let kh = self.heads(tape, ks, v, l)?;
        let vh = self.heads(tape, vs, v, l)?;
        let kt = tape.swap_axes(kh, 2, 3)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, T::c(1.0 / ((d / heads) as f64).sqrt()))?;
        let attn = tape.softmax(scores)?;
        let mixed = tape.matmul(attn, vh)?;
        let mixed = tape.swap_axes(mixed, 1, 2)?;
        let mixed = tape.reshape(mixed, [v, l, d])?;
        let o = apply(tape, bound, "self.o", mixed)?;
        h = tape.add(h, o)?;

        let x = tape.rms_norm(h, bound.get("norm.1.scale")?, eps)?;
        let qc = apply(tape, bound, "cross.q", x)?;
        let token = tape.reshape(q, [1, d])?;
        let kc = apply(tape, bound, "cross.k", token)?;
        let vc = apply(tape, bound, "cross.v", token)?;
        let kct = tape.transpose(kc)?;
        let sc = tape.matmul(qc, kct)?;
        let sc = tape.scale(sc, T::c(1.0 / (d as f64).sqrt()))?;
        let pc = tape.softmax(sc)?;
        let oc = tape.matmul(pc, vc)?;
        let oc = apply(tape, bound, "cross.o", oc)?;
        h = tape.add(h, oc)?;

        let x = tape.rms_norm(h, bound.get("norm.2.scale")?, eps)?;
        let f = apply(tape, bound, "ffn.0", x)?;
        let f = tape.silu(f)?;
        let f = apply(tape, bound, "ffn.1", f)?;
        h = tape.add(h, f)?;
        head(tape, bound, h, l)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentConfig {
    pub hidden: usize,
    pub num_nodes: usize,
    pub c_in: usize,
    /// Query width; the query is appended to every frame's input.
    pub d_query: usize,
}

/// Per-node LSTM over time with the query appended to each input frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentBaseline<T: Real = f64> {
    pub config: RecurrentConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> RecurrentBaseline<T> {
    pub fn init<R: Rng + ?Sized>(config: RecurrentConfig, rng: &mut R) -> Result<Self> {
        let hd = config.hidden;
        if hd == 0 {
            return Err(invalid("hidden size must be positive"));
        }
        let mut p = ParamStore::new();
        linear(&mut p, "input", config.c_in + config.d_query, 4 * hd, true, rng)?;
        linear(&mut p, "recurrent", hd, 4 * hd, false, rng)?;
        linear(&mut p, "head.0", hd, hd, true, rng)?;
        linear(&mut p, "head.1", hd, 1, true, rng)?;
        Ok(Self { config, params: p })
    }
}

impl<T: Real> FrameModel<T> for RecurrentBaseline<T> {
    fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    fn scores_on_tape(&self, tape: &mut Tape<T>, bound: &BoundParams, motion: Var, q: Var) -> Result<Var> {
        let (v, hd, dq) = (self.config.num_nodes, self.config.hidden, self.config.d_query);
        let l = check_motion(tape.shape(motion)?, v, self.config.c_in)?;
        if tape.shape(q)? != [dq] {
            return Err(invalid("query width must equal d_query"));
        }
        let qb = tape.broadcast_to(q, [v, l, dq])?;
        let inp = tape.concat(&[motion, qb], 2)?;
        let pre = apply(tape, bound, "input", inp)?;
        let w_rec = bound.get("recurrent.w")?;
        let mut h = tape.constant(&Tensor::zeros([v, hd])?)?;
        let mut c = h;
        let mut outs = Vec::with_capacity(l);
        for t in 0..l {
            let xt = tape.slice(pre, 1, t, 1)?;
            let xt = tape.reshape(xt, [v, 4 * hd])?;
            let rec = tape.matmul(h, w_rec)?;
            let gates = tape.add(xt, rec)?;
            let gate = |tape: &mut Tape<T>, k: usize| tape.slice(gates, 1, k * hd, hd);
            let (i, f, g, o) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
            let i = tape.sigmoid(i)?;
            let f = tape.sigmoid(f)?;
            let g = tape.tanh(g)?;
            let o = tape.sigmoid(o)?;
            let fc = tape.mul(f, c)?;
            let ig = tape.mul(i, g)?;
            c = tape.add(fc, ig)?;
            let tc = tape.tanh(c)?;
            h = tape.mul(o, tc)?;
            outs.push(tape.reshape(h, [v, 1, hd])?);
        }
        let all = tape.concat(&outs, 1)?;
        head(tape, bound, all, l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run<M: FrameModel<f64>>(m: &M, v: usize, l: usize, dq: usize) -> (f64, usize) {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let motion = Tensor::randn([v, l, 3], 1.0, &mut r).unwrap();
        let q: Vec<f64> = (0..dq).map(|i| i as f64 * 0.1).collect();
        let labels: Vec<f64> = (0..l).map(|t| (t % 3 == 0) as u8 as f64).collect();
        let mut tape = Tape::new();
        let mut grads = m.params().zero_grads();
        let loss = m.forward_backward(&mut tape, &motion, &q, &labels, &mut grads).unwrap();
        (loss, tape.peak())
    }

    #[test]
    fn attention_memory_grows_quadratically() {
        let cfg = AttentionConfig {
            d_model: 8,
            num_heads: 2,
            num_nodes: 2,
            c_in: 3,
        };
        let m = AttentionBaseline::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (loss, p1) = run(&m, 2, 64, 8);
        assert!(loss.is_finite() && loss > 0.0);
        let (_, p2) = run(&m, 2, 128, 8);
        let ratio = p2 as f64 / p1 as f64;
        assert!(ratio > 3.0, "{ratio}");
    }

    #[test]
    fn recurrent_runs_and_scales_linearly() {
        let cfg = RecurrentConfig {
            hidden: 4,
            num_nodes: 2,
            c_in: 3,
            d_query: 5,
        };
        let m = RecurrentBaseline::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let (loss, p1) = run(&m, 2, 32, 5);
        assert!(loss.is_finite());
        let (_, p2) = run(&m, 2, 64, 5);
        let ratio = p2 as f64 / p1 as f64;
        assert!((1.8..2.2).contains(&ratio), "{ratio}");
    }

    #[test]
    fn recurrent_gradients_match_finite_differences() {
        let cfg = RecurrentConfig {
            hidden: 2,
            num_nodes: 2,
            c_in: 3,
            d_query: 2,
        };
        let m = RecurrentBaseline::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let motion = Tensor::randn([2, 4, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let w = m.params.get("recurrent.w").unwrap().clone();
        let report = crate::gradcheck::finite_diff_check(
            |tape, xs| {
                let mut bound = m.params.bind_constant(tape)?;
                bound = bound.with("recurrent.w", xs[0]);
                let mv = tape.constant(&motion)?;
                let q = tape.constant(&Tensor::from_f64([2], &[0.3, -0.2])?)?;
                let s = m.scores_on_tape(tape, &bound, mv, q)?;
                tape.bce(s, &[1.0, 0.0, 0.0, 1.0], 1e-7)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "{report:?}");
    }
}
