//! The text-controlled motion model: stacked bidirectional blocks over
//! node-structured sequences, node pooling, and a per-frame score head.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gradcheck::{finite_diff_check, GradCheck};
use crate::graph::{agcn_on_tape, AgcnLayer, AgcnVars, SkeletonGraph};
use crate::params::{BoundParams, Grads, ParamStore};
use crate::real::Real;
use crate::selective::{select_on_tape, selective_scan_op, SelectionProjections, SelectionVars};
use crate::tape::{sigmoid, CustomOp, Tape, Var};
use crate::tensor::Tensor;

/// Clamp applied to scores inside the loss.
pub const LOSS_EPS: f64 = 1e-7;

const NORM_EPS: f64 = 1e-5;

/// Which branches of the block are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Query steers the selection; otherwise it is fused into the
    /// features by an MLP ahead of a plain selective scan.
    pub text_control: bool,
    /// Graph branch feeds the relational embedding into each block.
    pub relational: bool,
    /// Forward and time-reversed scans are summed; otherwise forward only.
    pub bidirectional: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const FULL: Self = Self {
        text_control: true,
        relational: true,
        bidirectional: true,
    };
    pub const NO_TEXT_CONTROL: Self = Self {
        text_control: false,
        ..Self::FULL
    };
    pub const NO_RELATIONAL: Self = Self {
        relational: false,
        ..Self::FULL
    };
    pub const UNIDIRECTIONAL: Self = Self {
        bidirectional: false,
        ..Self::FULL
    };

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if !self.text_control {
            parts.push("no-text-control");
        }
        if !self.relational {
            parts.push("no-relational");
        }
        if !self.bidirectional {
            parts.push("unidirectional");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

/// Initialization of the continuous state matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AInit {
    /// `A_n = −(n + 1)`
    #[default]
    S4dReal,
    /// `A_n = −1`
    Unit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature width `D`; also the query embedding width.
    pub d_model: usize,
    pub num_blocks: usize,
    /// State size `N`.
    pub state_size: usize,
    pub max_len: usize,
    /// Inner width multiplier: the scans run at `expansion · D` channels.
    pub expansion: usize,
    /// Raw feature channels per node.
    pub c_in: usize,
    /// Depthwise causal convolution width per direction; 0 disables it.
    pub conv_width: usize,
    pub a_init: AInit,
    pub ablation: Ablation,
    pub graph: SkeletonGraph,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            num_blocks: 2,
            state_size: 16,
            max_len: 2000,
            expansion: 2,
            c_in: 3,
            conv_width: 4,
            a_init: AInit::S4dReal,
            ablation: Ablation::FULL,
            graph: SkeletonGraph::tree(8).expect("valid tree"),
        }
    }
}

impl ModelConfig {
    /// Width 256, three blocks, sequences up to 2000 frames.
    pub fn paper_scale(graph: SkeletonGraph) -> Self {
        Self {
            d_model: 256,
            num_blocks: 3,
            state_size: 16,
            max_len: 2000,
            graph,
            ..Self::default()
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes
    }

    pub fn inner_width(&self) -> usize {
        self.expansion * self.d_model
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("num_blocks", self.num_blocks),
            ("state_size", self.state_size),
            ("max_len", self.max_len),
            ("expansion", self.expansion),
            ("c_in", self.c_in),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(invalid(format!("model config: {name} must be positive")));
            }
        }
        SkeletonGraph::new(self.graph.num_nodes, self.graph.edges.clone())?;
        Ok(())
    }
}

/// Per-frame activation scores.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameScores<T: Real = f64> {
    pub logits: Vec<T>,
    /// `sigmoid(logits)`
    pub s: Vec<T>,
}

impl<T: Real> FrameScores<T> {
    pub fn from_logits(logits: Vec<T>) -> Self {
        let s = logits.iter().map(|&z| sigmoid(z)).collect();
        Self { logits, s }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }
}

fn check_labels<T: Real>(labels: &[T]) -> Result<()> {
    if labels.iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(invalid("labels must be 0 or 1"));
    }
    Ok(())
}

/// Mean binary cross-entropy with scores clamped to `[ε, 1 − ε]`.
pub fn loss_ce<T: Real>(scores: &FrameScores<T>, labels: &[T]) -> Result<T> {
    if scores.len() != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "loss_ce",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    check_labels(labels)?;
    let eps = T::c(LOSS_EPS);
    let one = T::one();
    let total: T = scores
        .s
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.max(eps).min(one - eps);
            -(y * p.ln() + (one - y) * (one - p).ln())
        })
        .sum();
    Ok(total / T::c(labels.len() as f64))
}

/// The network and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TmMamba<T: Real = f64> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn linear_init<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    d_in: usize,
    d_out: usize,
    rng: &mut R,
) -> Result<()> {
    let std = 1.0 / (d_in as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::randn([d_in, d_out], std, rng)?)?;
    store.insert(format!("{name}.b"), Tensor::zeros([d_out])?)
}

fn selection_names(prefix: &str) -> [String; 5] {
    ["w_b", "w_c", "w_delta", "bias_delta", "log_a"].map(|s| format!("{prefix}.{s}"))
}

impl<T: Real> TmMamba<T> {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, e, n) = (config.d_model, config.inner_width(), config.state_size);
        let ab = config.ablation;
        let mut p = ParamStore::new();
        linear_init(&mut p, "embed", config.c_in, d, rng)?;
        for bi in 0..config.num_blocks {
            let pre = format!("blocks.{bi}");
            p.insert(format!("{pre}.norm.scale"), Tensor::ones([d])?)?;
            let mut reproject_in = d;
            if ab.relational {
                let layer = AgcnLayer::<T>::init(&config.graph, d, rng)?;
                p.insert(format!("{pre}.agcn.b_learned"), layer.b_learned)?;
                p.insert(format!("{pre}.agcn.theta"), layer.theta)?;
                p.insert(format!("{pre}.agcn.phi"), layer.phi)?;
                p.insert(format!("{pre}.agcn.w_out"), layer.w_out)?;
                reproject_in = 2 * d;
            }
            linear_init(&mut p, &format!("{pre}.reproject"), reproject_in, e, rng)?;
            if !ab.text_control {
                linear_init(&mut p, &format!("{pre}.fusion.0"), e + d, e, rng)?;
                linear_init(&mut p, &format!("{pre}.fusion.1"), e, e, rng)?;
            }
            let directions: &[&str] = if ab.bidirectional { &["fwd", "bwd"] } else { &["fwd"] };
            for dir in directions {
                let dp = format!("{pre}.{dir}");
                if config.conv_width > 0 {
                    let k = config.conv_width;
                    let bound = 1.0 / (k as f64).sqrt();
                    p.insert(format!("{dp}.conv.w"), Tensor::uniform([k, e], -bound, bound, rng)?)?;
                    p.insert(format!("{dp}.conv.b"), Tensor::zeros([e])?)?;
                }
                let d_q = if ab.text_control { d } else { 0 };
                let mut sel = SelectionProjections::<T>::init(e, d_q, n, rng)?;
                if config.a_init == AInit::Unit {
                    sel.log_a = Tensor::zeros([e, n])?;
                }
                let [wb, wc, wd, bd, la] = selection_names(&format!("{dp}.sel"));
                p.insert(wb, sel.w_b)?;
                p.insert(wc, sel.w_c)?;
                p.insert(wd, sel.w_delta)?;
                p.insert(bd, sel.bias_delta)?;
                p.insert(la, sel.log_a)?;
            }
            linear_init(&mut p, &format!("{pre}.gate"), e, e, rng)?;
            linear_init(&mut p, &format!("{pre}.out"), e, d, rng)?;
        }
        linear_init(&mut p, "head.0", d, d, rng)?;
        linear_init(&mut p, "head.1", d, 1, rng)?;
        Ok(Self { config, params: p })
    }

    /// Rebuilds a model from stored parameters, checking that the names and
    /// shapes are exactly those `config` produces.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let template = Self::init(config.clone(), &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let expected: Vec<(&str, &[usize])> = template.params.iter().map(|(k, v)| (k, v.shape())).collect();
        let got: Vec<(&str, &[usize])> = params.iter().map(|(k, v)| (k, v.shape())).collect();
        if expected != got {
            return Err(invalid("parameters do not match the model configuration"));
        }
        Ok(Self { config, params })
    }

    fn check_inputs(&self, motion: &[usize], q: usize) -> Result<()> {
        let c = &self.config;
        if motion.len() != 3 || motion[0] != c.num_nodes() || motion[2] != c.c_in {
            return Err(Error::ShapeMismatch {
                op: "model input [V, L, C_in]",
                lhs: vec![c.num_nodes(), 0, c.c_in],
                rhs: motion.to_vec(),
            });
        }
        if motion[1] > c.max_len {
            return Err(invalid(format!(
                "sequence length {} exceeds max_len {}",
                motion[1], c.max_len
            )));
        }
        if q != c.d_model {
            return Err(Error::ShapeMismatch {
                op: "query width",
                lhs: vec![c.d_model],
                rhs: vec![q],
            });
        }
        Ok(())
    }

    /// Records block `index` applied to `x: [V, L, D]`.
    pub fn block_on_tape(&self, tape: &mut Tape<T>, bound: &BoundParams, index: usize, x: Var, q: Var) -> Result<Var> {
        let c = &self.config;
        let ab = c.ablation;
        let pre = format!("blocks.{index}");
        let get = |name: &str| bound.get(&format!("{pre}.{name}"));
        let xs = tape.shape(x)?.to_vec();
        if tape.shape(q)? != [c.d_model] {
            return Err(Error::ShapeMismatch {
                op: "block query width",
                lhs: vec![c.d_model],
                rhs: tape.shape(q)?.to_vec(),
            });
        }

        let xn = tape.rms_norm(x, get("norm.scale")?, T::c(NORM_EPS))?;
        let joined = if ab.relational {
            let vars = AgcnVars {
                a_static: tape.constant(&c.graph.normalized_adjacency()?)?,
                b_learned: get("agcn.b_learned")?,
                theta: get("agcn.theta")?,
                phi: get("agcn.phi")?,
                w_out: get("agcn.w_out")?,
            };
            let r = agcn_on_tape(tape, xn, &vars)?;
            tape.concat(&[xn, r], 2)?
        } else {
            xn
        };
        let mut z = tape.linear(joined, get("reproject.w")?, Some(get("reproject.b")?))?;
        if !ab.text_control {
            let qb = tape.broadcast_to(q, [xs[0], xs[1], c.d_model])?;
            let zq = tape.concat(&[z, qb], 2)?;
            let h = tape.linear(zq, get("fusion.0.w")?, Some(get("fusion.0.b")?))?;
            let h = tape.silu(h)?;
            z = tape.linear(h, get("fusion.1.w")?, Some(get("fusion.1.b")?))?;
        }
        let q_sel = ab.text_control.then_some(q);

        let mut y = self.direction(tape, bound, &format!("{pre}.fwd"), z, q_sel, false)?;
        if ab.bidirectional {
            let yb = self.direction(tape, bound, &format!("{pre}.bwd"), z, q_sel, true)?;
            y = tape.add(y, yb)?;
        }
        let g = tape.linear(z, get("gate.w")?, Some(get("gate.b")?))?;
        let g = tape.silu(g)?;
        let yg = tape.mul(y, g)?;
        let out = tape.linear(yg, get("out.w")?, Some(get("out.b")?))?;
        tape.add(out, x)
    }

    fn direction(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundParams,
        prefix: &str,
        z: Var,
        q: Option<Var>,
        reversed: bool,
    ) -> Result<Var> {
        let mut u = if reversed { tape.reverse(z, 1)? } else { z };
        if self.config.conv_width > 0 {
            let w = bound.get(&format!("{prefix}.conv.w"))?;
            let b = bound.get(&format!("{prefix}.conv.b"))?;
            u = depthwise_causal_conv(tape, u, w, b)?;
            u = tape.silu(u)?;
        }
        let [wb, wc, wd, bd, la] = selection_names(&format!("{prefix}.sel"));
        let vars = SelectionVars {
            w_b: bound.get(&wb)?,
            w_c: bound.get(&wc)?,
            w_delta: bound.get(&wd)?,
            bias_delta: bound.get(&bd)?,
            log_a: bound.get(&la)?,
        };
        let sel = select_on_tape(tape, u, q, &vars)?;
        let y = selective_scan_op(tape, u, &sel)?;
        if reversed {
            tape.reverse(y, 1)
        } else {
            Ok(y)
        }
    }

    /// Records the full network and returns the scores `s: [L]`.
    pub fn scores_on_tape(&self, tape: &mut Tape<T>, bound: &BoundParams, motion: Var, q: Var) -> Result<Var> {
        let logits = self.logits_on_tape(tape, bound, motion, q)?;
        tape.sigmoid(logits)
    }

    fn logits_on_tape(&self, tape: &mut Tape<T>, bound: &BoundParams, motion: Var, q: Var) -> Result<Var> {
        let ms = tape.shape(motion)?.to_vec();
        self.check_inputs(&ms, tape.shape(q)?.iter().product())?;
        let mut h = tape.linear(motion, bound.get("embed.w")?, Some(bound.get("embed.b")?))?;
        for bi in 0..self.config.num_blocks {
            h = self.block_on_tape(tape, bound, bi, h, q)?;
        }
        let pooled = tape.mean_axis(h, 0)?;
        let hid = tape.linear(pooled, bound.get("head.0.w")?, Some(bound.get("head.0.b")?))?;
        let hid = tape.silu(hid)?;
        let logit = tape.linear(hid, bound.get("head.1.w")?, Some(bound.get("head.1.b")?))?;
        tape.reshape(logit, [ms[1]])
    }

    /// Frame scores for `motion: [V, L, C_in]` and query `q: [D]`.
    pub fn forward(&self, motion: &Tensor<T>, q: &[T]) -> Result<FrameScores<T>> {
        self.check_inputs(motion.shape(), q.len())?;
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape)?;
        let m = tape.constant(motion)?;
        let qv = tape.constant(&Tensor::new([q.len()], q.to_vec())?)?;
        let logits = self.logits_on_tape(&mut tape, &bound, m, qv)?;
        Ok(FrameScores::from_logits(tape.value(logits)?.to_vec()))
    }

    /// Applies block `index` alone to `x: [V, L, D]`.
    pub fn block_forward(&self, index: usize, x: &Tensor<T>, q: &[T]) -> Result<Tensor<T>> {
        if index >= self.config.num_blocks {
            return Err(invalid(format!("no block {index}")));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind_constant(&mut tape)?;
        let xv = tape.constant(x)?;
        let qv = tape.constant(&Tensor::new([q.len()], q.to_vec())?)?;
        let y = self.block_on_tape(&mut tape, &bound, index, xv, qv)?;
        tape.tensor(y)
    }

    /// One forward and backward pass on `tape`; returns the loss and adds
    /// parameter gradients into `grads`.
    pub fn forward_backward(
        &self,
        tape: &mut Tape<T>,
        motion: &Tensor<T>,
        q: &[T],
        labels: &[T],
        grads: &mut Grads<T>,
    ) -> Result<T> {
        check_labels(labels)?;
        let bound = self.params.bind(tape)?;
        let m = tape.constant(motion)?;
        let qv = tape.constant(&Tensor::new([q.len()], q.to_vec())?)?;
        let s = self.scores_on_tape(tape, &bound, m, qv)?;
        let loss = tape.bce(s, labels, T::c(LOSS_EPS))?;
        let value = tape.value(loss)?[0];
        tape.backward(loss)?;
        bound.accumulate_grads(tape, grads)?;
        Ok(value)
    }

    /// Compares the tape gradient of the item loss with central differences
    /// over every parameter, in store order.
    pub fn grad_check(&self, motion: &Tensor<T>, q: &[T], labels: &[T], step: f64) -> Result<GradCheck> {
        check_labels(labels)?;
        let names: Vec<&str> = self.params.names().collect();
        let leaves: Vec<Tensor<T>> = self.params.iter().map(|(_, t)| t.clone()).collect();
        let qt = Tensor::new([q.len()], q.to_vec())?;
        finite_diff_check(
            |tape, vars| {
                let bound = BoundParams::from_pairs(names.iter().copied().zip(vars.iter().copied()));
                let m = tape.constant(motion)?;
                let qv = tape.constant(&qt)?;
                let s = self.scores_on_tape(tape, &bound, m, qv)?;
                tape.bce(s, labels, T::c(LOSS_EPS))
            },
            &leaves,
            step,
        )
    }

    /// Loss and parameter gradients for one item.
    pub fn loss_and_grads(&self, motion: &Tensor<T>, q: &[T], labels: &[T]) -> Result<(T, Grads<T>)> {
        let mut grads = self.params.zero_grads();
        let loss = self.forward_backward(&mut Tape::new(), motion, q, labels, &mut grads)?;
        Ok((loss, grads))
    }
}

/// `y[v, t, e] = b[e] + Σ_k w[k, e] · x[v, t − k, e]` over `k < K`, `k ≤ t`.
///
/// `x: [V, L, E]`, `w: [K, E]`, `b: [E]`.
pub fn depthwise_causal_conv<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = tape.shape(x)?.to_vec();
    let ws = tape.shape(w)?.to_vec();
    if xs.len() != 3 || ws.len() != 2 || ws[1] != xs[2] || tape.shape(b)? != [xs[2]] {
        return Err(Error::ShapeMismatch {
            op: "depthwise_causal_conv",
            lhs: xs,
            rhs: ws,
        });
    }
    let op = DepthwiseConv {
        v: xs[0],
        l: xs[1],
        e: xs[2],
        k: ws[0],
    };
    tape.reserve(xs.iter().product())?;
    let (xv, wv, bv) = (tape.value(x)?, tape.value(w)?, tape.value(b)?);
    let mut y = vec![T::zero(); xv.len()];
    for vi in 0..op.v {
        for t in 0..op.l {
            let row = (vi * op.l + t) * op.e;
            let out = &mut y[row..row + op.e];
            out.copy_from_slice(bv);
            for k in 0..op.k.min(t + 1) {
                let src = row - k * op.e;
                for c in 0..op.e {
                    out[c] += wv[k * op.e + c] * xv[src + c];
                }
            }
        }
    }
    tape.custom(&[x, w, b], xs, y, Box::new(op))
}

#[derive(Debug, Clone, Copy)]
struct DepthwiseConv {
    v: usize,
    l: usize,
    e: usize,
    k: usize,
}

impl<T: Real> CustomOp<T> for DepthwiseConv {
    fn name(&self) -> &'static str {
        "depthwise_causal_conv"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let e = self.e;
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); w.len()];
        let mut db = vec![T::zero(); e];
        for vi in 0..self.v {
            for t in 0..self.l {
                let row = (vi * self.l + t) * e;
                let g = &grad[row..row + e];
                db.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
                for k in 0..self.k.min(t + 1) {
                    let src = row - k * e;
                    for c in 0..e {
                        dx[src + c] += g[c] * w[k * e + c];
                        dw[k * e + c] += g[c] * x[src + c];
                    }
                }
            }
        }
        Ok(vec![Some(dx), Some(dw), Some(db)])
    }
}
