//! Input-dependent and query-dependent selection for the diagonal SSM.
//!
//! Plain selection derives per-step `B_t`, `C_t` and `Δ_t` from the input
//! `X` alone. Text-controlled selection feeds every projection the
//! concatenation `[x_t ‖ q]`, so the query embedding steers how much each
//! step writes into and reads from the state. The recurrence itself is the
//! same in both cases and runs on the affine prefix scan.
//!
//! On a [`Tape`], [`selective_scan_op`] fuses discretization and the scan
//! into one record with a hand-written adjoint: the backward pass recomputes
//! states channel by channel and runs the adjoint recurrence in reverse, so
//! nothing of size `V·L·D·N` is retained.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::real::Real;
use crate::ssm::{scan_affine_in_place, zoh_a_sensitivity_from, zoh_factors};
use crate::tape::{sigmoid, CustomOp, Tape, Var};
use crate::tensor::Tensor;

/// Learnable maps producing `B`, `C`, `Δ` and the continuous `A`.
///
/// Projection weights are stored input-major, `[d_x + d_q, out]`; rows
/// `d_x..` form the query block. `A = −exp(log_a)` is negative for any
/// parameter value.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionProjections<T: Real = f64> {
    pub w_b: Tensor<T>,
    pub w_c: Tensor<T>,
    pub w_delta: Tensor<T>,
    pub bias_delta: Tensor<T>,
    pub log_a: Tensor<T>,
}

/// Range of initial timescales; `bias_delta` starts at softplus⁻¹ of a
/// log-uniform draw from it.
pub const DT_INIT_RANGE: (f64, f64) = (1e-3, 1e-1);

pub(crate) fn inverse_softplus(y: f64) -> f64 {
    y + (-f64::exp_m1(-y)).ln()
}

impl<T: Real> SelectionProjections<T> {
    /// Randomly initialized projections for `d_x` channels, a `d_q`-wide
    /// query (0 for plain selection) and state size `n`.
    pub fn init<R: Rng + ?Sized>(d_x: usize, d_q: usize, n: usize, rng: &mut R) -> Result<Self> {
        let d_in = d_x + d_q;
        let std = 1.0 / (d_in as f64).sqrt();
        let (lo, hi) = DT_INIT_RANGE;
        let bias = (0..d_x)
            .map(|_| {
                let dt = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
                inverse_softplus(dt)
            })
            .collect::<Vec<_>>();
        Ok(Self {
            w_b: Tensor::randn([d_in, n], std, rng)?,
            w_c: Tensor::randn([d_in, n], std, rng)?,
            w_delta: Tensor::randn([d_in, d_x], std, rng)?,
            bias_delta: Tensor::from_f64([d_x], &bias)?,
            log_a: s4d_log_a(d_x, n)?,
        })
    }

    /// All projection weights and `bias_delta` zero; `A_n = −(n + 1)`.
    pub fn zeros(d_x: usize, d_q: usize, n: usize) -> Result<Self> {
        let d_in = d_x + d_q;
        Ok(Self {
            w_b: Tensor::zeros([d_in, n])?,
            w_c: Tensor::zeros([d_in, n])?,
            w_delta: Tensor::zeros([d_in, d_x])?,
            bias_delta: Tensor::zeros([d_x])?,
            log_a: s4d_log_a(d_x, n)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.w_delta.shape()[1]
    }

    pub fn query_width(&self) -> usize {
        self.w_delta.shape()[0] - self.channels()
    }

    pub fn state_size(&self) -> usize {
        self.w_b.shape()[1]
    }

    /// Continuous `A = −exp(log_a)`, `[D, N]`.
    pub fn a(&self) -> Vec<T> {
        self.log_a.data().iter().map(|&l| -l.exp()).collect()
    }

    /// Zeroes rows `d_x..` of every projection (the query block).
    pub fn zero_query_block(&mut self) {
        let d_x = self.channels();
        for w in [&mut self.w_b, &mut self.w_c, &mut self.w_delta] {
            let cols = w.shape()[1];
            w.data_mut()[d_x * cols..].iter_mut().for_each(|v| *v = T::zero());
        }
    }

    fn validate(&self) -> Result<()> {
        let (d_x, n) = (self.channels(), self.state_size());
        let d_in = self.w_delta.shape()[0];
        let ok = self.w_b.shape() == [d_in, n]
            && self.w_c.shape() == [d_in, n]
            && self.bias_delta.shape() == [d_x]
            && self.log_a.shape() == [d_x, n];
        if ok {
            Ok(())
        } else {
            Err(invalid("selection projections have inconsistent shapes"))
        }
    }
}

fn s4d_log_a<T: Real>(d_x: usize, n: usize) -> Result<Tensor<T>> {
    let row: Vec<f64> = (0..n).map(|i| ((i + 1) as f64).ln()).collect();
    let data: Vec<f64> = (0..d_x).flat_map(|_| row.iter().copied()).collect();
    Tensor::from_f64([d_x, n], &data)
}

/// Selection projections recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct SelectionVars {
    pub w_b: Var,
    pub w_c: Var,
    pub w_delta: Var,
    pub bias_delta: Var,
    pub log_a: Var,
}

impl SelectionVars {
    /// Records `proj` as differentiable parameters.
    pub fn bind<T: Real>(tape: &mut Tape<T>, proj: &SelectionProjections<T>) -> Result<Self> {
        Ok(Self {
            w_b: tape.param(&proj.w_b)?,
            w_c: tape.param(&proj.w_c)?,
            w_delta: tape.param(&proj.w_delta)?,
            bias_delta: tape.param(&proj.bias_delta)?,
            log_a: tape.param(&proj.log_a)?,
        })
    }

    /// Records `proj` as constants.
    pub fn constant<T: Real>(tape: &mut Tape<T>, proj: &SelectionProjections<T>) -> Result<Self> {
        Ok(Self {
            w_b: tape.constant(&proj.w_b)?,
            w_c: tape.constant(&proj.w_c)?,
            w_delta: tape.constant(&proj.w_delta)?,
            bias_delta: tape.constant(&proj.bias_delta)?,
            log_a: tape.constant(&proj.log_a)?,
        })
    }
}

/// Per-step selection outputs on a tape: `Δ [V,L,D]`, `A [D,N]`,
/// `B [V,L,N]`, `C [V,L,N]`.
#[derive(Debug, Clone, Copy)]
pub struct SelectionOutputs {
    pub delta: Var,
    pub a: Var,
    pub b: Var,
    pub c: Var,
}

/// `B = Linear_B(x‖q)`, `C = Linear_C(x‖q)`, `Δ = softplus(Linear_Δ(x‖q) + bias)`.
///
/// `x` is `[V, L, d_x]`; `q`, when given, is a `[d_q]` vector broadcast to
/// every node and step.
pub fn select_on_tape<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    q: Option<Var>,
    vars: &SelectionVars,
) -> Result<SelectionOutputs> {
    let xs = tape.shape(x)?.to_vec();
    if xs.len() != 3 {
        return Err(invalid(format!("selection input must be [V, L, D], got {xs:?}")));
    }
    let d_in = tape.shape(vars.w_delta)?[0];
    let input = match q {
        Some(q) => {
            let qs = tape.shape(q)?.to_vec();
            if qs.len() != 1 || xs[2] + qs[0] != d_in {
                return Err(Error::ShapeMismatch {
                    op: "text-controlled selection: query width",
                    lhs: vec![d_in - xs[2]],
                    rhs: qs,
                });
            }
            let qb = tape.broadcast_to(q, [xs[0], xs[1], qs[0]])?;
            tape.concat(&[x, qb], 2)?
        }
        None => {
            if xs[2] != d_in {
                return Err(Error::ShapeMismatch {
                    op: "selection: input width",
                    lhs: vec![d_in],
                    rhs: vec![xs[2]],
                });
            }
            x
        }
    };
    let b = tape.linear(input, vars.w_b, None)?;
    let c = tape.linear(input, vars.w_c, None)?;
    let pre = tape.linear(input, vars.w_delta, Some(vars.bias_delta))?;
    let delta = tape.softplus(pre)?;
    let ea = tape.exp(vars.log_a)?;
    let a = tape.neg(ea)?;
    Ok(SelectionOutputs { delta, a, b, c })
}

/// Materialized per-step parameters of a selective SSM.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedParams<T: Real = f64> {
    /// (V, L, D, N)
    pub dims: (usize, usize, usize, usize),
    /// `[V, L, N]`
    pub b: Vec<T>,
    /// `[V, L, N]`
    pub c: Vec<T>,
    /// `[V, L, D]`, strictly positive
    pub delta: Vec<T>,
    /// Continuous `A`, `[D, N]`
    pub a: Vec<T>,
    /// `[V, L, D, N]`
    pub a_bar: Vec<T>,
    /// `[V, L, D, N]`
    pub b_bar: Vec<T>,
}

impl<T: Real> SelectedParams<T> {
    /// Discretizes given per-step `Δ`, `B`, `C` and continuous `A`.
    pub fn from_parts(
        dims: (usize, usize, usize, usize),
        delta: Vec<T>,
        a: Vec<T>,
        b: Vec<T>,
        c: Vec<T>,
    ) -> Result<Self> {
        let (v, l, d, n) = dims;
        if delta.len() != v * l * d || a.len() != d * n || b.len() != v * l * n || c.len() != v * l * n {
            return Err(invalid(format!("selected parameter sizes do not match dims {dims:?}")));
        }
        if let Some(bad) = delta.iter().find(|&&x| !(x > T::zero()) || !x.is_finite()) {
            return Err(invalid(format!("timescales must be positive and finite, found {bad}")));
        }
        let mut a_bar = Vec::with_capacity(v * l * d * n);
        let mut b_bar = Vec::with_capacity(v * l * d * n);
        for vi in 0..v {
            for t in 0..l {
                let row = vi * l + t;
                for di in 0..d {
                    let dt = delta[row * d + di];
                    for k in 0..n {
                        let (ab, f) = zoh_factors(dt, a[di * n + k]);
                        a_bar.push(ab);
                        b_bar.push(f * b[row * n + k]);
                    }
                }
            }
        }
        Ok(Self {
            dims,
            b,
            c,
            delta,
            a,
            a_bar,
            b_bar,
        })
    }
}

fn check_input<T: Real>(x: &Tensor<T>, proj: &SelectionProjections<T>) -> Result<()> {
    proj.validate()?;
    if x.rank() != 3 || x.shape()[2] != proj.channels() {
        return Err(Error::ShapeMismatch {
            op: "selection input",
            lhs: x.shape().to_vec(),
            rhs: vec![proj.channels()],
        });
    }
    Ok(())
}

fn materialize<T: Real>(x: &Tensor<T>, q: Option<&[T]>, proj: &SelectionProjections<T>) -> Result<SelectedParams<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let qv = q
        .map(|q| tape.constant(&Tensor::new([q.len()], q.to_vec())?))
        .transpose()?;
    let vars = SelectionVars::constant(&mut tape, proj)?;
    let out = select_on_tape(&mut tape, xv, qv, &vars)?;
    let s = x.shape();
    SelectedParams::from_parts(
        (s[0], s[1], s[2], proj.state_size()),
        tape.value(out.delta)?.to_vec(),
        tape.value(out.a)?.to_vec(),
        tape.value(out.b)?.to_vec(),
        tape.value(out.c)?.to_vec(),
    )
}

/// Input-dependent selection of `X: [V, L, D]`.
pub fn select_params<T: Real>(x: &Tensor<T>, proj: &SelectionProjections<T>) -> Result<SelectedParams<T>> {
    check_input(x, proj)?;
    if proj.query_width() != 0 {
        return Err(invalid("projections expect a query; use select_params_text"));
    }
    materialize(x, None, proj)
}

/// Text-controlled selection: every projection reads `[x_t ‖ q]`.
pub fn select_params_text<T: Real>(
    x: &Tensor<T>,
    q: &[T],
    proj: &SelectionProjections<T>,
) -> Result<SelectedParams<T>> {
    check_input(x, proj)?;
    if q.len() != proj.query_width() || q.is_empty() {
        return Err(Error::ShapeMismatch {
            op: "text-controlled selection: query width",
            lhs: vec![proj.query_width()],
            rhs: vec![q.len()],
        });
    }
    if !q.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { op: "query embedding" });
    }
    materialize(x, Some(q), proj)
}

/// Runs the selective recurrence of every node/channel of `X: [V, L, D]`
/// on the parallel scan.
pub fn selective_scan<T: Real>(x: &Tensor<T>, params: &SelectedParams<T>) -> Result<Tensor<T>> {
    let (v, l, d, n) = params.dims;
    if x.shape() != [v, l, d] {
        return Err(Error::ShapeMismatch {
            op: "selective_scan",
            lhs: x.shape().to_vec(),
            rhs: vec![v, l, d],
        });
    }
    if !params
        .a_bar
        .iter()
        .chain(&params.b_bar)
        .chain(&params.c)
        .all(|p| p.is_finite())
    {
        return Err(Error::NonFinite {
            op: "selected parameters",
        });
    }
    let u = x.data();
    let mut y = vec![T::zero(); v * l * d];
    let mut abuf = vec![T::zero(); l * n];
    let mut bbuf = vec![T::zero(); l * n];
    for vi in 0..v {
        for di in 0..d {
            for t in 0..l {
                let row = vi * l + t;
                let src = (row * d + di) * n;
                abuf[t * n..(t + 1) * n].copy_from_slice(&params.a_bar[src..src + n]);
                for k in 0..n {
                    bbuf[t * n + k] = params.b_bar[src + k] * u[row * d + di];
                }
            }
            scan_affine_in_place(&mut abuf, &mut bbuf, n, None);
            for t in 0..l {
                let row = vi * l + t;
                let c = &params.c[row * n..(row + 1) * n];
                y[row * d + di] = c.iter().zip(&bbuf[t * n..(t + 1) * n]).map(|(&ci, &h)| ci * h).sum();
            }
        }
    }
    Tensor::new([v, l, d], y)
}

/// Gated recurrence `g_t = σ(Linear_Δ(x_t, q))`, `h_t = (1 − g_t) h_{t−1} + g_t x_t`
/// for a single scalar channel.
///
/// This is what the text-controlled selective scan reduces to when
/// `N = 1`, `A = −1`, `B = C = 1`: ZOH with `Δ = softplus(z)` gives
/// `Ā = exp(−softplus(z)) = 1 − σ(z)` and `B̄ = 1 − Ā = σ(z)`. The
/// update is sometimes printed as `(1 − g_t) h_{t−1} + g_t h_t`, which is
/// circular in `h_t`; the input `x_t` is the term that the ZOH derivation
/// produces, and is what this reference uses.
///
/// Only `w_delta` and `bias_delta` of `proj` are read; `A`, `B` and `C`
/// are fixed by the configuration. `proj` must have one channel and `N = 1`.
pub fn gated_rnn_reference<T: Real>(x: &[T], q: &[T], proj: &SelectionProjections<T>) -> Result<Vec<T>> {
    if proj.state_size() != 1 {
        return Err(invalid(format!(
            "gated reference requires state size 1, got {}",
            proj.state_size()
        )));
    }
    if proj.channels() != 1 || proj.query_width() != q.len() {
        return Err(invalid(
            "gated reference requires one channel and a matching query width",
        ));
    }
    let w = proj.w_delta.data();
    let bias = proj.bias_delta.data()[0];
    let q_term: T = q.iter().zip(&w[1..]).map(|(&qi, &wi)| qi * wi).sum();
    let mut h = T::zero();
    Ok(x.iter()
        .map(|&xt| {
            let g = sigmoid(w[0] * xt + q_term + bias);
            h = (T::one() - g) * h + g * xt;
            h
        })
        .collect())
}

/// The text-controlled selective scan of one scalar channel in the gated
/// configuration (`N = 1`, `A = −1`, `B = C = 1`, `Δ` from `proj`).
pub fn gated_configuration_scan<T: Real>(x: &[T], q: &[T], proj: &SelectionProjections<T>) -> Result<Vec<T>> {
    if proj.state_size() != 1 || proj.channels() != 1 {
        return Err(invalid("gated configuration requires one channel and state size 1"));
    }
    let l = x.len();
    let xt = Tensor::new([1, l, 1], x.to_vec())?;
    let selected = select_params_text(&xt, q, proj)?;
    let params = SelectedParams::from_parts(
        (1, l, 1, 1),
        selected.delta,
        vec![-T::one()],
        vec![T::one(); l],
        vec![T::one(); l],
    )?;
    Ok(selective_scan(&xt, &params)?.into_data())
}

/// Fused ZOH + selective scan with a hand-written adjoint.
///
/// Inputs: `u [V,L,D]`, `delta [V,L,D]`, `a [D,N]`, `b [V,L,N]`, `c [V,L,N]`.
/// Output `y [V,L,D]`.
pub fn selective_scan_op<T: Real>(tape: &mut Tape<T>, u: Var, sel: &SelectionOutputs) -> Result<Var> {
    let us = tape.shape(u)?.to_vec();
    if us.len() != 3 {
        return Err(invalid(format!("scan input must be [V, L, D], got {us:?}")));
    }
    let (v, l, d) = (us[0], us[1], us[2]);
    let n = tape.shape(sel.a)?[1];
    let expect = |tape: &Tape<T>, var: Var, shape: &[usize], what: &'static str| -> Result<()> {
        let s = tape.shape(var)?;
        if s != shape {
            return Err(Error::ShapeMismatch {
                op: what,
                lhs: shape.to_vec(),
                rhs: s.to_vec(),
            });
        }
        Ok(())
    };
    expect(tape, sel.delta, &[v, l, d], "selective scan delta")?;
    expect(tape, sel.a, &[d, n], "selective scan A")?;
    expect(tape, sel.b, &[v, l, n], "selective scan B")?;
    expect(tape, sel.c, &[v, l, n], "selective scan C")?;
    tape.reserve(v * l * d)?;
    let kernel = ScanKernel { v, l, d, n };
    let y = kernel.forward(
        tape.value(u)?,
        tape.value(sel.delta)?,
        tape.value(sel.a)?,
        tape.value(sel.b)?,
        tape.value(sel.c)?,
    );
    tape.custom(&[u, sel.delta, sel.a, sel.b, sel.c], vec![v, l, d], y, Box::new(kernel))
}

#[derive(Debug, Clone, Copy)]
struct ScanKernel {
    v: usize,
    l: usize,
    d: usize,
    n: usize,
}

impl ScanKernel {
    /// Runs the recurrence of channel (vi, di) in time order, calling
    /// `visit(t, k, Ā, f, h_t)` for every state entry.
    #[allow(clippy::too_many_arguments)]
    #[inline(always)]
    fn run<T: Real>(
        &self,
        vi: usize,
        di: usize,
        u: &[T],
        delta: &[T],
        a: &[T],
        b: &[T],
        h: &mut [T],
        mut visit: impl FnMut(usize, usize, T, T, T),
    ) {
        let (l, d, n) = (self.l, self.d, self.n);
        h.iter_mut().for_each(|x| *x = T::zero());
        let a = &a[di * n..(di + 1) * n];
        for t in 0..l {
            let row = vi * l + t;
            let (dt, ut) = (delta[row * d + di], u[row * d + di]);
            let bt = &b[row * n..(row + 1) * n];
            for k in 0..n {
                let (ab, f) = zoh_factors(dt, a[k]);
                h[k] = ab * h[k] + f * bt[k] * ut;
                visit(t, k, ab, f, h[k]);
            }
        }
    }

    fn forward<T: Real>(&self, u: &[T], delta: &[T], a: &[T], b: &[T], c: &[T]) -> Vec<T> {
        let (v, l, d, n) = (self.v, self.l, self.d, self.n);
        let mut y = vec![T::zero(); v * l * d];
        let mut h = vec![T::zero(); n];
        for vi in 0..v {
            for di in 0..d {
                self.run(vi, di, u, delta, a, b, &mut h, |t, k, _, _, hk| {
                    let row = vi * l + t;
                    y[row * d + di] += c[row * n + k] * hk;
                });
            }
        }
        y
    }
}

impl<T: Real> CustomOp<T> for ScanKernel {
    fn name(&self) -> &'static str {
        "selective_scan"
    }

    fn backward(&self, inputs: &[&[T]], _output: &[T], grad: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (v, l, d, n) = (self.v, self.l, self.d, self.n);
        let (u, delta, a, b, c) = (inputs[0], inputs[1], inputs[2], inputs[3], inputs[4]);
        let mut du = vec![T::zero(); u.len()];
        let mut ddelta = vec![T::zero(); delta.len()];
        let mut da = vec![T::zero(); a.len()];
        let mut db = vec![T::zero(); b.len()];
        let mut dc = vec![T::zero(); c.len()];
        let mut abar = vec![T::zero(); l * n];
        let mut hs = vec![T::zero(); l * n];
        let mut fbuf = vec![T::zero(); l * n];
        let mut h = vec![T::zero(); n];
        let mut gh = vec![T::zero(); n];
        for vi in 0..v {
            for di in 0..d {
                self.run(vi, di, u, delta, a, b, &mut h, |t, k, ab, f, hk| {
                    abar[t * n + k] = ab;
                    fbuf[t * n + k] = f;
                    hs[t * n + k] = hk;
                });
                gh.iter_mut().for_each(|g| *g = T::zero());
                let ad = &a[di * n..(di + 1) * n];
                for t in (0..l).rev() {
                    let row = vi * l + t;
                    let gy = grad[row * d + di];
                    let (dt, ut) = (delta[row * d + di], u[row * d + di]);
                    let mut g_delta = T::zero();
                    let mut g_u = T::zero();
                    for k in 0..n {
                        let ak = ad[k];
                        let bk = b[row * n + k];
                        let ab = abar[t * n + k];
                        let ht = hs[t * n + k];
                        let h_prev = if t > 0 { hs[(t - 1) * n + k] } else { T::zero() };
                        gh[k] += c[row * n + k] * gy;
                        dc[row * n + k] += gy * ht;
                        let g = gh[k];
                        let f = fbuf[t * n + k];
                        let d_abar = g * h_prev;
                        let d_bbar = g * ut;
                        g_u += g * f * bk;
                        // dĀ/dΔ = A·Ā, d(B̄/B)/dΔ = Ā
                        g_delta += d_abar * ak * ab + d_bbar * bk * ab;
                        // dĀ/dA = Δ·Ā, d(B̄/B)/dA = Δ²·s(ΔA)
                        da[di * n + k] +=
                            d_abar * dt * ab + d_bbar * bk * dt * dt * zoh_a_sensitivity_from(dt * ak, ab, f * ak);
                        db[row * n + k] += d_bbar * f;
                        gh[k] = ab * g;
                    }
                    ddelta[row * d + di] += g_delta;
                    du[row * d + di] += g_u;
                }
            }
        }
        Ok(vec![Some(du), Some(ddelta), Some(da), Some(db), Some(dc)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use crate::ssm::{conv_apply, lti_kernel, DiscreteSsm};
    use crate::tape::softplus;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_projections_give_ln2_timescale_and_zero_output() {
        let proj = SelectionProjections::<f64>::zeros(3, 0, 4).unwrap();
        let x = Tensor::randn([2, 5, 3], 1.0, &mut rng(1)).unwrap();
        let p = select_params(&x, &proj).unwrap();
        assert!(p.delta.iter().all(|&d| (d - std::f64::consts::LN_2).abs() < 1e-15));
        assert!(p.b.iter().chain(&p.c).all(|&v| v == 0.0));
        let y = selective_scan(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn time_constant_input_reduces_to_lti_convolution() {
        let mut r = rng(2);
        let (d, n, l) = (3, 4, 16);
        let proj = SelectionProjections::<f64>::init(d, 0, n, &mut r).unwrap();
        let frame: Vec<f64> = (0..d).map(|i| 0.3 + 0.2 * i as f64).collect();
        let data: Vec<f64> = (0..l).flat_map(|_| frame.iter().copied()).collect();
        let x = Tensor::new([1, l, d], data).unwrap();
        let p = select_params(&x, &proj).unwrap();
        let y = selective_scan(&x, &p).unwrap();
        for di in 0..d {
            let disc = DiscreteSsm {
                a_bar: p.a_bar[di * n..(di + 1) * n].to_vec(),
                b_bar: p.b_bar[di * n..(di + 1) * n].to_vec(),
            };
            let k = lti_kernel(&disc, &p.c[..n], l).unwrap();
            let xs: Vec<f64> = (0..l).map(|_| frame[di]).collect();
            let conv = conv_apply(&xs, &k);
            for t in 0..l {
                let got = y.data()[t * d + di];
                assert!(
                    (got - conv[t]).abs() <= 1e-12 * conv[t].abs().max(1.0),
                    "{got} vs {}",
                    conv[t]
                );
            }
        }
    }

    #[test]
    fn channel_permutation_leaves_selection_unchanged() {
        let mut r = rng(3);
        let (d, n) = (4, 3);
        let proj = SelectionProjections::<f64>::init(d, 0, n, &mut r).unwrap();
        let x = Tensor::randn([2, 6, d], 1.0, &mut r).unwrap();
        let perm = [2usize, 0, 3, 1];
        let xp: Vec<f64> = x
            .data()
            .chunks(d)
            .flat_map(|row| perm.iter().map(move |&p| row[p]))
            .collect();
        let xp = Tensor::new([2, 6, d], xp).unwrap();
        let mut pp = proj.clone();
        // input rows of every projection follow the feature permutation
        for (w, src) in [(&mut pp.w_b, &proj.w_b), (&mut pp.w_c, &proj.w_c)] {
            for (i, &p) in perm.iter().enumerate() {
                w.data_mut()[i * n..(i + 1) * n].copy_from_slice(&src.data()[p * n..(p + 1) * n]);
            }
        }
        // Δ also permutes its output columns, bias and A rows
        for (i, &pi) in perm.iter().enumerate() {
            for (j, &pj) in perm.iter().enumerate() {
                pp.w_delta.data_mut()[i * d + j] = proj.w_delta.data()[pi * d + pj];
            }
            pp.bias_delta.data_mut()[i] = proj.bias_delta.data()[pi];
            pp.log_a.data_mut()[i * n..(i + 1) * n].copy_from_slice(&proj.log_a.data()[pi * n..(pi + 1) * n]);
        }
        let a = select_params(&x, &proj).unwrap();
        let b = select_params(&xp, &pp).unwrap();
        for (x, y) in a.b.iter().zip(&b.b).chain(a.c.iter().zip(&b.c)) {
            assert!((x - y).abs() < 1e-14);
        }
        for row in 0..12 {
            for (i, &p) in perm.iter().enumerate() {
                assert!((a.delta[row * d + p] - b.delta[row * d + i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn annihilated_query_block_matches_plain_selection() {
        let mut r = rng(4);
        let (d, n) = (3, 4);
        let mut text = SelectionProjections::<f64>::init(d, d, n, &mut r).unwrap();
        text.zero_query_block();
        let plain = SelectionProjections {
            w_b: Tensor::new([d, n], text.w_b.data()[..d * n].to_vec()).unwrap(),
            w_c: Tensor::new([d, n], text.w_c.data()[..d * n].to_vec()).unwrap(),
            w_delta: Tensor::new([d, d], text.w_delta.data()[..d * d].to_vec()).unwrap(),
            bias_delta: text.bias_delta.clone(),
            log_a: text.log_a.clone(),
        };
        let x = Tensor::randn([2, 7, d], 1.0, &mut r).unwrap();
        let q: Vec<f64> = vec![0.4, -1.1, 2.0];
        let y_text = selective_scan(&x, &select_params_text(&x, &q, &text).unwrap()).unwrap();
        let y_plain = selective_scan(&x, &select_params(&x, &plain).unwrap()).unwrap();
        assert_eq!(y_text, y_plain);
    }

    #[test]
    fn distinct_queries_select_differently() {
        let mut r = rng(5);
        let proj = SelectionProjections::<f64>::init(3, 3, 4, &mut r).unwrap();
        let x = Tensor::randn([1, 6, 3], 1.0, &mut r).unwrap();
        let p1 = select_params_text(&x, &[1.0, 0.0, 0.0], &proj).unwrap();
        let p2 = select_params_text(&x, &[0.0, 1.0, 0.0], &proj).unwrap();
        let max_diff = p1
            .delta
            .iter()
            .zip(&p2.delta)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_diff > 0.0);
    }

    #[test]
    fn zero_input_timescale_is_query_softplus() {
        let (d, n) = (2, 2);
        let mut proj = SelectionProjections::<f64>::zeros(d, d, n).unwrap();
        // query block of W_Δ: rows d.., column j holds w for channel j
        let w = [[0.5, -1.0], [2.0, 0.25]];
        for (i, row) in w.iter().enumerate() {
            for (j, &val) in row.iter().enumerate() {
                proj.w_delta.data_mut()[(d + i) * d + j] = val;
            }
        }
        let q = [0.3, -0.7];
        let x = Tensor::zeros([1, 5, d]).unwrap();
        let p = select_params_text(&x, &q, &proj).unwrap();
        for t in 0..5 {
            for j in 0..d {
                let z = q[0] * w[0][j] + q[1] * w[1][j];
                assert!((p.delta[t * d + j] - softplus(z)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn query_width_mismatch_is_an_error() {
        let proj = SelectionProjections::<f64>::zeros(3, 3, 2).unwrap();
        let x = Tensor::zeros([1, 4, 3]).unwrap();
        assert!(select_params_text(&x, &[1.0, 2.0], &proj).is_err());
        assert!(select_params_text(&x, &[1.0, f64::NAN, 0.0], &proj).is_err());
    }

    #[test]
    fn scan_is_causal() {
        let mut r = rng(6);
        let proj = SelectionProjections::<f64>::init(2, 0, 3, &mut r).unwrap();
        let x = Tensor::randn([2, 10, 2], 1.0, &mut r).unwrap();
        let p = select_params(&x, &proj).unwrap();
        let y0 = selective_scan(&x, &p).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[6 * 2 + 1] += 1.0;
        let y1 = selective_scan(&x2, &p).unwrap();
        for t in 0..6 {
            for di in 0..2 {
                assert_eq!(y0.at(&[0, t, di]).to_bits(), y1.at(&[0, t, di]).to_bits());
            }
        }
        assert_ne!(y0.at(&[0, 6, 1]), y1.at(&[0, 6, 1]));
    }

    #[test]
    fn static_params_match_scalar_recurrence() {
        // Ā = 0.5, B̄ = 0.5 via A = −1, Δ = ln 2, B = 1, C = 1
        let l = 3;
        let p = SelectedParams::from_parts(
            (1, l, 1, 1),
            vec![std::f64::consts::LN_2; l],
            vec![-1.0],
            vec![1.0; l],
            vec![1.0; l],
        )
        .unwrap();
        let x = Tensor::from_f64([1, l, 1], &[1.0, 1.0, 1.0]).unwrap();
        let y = selective_scan(&x, &p).unwrap();
        for (got, want) in y.data().iter().zip([0.5, 0.75, 0.875]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gated_reference_examples() {
        let proj = SelectionProjections::<f64>::zeros(1, 2, 1).unwrap();
        let h = gated_rnn_reference(&[1.0, 1.0], &[0.3, 0.1], &proj).unwrap();
        assert!((h[0] - 0.5).abs() < 1e-15 && (h[1] - 0.75).abs() < 1e-15);
        let s = gated_configuration_scan(&[1.0, 1.0], &[0.3, 0.1], &proj).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);

        let mut saturated = proj.clone();
        saturated.bias_delta.data_mut()[0] = 40.0;
        let x = [0.3, -2.0, 5.0];
        let h = gated_rnn_reference(&x, &[0.0, 0.0], &saturated).unwrap();
        for (ht, xt) in h.iter().zip(x) {
            assert!((ht - xt).abs() < 1e-12);
        }

        let wide = SelectionProjections::<f64>::zeros(1, 2, 2).unwrap();
        assert!(gated_rnn_reference(&[1.0], &[0.0, 0.0], &wide).is_err());
    }

    #[test]
    fn fused_op_matches_materialized_path() {
        let mut r = rng(7);
        let (v, l, d, n) = (2, 9, 3, 4);
        let proj = SelectionProjections::<f64>::init(d, d, n, &mut r).unwrap();
        let x = Tensor::randn([v, l, d], 1.0, &mut r).unwrap();
        let q: Vec<f64> = (0..d).map(|i| 0.5 - i as f64 * 0.4).collect();
        let reference = selective_scan(&x, &select_params_text(&x, &q, &proj).unwrap()).unwrap();

        let mut tape = Tape::new();
        let xv = tape.constant(&x).unwrap();
        let qv = tape.constant(&Tensor::new([d], q.clone()).unwrap()).unwrap();
        let vars = SelectionVars::constant(&mut tape, &proj).unwrap();
        let sel = select_on_tape(&mut tape, xv, Some(qv), &vars).unwrap();
        let y = selective_scan_op(&mut tape, xv, &sel).unwrap();
        let diff = tape
            .value(y)
            .unwrap()
            .iter()
            .zip(reference.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-13, "{diff}");
    }

    #[test]
    fn fused_op_gradients_match_finite_differences() {
        let mut r = rng(8);
        let (v, l, d, n) = (4, 8, 6, 3);
        let u = Tensor::<f64>::randn([v, l, d], 1.0, &mut r).unwrap();
        let delta_pre = Tensor::randn([v, l, d], 0.5, &mut r).unwrap();
        let log_a = Tensor::uniform([d, n], -0.5, 1.0, &mut r).unwrap();
        let b = Tensor::randn([v, l, n], 1.0, &mut r).unwrap();
        let c = Tensor::randn([v, l, n], 1.0, &mut r).unwrap();
        let w = Tensor::randn([v, l, d], 1.0, &mut r).unwrap();
        let report = finite_diff_check(
            |tape, xs| {
                let delta = tape.softplus(xs[1])?;
                let ea = tape.exp(xs[2])?;
                let a = tape.neg(ea)?;
                let sel = SelectionOutputs {
                    delta,
                    a,
                    b: xs[3],
                    c: xs[4],
                };
                let y = selective_scan_op(tape, xs[0], &sel)?;
                let wv = tape.constant(&w)?;
                let p = tape.mul(y, wv)?;
                tape.sum_all(p)
            },
            &[u, delta_pre, log_a, b, c],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }
}
