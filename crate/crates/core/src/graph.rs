//! Skeleton graphs and the adaptive graph convolution producing the
//! relational embedding `R = f(X)`.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Undirected node graph, as stored on disk:
/// `{"num_nodes": 3, "edges": [[0, 1], [1, 2]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub num_nodes: usize,
    pub edges: Vec<[usize; 2]>,
}

impl SkeletonGraph {
    pub fn new(num_nodes: usize, edges: Vec<[usize; 2]>) -> Result<Self> {
        let g = Self { num_nodes, edges };
        g.validate()?;
        Ok(g)
    }

    /// Path graph `0 – 1 – … – (n−1)`.
    pub fn chain(num_nodes: usize) -> Result<Self> {
        Self::new(num_nodes, (1..num_nodes).map(|i| [i - 1, i]).collect())
    }

    /// Heap-ordered binary tree: node `i > 0` attaches to `(i − 1) / 2`.
    pub fn tree(num_nodes: usize) -> Result<Self> {
        Self::new(num_nodes, (1..num_nodes).map(|i| [(i - 1) / 2, i]).collect())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Self = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("graph serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::Graph("graph must have at least one node".into()));
        }
        let mut seen = BTreeSet::new();
        for &[i, j] in &self.edges {
            if i >= self.num_nodes || j >= self.num_nodes {
                return Err(Error::Graph(format!(
                    "edge ({i}, {j}) references a node outside 0..{}",
                    self.num_nodes
                )));
            }
            if i == j {
                return Err(Error::Graph(format!(
                    "edge ({i}, {j}) is a self-loop; self-loops are implicit"
                )));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::Graph(format!("duplicate edge ({i}, {j})")));
            }
        }
        Ok(())
    }

    /// `D^{-1/2} (A + I) D^{-1/2}`.
    pub fn normalized_adjacency<T: Real>(&self) -> Result<Tensor<T>> {
        normalize_adjacency(&self.edges, self.num_nodes)
    }

    /// The graph with node `i` renamed `perm[i]`.
    pub fn relabel(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.num_nodes {
            return Err(Error::Graph("permutation length differs from node count".into()));
        }
        Self::new(
            self.num_nodes,
            self.edges.iter().map(|&[i, j]| [perm[i], perm[j]]).collect(),
        )
    }
}

/// Symmetric normalization with self-loops, `D^{-1/2} (A + I) D^{-1/2}`.
pub fn normalize_adjacency<T: Real>(edges: &[[usize; 2]], num_nodes: usize) -> Result<Tensor<T>> {
    SkeletonGraph {
        num_nodes,
        edges: edges.to_vec(),
    }
    .validate()?;
    let v = num_nodes;
    let mut a = vec![0.0f64; v * v];
    for i in 0..v {
        a[i * v + i] = 1.0;
    }
    for &[i, j] in edges {
        a[i * v + j] = 1.0;
        a[j * v + i] = 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..v)
        .map(|i| 1.0 / a[i * v..(i + 1) * v].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..v {
        for j in 0..v {
            a[i * v + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Tensor::from_f64([v, v], &a)
}

/// Adaptive graph convolution: fixed topology, a free learned adjacency
/// and a data-dependent adjacency from embedded node summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct AgcnLayer<T: Real = f64> {
    /// `[V, V]`, not trained
    pub a_static: Tensor<T>,
    /// `[V, V]`
    pub b_learned: Tensor<T>,
    /// `[D, D_e]`
    pub theta: Tensor<T>,
    /// `[D, D_e]`
    pub phi: Tensor<T>,
    /// `[D, D]`
    pub w_out: Tensor<T>,
}

/// Embedding width of the data-dependent branch for feature width `d`.
pub fn embed_width(d: usize) -> usize {
    (d / 4).max(1)
}

impl<T: Real> AgcnLayer<T> {
    pub fn init<R: Rng + ?Sized>(graph: &SkeletonGraph, d: usize, rng: &mut R) -> Result<Self> {
        let v = graph.num_nodes;
        let de = embed_width(d);
        let std = 1.0 / (d as f64).sqrt();
        Ok(Self {
            a_static: graph.normalized_adjacency()?,
            b_learned: Tensor::zeros([v, v])?,
            theta: Tensor::randn([d, de], std, rng)?,
            phi: Tensor::randn([d, de], std, rng)?,
            w_out: Tensor::randn([d, d], std, rng)?,
        })
    }

    /// Zero learned parts; `w_out = I`.
    pub fn identity(graph: &SkeletonGraph, d: usize) -> Result<Self> {
        let v = graph.num_nodes;
        let de = embed_width(d);
        Ok(Self {
            a_static: graph.normalized_adjacency()?,
            b_learned: Tensor::zeros([v, v])?,
            theta: Tensor::zeros([d, de])?,
            phi: Tensor::zeros([d, de])?,
            w_out: Tensor::eye(d)?,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.a_static.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.w_out.shape()[0]
    }
}

/// AGCN parameters recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AgcnVars {
    pub a_static: Var,
    pub b_learned: Var,
    pub theta: Var,
    pub phi: Var,
    pub w_out: Var,
}

impl AgcnVars {
    pub fn bind<T: Real>(tape: &mut Tape<T>, layer: &AgcnLayer<T>) -> Result<Self> {
        Ok(Self {
            a_static: tape.constant(&layer.a_static)?,
            b_learned: tape.param(&layer.b_learned)?,
            theta: tape.param(&layer.theta)?,
            phi: tape.param(&layer.phi)?,
            w_out: tape.param(&layer.w_out)?,
        })
    }

    pub fn constant<T: Real>(tape: &mut Tape<T>, layer: &AgcnLayer<T>) -> Result<Self> {
        Ok(Self {
            a_static: tape.constant(&layer.a_static)?,
            b_learned: tape.constant(&layer.b_learned)?,
            theta: tape.constant(&layer.theta)?,
            phi: tape.constant(&layer.phi)?,
            w_out: tape.constant(&layer.w_out)?,
        })
    }
}

/// `softmax_rows(θ(X̄) φ(X̄)ᵀ)` where `X̄` is the time mean of `x: [V, L, D]`.
pub fn data_adjacency_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, vars: &AgcnVars) -> Result<Var> {
    let xbar = tape.mean_axis(x, 1)?;
    let th = tape.matmul(xbar, vars.theta)?;
    let ph = tape.matmul(xbar, vars.phi)?;
    let pht = tape.transpose(ph)?;
    let scores = tape.matmul(th, pht)?;
    tape.softmax(scores)
}

/// `R_t = (A_static + B_learned + C_data) · X_t · W_out` for every frame.
pub fn agcn_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, vars: &AgcnVars) -> Result<Var> {
    let xs = tape.shape(x)?.to_vec();
    let v = tape.shape(vars.a_static)?[0];
    let d = tape.shape(vars.w_out)?[0];
    if xs.len() != 3 || xs[0] != v || xs[2] != d {
        return Err(Error::ShapeMismatch {
            op: "agcn_forward",
            lhs: vec![v, 0, d],
            rhs: xs,
        });
    }
    let c = data_adjacency_on_tape(tape, x, vars)?;
    let ab = tape.add(vars.a_static, vars.b_learned)?;
    let m = tape.add(ab, c)?;
    let xw = tape.linear(x, vars.w_out, None)?;
    let flat = tape.reshape(xw, [v, xs[1] * d])?;
    let mixed = tape.matmul(m, flat)?;
    tape.reshape(mixed, xs)
}

/// Relational embedding of `x: [V, L, D]`.
pub fn agcn_forward<T: Real>(x: &Tensor<T>, layer: &AgcnLayer<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let vars = AgcnVars::constant(&mut tape, layer)?;
    let r = agcn_on_tape(&mut tape, xv, &vars)?;
    tape.tensor(r)
}

/// The data-dependent adjacency `C_data` for `x`.
pub fn data_adjacency<T: Real>(x: &Tensor<T>, layer: &AgcnLayer<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x)?;
    let vars = AgcnVars::constant(&mut tape, layer)?;
    let c = data_adjacency_on_tape(&mut tape, xv, &vars)?;
    tape.tensor(c)
}

/// Channel-axis concatenation `[X ‖ R]`.
pub fn relational_concat<T: Real>(x: &Tensor<T>, r: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 || x.shape() != r.shape() {
        return Err(Error::ShapeMismatch {
            op: "relational_concat",
            lhs: x.shape().to_vec(),
            rhs: r.shape().to_vec(),
        });
    }
    let d = x.shape()[2];
    let data = x
        .data()
        .chunks(d)
        .zip(r.data().chunks(d))
        .flat_map(|(a, b)| a.iter().chain(b).copied())
        .collect();
    let s = x.shape();
    Tensor::new([s[0], s[1], 2 * d], data)
}
