//! Synthetic grounding corpora: sinusoid bursts ("motifs") on node subsets of
//! a skeleton graph, buried in Gaussian noise, with one queried motif per
//! item and frame labels marking its intervals.

use std::collections::{BTreeMap, VecDeque};
use std::f64::consts::{PI, TAU};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use ssmg_core::graph::SkeletonGraph;
use ssmg_core::{Real, Tensor};

use crate::annotation::AnnotationItem;
use crate::error::{invalid, DataError, Result};
use crate::eval::Segment;

/// Frames of cosine ramp at each end of a burst.
pub const RAMP: usize = 5;
/// Minimum gap in frames between any two inserted intervals.
pub const MIN_GAP: usize = 2;
pub const MIN_FREQ: f64 = 0.05;
pub const MAX_FREQ: f64 = 0.35;
/// Smallest frequency separation between motifs that share a phase pattern.
pub const MIN_FREQ_GAP: f64 = 0.02;
/// Largest normalized node-phase coherence between motifs that share a
/// frequency and node subset.
pub const MAX_PHASE_COHERENCE: f64 = 0.5;

const SPEC_STREAM: u64 = u64::MAX;

fn default_nodes() -> usize {
    8
}
fn default_length() -> usize {
    256
}
fn default_c_in() -> usize {
    3
}
fn default_motifs() -> usize {
    6
}
fn default_items() -> usize {
    2400
}
fn default_noise() -> f64 {
    0.1
}
fn default_amplitude() -> f64 {
    1.0
}
fn default_distractors() -> usize {
    3
}
fn default_max_len() -> usize {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    #[serde(default = "default_nodes")]
    pub num_nodes: usize,
    #[serde(default = "default_length")]
    pub length: usize,
    #[serde(default = "default_c_in")]
    pub c_in: usize,
    #[serde(default = "default_motifs")]
    pub num_motifs: usize,
    #[serde(default = "default_items")]
    pub items: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub seed: u64,
    /// Upper bound on distractor bursts per item; at least one is inserted.
    #[serde(default = "default_distractors")]
    pub max_distractors: usize,
    /// Burst duration bounds; derived from `length` when absent.
    #[serde(default)]
    pub min_duration: Option<usize>,
    #[serde(default)]
    pub max_duration: Option<usize>,
    /// Longest sequence the model accepts.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Defaults to a heap-ordered binary tree over `num_nodes`.
    #[serde(default)]
    pub graph: Option<SkeletonGraph>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_nodes: default_nodes(),
            length: default_length(),
            c_in: default_c_in(),
            num_motifs: default_motifs(),
            items: default_items(),
            noise_std: default_noise(),
            amplitude: default_amplitude(),
            seed: 0,
            max_distractors: default_distractors(),
            min_duration: None,
            max_duration: None,
            max_len: default_max_len(),
            graph: None,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.c_in == 0 || self.length == 0 {
            return Err(invalid("num_nodes, length and c_in must be positive"));
        }
        if self.length > self.max_len {
            return Err(invalid(format!(
                "length {} exceeds max_len {}",
                self.length, self.max_len
            )));
        }
        if self.num_motifs < 2 {
            return Err(invalid("at least two motifs are required"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("noise_std must be finite and non-negative"));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(invalid("amplitude must be finite and positive"));
        }
        let (lo, hi) = self.durations();
        if lo == 0 || lo > hi {
            return Err(invalid(format!("invalid duration range [{lo}, {hi}]")));
        }
        if let Some(g) = &self.graph {
            if g.num_nodes != self.num_nodes {
                return Err(invalid("graph size differs from num_nodes"));
            }
        }
        Ok(())
    }

    /// Inclusive burst duration range. The defaults put the expected
    /// labelled fraction near 0.15 with 2.5 queried bursts per item.
    pub fn durations(&self) -> (usize, usize) {
        let lo = self
            .min_duration
            .unwrap_or_else(|| ((0.03 * self.length as f64).round() as usize).max(6));
        let hi = self
            .max_duration
            .unwrap_or_else(|| ((0.09 * self.length as f64).round() as usize).max(lo));
        (lo, hi)
    }

    pub fn graph(&self) -> Result<SkeletonGraph> {
        match &self.graph {
            Some(g) => Ok(g.clone()),
            None => Ok(SkeletonGraph::tree(self.num_nodes)?),
        }
    }
}

/// A burst pattern: on node `node_subset[j]`, channel `c`, local frame `k`
/// of an `n`-frame burst with instance phase `ψ` the signal is
/// `amplitude · env_n(k) · cos(2π·frequency·k + ψ + node_phase[j] + channel_phase[c])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotifSpec {
    pub motif_id: usize,
    pub node_subset: Vec<usize>,
    /// Cycles per frame.
    pub frequency: f64,
    pub node_phase: Vec<f64>,
    pub channel_phase: Vec<f64>,
    pub amplitude: f64,
    pub min_duration: usize,
    pub max_duration: usize,
}

/// Cosine ramp envelope of an `n`-frame burst at local frame `k`.
pub fn envelope(k: usize, n: usize) -> f64 {
    let ramp = |i: usize| {
        if i >= RAMP {
            1.0
        } else {
            0.5 * (1.0 - (PI * (i + 1) as f64 / (RAMP + 1) as f64).cos())
        }
    };
    ramp(k).min(ramp(n - 1 - k))
}

impl MotifSpec {
    pub fn value(&self, j: usize, c: usize, k: usize, n: usize, psi: f64) -> f64 {
        self.amplitude
            * envelope(k, n)
            * (TAU * self.frequency * k as f64 + psi + self.node_phase[j] + self.channel_phase[c]).cos()
    }

    /// Normalized magnitude of `Σ_j exp(i(φ_j − φ'_j))` when both motifs
    /// share a node subset, else 0.
    pub fn phase_coherence(&self, other: &MotifSpec) -> f64 {
        if self.node_subset != other.node_subset {
            return 0.0;
        }
        let (re, im) = self
            .node_phase
            .iter()
            .zip(&other.node_phase)
            .fold((0.0, 0.0), |(re, im), (a, b)| (re + (a - b).cos(), im + (a - b).sin()));
        re.hypot(im) / self.node_phase.len() as f64
    }

    /// Whether two motifs differ by frequency, node subset or node phase
    /// pattern by at least the configured floors.
    pub fn distinguishable(&self, other: &MotifSpec) -> bool {
        (self.frequency - other.frequency).abs() >= MIN_FREQ_GAP || self.phase_coherence(other) <= MAX_PHASE_COHERENCE
    }
}

/// Connected node subset of size `k` grown breadth-first from `root`.
fn connected_subset(graph: &SkeletonGraph, root: usize, k: usize) -> Vec<usize> {
    let mut adj = vec![Vec::new(); graph.num_nodes];
    for &[a, b] in &graph.edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; graph.num_nodes];
    let mut out = Vec::new();
    let mut queue = VecDeque::from([root]);
    seen[root] = true;
    while let Some(v) = queue.pop_front() {
        out.push(v);
        if out.len() == k {
            break;
        }
        for &u in &adj[v] {
            if !seen[u] {
                seen[u] = true;
                queue.push_back(u);
            }
        }
    }
    out
}

/// Motif catalogue for a config. Motifs come in pairs sharing frequency and
/// nodes: the first moves its nodes in phase, the second as a travelling
/// wave, so a pair is separable only through cross-node phase.
pub fn motif_specs(config: &CorpusConfig) -> Result<Vec<MotifSpec>> {
    config.validate()?;
    let graph = config.graph()?;
    let groups = config.num_motifs.div_ceil(2);
    let gap = if groups > 1 {
        (MAX_FREQ - MIN_FREQ) / (groups - 1) as f64
    } else {
        0.0
    };
    if groups > 1 && gap < MIN_FREQ_GAP {
        return Err(invalid(format!("too many motifs ({})", config.num_motifs)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(SPEC_STREAM);
    let size = (config.num_nodes / 2).max(1);
    let channel_phase: Vec<f64> = (0..config.c_in).map(|c| TAU * c as f64 / config.c_in as f64).collect();
    let (lo, hi) = config.durations();
    let mut specs = Vec::with_capacity(config.num_motifs);
    for m in 0..config.num_motifs {
        let g = m / 2;
        let nodes = if m % 2 == 0 {
            connected_subset(&graph, rng.random_range(0..config.num_nodes), size)
        } else {
            specs
                .last()
                .map(|s: &MotifSpec| s.node_subset.clone())
                .unwrap_or_default()
        };
        let k = nodes.len();
        let node_phase = if m % 2 == 0 || k == 1 {
            vec![0.0; k]
        } else {
            (0..k).map(|j| TAU * j as f64 / k as f64).collect()
        };
        specs.push(MotifSpec {
            motif_id: m,
            node_subset: nodes,
            frequency: MIN_FREQ + gap * g as f64,
            node_phase,
            channel_phase: channel_phase.clone(),
            amplitude: config.amplitude,
            min_duration: lo,
            max_duration: hi,
        });
    }
    Ok(specs)
}

/// One sequence, its query and the frames the query refers to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ItemRecord", into = "ItemRecord")]
pub struct SyntheticItem {
    num_nodes: usize,
    length: usize,
    c_in: usize,
    /// Row-major `[V, L, C_in]`.
    motion: Vec<f64>,
    pub query_id: usize,
    labels: Vec<u8>,
    segments: Vec<Segment>,
    /// Bursts of other motifs as `(motif_id, segment)`.
    distractors: Vec<(usize, Segment)>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ItemRecord {
    motion: Vec<Vec<Vec<f64>>>,
    query_id: usize,
    labels: Vec<u8>,
    segments: Vec<Segment>,
    #[serde(default)]
    distractors: Vec<(usize, Segment)>,
}

impl From<SyntheticItem> for ItemRecord {
    fn from(it: SyntheticItem) -> Self {
        let motion = it
            .motion
            .chunks(it.length * it.c_in)
            .map(|node| node.chunks(it.c_in).map(<[f64]>::to_vec).collect())
            .collect();
        ItemRecord {
            motion,
            query_id: it.query_id,
            labels: it.labels,
            segments: it.segments,
            distractors: it.distractors,
        }
    }
}

impl TryFrom<ItemRecord> for SyntheticItem {
    type Error = DataError;

    fn try_from(r: ItemRecord) -> Result<Self> {
        let v = r.motion.len();
        let l = r.motion.first().map_or(0, Vec::len);
        let c = r.motion.first().and_then(|n| n.first()).map_or(0, Vec::len);
        if v == 0 || l == 0 || c == 0 {
            return Err(invalid("motion must be a non-empty V x L x C array"));
        }
        let mut motion = Vec::with_capacity(v * l * c);
        for node in &r.motion {
            if node.len() != l {
                return Err(invalid("ragged motion array"));
            }
            for frame in node {
                if frame.len() != c {
                    return Err(invalid("ragged motion array"));
                }
                motion.extend_from_slice(frame);
            }
        }
        SyntheticItem::new([v, l, c], motion, r.query_id, r.labels, r.segments, r.distractors)
    }
}

/// Maximal runs of ones.
pub fn label_runs(labels: &[u8]) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        if labels[t] == 0 {
            t += 1;
            continue;
        }
        let s = t;
        while t < labels.len() && labels[t] != 0 {
            t += 1;
        }
        out.push(Segment::new(s, t).expect("non-empty run"));
    }
    out
}

impl SyntheticItem {
    /// Validates shapes, finiteness and that `segments` are exactly the
    /// runs of `labels`.
    pub fn new(
        [v, l, c]: [usize; 3],
        motion: Vec<f64>,
        query_id: usize,
        labels: Vec<u8>,
        segments: Vec<Segment>,
        distractors: Vec<(usize, Segment)>,
    ) -> Result<Self> {
        if motion.len() != v * l * c || v * l * c == 0 {
            return Err(invalid("motion size does not match its shape"));
        }
        if motion.iter().any(|x| !x.is_finite()) {
            return Err(invalid("non-finite motion value"));
        }
        if labels.len() != l {
            return Err(invalid(format!("{} labels for {l} frames", labels.len())));
        }
        if labels.iter().any(|&y| y > 1) {
            return Err(invalid("labels must be 0 or 1"));
        }
        if label_runs(&labels) != segments {
            return Err(invalid("segments disagree with labels"));
        }
        if distractors.iter().any(|(_, s)| s.end() > l) {
            return Err(invalid("distractor outside the sequence"));
        }
        Ok(Self {
            num_nodes: v,
            length: l,
            c_in: c,
            motion,
            query_id,
            labels,
            segments,
            distractors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn motion(&self) -> &[f64] {
        &self.motion
    }

    pub fn at(&self, v: usize, t: usize, c: usize) -> f64 {
        self.motion[(v * self.length + t) * self.c_in + c]
    }

    pub fn motion_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_f64([self.num_nodes, self.length, self.c_in], &self.motion).expect("shape checked on construction")
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&y| y as f64).collect()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn distractors(&self) -> &[(usize, Segment)] {
        &self.distractors
    }

    pub fn grounded_ratio(&self) -> f64 {
        self.labels.iter().map(|&y| y as usize).sum::<usize>() as f64 / self.length as f64
    }
}

fn generate_item(config: &CorpusConfig, specs: &[MotifSpec], index: usize) -> Result<SyntheticItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index as u64);
    let (v, l, c) = (config.num_nodes, config.length, config.c_in);
    let m = specs.len();
    let query = index % m;
    let mut bursts: Vec<(usize, usize)> = Vec::new();
    let queried = rng.random_range(1..=4);
    for _ in 0..queried {
        let s = &specs[query];
        bursts.push((query, rng.random_range(s.min_duration..=s.max_duration)));
    }
    let twin = if query % 2 == 0 { query + 1 } else { query - 1 };
    for _ in 0..rng.random_range(1..=config.max_distractors.max(1)) {
        let id = if twin < m && rng.random_bool(0.5) {
            twin
        } else {
            let k = rng.random_range(0..m - 1);
            if k >= query {
                k + 1
            } else {
                k
            }
        };
        let s = &specs[id];
        bursts.push((id, rng.random_range(s.min_duration..=s.max_duration)));
    }
    let needed = bursts.iter().map(|b| b.1).sum::<usize>() + MIN_GAP * (bursts.len() - 1);
    if needed > l {
        return Err(DataError::InfeasiblePacking { needed, len: l });
    }
    bursts.shuffle(&mut rng);
    let slack = l - needed;
    let mut cuts: Vec<usize> = (0..bursts.len()).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();

    let noise = Normal::new(0.0, config.noise_std).map_err(|e| invalid(e.to_string()))?;
    let mut motion: Vec<f64> = (0..v * l * c).map(|_| noise.sample(&mut rng)).collect();
    let mut labels = vec![0u8; l];
    let mut distractors = Vec::new();
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (&(id, n), &cut) in bursts.iter().zip(&cuts) {
        let start = cursor + (cut - prev_cut);
        prev_cut = cut;
        let spec = &specs[id];
        let psi = rng.random_range(0.0..TAU);
        for (j, &node) in spec.node_subset.iter().enumerate() {
            for k in 0..n {
                let base = (node * l + start + k) * c;
                for ch in 0..c {
                    motion[base + ch] += spec.value(j, ch, k, n, psi);
                }
            }
        }
        let seg = Segment::new(start, start + n)?;
        if id == query {
            labels[start..start + n].fill(1);
        } else {
            distractors.push((id, seg));
        }
        cursor = start + n + MIN_GAP;
    }
    distractors.sort_by_key(|&(id, s)| (s, id));
    let segments = label_runs(&labels);
    SyntheticItem::new([v, l, c], motion, query, labels, segments, distractors)
}

/// Generates `config.items` items. Item `i` queries motif `i mod num_motifs`
/// and draws from its own random stream, so the corpus does not depend on
/// the number of worker threads.
pub fn gen_corpus(config: &CorpusConfig) -> Result<Vec<SyntheticItem>> {
    let specs = motif_specs(config)?;
    (0..config.items)
        .into_par_iter()
        .map(|i| generate_item(config, &specs, i))
        .collect()
}

/// Motif-stratified split into `(train, val)` by `fractions`, which must sum
/// to 1. Item order within each part follows the corpus.
pub fn split_indices(corpus: &[SyntheticItem], fractions: (f64, f64), seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let (a, b) = fractions;
    if !(a >= 0.0 && b >= 0.0) || ((a + b) - 1.0).abs() > 1e-9 {
        return Err(invalid("split fractions must be non-negative and sum to 1"));
    }
    if corpus.is_empty() {
        return Err(invalid("cannot split an empty corpus"));
    }
    let mut by_motif: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, it) in corpus.iter().enumerate() {
        by_motif.entry(it.query_id).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut idx in by_motif.into_values() {
        idx.shuffle(&mut rng);
        let n_train = (a * idx.len() as f64).round() as usize;
        train.extend_from_slice(&idx[..n_train]);
        val.extend_from_slice(&idx[n_train..]);
    }
    if (a > 0.0 && train.is_empty()) || (b > 0.0 && val.is_empty()) {
        return Err(invalid("split leaves a requested partition empty"));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn split(
    corpus: &[SyntheticItem],
    fractions: (f64, f64),
    seed: u64,
) -> Result<(Vec<SyntheticItem>, Vec<SyntheticItem>)> {
    let (tr, va) = split_indices(corpus, fractions, seed)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| corpus[i].clone()).collect();
    Ok((pick(tr), pick(va)))
}

/// Annotation view of a corpus: one item per sequence with the query text
/// `motif <id>`.
pub fn annotation_mirror(corpus: &[SyntheticItem]) -> Vec<AnnotationItem> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, it)| AnnotationItem {
            sequence_id: format!("seq{i:06}"),
            text: format!("motif {}", it.query_id),
            segments: it.segments.clone(),
            sequence_length: it.length,
        })
        .collect()
}

/// Query vectors keyed by motif id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEmbeddingProvider {
    table: Vec<Vec<f64>>,
    /// Whether training may update the table.
    pub learnable: bool,
}

impl QueryEmbeddingProvider {
    /// Unit vectors drawn from an isotropic Gaussian; row `m` depends only
    /// on `(m, seed)`.
    pub fn frozen(num_motifs: usize, dim: usize, seed: u64) -> Result<Self> {
        if num_motifs == 0 || dim == 0 {
            return Err(invalid("embedding table must be non-empty"));
        }
        let table = (0..num_motifs)
            .map(|m| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(m as u64);
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect();
        Ok(Self {
            table,
            learnable: false,
        })
    }

    pub fn learnable(num_motifs: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut p = Self::frozen(num_motifs, dim, seed)?;
        p.learnable = true;
        Ok(p)
    }

    pub fn from_table(table: Vec<Vec<f64>>, learnable: bool) -> Result<Self> {
        let dim = table.first().map_or(0, Vec::len);
        if dim == 0 || table.iter().any(|r| r.len() != dim) {
            return Err(invalid("embedding rows must be non-empty and equally long"));
        }
        Ok(Self { table, learnable })
    }

    pub fn embed(&self, motif_id: usize) -> Result<&[f64]> {
        self.table
            .get(motif_id)
            .map(Vec::as_slice)
            .ok_or_else(|| invalid(format!("no embedding for motif {motif_id}")))
    }

    pub fn dim(&self) -> usize {
        self.table[0].len()
    }

    pub fn num_motifs(&self) -> usize {
        self.table.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.table
    }

    pub fn rows_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.table
    }
}

/// Generalized-likelihood detector for one motif with known waveform and
/// unknown instance phase: scores every admissible burst window by the
/// energy of its complex correlation with the envelope, then accepts
/// windows greedily while their amplitude estimate reaches half of the
/// motif amplitude.
pub fn matched_filter_segments(item: &SyntheticItem, spec: &MotifSpec) -> Vec<Segment> {
    let l = item.length;
    let (lo, hi) = (spec.min_duration, spec.max_duration.min(l));
    let w = TAU * spec.frequency;
    let d: Vec<(f64, f64)> = (0..l)
        .map(|t| {
            let mut acc = (0.0, 0.0);
            for (j, &v) in spec.node_subset.iter().enumerate() {
                for c in 0..item.c_in {
                    let ph = w * t as f64 + spec.node_phase[j] + spec.channel_phase[c];
                    let x = item.at(v, t, c);
                    acc.0 += x * ph.cos();
                    acc.1 -= x * ph.sin();
                }
            }
            acc
        })
        .collect();
    let coherent = 0.5 * spec.amplitude * (spec.node_subset.len() * item.c_in) as f64;
    let mut candidates = Vec::new();
    for n in lo..=hi {
        let env: Vec<f64> = (0..n).map(|k| envelope(k, n)).collect();
        let energy: f64 = env.iter().map(|e| e * e).sum();
        for s in 0..=l.saturating_sub(n) {
            let (re, im) = env
                .iter()
                .zip(&d[s..s + n])
                .fold((0.0, 0.0), |(re, im), (e, z)| (re + e * z.0, im + e * z.1));
            let mag = re.hypot(im);
            if mag / energy >= 0.5 * coherent {
                candidates.push((mag * mag / energy, s, n));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut taken = vec![false; l];
    let mut out = Vec::new();
    for (_, s, n) in candidates {
        if taken[s..s + n].iter().any(|&x| x) {
            continue;
        }
        taken[s..s + n].fill(true);
        out.push(Segment::new(s, s + n).expect("n ≥ 1"));
    }
    out.sort();
    out
}

pub fn segments_to_labels(segments: &[Segment], length: usize) -> Vec<u8> {
    let mut y = vec![0u8; length];
    for s in segments {
        y[s.start()..s.end().min(length)].fill(1);
    }
    y
}

pub fn frame_accuracy(pred: &[u8], labels: &[u8]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}
