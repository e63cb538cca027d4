//! Temporal annotation transforms: overlap merging, one-to-many
//! consolidation and corpus statistics.

use std::collections::BTreeMap;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, DataError, Result};
use crate::eval::Segment;

/// Default overlap ratio for [`merge_overlapping`].
pub const MERGE_RATIO: f64 = 0.8;
pub const TEXT_JOIN: &str = "; ";

/// A text query and the frames of one sequence it describes. Segments are
/// kept sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AnnotationRecord")]
pub struct AnnotationItem {
    pub sequence_id: String,
    pub text: String,
    pub segments: Vec<Segment>,
    pub sequence_length: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    sequence_id: String,
    text: String,
    segments: Vec<Segment>,
    sequence_length: usize,
}

impl TryFrom<AnnotationRecord> for AnnotationItem {
    type Error = DataError;

    fn try_from(r: AnnotationRecord) -> Result<Self> {
        AnnotationItem::new(r.sequence_id, r.text, r.segments, r.sequence_length)
    }
}

impl AnnotationItem {
    pub fn new(
        sequence_id: impl Into<String>,
        text: impl Into<String>,
        mut segments: Vec<Segment>,
        sequence_length: usize,
    ) -> Result<Self> {
        segments.sort();
        let item = Self {
            sequence_id: sequence_id.into(),
            text: text.into(),
            segments,
            sequence_length,
        };
        item.validate()?;
        Ok(item)
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(invalid(format!("{}: item without segments", self.sequence_id)));
        }
        if self.segments.iter().any(|s| s.end() > self.sequence_length) {
            return Err(invalid(format!(
                "{}: segment beyond sequence length {}",
                self.sequence_id, self.sequence_length
            )));
        }
        if self.segments.windows(2).any(|w| w[0].start() > w[1].start()) {
            return Err(invalid(format!("{}: segments not sorted", self.sequence_id)));
        }
        Ok(())
    }

    /// Frames covered by at least one segment.
    pub fn coverage(&self) -> usize {
        coalesce(self.segments.clone()).iter().map(Segment::len).sum()
    }
}

/// Which segment length the overlap is compared against. `Either` accepts
/// when the overlap reaches the ratio of either segment, which coincides
/// with `Min`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapRule {
    #[default]
    Min,
    Max,
    Either,
}

impl FromStr for OverlapRule {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "min" => Ok(Self::Min),
            "max" => Ok(Self::Max),
            "either" => Ok(Self::Either),
            _ => Err(invalid(format!("unknown overlap rule {s:?}"))),
        }
    }
}

impl OverlapRule {
    pub fn accepts(self, a: &Segment, b: &Segment, ratio: f64) -> bool {
        let overlap = a.intersection(b);
        if overlap == 0 {
            return false;
        }
        let o = overlap as f64;
        match self {
            Self::Min => o >= ratio * a.len().min(b.len()) as f64,
            Self::Max => o >= ratio * a.len().max(b.len()) as f64,
            Self::Either => o >= ratio * a.len() as f64 || o >= ratio * b.len() as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Unit {
    seg: Segment,
    texts: Vec<String>,
    /// Source item, or `None` once merged.
    origin: Option<usize>,
}

/// Merges annotations of one sequence whose segments overlap by at least
/// `ratio` under `rule`, replacing each accepted pair with its union
/// carrying both texts, until no pair qualifies. Units are visited in
/// ascending `(start, end, text)` order, so the result does not depend on
/// input order. Unmerged segments stay with their item; every merged
/// segment becomes its own item.
pub fn merge_overlapping(items: &[AnnotationItem], ratio: f64, rule: OverlapRule) -> Result<Vec<AnnotationItem>> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(invalid(format!("merge ratio {ratio} outside (0, 1]")));
    }
    let Some(first) = items.first() else {
        return Ok(Vec::new());
    };
    if items.iter().any(|i| i.sequence_id != first.sequence_id) {
        return Err(invalid("merge_overlapping expects items of one sequence"));
    }
    let sequence_length = items.iter().map(|i| i.sequence_length).max().unwrap_or(0);
    let mut units: Vec<Unit> = items
        .iter()
        .enumerate()
        .flat_map(|(i, it)| {
            it.segments.iter().map(move |&seg| Unit {
                seg,
                texts: vec![it.text.clone()],
                origin: Some(i),
            })
        })
        .collect();
    units.sort_by(|a, b| (a.seg, &a.texts).cmp(&(b.seg, &b.texts)));
    'outer: loop {
        for i in 0..units.len() {
            for j in i + 1..units.len() {
                if units[j].seg.start() >= units[i].seg.end() {
                    break;
                }
                if rule.accepts(&units[i].seg, &units[j].seg, ratio) {
                    let b = units.remove(j);
                    let a = units.remove(i);
                    let seg = Segment::new(a.seg.start().min(b.seg.start()), a.seg.end().max(b.seg.end()))?;
                    let mut texts = a.texts;
                    for t in b.texts {
                        if !texts.contains(&t) {
                            texts.push(t);
                        }
                    }
                    let unit = Unit {
                        seg,
                        texts,
                        origin: None,
                    };
                    let at = units.partition_point(|u| (u.seg, &u.texts) < (unit.seg, &unit.texts));
                    units.insert(at, unit);
                    continue 'outer;
                }
            }
        }
        break;
    }
    let mut kept: BTreeMap<usize, Vec<Segment>> = BTreeMap::new();
    let mut out = Vec::new();
    for u in units {
        match u.origin {
            Some(i) => kept.entry(i).or_default().push(u.seg),
            None => out.push(AnnotationItem {
                sequence_id: first.sequence_id.clone(),
                text: u.texts.join(TEXT_JOIN),
                segments: vec![u.seg],
                sequence_length,
            }),
        }
    }
    for (i, segments) in kept {
        let src = &items[i];
        out.push(AnnotationItem {
            sequence_id: src.sequence_id.clone(),
            text: src.text.clone(),
            segments,
            sequence_length: src.sequence_length,
        });
    }
    out.sort_by(|a, b| (&a.segments, &a.text).cmp(&(&b.segments, &b.text)));
    Ok(out)
}

fn by_sequence(items: &[AnnotationItem]) -> BTreeMap<&str, Vec<AnnotationItem>> {
    let mut groups: BTreeMap<&str, Vec<AnnotationItem>> = BTreeMap::new();
    for it in items {
        groups.entry(it.sequence_id.as_str()).or_default().push(it.clone());
    }
    groups
}

/// [`merge_overlapping`] applied to every sequence in parallel; output is
/// ordered by sequence id.
pub fn merge_corpus(items: &[AnnotationItem], ratio: f64, rule: OverlapRule) -> Result<Vec<AnnotationItem>> {
    let groups: Vec<Vec<AnnotationItem>> = by_sequence(items).into_values().collect();
    let merged = groups
        .par_iter()
        .map(|g| merge_overlapping(g, ratio, rule))
        .collect::<Result<Vec<_>>>()?;
    Ok(merged.into_iter().flatten().collect())
}

/// Sorts and joins overlapping segments.
pub fn coalesce(mut segments: Vec<Segment>) -> Vec<Segment> {
    segments.sort();
    let mut out: Vec<Segment> = Vec::with_capacity(segments.len());
    for s in segments {
        match out.last_mut() {
            Some(last) if s.start() < last.end() => {
                if s.end() > last.end() {
                    *last = Segment::new(last.start(), s.end()).expect("non-empty");
                }
            }
            _ => out.push(s),
        }
    }
    out
}

/// One item per `(sequence_id, text)` holding the coalesced union of its
/// segments, ordered by key.
pub fn one_to_many(items: &[AnnotationItem]) -> Vec<AnnotationItem> {
    let mut groups: BTreeMap<(&str, &str), (Vec<Segment>, usize)> = BTreeMap::new();
    for it in items {
        let e = groups.entry((it.sequence_id.as_str(), it.text.as_str())).or_default();
        e.0.extend_from_slice(&it.segments);
        e.1 = e.1.max(it.sequence_length);
    }
    groups
        .into_iter()
        .map(|((sid, text), (segs, len))| AnnotationItem {
            sequence_id: sid.to_string(),
            text: text.to_string(),
            segments: coalesce(segs),
            sequence_length: len,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    fn of(values: &[f64]) -> Self {
        let count = values.len();
        Self {
            count,
            mean: values.iter().sum::<f64>() / count.max(1) as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// Bin `k` covers `[edges[k], edges[k + 1])`; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let k = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { edges, counts }
    }

    /// Unit-width bins spanning the integer range of `values`, merged to at
    /// most 50 bins.
    fn integer(values: &[f64]) -> Self {
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min).floor();
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max).floor() + 1.0;
        let span = (hi - lo) as usize;
        let bins = span.clamp(1, 50);
        let width = (span as f64 / bins as f64).ceil();
        Self::build(values, lo, lo + width * bins as f64, bins)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub num_items: usize,
    pub num_sequences: usize,
    pub num_segments: usize,
    /// Per sequence.
    pub frame_number: Summary,
    /// Whitespace tokens per query.
    pub query_length: Summary,
    /// Covered frames over sequence length, per item.
    pub grounded_ratio: Summary,
    pub segments_per_query: Summary,
    pub histograms: BTreeMap<String, Histogram>,
}

/// Totals, summaries and histograms of an annotation corpus.
pub fn corpus_stats(items: &[AnnotationItem]) -> Result<CorpusStats> {
    if items.is_empty() {
        return Err(invalid("no annotation items"));
    }
    let mut lengths: BTreeMap<&str, usize> = BTreeMap::new();
    for it in items {
        let e = lengths.entry(it.sequence_id.as_str()).or_default();
        *e = (*e).max(it.sequence_length);
    }
    let frames: Vec<f64> = lengths.values().map(|&l| l as f64).collect();
    let tokens: Vec<f64> = items.iter().map(|i| i.text.split_whitespace().count() as f64).collect();
    let ratios: Vec<f64> = items
        .iter()
        .map(|i| i.coverage() as f64 / i.sequence_length as f64)
        .collect();
    let counts: Vec<f64> = items.iter().map(|i| i.segments.len() as f64).collect();
    let frame_hi = frames.iter().copied().fold(0.0, f64::max);
    let histograms = BTreeMap::from([
        ("frame_number".to_string(), Histogram::build(&frames, 0.0, frame_hi, 10)),
        ("query_length".to_string(), Histogram::integer(&tokens)),
        ("grounded_ratio".to_string(), Histogram::build(&ratios, 0.0, 1.0, 10)),
        ("segments_per_query".to_string(), Histogram::integer(&counts)),
    ]);
    Ok(CorpusStats {
        num_items: items.len(),
        num_sequences: lengths.len(),
        num_segments: items.iter().map(|i| i.segments.len()).sum(),
        frame_number: Summary::of(&frames),
        query_length: Summary::of(&tokens),
        grounded_ratio: Summary::of(&ratios),
        segments_per_query: Summary::of(&counts),
        histograms,
    })
}

impl CorpusStats {
    /// `metric,bin_start,bin_end,count` rows.
    pub fn write_histograms_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "bin_start", "bin_end", "count"])?;
        for (name, h) in &self.histograms {
            for (k, c) in h.counts.iter().enumerate() {
                out.write_record([
                    name.clone(),
                    h.edges[k].to_string(),
                    h.edges[k + 1].to_string(),
                    c.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}
