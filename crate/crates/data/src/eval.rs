//! Frame scores to temporal segments, and detection-style AP over segments.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{invalid, DataError, Result};

/// IoU thresholds reported by [`map_suite`].
pub const IOU_THRESHOLDS: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];
/// Score thresholds swept by [`scores_to_segments`] by default.
pub const SCORE_THRESHOLDS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const NMS_IOU: f64 = 0.5;

/// Half-open frame interval `[start, end)`, serialized as `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[usize; 2]", into = "[usize; 2]")]
pub struct Segment {
    start: usize,
    end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start >= end {
            return Err(invalid(format!("segment [{start}, {end}) is empty")));
        }
        Ok(Self { start, end })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    #[allow(clippy::len_without_is_empty)]
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn intersection(&self, other: &Segment) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }
}

impl TryFrom<[usize; 2]> for Segment {
    type Error = DataError;

    fn try_from([s, e]: [usize; 2]) -> Result<Self> {
        Segment::new(s, e)
    }
}

impl From<Segment> for [usize; 2] {
    fn from(s: Segment) -> Self {
        [s.start, s.end]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredSegment {
    pub segment: Segment,
    pub score: f64,
}

/// Frame-count intersection over union.
pub fn iou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.intersection(b);
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

/// Maximal runs with `s[t] ≥ θ` for every threshold, scored by the mean of
/// `s` over the run. Output is grouped by threshold, then by start.
pub fn scores_to_segments(s: &[f64], thresholds: &[f64]) -> Result<Vec<ScoredSegment>> {
    if thresholds.is_empty() {
        return Err(invalid("empty threshold list"));
    }
    if thresholds.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(invalid("thresholds must lie in (0, 1)"));
    }
    if thresholds.windows(2).any(|w| w[0] > w[1]) {
        return Err(invalid("thresholds must be sorted ascending"));
    }
    if s.iter().any(|x| !x.is_finite()) {
        return Err(invalid("non-finite frame score"));
    }
    let mut out = Vec::new();
    for &theta in thresholds {
        let mut t = 0;
        while t < s.len() {
            if s[t] < theta {
                t += 1;
                continue;
            }
            let start = t;
            let mut sum = 0.0;
            while t < s.len() && s[t] >= theta {
                sum += s[t];
                t += 1;
            }
            out.push(ScoredSegment {
                segment: Segment { start, end: t },
                score: sum / (t - start) as f64,
            });
        }
    }
    Ok(out)
}

/// Score descending, then earlier start, then shorter.
fn rank_order(a: &ScoredSegment, b: &ScoredSegment) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.segment.start.cmp(&b.segment.start))
        .then(a.segment.len().cmp(&b.segment.len()))
}

/// Greedy non-maximum suppression. The result is in rank order and pairwise
/// below `iou_threshold`.
pub fn nms(candidates: &[ScoredSegment], iou_threshold: f64) -> Vec<ScoredSegment> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(rank_order);
    let mut kept: Vec<ScoredSegment> = Vec::new();
    for c in sorted {
        if kept.iter().all(|k| iou(&k.segment, &c.segment) < iou_threshold) {
            kept.push(c);
        }
    }
    kept
}

/// Threshold sweep followed by NMS.
pub fn predict_segments(s: &[f64], thresholds: &[f64], nms_iou: f64) -> Result<Vec<ScoredSegment>> {
    Ok(nms(&scores_to_segments(s, thresholds)?, nms_iou))
}

/// Predictions and ground truth for one (sequence, query) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalItem {
    /// Query set the item is averaged under by [`map_suite`].
    pub query: usize,
    predictions: Vec<ScoredSegment>,
    ground_truth: Vec<Segment>,
}

impl EvalItem {
    /// Ground truth is stored sorted; duplicates and non-finite scores are
    /// rejected.
    pub fn new(query: usize, predictions: Vec<ScoredSegment>, mut ground_truth: Vec<Segment>) -> Result<Self> {
        ground_truth.sort();
        if ground_truth.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate ground-truth segment"));
        }
        if predictions.iter().any(|p| !p.score.is_finite()) {
            return Err(invalid("non-finite prediction score"));
        }
        Ok(Self {
            query,
            predictions,
            ground_truth,
        })
    }

    pub fn predictions(&self) -> &[ScoredSegment] {
        &self.predictions
    }

    pub fn ground_truth(&self) -> &[Segment] {
        &self.ground_truth
    }
}

/// Pooled detection AP: predictions from all items ranked together, each
/// matched to the highest-IoU unmatched ground truth of its own item. Score
/// ties are broken by item position, then start, then length.
pub fn average_precision(items: &[EvalItem], iou_threshold: f64) -> Result<f64> {
    let total_gt: usize = items.iter().map(|i| i.ground_truth.len()).sum();
    if total_gt == 0 {
        return Err(invalid("no ground-truth segments"));
    }
    let mut pooled: Vec<(usize, &ScoredSegment)> = items
        .iter()
        .enumerate()
        .flat_map(|(i, it)| it.predictions.iter().map(move |p| (i, p)))
        .collect();
    pooled.sort_by(|a, b| {
        b.1.score
            .total_cmp(&a.1.score)
            .then(a.0.cmp(&b.0))
            .then(rank_order(a.1, b.1))
    });
    let mut matched: Vec<Vec<bool>> = items.iter().map(|it| vec![false; it.ground_truth.len()]).collect();
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, (i, p)) in pooled.into_iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in items[i].ground_truth.iter().enumerate() {
            if matched[i][g] {
                continue;
            }
            let o = iou(&p.segment, gt);
            if o >= iou_threshold && best.map_or(true, |(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            matched[i][g] = true;
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / total_gt as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAp {
    pub query: usize,
    pub num_items: usize,
    pub num_ground_truth: usize,
    /// AP in percent, one entry per IoU threshold.
    pub ap: Vec<f64>,
}

/// mAP table in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct MapReport {
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    pub average: f64,
    pub per_query: Vec<QueryAp>,
}

/// AP of every query set at every threshold in [`IOU_THRESHOLDS`], averaged
/// over query sets. Sets without ground truth are skipped.
pub fn map_suite(items: &[EvalItem]) -> Result<MapReport> {
    if items.is_empty() {
        return Err(invalid("no items to evaluate"));
    }
    let mut groups: BTreeMap<usize, Vec<EvalItem>> = BTreeMap::new();
    for it in items {
        groups.entry(it.query).or_default().push(it.clone());
    }
    let per_query = groups
        .into_par_iter()
        .filter(|(_, g)| g.iter().any(|i| !i.ground_truth.is_empty()))
        .map(|(query, g)| {
            let ap = IOU_THRESHOLDS
                .iter()
                .map(|&t| average_precision(&g, t).map(|ap| 100.0 * ap))
                .collect::<Result<Vec<_>>>()?;
            Ok(QueryAp {
                query,
                num_items: g.len(),
                num_ground_truth: g.iter().map(|i| i.ground_truth.len()).sum(),
                ap,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if per_query.is_empty() {
        return Err(invalid("no ground-truth segments"));
    }
    let n = per_query.len() as f64;
    let map: Vec<f64> = (0..IOU_THRESHOLDS.len())
        .map(|k| per_query.iter().map(|q| q.ap[k]).sum::<f64>() / n)
        .collect();
    let average = map.iter().sum::<f64>() / map.len() as f64;
    Ok(MapReport {
        thresholds: IOU_THRESHOLDS.to_vec(),
        map,
        average,
        per_query,
    })
}

fn threshold_key(t: f64) -> String {
    format!("{t:.1}")
}

impl MapReport {
    /// `{"map": {"0.1": .., "avg": ..}, "per_query": [...]}`
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            map.insert(threshold_key(*t), json!(m));
        }
        map.insert("avg".into(), json!(self.average));
        let per_query: Vec<_> = self
            .per_query
            .iter()
            .map(|q| {
                let ap: serde_json::Map<_, _> = self
                    .thresholds
                    .iter()
                    .zip(&q.ap)
                    .map(|(t, a)| (threshold_key(*t), json!(a)))
                    .collect();
                json!({
                    "query": q.query,
                    "num_items": q.num_items,
                    "num_ground_truth": q.num_ground_truth,
                    "ap": ap,
                })
            })
            .collect();
        json!({ "map": map, "per_query": per_query })
    }

    /// `threshold,map` rows, closing with an `avg` row.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["threshold", "map"])?;
        for (t, m) in self.thresholds.iter().zip(&self.map) {
            out.write_record([threshold_key(*t), m.to_string()])?;
        }
        out.write_record(["avg".to_string(), self.average.to_string()])?;
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(json_path, serde_json::to_string_pretty(&self.to_json())?)?;
        self.write_csv(std::fs::File::create(csv_path)?)
    }
}
