//! Exhaustive reference for pooled AP / mAP, written against plain tuples.

use rand::Rng;
use ssmg_data::eval::{EvalItem, ScoredSegment, Segment, IOU_THRESHOLDS};

#[derive(Debug, Clone)]
pub struct OracleItem {
    pub query: usize,
    /// `(start, end, score)`
    pub preds: Vec<(usize, usize, f64)>,
    pub gts: Vec<(usize, usize)>,
}

fn frame_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let hi = a.1.max(b.1);
    let (mut inter, mut union) = (0usize, 0usize);
    for t in 0..hi {
        let (ia, ib) = ((a.0..a.1).contains(&t), (b.0..b.1).contains(&t));
        inter += (ia && ib) as usize;
        union += (ia || ib) as usize;
    }
    inter as f64 / union as f64
}

/// Global rank key: score descending, item, start, length.
fn ahead(a: (usize, (usize, usize, f64)), b: (usize, (usize, usize, f64))) -> bool {
    let (ia, pa) = a;
    let (ib, pb) = b;
    if pa.2 != pb.2 {
        return pa.2 > pb.2;
    }
    if ia != ib {
        return ia < ib;
    }
    if pa.0 != pb.0 {
        return pa.0 < pb.0;
    }
    pa.1 - pa.0 < pb.1 - pb.0
}

/// Best assignment of `preds` (in rank order) to ground truths: every
/// injective partial map is enumerated and the lexicographically largest
/// `(IoU, −index)` vector wins.
fn assign(preds: &[(usize, usize)], gts: &[(usize, usize)], thr: f64) -> Vec<bool> {
    fn rec(
        k: usize,
        preds: &[(usize, usize)],
        gts: &[(usize, usize)],
        thr: f64,
        used: &mut Vec<bool>,
        cur: &mut Vec<(f64, i64)>,
        best: &mut Option<Vec<(f64, i64)>>,
    ) {
        if k == preds.len() {
            let better = match best {
                None => true,
                Some(b) => {
                    let mut r = false;
                    for (x, y) in cur.iter().zip(b.iter()) {
                        if x.0 != y.0 {
                            r = x.0 > y.0;
                            break;
                        }
                        if x.1 != y.1 {
                            r = x.1 > y.1;
                            break;
                        }
                    }
                    r
                }
            };
            if better {
                *best = Some(cur.clone());
            }
            return;
        }
        cur.push((-1.0, 0));
        rec(k + 1, preds, gts, thr, used, cur, best);
        cur.pop();
        for g in 0..gts.len() {
            let o = frame_iou(preds[k], gts[g]);
            if used[g] || o < thr {
                continue;
            }
            used[g] = true;
            cur.push((o, -(g as i64)));
            rec(k + 1, preds, gts, thr, used, cur, best);
            cur.pop();
            used[g] = false;
        }
    }
    let mut best = None;
    rec(
        0,
        preds,
        gts,
        thr,
        &mut vec![false; gts.len()],
        &mut Vec::new(),
        &mut best,
    );
    best.unwrap().iter().map(|x| x.0 >= 0.0).collect()
}

/// AP of a group of items at one IoU threshold.
pub fn oracle_ap(items: &[OracleItem], thr: f64) -> f64 {
    let all: Vec<(usize, (usize, usize, f64))> = items
        .iter()
        .enumerate()
        .flat_map(|(i, it)| it.preds.iter().map(move |&p| (i, p)))
        .collect();
    let rank = |x: (usize, (usize, usize, f64))| 1 + all.iter().filter(|&&y| ahead(y, x)).count();
    let mut hits: Vec<usize> = Vec::new();
    for (i, it) in items.iter().enumerate() {
        let mut gts = it.gts.clone();
        gts.sort();
        let mut order: Vec<(usize, usize, f64)> = it.preds.clone();
        order.sort_by_key(|&p| rank((i, p)));
        let tp = assign(&order.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(), &gts, thr);
        for (p, t) in order.iter().zip(tp) {
            if t {
                hits.push(rank((i, *p)));
            }
        }
    }
    hits.sort_unstable();
    let total: usize = items.iter().map(|i| i.gts.len()).sum();
    let mut sum = 0.0;
    for (k, &r) in hits.iter().enumerate() {
        sum += (k + 1) as f64 / r as f64;
    }
    sum / total as f64
}

/// Per-threshold mAP in percent and its average, over query groups that
/// hold ground truth.
pub fn oracle_map(items: &[OracleItem]) -> (Vec<f64>, f64) {
    let mut queries: Vec<usize> = items.iter().map(|i| i.query).collect();
    queries.sort_unstable();
    queries.dedup();
    let groups: Vec<Vec<OracleItem>> = queries
        .into_iter()
        .map(|q| items.iter().filter(|i| i.query == q).cloned().collect::<Vec<_>>())
        .filter(|g: &Vec<OracleItem>| g.iter().any(|i| !i.gts.is_empty()))
        .collect();
    let aps: Vec<Vec<f64>> = groups
        .iter()
        .map(|g| IOU_THRESHOLDS.iter().map(|&t| 100.0 * oracle_ap(g, t)).collect())
        .collect();
    let n = aps.len() as f64;
    let map: Vec<f64> = (0..IOU_THRESHOLDS.len())
        .map(|k| aps.iter().map(|a| a[k]).sum::<f64>() / n)
        .collect();
    let avg = map.iter().sum::<f64>() / map.len() as f64;
    (map, avg)
}

/// Small random items with at most three predictions and three distinct
/// ground truths each; scores are distinct across the whole set.
pub fn random_items<R: Rng>(rng: &mut R, n: usize) -> Vec<OracleItem> {
    let seg = |rng: &mut R| {
        let s = rng.random_range(0..20);
        (s, s + rng.random_range(1..10))
    };
    let mut items: Vec<OracleItem> = (0..n)
        .map(|_| {
            let mut gts: Vec<(usize, usize)> = Vec::new();
            for _ in 0..rng.random_range(0..=3) {
                let g = seg(rng);
                if !gts.contains(&g) {
                    gts.push(g);
                }
            }
            let preds = (0..rng.random_range(0..=3))
                .map(|_| {
                    let (s, e) = seg(rng);
                    (s, e, 0.0)
                })
                .collect();
            OracleItem {
                query: rng.random_range(0..4),
                preds,
                gts,
            }
        })
        .collect();
    let total: usize = items.iter().map(|i| i.preds.len()).sum();
    let mut scores: Vec<f64> = (0..total).map(|k| (k + 1) as f64 / (total + 1) as f64).collect();
    for i in (1..scores.len()).rev() {
        scores.swap(i, rng.random_range(0..=i));
    }
    let mut it = scores.into_iter();
    for item in &mut items {
        for p in &mut item.preds {
            p.2 = it.next().unwrap();
        }
    }
    if items.iter().all(|i| i.gts.is_empty()) {
        items[0].gts.push((0, 5));
    }
    items
}

pub fn to_eval(items: &[OracleItem]) -> Vec<EvalItem> {
    items
        .iter()
        .map(|it| {
            let preds = it
                .preds
                .iter()
                .map(|&(s, e, score)| ScoredSegment {
                    segment: Segment::new(s, e).unwrap(),
                    score,
                })
                .collect();
            let gts = it.gts.iter().map(|&(s, e)| Segment::new(s, e).unwrap()).collect();
            EvalItem::new(it.query, preds, gts).unwrap()
        })
        .collect()
}
