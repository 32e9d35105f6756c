//! Segmentation and regression metrics.

use serde::{Deserialize, Serialize};

/// IoU thresholds reported for F1-overlap.
pub const F1_THRESHOLDS: [f64; 3] = [0.1, 0.25, 0.5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub label: usize,
    /// Inclusive.
    pub start: usize,
    /// Exclusive.
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self.end.min(other.end).saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        inter as f64 / union as f64
    }
}

/// Maximal runs of equal labels.
pub fn labels_to_segments(frames: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &l) in frames.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == l => s.end = t + 1,
            _ => out.push(Segment {
                label: l,
                start: t,
                end: t + 1,
            }),
        }
    }
    out
}

/// Number of same-label prediction/ground-truth pairs matched one-to-one
/// with IoU at least `threshold`, maximized over all matchings.
pub fn overlap_matches(pred: &[Segment], gt: &[Segment], threshold: f64) -> usize {
    // candidate ground-truth segments per prediction, best IoU first
    let candidates: Vec<Vec<usize>> = pred
        .iter()
        .map(|p| {
            let mut c: Vec<(f64, usize)> = gt
                .iter()
                .enumerate()
                .filter(|(_, g)| g.label == p.label)
                .map(|(j, g)| (p.iou(g), j))
                .filter(|(iou, _)| *iou >= threshold)
                .collect();
            c.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            c.into_iter().map(|(_, j)| j).collect()
        })
        .collect();
    let mut owner: Vec<Option<usize>> = vec![None; gt.len()];
    let mut matched = 0;
    for i in 0..pred.len() {
        let mut seen = vec![false; gt.len()];
        if augment(i, &candidates, &mut owner, &mut seen) {
            matched += 1;
        }
    }
    matched
}

fn augment(i: usize, candidates: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &j in &candidates[i] {
        if seen[j] {
            continue;
        }
        seen[j] = true;
        if owner[j].is_none_or(|k| augment(k, candidates, owner, seen)) {
            owner[j] = Some(i);
            return true;
        }
    }
    false
}

/// Segmental F1 at an IoU threshold.
///
/// Panics when the sequences differ in length or the threshold is outside
/// `(0, 1]`.
pub fn f1_overlap(pred: &[usize], gt: &[usize], threshold: f64) -> f64 {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth lengths differ");
    assert!(threshold > 0.0 && threshold <= 1.0, "threshold {threshold} outside (0, 1]");
    let ps = labels_to_segments(pred);
    let gs = labels_to_segments(gt);
    let tp = overlap_matches(&ps, &gs, threshold) as f64;
    let precision = if ps.is_empty() { 0.0 } else { tp / ps.len() as f64 };
    let recall = if gs.is_empty() { 0.0 } else { tp / gs.len() as f64 };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 (1 - d / max(|P|, |G|))` over segment label strings.
pub fn segmental_edit_score(pred: &[usize], gt: &[usize]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth lengths differ");
    let p: Vec<usize> = labels_to_segments(pred).iter().map(|s| s.label).collect();
    let g: Vec<usize> = labels_to_segments(gt).iter().map(|s| s.label).collect();
    let denom = p.len().max(g.len());
    if denom == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein(&p, &g) as f64 / denom as f64)
}

/// Area under the precision-recall curve for one binary ranking; frames with
/// equal score enter together. `None` when there are no positives.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len());
    let total = positive.iter().filter(|p| **p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(positive[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / total as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    Some(ap)
}

/// Frame-level mAP over classes present in `gt`. `scores` is row-major
/// `T x classes`.
pub fn mean_average_precision(scores: &[f64], classes: usize, gt: &[usize]) -> f64 {
    assert_eq!(scores.len(), gt.len() * classes, "score matrix shape");
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..classes {
        let col: Vec<f64> = (0..gt.len()).map(|t| scores[t * classes + c]).collect();
        let pos: Vec<bool> = gt.iter().map(|&g| g == c).collect();
        if let Some(ap) = average_precision(&col, &pos) {
            sum += ap;
            present += 1;
        }
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

/// Mid-ranks starting at 1; ties share their average rank.
pub fn mid_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation; `None` for fewer than two frames or a
/// constant series.
pub fn spearman(pred: &[f64], gt: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth lengths differ");
    if pred.len() < 2 {
        return None;
    }
    pearson(&mid_ranks(pred), &mid_ranks(gt))
}

pub fn mse(pred: &[f64], gt: &[f64]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "prediction and ground truth lengths differ");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / pred.len() as f64
}

/// Counts indexed `[ground truth][prediction]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_labels(pred: &[usize], gt: &[usize], classes: usize) -> Self {
        let mut m = Self::new(classes);
        m.add(pred, gt);
        m
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) {
        assert_eq!(pred.len(), gt.len(), "prediction and ground truth lengths differ");
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g][p] += 1;
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            row.iter_mut().zip(o).for_each(|(a, b)| *a += b);
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Rows scaled to sum to one; empty rows stay zero.
    pub fn row_normalized(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let s: u64 = row.iter().sum();
                row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
            })
            .collect()
    }
}

/// Metrics for one video. Fields a variant cannot produce are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMetrics {
    pub video: String,
    pub frames: usize,
    /// F1 at each of [`F1_THRESHOLDS`].
    pub f1: Option<Vec<f64>>,
    pub edit: Option<f64>,
    pub map: Option<f64>,
    pub accuracy: Option<f64>,
    pub mse: Option<f64>,
    pub spearman: Option<f64>,
}

/// Predictions for one video, already restricted to real frames.
pub struct VideoPrediction<'a> {
    pub video: &'a str,
    pub gt_labels: &'a [usize],
    pub pred_labels: Option<&'a [usize]>,
    /// Row-major `T x classes` class probabilities.
    pub probabilities: Option<&'a [f64]>,
    pub gt_risk: &'a [f64],
    pub pred_risk: Option<&'a [f64]>,
}

impl VideoMetrics {
    pub fn compute(v: &VideoPrediction, classes: usize) -> Self {
        let frames = v.gt_labels.len();
        let seg = v.pred_labels.map(|p| {
            let correct = p.iter().zip(v.gt_labels).filter(|(a, b)| a == b).count();
            (
                F1_THRESHOLDS.iter().map(|&th| f1_overlap(p, v.gt_labels, th)).collect::<Vec<_>>(),
                segmental_edit_score(p, v.gt_labels),
                correct as f64 / frames.max(1) as f64,
            )
        });
        Self {
            video: v.video.to_string(),
            frames,
            f1: seg.as_ref().map(|s| s.0.clone()),
            edit: seg.as_ref().map(|s| s.1),
            accuracy: seg.as_ref().map(|s| s.2),
            map: v.probabilities.map(|p| mean_average_precision(p, classes, v.gt_labels)),
            mse: v.pred_risk.map(|p| mse(p, v.gt_risk)),
            spearman: v.pred_risk.and_then(|p| spearman(p, v.gt_risk)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    /// Number of videos the value was defined for.
    pub count: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Some(Self {
            mean,
            std: var.sqrt(),
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub f1: Option<Vec<MeanStd>>,
    pub edit: Option<MeanStd>,
    pub map: Option<MeanStd>,
    pub accuracy: Option<MeanStd>,
    pub mse: Option<MeanStd>,
    pub spearman: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub variant: String,
    pub classes: usize,
    pub f1_thresholds: Vec<f64>,
    pub videos: Vec<VideoMetrics>,
    pub aggregate: Aggregate,
    /// Summed over videos; absent without a segmentation head.
    pub confusion: Option<ConfusionMatrix>,
}

impl MetricsReport {
    pub fn new(variant: &str, classes: usize, videos: Vec<VideoMetrics>, confusion: Option<ConfusionMatrix>) -> Self {
        let collect = |f: &dyn Fn(&VideoMetrics) -> Option<f64>| -> Option<MeanStd> {
            let v: Vec<f64> = videos.iter().filter_map(f).collect();
            MeanStd::of(&v)
        };
        let f1 = (0..F1_THRESHOLDS.len())
            .map(|k| collect(&|m: &VideoMetrics| m.f1.as_ref().map(|f| f[k])))
            .collect::<Option<Vec<_>>>();
        let aggregate = Aggregate {
            f1,
            edit: collect(&|m| m.edit),
            map: collect(&|m| m.map),
            accuracy: collect(&|m| m.accuracy),
            mse: collect(&|m| m.mse),
            spearman: collect(&|m| m.spearman),
        };
        Self {
            variant: variant.to_string(),
            classes,
            f1_thresholds: F1_THRESHOLDS.to_vec(),
            videos,
            aggregate,
            confusion,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
