//! Slow reference implementations for the metric checks.

/// `(label, start, end_exclusive)` runs.
pub fn runs(frames: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for t in 1..=frames.len() {
        if t == frames.len() || frames[t] != frames[start] {
            out.push((frames[start], start, t));
            start = t;
        }
    }
    out
}

fn iou(a: (usize, usize, usize), b: (usize, usize, usize)) -> f64 {
    let lo = a.1.max(b.1);
    let hi = a.2.min(b.2);
    let inter = hi.saturating_sub(lo);
    let union = (a.2 - a.1) + (b.2 - b.1) - inter;
    inter as f64 / union as f64
}

/// Largest number of one-to-one same-label matches with IoU >= threshold,
/// trying every assignment of predictions to ground-truth segments.
pub fn exhaustive_matches(pred: &[usize], gt: &[usize], threshold: f64) -> usize {
    let p = runs(pred);
    let g = runs(gt);
    fn search(
        i: usize,
        p: &[(usize, usize, usize)],
        g: &[(usize, usize, usize)],
        used: &mut Vec<bool>,
        threshold: f64,
    ) -> usize {
        if i == p.len() {
            return 0;
        }
        let mut best = search(i + 1, p, g, used, threshold);
        for j in 0..g.len() {
            if !used[j] && p[i].0 == g[j].0 && iou(p[i], g[j]) >= threshold {
                used[j] = true;
                best = best.max(1 + search(i + 1, p, g, used, threshold));
                used[j] = false;
            }
        }
        best
    }
    search(0, &p, &g, &mut vec![false; g.len()], threshold)
}

pub fn f1_reference(pred: &[usize], gt: &[usize], threshold: f64) -> f64 {
    let tp = exhaustive_matches(pred, gt, threshold) as f64;
    let np = runs(pred).len() as f64;
    let ng = runs(gt).len() as f64;
    let precision = if np == 0.0 { 0.0 } else { tp / np };
    let recall = if ng == 0.0 { 0.0 } else { tp / ng };
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Full-table Levenshtein distance.
pub fn levenshtein_table(a: &[usize], b: &[usize]) -> usize {
    let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        d[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j] + 1).min(d[i][j - 1] + 1).min(d[i - 1][j - 1] + cost);
        }
    }
    d[a.len()][b.len()]
}

pub fn edit_reference(pred: &[usize], gt: &[usize]) -> f64 {
    let p: Vec<usize> = runs(pred).iter().map(|r| r.0).collect();
    let g: Vec<usize> = runs(gt).iter().map(|r| r.0).collect();
    let denom = p.len().max(g.len());
    if denom == 0 {
        return 100.0;
    }
    100.0 * (1.0 - levenshtein_table(&p, &g) as f64 / denom as f64)
}

/// AP by enumerating every distinct score as a threshold.
pub fn ap_reference(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return None;
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for th in thresholds {
        let selected: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= th).collect();
        let tp = selected.iter().filter(|&&i| positive[i]).count();
        let precision = tp as f64 / selected.len() as f64;
        let recall = tp as f64 / total as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Some(ap)
}

pub fn map_reference(scores: &[f64], classes: usize, gt: &[usize]) -> f64 {
    let aps: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let col: Vec<f64> = (0..gt.len()).map(|t| scores[t * classes + c]).collect();
            let pos: Vec<bool> = gt.iter().map(|&g| g == c).collect();
            ap_reference(&col, &pos)
        })
        .collect();
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Rank of each value by counting smaller and equal values.
fn count_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let less = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_reference(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() < 2 {
        return None;
    }
    let ra = count_ranks(a);
    let rb = count_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}
