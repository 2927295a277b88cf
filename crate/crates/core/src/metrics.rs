//! Image- and pixel-level evaluation metrics.
//!
//! AUROC (rank-based Mann-Whitney with tie handling), average precision
//! over the descending-score sweep with tie groups, optimal-threshold F1,
//! and per-region overlap (PRO) integrated against false-positive rate up
//! to a cap. Each has an exhaustive oracle in the test suite.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default false-positive-rate cap for PRO integration.
pub const DEFAULT_PRO_FPR_LIMIT: f64 = 0.3;

/// Scores with binary labels (1 = anomalous).
#[derive(Clone, Debug, Default)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        Ok(Self { scores, labels })
    }

    pub fn push(&mut self, score: f64, label: u8) {
        self.scores.push(score);
        self.labels.push(label);
    }

    fn class_counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        (pos, self.labels.len() - pos)
    }
}

/// Per-pixel score maps paired with binary ground-truth masks.
#[derive(Clone, Debug, Default)]
pub struct PixelScoredSet {
    pub maps: Vec<(Tensor, Tensor)>,
}

impl PixelScoredSet {
    pub fn push(&mut self, scores: Tensor, mask: Tensor) -> Result<()> {
        if scores.hw() != mask.hw() {
            return Err(Error::ShapeMismatch(format!(
                "scores {:?} vs mask {:?}",
                scores.shape(),
                mask.shape()
            )));
        }
        self.maps.push((scores, mask));
        Ok(())
    }

    /// Flattens into a [`ScoredSet`] (pooling all pixels).
    pub fn pooled(&self) -> ScoredSet {
        let mut set = ScoredSet::default();
        for (scores, mask) in &self.maps {
            for (s, m) in scores.data().iter().zip(mask.data()) {
                set.push(*s, if *m > 0.5 { 1 } else { 0 });
            }
        }
        set
    }
}

/// AUROC as the Mann-Whitney statistic `P(s_pos > s_neg) + P(tie)/2`,
/// computed via average ranks in O(n log n).
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.class_counts();
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let n = set.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[a].partial_cmp(&set.scores[b]).unwrap());
    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && set.scores[order[j + 1]] == set.scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if set.labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (pos as f64 * (pos as f64 + 1.0)) / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// Groups of `(score, positives_in_group, group_size)` in descending score
/// order, ties merged.
fn descending_groups(set: &ScoredSet) -> Vec<(f64, usize, usize)> {
    let n = set.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| set.scores[b].partial_cmp(&set.scores[a]).unwrap());
    let mut groups = Vec::new();
    let mut i = 0;
    while i < n {
        let score = set.scores[order[i]];
        let mut pos = 0;
        let mut size = 0;
        while i < n && set.scores[order[i]] == score {
            pos += set.labels[order[i]] as usize;
            size += 1;
            i += 1;
        }
        groups.push((score, pos, size));
    }
    groups
}

/// Average precision over the descending-score sweep; tied scores enter as
/// one group.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let (pos, _) = set.class_counts();
    if pos == 0 {
        return Err(Error::SingleClass);
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for (_, group_pos, group_size) in descending_groups(set) {
        tp += group_pos;
        seen += group_size;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Maximum F1 over thresholds at distinct score values (prediction:
/// `score >= threshold`), ties broken toward the lower threshold.
pub fn f1_optimal(set: &ScoredSet) -> Result<(f64, f64)> {
    let (pos, _) = set.class_counts();
    if pos == 0 {
        return Err(Error::SingleClass);
    }
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut best = (0.0f64, f64::INFINITY);
    for (score, group_pos, group_size) in descending_groups(set) {
        tp += group_pos;
        seen += group_size;
        let fp = seen - tp;
        let fnm = pos - tp;
        let f1 = 2.0 * tp as f64 / (2.0 * tp as f64 + fp as f64 + fnm as f64);
        if f1 >= best.0 {
            best = (f1, score);
        }
    }
    Ok(best)
}

/// 8-connected components of a binary mask via iterative flood fill;
/// returns one pixel-index list per component.
fn connected_components(mask: &Tensor) -> Vec<Vec<usize>> {
    let (h, w) = mask.hw();
    let mut visited = vec![false; h * w];
    let mut components = Vec::new();
    for start in 0..h * w {
        if visited[start] || mask.data()[start] <= 0.5 {
            continue;
        }
        let mut stack = vec![start];
        let mut pixels = Vec::new();
        visited[start] = true;
        while let Some(idx) = stack.pop() {
            pixels.push(idx);
            let (y, x) = (idx / w, idx % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if !visited[nidx] && mask.data()[nidx] > 0.5 {
                        visited[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        components.push(pixels);
    }
    components
}

/// Per-region overlap. For a descending threshold sweep (predictions
/// `score >= t`), the mean fraction of each ground-truth component's pixels
/// above threshold is paired with the global false-positive rate over
/// normal pixels; the overlap-vs-FPR curve is integrated by trapezoid from
/// 0 to `fpr_limit` and normalized by the limit.
pub fn pro_score(set: &PixelScoredSet, fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fpr_limit must be in (0, 1], got {fpr_limit}"
        )));
    }
    // extract components with descending-sorted scores, plus normal pixels
    let mut regions: Vec<Vec<f64>> = Vec::new();
    let mut normal_scores: Vec<f64> = Vec::new();
    let mut thresholds: Vec<f64> = Vec::new();
    for (scores, mask) in &set.maps {
        for component in connected_components(mask) {
            let mut vals: Vec<f64> = component.iter().map(|&i| scores.data()[i]).collect();
            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
            regions.push(vals);
        }
        for (s, m) in scores.data().iter().zip(mask.data()) {
            if *m <= 0.5 {
                normal_scores.push(*s);
            }
            thresholds.push(*s);
        }
    }
    if regions.is_empty() {
        return Err(Error::Scoring("no anomalous regions in the set".into()));
    }
    if normal_scores.is_empty() {
        return Err(Error::Scoring("no normal pixels in the set".into()));
    }
    normal_scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    // count of entries >= t in a descending-sorted array
    let count_ge =
        |sorted_desc: &[f64], t: f64| -> usize { sorted_desc.partition_point(|&v| v >= t) };

    let mut curve: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let fpr = count_ge(&normal_scores, t) as f64 / normal_scores.len() as f64;
        let overlap: f64 = regions
            .iter()
            .map(|r| count_ge(r, t) as f64 / r.len() as f64)
            .sum::<f64>()
            / regions.len() as f64;
        curve.push((fpr, overlap));
    }
    // integrate overlap vs fpr by trapezoid up to the cap
    let mut area = 0.0;
    for pair in curve.windows(2) {
        let (f0, o0) = pair[0];
        let (f1, o1) = pair[1];
        if f0 >= fpr_limit {
            break;
        }
        if f1 <= fpr_limit {
            area += (f1 - f0) * (o0 + o1) / 2.0;
        } else {
            // interpolate the overlap at the cap
            let t = (fpr_limit - f0) / (f1 - f0);
            let o_cap = o0 + t * (o1 - o0);
            area += (fpr_limit - f0) * (o0 + o_cap) / 2.0;
            break;
        }
    }
    Ok(area / fpr_limit)
}

/// One row of the evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub category: String,
    pub auc_i: f64,
    pub ap_i: f64,
    pub f1_i: f64,
    pub auc_p: f64,
    pub ap_p: f64,
    pub pro_p: f64,
    pub f1_p: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub categories: Vec<CategoryMetrics>,
    pub average: CategoryMetrics,
}

impl EvalReport {
    pub fn from_categories(categories: Vec<CategoryMetrics>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Dataset("no categories evaluated".into()));
        }
        let n = categories.len() as f64;
        let mean = |f: fn(&CategoryMetrics) -> f64| categories.iter().map(f).sum::<f64>() / n;
        let average = CategoryMetrics {
            category: "AVERAGE".into(),
            auc_i: mean(|c| c.auc_i),
            ap_i: mean(|c| c.ap_i),
            f1_i: mean(|c| c.f1_i),
            auc_p: mean(|c| c.auc_p),
            ap_p: mean(|c| c.ap_p),
            pro_p: mean(|c| c.pro_p),
            f1_p: mean(|c| c.f1_p),
        };
        Ok(Self {
            categories,
            average,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let mut out = String::from("category,AUC-I,AP-I,F1-I,AUC-P,AP-P,PRO-P,F1-P\n");
        for row in self.categories.iter().chain([&self.average]) {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                row.category,
                row.auc_i,
                row.ap_i,
                row.f1_i,
                row.auc_p,
                row.ap_p,
                row.pro_p,
                row.f1_p
            ));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
