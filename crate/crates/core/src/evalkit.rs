//! Accuracy reports and confounder-stratum construction from embeddings.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

pub const REPORT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    /// Rows are ground truth, columns predictions.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_acc: Vec<f64>,
    /// Classes with no samples; their accuracy is reported as 0 and left out
    /// of the mean.
    pub empty_classes: Vec<usize>,
    pub mean_acc: f64,
    #[serde(default)]
    pub fold: Option<usize>,
    #[serde(default)]
    pub split: Option<String>,
}

/// Confusion matrix and accuracies of `preds` against `labels`.
pub fn confusion(preds: &[usize], labels: &[usize], n_classes: usize) -> Result<EvalReport> {
    if preds.len() != labels.len() {
        return Err(LabError::Contract(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(LabError::Contract(format!("class index ({y}, {p}) outside 0..{n_classes}")));
        }
        m[y][p] += 1;
    }
    Ok(EvalReport::from_confusion(m))
}

impl EvalReport {
    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let mut per_class_acc = Vec::with_capacity(confusion.len());
        let mut empty_classes = Vec::new();
        for (i, row) in confusion.iter().enumerate() {
            let n: usize = row.iter().sum();
            if n == 0 {
                empty_classes.push(i);
                per_class_acc.push(0.0);
            } else {
                per_class_acc.push(row[i] as f64 / n as f64);
            }
        }
        let filled: Vec<f64> = per_class_acc
            .iter()
            .enumerate()
            .filter(|(i, _)| !empty_classes.contains(i))
            .map(|(_, a)| *a)
            .collect();
        let mean_acc = if filled.is_empty() { 0.0 } else { filled.iter().sum::<f64>() / filled.len() as f64 };
        Self { format_version: REPORT_FORMAT, confusion, per_class_acc, empty_classes, mean_acc, fold: None, split: None }
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Fraction of all samples predicted correctly.
    pub fn overall_acc(&self) -> f64 {
        let correct: usize = (0..self.confusion.len()).map(|i| self.confusion[i][i]).sum();
        correct as f64 / self.total().max(1) as f64
    }

    /// Checks the report's internal invariants, as done after loading.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != REPORT_FORMAT {
            return Err(LabError::Validation(format!("report format {} (expected {REPORT_FORMAT})", self.format_version)));
        }
        let n = self.confusion.len();
        if self.confusion.iter().any(|r| r.len() != n) || self.per_class_acc.len() != n {
            return Err(LabError::Validation("report matrices are not square".into()));
        }
        let expected = EvalReport::from_confusion(self.confusion.clone());
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        if expected.empty_classes != self.empty_classes
            || !close(expected.mean_acc, self.mean_acc)
            || expected.per_class_acc.iter().zip(&self.per_class_acc).any(|(a, b)| !close(*a, *b))
        {
            return Err(LabError::Validation("accuracies do not match the confusion matrix".into()));
        }
        Ok(())
    }

    /// Element-wise mean of several reports' per-class and mean accuracies,
    /// with the summed confusion matrix.
    pub fn average(reports: &[EvalReport]) -> Result<AveragedReport> {
        let first = reports.first().ok_or_else(|| LabError::Contract("no reports to average".into()))?;
        let n = first.per_class_acc.len();
        if reports.iter().any(|r| r.per_class_acc.len() != n) {
            return Err(LabError::Contract("reports disagree on the number of classes".into()));
        }
        let k = reports.len() as f64;
        let mean = |f: &dyn Fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
        let std = |f: &dyn Fn(&EvalReport) -> f64, m: f64| {
            if reports.len() < 2 {
                0.0
            } else {
                (reports.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
            }
        };
        let mut per_class_mean = Vec::with_capacity(n);
        let mut per_class_std = Vec::with_capacity(n);
        for i in 0..n {
            let f = move |r: &EvalReport| r.per_class_acc[i];
            let m = mean(&f);
            per_class_mean.push(m);
            per_class_std.push(std(&f, m));
        }
        let f = |r: &EvalReport| r.mean_acc;
        let mean_acc = mean(&f);
        Ok(AveragedReport { runs: reports.len(), per_class_mean, per_class_std, mean_acc, mean_acc_std: std(&f, mean_acc) })
    }
}

/// Across-run mean and sample standard deviation of accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedReport {
    pub runs: usize,
    pub per_class_mean: Vec<f64>,
    pub per_class_std: Vec<f64>,
    pub mean_acc: f64,
    pub mean_acc_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub labels: Vec<usize>,
    /// `k` rows of the input dimension.
    pub centers: Vec<Vec<f64>>,
    /// Sum of squared distances after each assignment step.
    pub objective_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm, initialized with `k` distinct points drawn by `seed`.
/// Empty clusters keep their previous center.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeans> {
    let dim = points.first().map_or(0, Vec::len);
    if points.iter().any(|p| p.len() != dim) {
        return Err(LabError::Contract("points differ in dimension".into()));
    }
    let mut distinct: Vec<&Vec<f64>> = Vec::new();
    for p in points {
        if !distinct.contains(&p) {
            distinct.push(p);
        }
    }
    if k == 0 || k > distinct.len() {
        return Err(LabError::Config(format!("k = {k} with {} distinct points", distinct.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, distinct.len(), k).into_vec();
    idx.sort_unstable();
    let mut centers: Vec<Vec<f64>> = idx.iter().map(|&i| distinct[i].clone()).collect();
    let mut labels = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    for _ in 0..max_iters.max(1) {
        let mut changed = false;
        let mut objective = 0.0;
        for (p, l) in points.iter().zip(labels.iter_mut()) {
            let (j, d) = nearest(p, &centers);
            objective += d;
            if *l != j {
                *l = j;
                changed = true;
            }
        }
        history.push(objective);
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            sums[l].iter_mut().zip(p).for_each(|(s, v)| *s += v);
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    Ok(KMeans { labels, centers, objective_history: history })
}

/// `I(c) = P(c) · Σ_e P(e|c) ln P(e|c)` for each cluster, from per-cluster
/// emotion counts, with `0 ln 0 = 0`. `P(c)` is the cluster's share of all
/// items. Clusters with no items score 0.
pub fn importance_score(emotion_counts: &[Vec<usize>]) -> Vec<f64> {
    let total: usize = emotion_counts.iter().flatten().sum();
    emotion_counts
        .iter()
        .map(|row| {
            let n: usize = row.iter().sum();
            if n == 0 || total == 0 {
                return 0.0;
            }
            let neg_entropy: f64 = row
                .iter()
                .filter(|&&c| c > 0)
                .map(|&c| {
                    let p = c as f64 / n as f64;
                    p * p.ln()
                })
                .sum();
            (n as f64 / total as f64) * neg_entropy
        })
        .collect()
}

/// Order in which clusters are ranked by importance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ranking {
    /// Largest `I(c)` first.
    #[default]
    Descending,
    Ascending,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StratumAssignment {
    /// k-means cluster of each item.
    pub cluster: Vec<usize>,
    pub importance: Vec<f64>,
    /// Clusters kept as their own stratum, in rank order.
    pub selected: Vec<usize>,
    /// Final stratum of each item: `0..M` for selected clusters, then one per
    /// fallback group.
    pub stratum: Vec<usize>,
    pub n_strata: usize,
}

/// Clusters `embeddings` into `k` groups, keeps the `m` most important as
/// individual strata and sends the rest through `fallback`, which maps a
/// cluster center to one of `n_fallback` coarse groups.
#[allow(clippy::too_many_arguments)]
pub fn build_strata(
    embeddings: &[Vec<f64>],
    emotions: &[usize],
    n_emotions: usize,
    k: usize,
    m: usize,
    n_fallback: usize,
    fallback: impl Fn(&[f64]) -> usize,
    ranking: Ranking,
    seed: u64,
) -> Result<StratumAssignment> {
    if m > k {
        return Err(LabError::Config(format!("cannot keep {m} of {k} clusters")));
    }
    if embeddings.len() != emotions.len() {
        return Err(LabError::Contract(format!("{} embeddings for {} labels", embeddings.len(), emotions.len())));
    }
    if let Some(&e) = emotions.iter().find(|&&e| e >= n_emotions) {
        return Err(LabError::Contract(format!("emotion {e} out of range")));
    }
    let km = kmeans(embeddings, k, seed, 100)?;
    let mut counts = vec![vec![0usize; n_emotions]; k];
    for (&c, &e) in km.labels.iter().zip(emotions) {
        counts[c][e] += 1;
    }
    let importance = importance_score(&counts);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ord = importance[a].total_cmp(&importance[b]);
        match ranking {
            Ranking::Descending => ord.reverse(),
            Ranking::Ascending => ord,
        }
        .then(a.cmp(&b))
    });
    let selected: Vec<usize> = order[..m].to_vec();
    let needs_fallback = m < k;
    if needs_fallback && n_fallback == 0 {
        return Err(LabError::Config("unselected clusters need at least one fallback group".into()));
    }
    let mut map = vec![0usize; k];
    for (c, slot) in map.iter_mut().enumerate() {
        *slot = match selected.iter().position(|&s| s == c) {
            Some(i) => i,
            None => {
                let g = fallback(&km.centers[c]);
                if g >= n_fallback {
                    return Err(LabError::Contract(format!("fallback group {g} outside 0..{n_fallback}")));
                }
                m + g
            }
        };
    }
    let stratum = km.labels.iter().map(|&c| map[c]).collect();
    let n_strata = if needs_fallback { m + n_fallback } else { m };
    Ok(StratumAssignment { cluster: km.labels, importance, selected, stratum, n_strata })
}
