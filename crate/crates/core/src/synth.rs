//! Synthetic confounded benchmarks: per-emotion geometric patterns rendered
//! under per-confounder degradations, with controllable co-occurrence.

use std::collections::BTreeMap;

use numcore::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for ImageShape {
    fn default() -> Self {
        Self { height: 16, width: 16, channels: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Degradation {
    Identity,
    /// Gaussian blur with clamp-to-edge borders.
    Blur { sigma: f64 },
    /// Additive i.i.d. Gaussian noise.
    Noise { sigma: f64 },
    /// Per-channel additive offset.
    Tint { color: Vec<f64> },
}

/// Per-sample variation applied to the base pattern before degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Maximum integer translation in pixels along each axis.
    pub shift: usize,
    /// Pattern amplitude is drawn from `[1 - amplitude, 1 + amplitude]`.
    pub amplitude: f64,
    /// Standard deviation of the small pixel perturbation on the base pattern.
    pub pixel: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self { shift: 1, amplitude: 0.2, pixel: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub image: ImageShape,
    pub n_emotions: usize,
    pub n_confounders: usize,
    /// `cooccurrence[e][c]` samples of emotion `e` under confounder `c`.
    pub cooccurrence: Vec<Vec<usize>>,
    pub degradations: Vec<Degradation>,
    #[serde(default)]
    pub jitter: Jitter,
    pub pattern_seed: u64,
    pub noise_seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Validation(m));
        if self.n_emotions == 0 || self.n_confounders == 0 {
            return bad("need at least one emotion and one confounder".into());
        }
        if self.image.is_empty() {
            return bad("image shape has a zero dimension".into());
        }
        if self.cooccurrence.len() != self.n_emotions
            || self.cooccurrence.iter().any(|r| r.len() != self.n_confounders)
        {
            return bad(format!(
                "co-occurrence must be {} x {}",
                self.n_emotions, self.n_confounders
            ));
        }
        if self.degradations.len() != self.n_confounders {
            return bad(format!(
                "{} degradations for {} confounders",
                self.degradations.len(),
                self.n_confounders
            ));
        }
        for d in &self.degradations {
            match d {
                Degradation::Blur { sigma } | Degradation::Noise { sigma } if !(*sigma >= 0.0 && sigma.is_finite()) => {
                    return bad(format!("degradation sigma {sigma} must be finite and non-negative"));
                }
                Degradation::Tint { color } if color.len() != self.image.channels => {
                    return bad(format!("tint of {} values for {} channels", color.len(), self.image.channels));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Training specs additionally need every emotion to occur.
    pub fn validate_for_training(&self) -> Result<()> {
        self.validate()?;
        if let Some(e) = self.cooccurrence.iter().position(|r| r.iter().all(|&n| n == 0)) {
            return Err(LabError::Validation(format!("emotion {e} has no samples in any confounder cell")));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.cooccurrence.iter().flatten().sum()
    }

    /// Cells `(e, c)` with a positive count.
    pub fn support(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (e, row) in self.cooccurrence.iter().enumerate() {
            for (c, &n) in row.iter().enumerate() {
                if n > 0 {
                    out.push((e, c));
                }
            }
        }
        out
    }

    fn with_counts(&self, counts: Vec<Vec<usize>>) -> Self {
        Self { cooccurrence: counts, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[height, width, channels]`.
    pub x: Tensor,
    pub y_e: usize,
    pub y_c: usize,
    /// Index of the source dataset in a mixed protocol; 0 otherwise.
    pub source: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfoundedDataset {
    pub samples: Vec<Sample>,
    /// Its co-occurrence matrix always equals the realized `(y_e, y_c)` counts.
    pub spec: SyntheticSpec,
    pub split: SplitTag,
}

impl ConfoundedDataset {
    /// Wraps samples, recomputing the co-occurrence matrix from the labels.
    pub fn from_samples(samples: Vec<Sample>, like: &SyntheticSpec, split: SplitTag) -> Self {
        let mut counts = vec![vec![0; like.n_confounders]; like.n_emotions];
        for s in &samples {
            counts[s.y_e][s.y_c] += 1;
        }
        Self { samples, spec: like.with_counts(counts), split }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_emotions(&self) -> usize {
        self.spec.n_emotions
    }

    pub fn n_confounders(&self) -> usize {
        self.spec.n_confounders
    }

    pub fn counts(&self) -> Vec<Vec<usize>> {
        let mut counts = vec![vec![0; self.n_confounders()]; self.n_emotions()];
        for s in &self.samples {
            counts[s.y_e][s.y_c] += 1;
        }
        counts
    }

    /// Stacks the given samples into a `[batch, h, w, c]` tensor with labels.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let items: Vec<&Tensor> = indices.iter().map(|&i| &self.samples[i].x).collect();
        Batch {
            x: Tensor::stack(&items).expect("samples share one shape"),
            y_e: indices.iter().map(|&i| self.samples[i].y_e).collect(),
            y_c: indices.iter().map(|&i| self.samples[i].y_c).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }
}

/// A stacked minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y_e: Vec<usize>,
    pub y_c: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.y_e.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y_e.is_empty()
    }
}

/// Value of emotion `e`'s template at normalized coordinates `(u, v)` in
/// `[-0.5, 0.5]²`.
fn template(e: usize, u: f64, v: f64) -> f64 {
    let inside = match e {
        0 => v.abs() < 0.1 && u.abs() < 0.38,
        1 => u.abs() < 0.1 && v.abs() < 0.38,
        2 => (u - v).abs() < 0.14 && u.abs() < 0.36 && v.abs() < 0.36,
        3 => (u + v).abs() < 0.14 && u.abs() < 0.36 && v.abs() < 0.36,
        4 => u * u + v * v < 0.22 * 0.22,
        5 => {
            let r = (u * u + v * v).sqrt();
            (r - 0.3).abs() < 0.07
        }
        _ => {
            let angle = e as f64 * 0.65;
            let (s, c) = angle.sin_cos();
            let along = u * c + v * s;
            let across = -u * s + v * c;
            across.abs() < 0.08 && along.abs() < 0.38
        }
    };
    if inside {
        1.0
    } else {
        0.0
    }
}

/// The jittered base pattern for emotion `e`, `[h, w, c]` values.
fn base_pattern(e: usize, shape: ImageShape, jitter: &Jitter, rng: &mut impl Rng) -> Vec<f64> {
    let s = jitter.shift as i64;
    let dy = if s > 0 { rng.random_range(-s..=s) } else { 0 };
    let dx = if s > 0 { rng.random_range(-s..=s) } else { 0 };
    let amp = if jitter.amplitude > 0.0 {
        rng.random_range(1.0 - jitter.amplitude..=1.0 + jitter.amplitude)
    } else {
        1.0
    };
    let (h, w, ch) = (shape.height, shape.width, shape.channels);
    let mut out = Vec::with_capacity(shape.len());
    for y in 0..h {
        for x in 0..w {
            let v = ((y as i64 - dy) as f64 + 0.5) / h as f64 - 0.5;
            let u = ((x as i64 - dx) as f64 + 0.5) / w as f64 - 0.5;
            let base = amp * template(e, u, v);
            for _ in 0..ch {
                let p: f64 = if jitter.pixel > 0.0 { rng.sample::<f64, _>(StandardNormal) * jitter.pixel } else { 0.0 };
                out.push(base + p);
            }
        }
    }
    out
}

/// Applies a degradation in place to `[h, w, c]` values.
pub fn degrade(img: &mut [f64], shape: ImageShape, d: &Degradation, rng: &mut impl Rng) {
    match d {
        Degradation::Identity => {}
        Degradation::Noise { sigma } => {
            for v in img.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sigma * z;
            }
        }
        Degradation::Tint { color } => {
            for px in img.chunks_mut(shape.channels) {
                for (v, t) in px.iter_mut().zip(color) {
                    *v += t;
                }
            }
        }
        Degradation::Blur { sigma } => {
            if *sigma <= 0.0 {
                return;
            }
            let radius = (3.0 * sigma).ceil() as i64;
            let kernel: Vec<f64> = (-radius..=radius)
                .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
                .collect();
            let z: f64 = kernel.iter().sum();
            let kernel: Vec<f64> = kernel.iter().map(|k| k / z).collect();
            let (h, w, c) = (shape.height as i64, shape.width as i64, shape.channels);
            let at = |y: i64, x: i64| ((y.clamp(0, h - 1) * w + x.clamp(0, w - 1)) as usize) * c;
            let mut tmp = vec![0.0; img.len()];
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        tmp[at(y, x) + ch] = kernel
                            .iter()
                            .enumerate()
                            .map(|(k, kv)| kv * img[at(y, x + k as i64 - radius) + ch])
                            .sum();
                    }
                }
            }
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        img[at(y, x) + ch] = kernel
                            .iter()
                            .enumerate()
                            .map(|(k, kv)| kv * tmp[at(y + k as i64 - radius, x) + ch])
                            .sum();
                    }
                }
            }
        }
    }
}

/// Draws emotion `emotion`'s pattern with jitter, then applies confounder
/// `confounder`'s degradation.
pub fn render_sample(emotion: usize, confounder: usize, spec: &SyntheticSpec, rng: &mut impl Rng) -> Result<Sample> {
    if emotion >= spec.n_emotions || confounder >= spec.n_confounders {
        return Err(LabError::Contract(format!(
            "cell ({emotion}, {confounder}) outside {} x {}",
            spec.n_emotions, spec.n_confounders
        )));
    }
    let shape = spec.image;
    let mut img = base_pattern(emotion, shape, &spec.jitter, rng);
    degrade(&mut img, shape, &spec.degradations[confounder], rng);
    // Values are kept exactly representable as 32-bit floats.
    img.iter_mut().for_each(|v| *v = *v as f32 as f64);
    let x = Tensor::new(vec![shape.height, shape.width, shape.channels], img)?;
    Ok(Sample { x, y_e: emotion, y_c: confounder, source: 0 })
}

fn cell_rng(spec: &SyntheticSpec, e: usize, c: usize, i: usize) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&spec.pattern_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&spec.noise_seed.to_le_bytes());
    seed[16..20].copy_from_slice(&(e as u32).to_le_bytes());
    seed[20..24].copy_from_slice(&(c as u32).to_le_bytes());
    seed[24..32].copy_from_slice(&(i as u64).to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Renders exactly `cooccurrence[e][c]` samples per cell, in row-major cell
/// order. Each sample has its own seed, so the output does not depend on
/// rendering order.
pub fn build_split(spec: &SyntheticSpec, split: SplitTag) -> Result<ConfoundedDataset> {
    spec.validate()?;
    let mut samples = Vec::with_capacity(spec.total());
    for (e, row) in spec.cooccurrence.iter().enumerate() {
        for (c, &n) in row.iter().enumerate() {
            for i in 0..n {
                let mut rng = cell_rng(spec, e, c, i);
                samples.push(render_sample(e, c, spec, &mut rng)?);
            }
        }
    }
    Ok(ConfoundedDataset { samples, spec: spec.clone(), split })
}

/// Fold assignment of every `(dataset, emotion)` cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub assignment: Vec<Vec<usize>>,
}

impl FoldPlan {
    /// The three-source, six-emotion plan (rows: sources, columns: anger,
    /// disgust, fear, happiness, sadness, surprise).
    pub fn three_fold() -> Self {
        Self {
            assignment: vec![
                vec![1, 2, 3, 1, 2, 3],
                vec![3, 1, 2, 3, 1, 2],
                vec![2, 3, 1, 2, 3, 1],
            ],
        }
    }

    pub fn folds(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.assignment.iter().flatten().copied().collect();
        f.sort_unstable();
        f.dedup();
        f
    }
}

/// Splits the sources by fold: every `(dataset, emotion)` cell whose plan entry
/// equals `fold` goes to test, all others to train. Samples get `source` set
/// to their dataset index.
pub fn make_threefold(
    datasets: &[ConfoundedDataset],
    plan: &FoldPlan,
    fold: usize,
) -> Result<(ConfoundedDataset, ConfoundedDataset)> {
    let first = datasets
        .first()
        .ok_or_else(|| LabError::Contract("no datasets to split".into()))?;
    let n_e = first.n_emotions();
    if plan.assignment.len() != datasets.len() || plan.assignment.iter().any(|r| r.len() != n_e) {
        return Err(LabError::Contract(format!(
            "fold plan is {} x {:?}, datasets are {} x {n_e}",
            plan.assignment.len(),
            plan.assignment.first().map(Vec::len),
            datasets.len()
        )));
    }
    if datasets
        .iter()
        .any(|d| d.n_emotions() != n_e || d.n_confounders() != first.n_confounders() || d.spec.image != first.spec.image)
    {
        return Err(LabError::Contract("datasets disagree on label spaces or image shape".into()));
    }
    if !plan.folds().contains(&fold) {
        return Err(LabError::Contract(format!("fold {fold} not in plan folds {:?}", plan.folds())));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (d, ds) in datasets.iter().enumerate() {
        for s in &ds.samples {
            let mut s = s.clone();
            s.source = d;
            if plan.assignment[d][s.y_e] == fold {
                test.push(s);
            } else {
                train.push(s);
            }
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(LabError::Validation(format!(
            "degenerate fold {fold}: {} train and {} test samples",
            train.len(),
            test.len()
        )));
    }
    Ok((
        ConfoundedDataset::from_samples(train, &first.spec, SplitTag::Train),
        ConfoundedDataset::from_samples(test, &first.spec, SplitTag::Test),
    ))
}

/// Moves `floor(fraction * n)` randomly chosen samples of every
/// `(source, emotion)` test cell of size `n` into the training set.
pub fn move_fraction(
    train: &ConfoundedDataset,
    test: &ConfoundedDataset,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<(ConfoundedDataset, ConfoundedDataset)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(LabError::Contract(format!("fraction {fraction} outside [0, 1)")));
    }
    let mut cells: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, s) in test.samples.iter().enumerate() {
        cells.entry((s.source, s.y_e)).or_default().push(i);
    }
    let mut moved = vec![false; test.len()];
    for idx in cells.values_mut() {
        let k = (fraction * idx.len() as f64).floor() as usize;
        idx.shuffle(rng);
        for &i in &idx[..k] {
            moved[i] = true;
        }
    }
    let mut new_train = train.samples.clone();
    let mut new_test = Vec::with_capacity(test.len());
    for (s, m) in test.samples.iter().zip(moved) {
        if m {
            new_train.push(s.clone());
        } else {
            new_test.push(s.clone());
        }
    }
    Ok((
        ConfoundedDataset::from_samples(new_train, &train.spec, SplitTag::Train),
        ConfoundedDataset::from_samples(new_test, &test.spec, SplitTag::Test),
    ))
}

/// Mean absolute 5-point Laplacian over all pixels and channels.
pub fn mean_abs_laplacian(x: &Tensor) -> f64 {
    let s = x.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let d = x.data();
    let at = |y: usize, x: usize, ch: usize| d[(y * w + x) * c + ch];
    let mut total = 0.0;
    let mut n = 0;
    for y in 1..h - 1 {
        for xx in 1..w - 1 {
            for ch in 0..c {
                let lap = at(y - 1, xx, ch) + at(y + 1, xx, ch) + at(y, xx - 1, ch) + at(y, xx + 1, ch)
                    - 4.0 * at(y, xx, ch);
                total += lap.abs();
                n += 1;
            }
        }
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(counts: Vec<Vec<usize>>, degradations: Vec<Degradation>) -> SyntheticSpec {
        SyntheticSpec {
            image: ImageShape::default(),
            n_emotions: counts.len(),
            n_confounders: degradations.len(),
            cooccurrence: counts,
            degradations,
            jitter: Jitter::default(),
            pattern_seed: 3,
            noise_seed: 4,
        }
    }

    fn three() -> Vec<Degradation> {
        vec![Degradation::Identity, Degradation::Blur { sigma: 2.0 }, Degradation::Noise { sigma: 0.0 }]
    }

    #[test]
    fn identity_and_zero_noise_match_base_pattern() {
        let s = spec(vec![vec![1, 1, 1]; 2], three());
        let a = render_sample(1, 0, &s, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = render_sample(1, 2, &s, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let base: Vec<f64> = base_pattern(1, s.image, &s.jitter, &mut rng).iter().map(|&v| v as f32 as f64).collect();
        assert_eq!(a.x.data(), base.as_slice());
        assert_eq!(a.x, b.x);
        assert_eq!((b.y_e, b.y_c), (1, 2));
    }

    #[test]
    fn blur_reduces_laplacian_energy() {
        let s = spec(vec![vec![1, 1, 1]; 6], three());
        for e in 0..6 {
            let clean = render_sample(e, 0, &s, &mut ChaCha8Rng::seed_from_u64(e as u64)).unwrap();
            let blurred = render_sample(e, 1, &s, &mut ChaCha8Rng::seed_from_u64(e as u64)).unwrap();
            assert!(mean_abs_laplacian(&blurred.x) < mean_abs_laplacian(&clean.x));
        }
    }

    #[test]
    fn out_of_range_cell_rejected() {
        let s = spec(vec![vec![1, 1, 1]; 2], three());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(render_sample(2, 0, &s, &mut rng), Err(LabError::Contract(_))));
        assert!(matches!(render_sample(0, 3, &s, &mut rng), Err(LabError::Contract(_))));
    }

    #[test]
    fn single_cell_split() {
        let mut counts = vec![vec![0; 3]; 4];
        counts[2][1] = 5;
        let d = build_split(&spec(counts, three()), SplitTag::Train).unwrap();
        assert_eq!(d.len(), 5);
        assert!(d.samples.iter().all(|s| (s.y_e, s.y_c) == (2, 1)));
    }

    #[test]
    fn split_is_seed_deterministic() {
        let s = spec(vec![vec![2, 1, 3]; 3], three());
        let a = build_split(&s, SplitTag::Train).unwrap();
        let b = build_split(&s, SplitTag::Train).unwrap();
        assert_eq!(a, b);
        let mut s2 = s.clone();
        s2.noise_seed += 1;
        assert_ne!(build_split(&s2, SplitTag::Train).unwrap().samples[0].x, a.samples[0].x);
    }

    #[test]
    fn validation() {
        let mut s = spec(vec![vec![1, 0, 0], vec![0, 0, 0]], three());
        assert!(s.validate().is_ok());
        assert!(s.validate_for_training().is_err());
        s.degradations.pop();
        assert!(s.validate().is_err());
        let t = spec(vec![vec![1]], vec![Degradation::Tint { color: vec![0.1, 0.2] }]);
        assert!(t.validate().is_err());
    }

    #[test]
    fn three_fold_plan_fold_one() {
        let plan = FoldPlan::three_fold();
        let srcs: Vec<ConfoundedDataset> = (0..3)
            .map(|d| {
                let mut counts = vec![vec![0; 3]; 6];
                for row in counts.iter_mut() {
                    row[d] = 2;
                }
                let mut s = spec(counts, three());
                s.pattern_seed = d as u64;
                build_split(&s, SplitTag::Train).unwrap()
            })
            .collect();
        let (train, test) = make_threefold(&srcs, &plan, 1).unwrap();
        let mut cells: Vec<(usize, usize)> = test.samples.iter().map(|s| (s.source, s.y_e)).collect();
        cells.dedup();
        // anger+happiness from source 0, disgust+sadness from 1, fear+surprise from 2
        assert_eq!(cells, vec![(0, 0), (0, 3), (1, 1), (1, 4), (2, 2), (2, 5)]);
        assert_eq!(train.len() + test.len(), 36);
        assert_eq!(train.spec.cooccurrence, train.counts());
        assert!(matches!(make_threefold(&srcs, &plan, 4), Err(LabError::Contract(_))));
    }

    #[test]
    fn degenerate_fold_rejected() {
        let d = build_split(&spec(vec![vec![2, 0, 0]; 2], three()), SplitTag::Train).unwrap();
        let plan = FoldPlan { assignment: vec![vec![1, 1]] };
        assert!(matches!(make_threefold(&[d], &plan, 1), Err(LabError::Validation(_))));
    }

    #[test]
    fn move_fraction_counts() {
        let train = build_split(&spec(vec![vec![4, 0, 0]; 2], three()), SplitTag::Train).unwrap();
        let test = build_split(&spec(vec![vec![0, 30, 0], vec![0, 0, 9]], three()), SplitTag::Test).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (tr, te) = move_fraction(&train, &test, 0.1, &mut rng).unwrap();
        assert_eq!(tr.len(), 8 + 3);
        assert_eq!(te.len(), 27 + 9);
        let (tr0, te0) = move_fraction(&train, &test, 0.0, &mut rng).unwrap();
        assert_eq!((tr0.samples, te0.samples), (train.samples.clone(), test.samples.clone()));
        assert!(move_fraction(&train, &test, 1.0, &mut rng).is_err());
    }
}
