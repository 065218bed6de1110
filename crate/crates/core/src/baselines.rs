//! Comparison methods: vanilla classifier, re-sampling, NWGM head.

use numcore::{Graph, Mode, ParamSet, Parameterized, Stack, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::iern::{sub_seed, Architecture, BACKBONE, CLASSIFIER};
use crate::synth::{Batch, ConfoundedDataset};

/// Backbone plus classifier, trained by plain cross-entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct VanillaModel {
    pub input: Vec<usize>,
    pub n_emotions: usize,
    pub backbone: Stack,
    pub classifier: Stack,
}

impl VanillaModel {
    /// Uses the backbone and classifier stacks of `arch`; the classifier then
    /// reads the backbone output directly.
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, BACKBONE));
        let backbone = Stack::new(arch.backbone.clone(), &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, CLASSIFIER));
        let classifier = Stack::new(arch.classifier.clone(), &mut rng)?;
        let model = Self { input: arch.input.clone(), n_emotions: arch.n_emotions, backbone, classifier };
        let mut shape = vec![1];
        shape.extend_from_slice(&arch.input);
        let mut g = Graph::new();
        let y = model.logits(&mut g, &Tensor::zeros(&shape), Mode::Eval)?;
        if g.shape(y) != [1, arch.n_emotions] {
            return Err(LabError::Config(format!("vanilla classifier produces {:?}", g.shape(y))));
        }
        Ok(model)
    }

    pub fn logits(&self, g: &mut Graph, x: &Tensor, mode: Mode) -> Result<Var> {
        if x.shape()[1..] != self.input[..] {
            return Err(LabError::Compatibility(format!("input {:?} for a model expecting [_, {:?}]", x.shape(), self.input)));
        }
        let xi = g.input(x.clone());
        let base = self.backbone.forward(g, BACKBONE, &[xi], mode)?;
        Ok(self.classifier.forward(g, CLASSIFIER, &[base], mode)?)
    }

    /// One cross-entropy step. Returns the loss and the number of correct
    /// predictions in the batch.
    pub fn train_step(&mut self, batch: &Batch, opt: &mut crate::iern::Optimizer) -> Result<(f64, usize)> {
        if batch.is_empty() {
            return Err(LabError::Contract("empty batch".into()));
        }
        if batch.y_e.iter().any(|&e| e >= self.n_emotions) {
            return Err(LabError::Contract("emotion label out of range".into()));
        }
        let mut g = Graph::new();
        let logits = self.logits(&mut g, &batch.x, Mode::Train)?;
        let loss = g.cross_entropy(logits, &batch.y_e)?;
        let correct = crate::iern::count_correct(g.value(logits), &batch.y_e);
        let stats = g.take_batch_stats();
        self.backbone.absorb_batch_stats(BACKBONE, &stats)?;
        self.classifier.absorb_batch_stats(CLASSIFIER, &stats)?;
        let grads = g.backward(loss)?;
        opt.apply(self, &[BACKBONE, CLASSIFIER], &grads)?;
        opt.finish_step();
        Ok((g.scalar(loss), correct))
    }

    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        crate::iern::chunked(x, |xs| {
            let mut g = Graph::new();
            let y = self.logits(&mut g, xs, Mode::Eval)?;
            Ok(g.value(y).clone())
        })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict_logits(x)?.argmax_rows())
    }
}

impl Parameterized for VanillaModel {
    fn param_set_names(&self) -> Vec<String> {
        vec![BACKBONE.to_owned(), CLASSIFIER.to_owned()]
    }

    fn param_set(&self, name: &str) -> Option<&ParamSet> {
        match name {
            BACKBONE => Some(&self.backbone.params),
            CLASSIFIER => Some(&self.classifier.params),
            _ => None,
        }
    }

    fn param_set_mut(&mut self, name: &str) -> Option<&mut ParamSet> {
        match name {
            BACKBONE => Some(&mut self.backbone.params),
            CLASSIFIER => Some(&mut self.classifier.params),
            _ => None,
        }
    }
}

/// Upsamples every occupied `(emotion, confounder)` cell with replacement
/// to the size of the largest one. Empty cells stay empty and original
/// samples are always kept.
pub fn resample_dataset(dataset: &ConfoundedDataset, rng: &mut impl Rng) -> Result<ConfoundedDataset> {
    let (n_e, n_c) = (dataset.n_emotions(), dataset.n_confounders());
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); n_e * n_c];
    for (i, s) in dataset.samples.iter().enumerate() {
        cells[s.y_e * n_c + s.y_c].push(i);
    }
    let target = cells.iter().map(Vec::len).max().unwrap_or(0);
    if target == 0 {
        return Err(LabError::Validation("nothing to resample in an empty dataset".into()));
    }
    let mut samples = Vec::with_capacity(target * cells.iter().filter(|c| !c.is_empty()).count());
    for cell in cells.iter().filter(|c| !c.is_empty()) {
        samples.extend(cell.iter().map(|&i| dataset.samples[i].clone()));
        for _ in cell.len()..target {
            let &i = cell.choose(rng).expect("non-empty cell");
            samples.push(dataset.samples[i].clone());
        }
    }
    Ok(ConfoundedDataset::from_samples(samples, &dataset.spec, dataset.split))
}

/// Per-stratum mean context feature, frozen once built.
#[derive(Debug, Clone, PartialEq)]
pub struct NwgmDictionary {
    /// `[n_confounders, dim]`.
    pub entries: Tensor,
}

impl NwgmDictionary {
    pub fn len(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }
}

/// Entry `j` is the mean of the rows of `features` (`[n, dim]`) whose
/// stratum label is `j`.
pub fn build_nwgm_dictionary(features: &Tensor, y_c: &[usize], n_confounders: usize) -> Result<NwgmDictionary> {
    if features.shape().len() != 2 || features.shape()[0] != y_c.len() {
        return Err(LabError::Contract(format!(
            "features {:?} do not match {} labels",
            features.shape(),
            y_c.len()
        )));
    }
    let dim = features.shape()[1];
    let mut sums = vec![0.0; n_confounders * dim];
    let mut counts = vec![0usize; n_confounders];
    for (row, &c) in features.data().chunks(dim).zip(y_c) {
        if c >= n_confounders {
            return Err(LabError::Contract(format!("stratum label {c} out of range")));
        }
        counts[c] += 1;
        sums[c * dim..(c + 1) * dim].iter_mut().zip(row).for_each(|(s, v)| *s += v);
    }
    if let Some(j) = counts.iter().position(|&n| n == 0) {
        return Err(LabError::Config(format!("stratum {j} has no features to average")));
    }
    for (j, &n) in counts.iter().enumerate() {
        sums[j * dim..(j + 1) * dim].iter_mut().for_each(|s| *s /= n as f64);
    }
    Ok(NwgmDictionary { entries: Tensor::new(vec![n_confounders, dim], sums)? })
}

pub const NWGM_HEAD: &str = "nwgm";

/// Linear head `W1 x + W2 E_α[d] + b` with scaled dot-product attention
/// from the projected feature onto the dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct NwgmHead {
    pub dim: usize,
    pub n_emotions: usize,
    /// `w1`, `w2` (`[n_emotions, dim]`), `bias`, and the query projection
    /// `wq` (`[dim, dim]`).
    pub params: ParamSet,
}

impl NwgmHead {
    pub fn new(dim: usize, n_emotions: usize, rng: &mut impl Rng) -> Result<Self> {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut uniform = |shape: Vec<usize>| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        };
        let mut params = ParamSet::new();
        params.insert("w1", uniform(vec![n_emotions, dim])?)?;
        params.insert("w2", uniform(vec![n_emotions, dim])?)?;
        params.insert("wq", uniform(vec![dim, dim])?)?;
        params.insert("bias", Tensor::zeros(&[n_emotions]))?;
        Ok(Self { dim, n_emotions, params })
    }

    /// Records the head on `x` (`[batch, dim]`); returns `(logits, attention)`.
    pub fn forward(&self, g: &mut Graph, x: Var, dict: &NwgmDictionary) -> Result<(Var, Var)> {
        if dict.dim() != self.dim || g.shape(x).get(1) != Some(&self.dim) {
            return Err(LabError::Compatibility(format!(
                "head of width {} with features {:?} and dictionary width {}",
                self.dim,
                g.shape(x),
                dict.dim()
            )));
        }
        let wq = g.param(NWGM_HEAD, "wq", &self.params)?;
        let w1 = g.param(NWGM_HEAD, "w1", &self.params)?;
        let w2 = g.param(NWGM_HEAD, "w2", &self.params)?;
        let bias = g.param(NWGM_HEAD, "bias", &self.params)?;
        let keys = g.input(dict.entries.clone());
        let keys_t = g.input(transpose(&dict.entries)?);
        let q = g.linear(x, wq)?;
        let scores = g.linear(q, keys)?;
        let scaled = g.scale(scores, 1.0 / (self.dim as f64).sqrt());
        let alpha = g.softmax(scaled);
        let expect = g.linear(alpha, keys_t)?;
        let a = g.linear(x, w1)?;
        let b = g.linear(expect, w2)?;
        let sum = g.add(a, b)?;
        Ok((g.add_bias(sum, bias)?, alpha))
    }
}

fn transpose(t: &Tensor) -> Result<Tensor> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Ok(Tensor::new(vec![c, r], out)?)
}

/// Single-pass NWGM logits and attention weights for `x` (`[batch, dim]`).
pub fn nwgm_forward(head: &NwgmHead, x: &Tensor, dict: &NwgmDictionary) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let xi = g.input(x.clone());
    let (logits, alpha) = head.forward(&mut g, xi, dict)?;
    Ok((g.value(logits).clone(), g.value(alpha).clone()))
}

impl Parameterized for NwgmHead {
    fn param_set_names(&self) -> Vec<String> {
        vec![NWGM_HEAD.to_owned()]
    }

    fn param_set(&self, name: &str) -> Option<&ParamSet> {
        (name == NWGM_HEAD).then_some(&self.params)
    }

    fn param_set_mut(&mut self, name: &str) -> Option<&mut ParamSet> {
        (name == NWGM_HEAD).then_some(&mut self.params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{Sample, SplitTag, SyntheticSpec};

    fn tiny_dataset(cells: &[(usize, usize, usize)]) -> ConfoundedDataset {
        let spec = SyntheticSpec {
            image: crate::synth::ImageShape { height: 1, width: 1, channels: 1 },
            n_emotions: 3,
            n_confounders: 3,
            cooccurrence: vec![vec![0; 3]; 3],
            degradations: vec![crate::synth::Degradation::Identity; 3],
            jitter: Default::default(),
            pattern_seed: 0,
            noise_seed: 0,
        };
        let mut samples = Vec::new();
        let mut k = 0.0;
        for &(e, c, n) in cells {
            for _ in 0..n {
                k += 1.0;
                samples.push(Sample { x: Tensor::filled(&[1, 1, 1], k), y_e: e, y_c: c, source: 0 });
            }
        }
        ConfoundedDataset::from_samples(samples, &spec, SplitTag::Train)
    }

    #[test]
    fn resample_balances_occupied_cells() {
        let d = tiny_dataset(&[(0, 0, 2), (1, 2, 8)]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = resample_dataset(&d, &mut rng).unwrap();
        assert_eq!(r.len(), 16);
        let counts = r.counts();
        assert_eq!(counts[0][0], 8);
        assert_eq!(counts[1][2], 8);
        assert_eq!(counts[0][1], 0);
        for s in &r.samples {
            assert!(d.samples.contains(s));
        }
    }

    #[test]
    fn resample_keeps_balanced_counts() {
        let d = tiny_dataset(&[(0, 0, 4), (1, 1, 4), (2, 0, 4)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(resample_dataset(&d, &mut rng).unwrap().counts(), d.counts());
    }

    #[test]
    fn dictionary_means() {
        let f = Tensor::new(vec![3, 2], vec![1.0, 2.0, -1.0, -2.0, 5.0, 7.0]).unwrap();
        let d = build_nwgm_dictionary(&f, &[0, 0, 1], 2).unwrap();
        assert_eq!(d.entries.data(), &[0.0, 0.0, 5.0, 7.0]);
        let err = build_nwgm_dictionary(&f, &[0, 0, 0], 2).unwrap_err();
        assert!(matches!(err, LabError::Config(_)));
    }

    #[test]
    fn identical_entries_ignore_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = NwgmHead::new(3, 2, &mut rng).unwrap();
        let dict = NwgmDictionary { entries: Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]).unwrap() };
        let x = Tensor::new(vec![1, 3], vec![0.3, 0.1, -0.7]).unwrap();
        let (logits, _) = nwgm_forward(&head, &x, &dict).unwrap();
        let w1 = head.params.get("w1").unwrap().data();
        let w2 = head.params.get("w2").unwrap().data();
        for k in 0..2 {
            let expect: f64 = (0..3).map(|j| w1[k * 3 + j] * x.data()[j] + w2[k * 3 + j] * dict.entries.data()[j]).sum();
            assert!((logits.data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_w2_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut head = NwgmHead::new(2, 2, &mut rng).unwrap();
        head.params.get_mut("w2").unwrap().data_mut().fill(0.0);
        let dict = NwgmDictionary { entries: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap() };
        let x = Tensor::new(vec![1, 2], vec![2.0, -1.0]).unwrap();
        let (logits, _) = nwgm_forward(&head, &x, &dict).unwrap();
        let w1 = head.params.get("w1").unwrap().data();
        assert!((logits.data()[0] - (2.0 * w1[0] - w1[1])).abs() < 1e-12);
        assert!((logits.data()[1] - (2.0 * w1[2] - w1[3])).abs() < 1e-12);
    }

    #[test]
    fn single_pass_differs_from_averaged_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut head = NwgmHead::new(2, 2, &mut rng).unwrap();
        head.params.get_mut("w1").unwrap().data_mut().fill(0.0);
        head.params.get_mut("bias").unwrap().data_mut().fill(0.0);
        head.params.get_mut("w2").unwrap().data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let dict = NwgmDictionary { entries: Tensor::new(vec![2, 2], vec![4.0, 0.0, 0.0, 0.0]).unwrap() };
        let x = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let (logits, alpha) = nwgm_forward(&head, &x, &dict).unwrap();
        assert_eq!(alpha.data(), &[0.5, 0.5]);
        let p0 = |a: f64, b: f64| a.exp() / (a.exp() + b.exp());
        let single = p0(logits.data()[0], logits.data()[1]);
        let averaged = 0.5 * (p0(4.0, 0.0) + p0(0.0, 0.0));
        assert!((single - p0(2.0, 0.0)).abs() < 1e-12);
        assert!((single - averaged).abs() > 1e-3);
    }
}
