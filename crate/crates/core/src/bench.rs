//! Pinned benchmark layouts and the data section of an experiment.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::store::load_dataset;
use crate::synth::{
    build_split, make_threefold, move_fraction, ConfoundedDataset, Degradation, FoldPlan, ImageShape, Jitter,
    SplitTag, SyntheticSpec,
};

pub const PATTERN_SEED: u64 = 7;

/// Six emotions under identity, blur and noise. Training uses the cells with
/// `c == e % 3`; testing uses the other two confounders of every emotion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLayout {
    pub train_per_cell: usize,
    pub test_per_cell: usize,
    pub blur: f64,
    pub noise: f64,
}

impl Default for ToyLayout {
    fn default() -> Self {
        Self { train_per_cell: 60, test_per_cell: 30, blur: 1.5, noise: 0.5 }
    }
}

fn degradations(blur: f64, noise: f64) -> Vec<Degradation> {
    vec![Degradation::Identity, Degradation::Blur { sigma: blur }, Degradation::Noise { sigma: noise }]
}

fn six_by_three(counts: impl Fn(usize, usize) -> usize, blur: f64, noise: f64, noise_seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        image: ImageShape::default(),
        n_emotions: 6,
        n_confounders: 3,
        cooccurrence: (0..6).map(|e| (0..3).map(|c| counts(e, c)).collect()).collect(),
        degradations: degradations(blur, noise),
        jitter: Jitter::default(),
        pattern_seed: PATTERN_SEED,
        noise_seed,
    }
}

impl ToyLayout {
    pub fn specs(&self, seed: u64) -> (SyntheticSpec, SyntheticSpec) {
        let (tr, te) = (self.train_per_cell, self.test_per_cell);
        let train = six_by_three(|e, c| if c == e % 3 { tr } else { 0 }, self.blur, self.noise, 2 * seed + 1);
        let test = six_by_three(|e, c| if c == e % 3 { 0 } else { te }, self.blur, self.noise, 2 * seed);
        (train, test)
    }
}

/// Three source datasets, each rendered entirely under one degradation, split
/// by the three-fold plan with a fraction of every test cell moved into
/// training. Source `s` has `per_source[(e + 3 - s) % 3]` samples of emotion `e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixedLayout {
    pub per_source: [usize; 3],
    pub blur: f64,
    pub noise: f64,
    pub plan: FoldPlan,
    pub fold: usize,
    pub move_fraction: f64,
}

impl Default for MixedLayout {
    fn default() -> Self {
        Self { per_source: [40, 60, 10], blur: 2.0, noise: 1.0, plan: FoldPlan::three_fold(), fold: 1, move_fraction: 0.1 }
    }
}

impl MixedLayout {
    pub fn sources(&self, seed: u64) -> Vec<SyntheticSpec> {
        (0..3)
            .map(|s| {
                let k = self.per_source;
                six_by_three(
                    |e, c| if c == s { k[(e + 3 - s) % 3] } else { 0 },
                    self.blur,
                    self.noise,
                    10 * seed + s as u64,
                )
            })
            .collect()
    }

    pub fn realize(&self, seed: u64) -> Result<(ConfoundedDataset, ConfoundedDataset)> {
        let sources = self
            .sources(seed)
            .iter()
            .map(|s| build_split(s, SplitTag::Train))
            .collect::<Result<Vec<_>>>()?;
        let (train, test) = make_threefold(&sources, &self.plan, self.fold)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        move_fraction(&train, &test, self.move_fraction, &mut rng)
    }
}

/// Where an experiment's train and test sets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Toy(ToyLayout),
    Mixed(MixedLayout),
    /// Explicit specs; the run seed is added to both noise seeds.
    Specs { train: SyntheticSpec, test: SyntheticSpec },
    /// Dataset directories written by `gen`; the run seed is ignored.
    Files { train: PathBuf, test: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Toy(ToyLayout::default())
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataConfig::Toy(t) => {
                if t.train_per_cell == 0 || t.test_per_cell == 0 {
                    return Err(LabError::Validation("toy layout needs samples in every used cell".into()));
                }
                let (tr, te) = t.specs(0);
                tr.validate_for_training()?;
                te.validate()
            }
            DataConfig::Mixed(m) => {
                if !(0.0..1.0).contains(&m.move_fraction) {
                    return Err(LabError::Config(format!("move_fraction {} outside [0, 1)", m.move_fraction)));
                }
                if !m.plan.folds().contains(&m.fold) {
                    return Err(LabError::Config(format!("fold {} not in plan folds {:?}", m.fold, m.plan.folds())));
                }
                m.sources(0).iter().try_for_each(SyntheticSpec::validate)
            }
            DataConfig::Specs { train, test } => {
                train.validate_for_training()?;
                test.validate()
            }
            DataConfig::Files { train, test } => {
                for p in [train, test] {
                    if !p.exists() {
                        return Err(LabError::Config(format!("dataset {} does not exist", p.display())));
                    }
                }
                Ok(())
            }
        }
    }

    /// Builds or loads the train and test sets for run `seed`.
    pub fn realize(&self, seed: u64) -> Result<(ConfoundedDataset, ConfoundedDataset)> {
        self.validate()?;
        match self {
            DataConfig::Toy(t) => {
                let (tr, te) = t.specs(seed);
                Ok((build_split(&tr, SplitTag::Train)?, build_split(&te, SplitTag::Test)?))
            }
            DataConfig::Mixed(m) => m.realize(seed),
            DataConfig::Specs { train, test } => {
                let shift = |s: &SyntheticSpec| SyntheticSpec { noise_seed: s.noise_seed.wrapping_add(seed), ..s.clone() };
                let (tr, te) = (shift(train), shift(test));
                Ok((build_split(&tr, SplitTag::Train)?, build_split(&te, SplitTag::Test)?))
            }
            DataConfig::Files { train, test } => Ok((load_dataset(train)?, load_dataset(test)?)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_cells_are_complementary() {
        let (tr, te) = ToyLayout::default().specs(3);
        for e in 0..6 {
            for c in 0..3 {
                assert!((tr.cooccurrence[e][c] > 0) != (te.cooccurrence[e][c] > 0));
            }
        }
        assert_eq!(tr.total(), 360);
        assert_eq!(te.total(), 360);
    }

    #[test]
    fn mixed_split_moves_ten_percent() {
        let m = MixedLayout::default();
        let (train, test) = m.realize(0).unwrap();
        let total: usize = m.sources(0).iter().map(SyntheticSpec::total).sum();
        assert_eq!(train.len() + test.len(), total);
        // Fold 1 test cells, per source: two emotions each, sizes from
        // per_source; floor(0.1 n) of each moves.
        let mut moved = 0;
        for (s, row) in m.plan.assignment.iter().enumerate() {
            for (e, &f) in row.iter().enumerate() {
                if f == m.fold {
                    moved += m.per_source[(e + 3 - s) % 3] / 10;
                }
            }
        }
        let before: usize = (0..3)
            .flat_map(|s| (0..6).map(move |e| (s, e)))
            .filter(|&(s, e)| m.plan.assignment[s][e] == m.fold)
            .map(|(s, e)| m.per_source[(e + 3 - s) % 3])
            .sum();
        assert_eq!(test.len(), before - moved);
    }
}
