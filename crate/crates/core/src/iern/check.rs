use numcore::{grad_check, Graph, NumError, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{record_term, sub_seed, Architecture, IernModel, COMPONENTS};
use crate::error::Result;
use crate::synth::Batch;

/// The five terms of the objective, in reporting order.
pub const LOSS_TERMS: [&str; 5] = ["l_e", "l_c", "l_r", "l_cb", "l_cls"];

/// Recordable pieces of each reported term.
pub fn term_parts(term: &str) -> &'static [&'static str] {
    match term {
        "l_e" => &["l_e_disc", "l_e_gen"],
        "l_c" => &["l_c_disc", "l_c_gen"],
        "l_r" => &["l_r"],
        "l_cb" => &["l_cb"],
        "l_cls" => &["l_cls"],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermGradCheck {
    pub term: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

/// Random dense batch with every label present.
pub fn random_batch(input_dim: usize, n: usize, n_emotions: usize, n_confounders: usize, rng: &mut impl Rng) -> Result<Batch> {
    let x: Vec<f64> = (0..n * input_dim).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Batch {
        x: Tensor::new(vec![n, input_dim], x)?,
        y_e: (0..n).map(|i| i % n_emotions).collect(),
        y_c: (0..n).map(|i| (i / n_emotions) % n_confounders).collect(),
    })
}

/// Central-difference check of every term's gradient with respect to all
/// parameters of a tiny dense model (4-dim features, two emotions, two
/// strata).
pub fn gradcheck_tiny(seed: u64) -> Result<Vec<TermGradCheck>> {
    let arch = Architecture::tiny(6, 4, 2, 2);
    let mut model = IernModel::new(arch, seed)?;
    model.set_trainable(&COMPONENTS);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "gradcheck"));
    let batch = random_batch(6, 8, 2, 2, &mut rng)?;
    let mut out = Vec::new();
    for term in LOSS_TERMS {
        let mut worst: f64 = 0.0;
        let mut coords = 0;
        for &part in term_parts(term) {
            let mut g = Graph::new();
            let l = record_term(&model, &batch, part, &mut g)?;
            let grads = g.backward(l)?;
            let value = |m: &IernModel| -> numcore::Result<f64> {
                let mut g = Graph::new();
                let l = record_term(m, &batch, part, &mut g).map_err(|e| NumError::Contract(e.to_string()))?;
                Ok(g.scalar(l))
            };
            let r = grad_check(&mut model, &grads, value, 1e-6, 64, &mut rng)?;
            worst = worst.max(r.max_rel_error);
            coords += r.coordinates;
        }
        out.push(TermGradCheck { term: term.into(), max_rel_error: worst, coordinates: coords });
    }
    Ok(out)
}
