//! End-to-end acceptance suite. Run with `--nocapture` to see one line per
//! criterion.

use std::collections::BTreeMap;
use std::time::Instant;

use iern_core::bench::{DataConfig, MixedLayout, ToyLayout};
use iern_core::causal::oracle_checks;
use iern_core::evalkit::{build_strata, importance_score, kmeans, EvalReport, Ranking};
use iern_core::experiment::{evaluate, run_single, ExperimentConfig};
use iern_core::iern::*;
use iern_core::runner::{stratum_accuracy, Method};
use iern_core::synth::{build_split, ConfoundedDataset, SplitTag};
use numcore::{AdamConfig, Graph, Mode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(id: usize, name: &'static str, passed: bool, detail: String) -> Outcome {
    let line = format!("{} C{id} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    println!("{line}");
    Outcome { id, name, passed, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn bench_config(data: DataConfig, epochs: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig { data, ..ExperimentConfig::default() };
    cfg.optimizer.lr = 2e-3;
    cfg.optimizer.epochs = epochs;
    cfg
}

fn c1_causal_oracle() -> Outcome {
    let t = Instant::now();
    let checks = oracle_checks(0, 50, 1_000_000).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| format!("{} ({})", c.name, c.detail)).collect();
    let passed = failed.is_empty() && secs < 10.0;
    let detail = if failed.is_empty() {
        format!("{} checks passed in {secs:.2}s", checks.len())
    } else {
        format!("failed {}; {secs:.2}s", failed.join("; "))
    };
    outcome(1, "causal-oracle exactness", passed, detail)
}

fn c2_gradients() -> Outcome {
    let t = Instant::now();
    let report = gradcheck_tiny(0).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let worst = report.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let terms: Vec<String> = report.iter().map(|r| format!("{}={:.1e}", r.term, r.max_rel_error)).collect();
    outcome(
        2,
        "gradient correctness",
        report.len() == 5 && worst < 1e-4 && secs < 30.0,
        format!("{} in {secs:.2}s", terms.join(" ")),
    )
}

fn sorted(names: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = names.iter().map(|s| s.to_string()).collect();
    v.sort();
    v
}

fn stage_changes(model: &mut IernModel, batch: &iern_core::synth::Batch) -> Vec<(Stage, Vec<String>)> {
    let mut opt = Optimizer::new(AdamConfig { lr: 1e-2, ..AdamConfig::default() }, 0).unwrap();
    let mut before = model.snapshot();
    let mut seen = Vec::new();
    train_step_observed(model, batch, &LossWeights::default(), &mut opt, ClassifierRoute::Intervened, &mut |stage, m| {
        let mut changed = m.changed_since(&before);
        changed.sort();
        seen.push((stage, changed));
        before = m.snapshot();
    })
    .unwrap();
    seen
}

fn c3_freezing() -> Outcome {
    let t = Instant::now();
    let expected = vec![
        (Stage::Discriminators, sorted(&[EMOTION_DISC, CONTEXT_DISC])),
        (Stage::Generators, sorted(&[EMOTION_GEN, CONTEXT_GEN, RECON, BANK])),
        (Stage::Classifier, sorted(&[CLASSIFIER, EMOTION_GEN, BACKBONE])),
    ];
    let mut mismatches = Vec::new();
    for seed in 0..5 {
        let mut model = IernModel::new(Architecture::tiny(6, 4, 2, 2), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = random_batch(6, 8, 2, 2, &mut rng).unwrap();
        if stage_changes(&mut model, &batch) != expected {
            mismatches.push(format!("tiny seed {seed}"));
        }
    }
    let toy = ToyLayout { train_per_cell: 2, ..ToyLayout::default() };
    let (train, _) = DataConfig::Toy(toy).realize(0).unwrap();
    let arch = bench_config(DataConfig::Toy(toy), 1).architecture(&train).unwrap();
    let mut model = IernModel::new(arch, 0).unwrap();
    if stage_changes(&mut model, &train.all()) != expected {
        mismatches.push("desk".into());
    }
    let secs = t.elapsed().as_secs_f64();
    let detail = if mismatches.is_empty() {
        format!("6 models, every stage changed exactly its sets, {secs:.2}s")
    } else {
        format!("mismatch on {}", mismatches.join(", "))
    };
    outcome(3, "freezing contract", mismatches.is_empty() && secs < 10.0, detail)
}

fn c4_degenerate_intervention() -> Outcome {
    let model = IernModel::new(Architecture::tiny(6, 4, 3, 1), 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let batch = random_batch(6, 100, 3, 1, &mut rng).unwrap();
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Eval).unwrap();
    let branch = model.branch_logits(&mut g, f.emotion, 0, Mode::Eval).unwrap();
    let single = g.value(branch).clone();
    let bitwise = predict_logits(&model, &batch.x).unwrap() == single
        && predict(&model, &batch.x).unwrap() == single.argmax_rows();

    let model = IernModel::new(Architecture::tiny(6, 4, 2, 4), 12).unwrap();
    let batch = random_batch(6, 40, 2, 4, &mut rng).unwrap();
    let base = loss_classifier(&model, &batch).unwrap();
    let dim = model.centers().shape()[1];
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mut order: Vec<usize> = (0..4).collect();
        for i in (1..4).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let c = model.centers().data();
        let data: Vec<f64> = order.iter().flat_map(|&i| c[i * dim..(i + 1) * dim].to_vec()).collect();
        let mut permuted = model.clone();
        *permuted.centers_mut() = Tensor::new(model.centers().shape().to_vec(), data).unwrap();
        worst = worst.max((loss_classifier(&permuted, &batch).unwrap() - base).abs());
    }
    outcome(
        4,
        "degenerate-intervention equivalence",
        bitwise && worst < 1e-9,
        format!("N_c=1 bitwise={bitwise} on 100 inputs; max permutation drift {worst:.1e}"),
    )
}

fn c5_center_fixed_point() -> Outcome {
    let mut model = IernModel::new(Architecture::tiny(6, 4, 3, 3), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let batch = random_batch(6, 60, 3, 3, &mut rng).unwrap();
    model.set_trainable(&[BANK]);
    let mut g = Graph::new();
    let f = model.features(&mut g, &batch.x, Mode::Train).unwrap();
    let context = g.value(f.context).clone();
    let dim = context.shape()[1];
    let mut means = vec![vec![0.0; dim]; 3];
    let mut counts = [0usize; 3];
    for (i, &c) in batch.y_c.iter().enumerate() {
        counts[c] += 1;
        for (m, v) in means[c].iter_mut().zip(&context.data()[i * dim..(i + 1) * dim]) {
            *m += v;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    let distance = |model: &IernModel| -> f64 {
        let c = model.centers().data();
        (0..3)
            .map(|j| (0..dim).map(|k| (c[j * dim + k] - means[j][k]).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    };
    let lr = 1.0;
    let mut steps = 0;
    while steps < 2000 && distance(&model) >= 1e-3 {
        let mut g = Graph::new();
        let l = record_term(&model, &batch, "l_cb", &mut g).unwrap();
        let grads = g.backward(l).unwrap();
        let grad = grads.get(BANK, BANK_PARAM).unwrap().clone();
        let centers = model.centers_mut();
        let updated: Vec<f64> = centers.data().iter().zip(grad.data()).map(|(c, d)| c - lr * d).collect();
        *centers = Tensor::new(centers.shape().to_vec(), updated).unwrap();
        steps += 1;
    }
    let d = distance(&model);
    outcome(5, "center-loss fixed point", d < 1e-3, format!("max distance {d:.2e} after {steps} steps"))
}

fn c6_toy(seeds: u64) -> Outcome {
    let t = Instant::now();
    let layout = ToyLayout::default();
    let cfg = bench_config(DataConfig::Toy(layout), 40);
    let (mut base_in, mut base_ood, mut iern_ood) = (Vec::new(), Vec::new(), Vec::new());
    for seed in 0..seeds {
        let data = cfg.data.realize(seed).unwrap();
        let (mut held_out, _) = layout.specs(seed);
        held_out.noise_seed = 1000 + seed;
        let held_out = build_split(&held_out, SplitTag::Test).unwrap();
        let (baseline, r) = run_single(&cfg, Method::Baseline, cfg.weights.lambda2, seed, &data).unwrap();
        base_ood.push(r.mean_acc);
        base_in.push(evaluate(&baseline, &held_out).unwrap().mean_acc);
        let (_, r) = run_single(&cfg, Method::Iern, cfg.weights.lambda2, seed, &data).unwrap();
        iern_ood.push(r.mean_acc);
    }
    let secs = t.elapsed().as_secs_f64();
    let chance = 1.0 / 6.0;
    let (bi, bo, io) = (mean(&base_in), mean(&base_ood), mean(&iern_ood));
    let passed = bi >= 0.90 && bo - chance < 0.15 && io - bo >= 0.10 && secs < 600.0;
    outcome(
        6,
        "toy reproduction",
        passed,
        format!(
            "baseline in-dist {:.1}%, baseline o.o.d. {:.1}% (chance {:.1}%), IERN o.o.d. {:.1}% over {seeds} seeds, {secs:.0}s",
            100.0 * bi,
            100.0 * bo,
            100.0 * chance,
            100.0 * io
        ),
    )
}

struct MixedRuns {
    reports: BTreeMap<Method, Vec<EvalReport>>,
    stratum_acc: Vec<f64>,
    secs: f64,
}

fn mixed_runs(seeds: u64) -> MixedRuns {
    let t = Instant::now();
    let cfg = bench_config(DataConfig::Mixed(MixedLayout::default()), 200);
    let mut reports: BTreeMap<Method, Vec<EvalReport>> = BTreeMap::new();
    let mut stratum_acc = Vec::new();
    for seed in 0..seeds {
        let data = cfg.data.realize(seed).unwrap();
        for method in Method::ALL {
            let (trained, r) = run_single(&cfg, method, cfg.weights.lambda2, seed, &data).unwrap();
            if method == Method::Disentangle {
                stratum_acc.push(stratum_accuracy(trained.model.trunk().unwrap(), &data.1).unwrap());
            }
            reports.entry(method).or_default().push(r);
        }
    }
    MixedRuns { reports, stratum_acc, secs: t.elapsed().as_secs_f64() }
}

fn c7_ordering(runs: &MixedRuns) -> Outcome {
    let avg: BTreeMap<Method, f64> =
        runs.reports.iter().map(|(m, r)| (*m, EvalReport::average(r).unwrap().mean_acc)).collect();
    let iern = avg[&Method::Iern];
    let margins = [
        iern - avg[&Method::Nwgm],
        iern - avg[&Method::Resample],
        iern - avg[&Method::Baseline],
    ];
    let dis = avg[&Method::Disentangle] - avg[&Method::Baseline];
    let passed = margins.iter().all(|&m| m >= 0.03) && dis >= 0.02 && runs.secs < 900.0;
    let table: Vec<String> = avg.iter().map(|(m, a)| format!("{m} {:.1}%", 100.0 * a)).collect();
    outcome(
        7,
        "method ordering",
        passed,
        format!(
            "{}; IERN margins vs nwgm/resample/baseline {:+.1}/{:+.1}/{:+.1}, disentangle vs baseline {:+.1}; {:.0}s",
            table.join(", "),
            100.0 * margins[0],
            100.0 * margins[1],
            100.0 * margins[2],
            100.0 * dis,
            runs.secs
        ),
    )
}

fn c8_confounder(runs: &MixedRuns) -> Outcome {
    let strata = mean(&runs.stratum_acc);
    let baseline = EvalReport::average(&runs.reports[&Method::Baseline]).unwrap().mean_acc;
    outcome(
        8,
        "confounder learnability",
        strata >= 0.85 && baseline < strata,
        format!("d_c stratum accuracy {:.1}% vs baseline o.o.d. emotion accuracy {:.1}%", 100.0 * strata, 100.0 * baseline),
    )
}

fn c9_lambda2(seeds: u64) -> Outcome {
    let t = Instant::now();
    let cfg = bench_config(DataConfig::Toy(ToyLayout::default()), 40);
    let grid = [1e-6, 1e-4, 5e-4, 1e-3, 1e-2, 1.0];
    let data: Vec<(ConfoundedDataset, ConfoundedDataset)> = (0..seeds).map(|s| cfg.data.realize(s).unwrap()).collect();
    let acc: Vec<f64> = grid
        .iter()
        .map(|&l2| mean(&(0..seeds).map(|s| run_single(&cfg, Method::Iern, l2, s, &data[s as usize]).unwrap().1.mean_acc).collect::<Vec<_>>()))
        .collect();
    let drop = acc[2] - acc[5];
    let cells: Vec<String> = grid.iter().zip(&acc).map(|(l, a)| format!("{l:e}:{:.1}%", 100.0 * a)).collect();
    outcome(
        9,
        "lambda2 sensitivity",
        drop >= 0.10,
        format!("{}; drop {:.1} points, {:.0}s", cells.join(" "), 100.0 * drop, t.elapsed().as_secs_f64()),
    )
}

fn enumerated_importance(clusters: &[usize], emotions: &[usize], k: usize, n_emotions: usize) -> Vec<f64> {
    let n = clusters.len() as f64;
    (0..k)
        .map(|c| {
            let members: Vec<usize> = clusters.iter().zip(emotions).filter(|(&a, _)| a == c).map(|(_, &e)| e).collect();
            if members.is_empty() {
                return 0.0;
            }
            let p_c = members.len() as f64 / n;
            let entropy_term: f64 = (0..n_emotions)
                .map(|e| members.iter().filter(|&&m| m == e).count() as f64 / members.len() as f64)
                .filter(|&p| p > 0.0)
                .map(|p| p * p.ln())
                .sum();
            p_c * entropy_term
        })
        .collect()
}

fn c10_strata() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (k, dim, n_emotions) = (30, 8, 6);
    let blobs: Vec<Vec<f64>> = (0..k).map(|_| (0..dim).map(|_| 10.0 * rng.random::<f64>() - 5.0).collect()).collect();
    let mut embeddings = Vec::new();
    let mut emotions = Vec::new();
    for (b, center) in blobs.iter().enumerate() {
        for i in 0..20 {
            embeddings.push(center.iter().map(|c| c + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect::<Vec<_>>());
            emotions.push(if i < 20 - b % 10 { b % n_emotions } else { rng.random_range(0..n_emotions) });
        }
    }
    let fallback = |c: &[f64]| usize::from(c[0] > 0.0);
    let s = build_strata(&embeddings, &emotions, n_emotions, k, 8, 2, fallback, Ranking::Descending, 3).unwrap();
    let mut used: Vec<usize> = s.stratum.clone();
    used.sort();
    used.dedup();
    let ten = s.n_strata == 10 && used == (0..10).collect::<Vec<_>>();

    let oracle = enumerated_importance(&s.cluster, &emotions, k, n_emotions);
    let importance_err = s.importance.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let mut counts = vec![vec![0usize; n_emotions]; k];
    for (&c, &e) in s.cluster.iter().zip(&emotions) {
        counts[c][e] += 1;
    }
    let direct_err = importance_score(&counts).iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut monotone = 0;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + inst);
        let n = rng.random_range(20..200);
        let d = rng.random_range(1..6);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let km = kmeans(&pts, rng.random_range(2..10), inst, 100).unwrap();
        if km.objective_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)) {
            monotone += 1;
        }
    }
    let err = importance_err.max(direct_err);
    outcome(
        10,
        "stratum pipeline",
        ten && err <= 1e-12 && monotone == 20,
        format!("{} strata; importance error {err:.1e}; k-means monotone on {monotone}/20", s.n_strata),
    )
}

#[test]
fn acceptance() {
    let mut outcomes = vec![
        c1_causal_oracle(),
        c2_gradients(),
        c3_freezing(),
        c4_degenerate_intervention(),
        c5_center_fixed_point(),
        c6_toy(5),
    ];
    let runs = mixed_runs(5);
    outcomes.push(c7_ordering(&runs));
    outcomes.push(c8_confounder(&runs));
    outcomes.push(c9_lambda2(3));
    outcomes.push(c10_strata());
    let failed: Vec<String> =
        outcomes.iter().filter(|o| !o.passed).map(|o| format!("C{} {}: {}", o.id, o.name, o.detail)).collect();
    println!("{}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}
