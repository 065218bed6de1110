//! Exact finite-domain structural causal model `D → X`, `(X, D) → Y`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, LabError, Result};

const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteScm {
    /// `P(D = d)`.
    pub p_d: Vec<f64>,
    /// `P(X = x | D = d)`, indexed `[d][x]`.
    pub p_x_given_d: Vec<Vec<f64>>,
    /// `P(Y = y | X = x, D = d)`, indexed `[x][d][y]`.
    pub p_y_given_xd: Vec<Vec<Vec<f64>>>,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    if row.is_empty() {
        return Err(LabError::Validation(format!("{what} is empty")));
    }
    if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(LabError::Validation(format!("{what} has a negative or non-finite entry")));
    }
    let s: f64 = row.iter().sum();
    if (s - 1.0).abs() > ROW_TOLERANCE {
        return Err(LabError::Validation(format!("{what} sums to {s}")));
    }
    Ok(())
}

impl DiscreteScm {
    pub fn new(p_d: Vec<f64>, p_x_given_d: Vec<Vec<f64>>, p_y_given_xd: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let scm = Self { p_d, p_x_given_d, p_y_given_xd };
        scm.validate()?;
        Ok(scm)
    }

    pub fn n_d(&self) -> usize {
        self.p_d.len()
    }

    pub fn n_x(&self) -> usize {
        self.p_x_given_d.first().map_or(0, Vec::len)
    }

    pub fn n_y(&self) -> usize {
        self.p_y_given_xd.first().and_then(|r| r.first()).map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        check_row(&self.p_d, "P(D)")?;
        let (n_d, n_x, n_y) = (self.n_d(), self.n_x(), self.n_y());
        if self.p_x_given_d.len() != n_d {
            return Err(LabError::Validation(format!("P(X|D) has {} rows for {n_d} strata", self.p_x_given_d.len())));
        }
        for (d, row) in self.p_x_given_d.iter().enumerate() {
            if row.len() != n_x {
                return Err(LabError::Validation(format!("P(X|D={d}) has {} entries, expected {n_x}", row.len())));
            }
            check_row(row, &format!("P(X|D={d})"))?;
        }
        if self.p_y_given_xd.len() != n_x {
            return Err(LabError::Validation(format!("P(Y|X,D) has {} slices for {n_x} inputs", self.p_y_given_xd.len())));
        }
        for (x, slice) in self.p_y_given_xd.iter().enumerate() {
            if slice.len() != n_d {
                return Err(LabError::Validation(format!("P(Y|X={x},D) has {} rows for {n_d} strata", slice.len())));
            }
            for (d, row) in slice.iter().enumerate() {
                if row.len() != n_y {
                    return Err(LabError::Validation(format!("P(Y|X={x},D={d}) has {} entries, expected {n_y}", row.len())));
                }
                check_row(row, &format!("P(Y|X={x},D={d})"))?;
            }
        }
        Ok(())
    }

    fn check_x(&self, x: usize) -> Result<()> {
        if x >= self.n_x() {
            return Err(LabError::Contract(format!("x = {x} outside 0..{}", self.n_x())));
        }
        Ok(())
    }

    /// `P(X = x)`.
    pub fn marginal_x(&self, x: usize) -> Result<f64> {
        self.check_x(x)?;
        Ok(self.p_d.iter().zip(&self.p_x_given_d).map(|(pd, row)| pd * row[x]).sum())
    }

    /// `P(D | X = x)` by Bayes' rule.
    pub fn posterior_d(&self, x: usize) -> Result<Vec<f64>> {
        let px = self.marginal_x(x)?;
        if px <= 0.0 {
            return Err(LabError::UndefinedConditional(format!("P(X = {x}) = 0")));
        }
        Ok(self.p_d.iter().zip(&self.p_x_given_d).map(|(pd, row)| pd * row[x] / px).collect())
    }

    fn mix(&self, x: usize, weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_y()];
        for (w, row) in weights.iter().zip(&self.p_y_given_xd[x]) {
            for (o, p) in out.iter_mut().zip(row) {
                *o += w * p;
            }
        }
        out
    }

    /// Observational `P(Y | X = x) = Σ_d P(Y | x, d) P(d | x)`.
    pub fn conditional(&self, x: usize) -> Result<Vec<f64>> {
        let post = self.posterior_d(x)?;
        Ok(self.mix(x, &post))
    }

    /// Interventional `P(Y | do(X = x)) = Σ_d P(Y | x, d) P(d)`.
    pub fn backdoor(&self, x: usize) -> Result<Vec<f64>> {
        self.check_x(x)?;
        Ok(self.mix(x, &self.p_d))
    }

    /// Empirical distribution of `n` draws of `d ~ P(D)`, `y ~ P(Y | x, d)`.
    pub fn sample_do(&self, x: usize, n: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
        self.check_x(x)?;
        if n == 0 {
            return Err(LabError::Contract("sample_do needs n >= 1".into()));
        }
        let mut counts = vec![0usize; self.n_y()];
        for _ in 0..n {
            let d = draw(&self.p_d, rng);
            let y = draw(&self.p_y_given_xd[x][d], rng);
            counts[y] += 1;
        }
        Ok(counts.into_iter().map(|c| c as f64 / n as f64).collect())
    }

    /// Reads the text fixture format; see [`DiscreteScm::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        parse_fixture(text).map_err(|reason| LabError::Format { path: "<scm>".into(), reason })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        parse_fixture(&text).map_err(|reason| LabError::Format { path: path.display().to_string(), reason })
    }

    /// Text form: `p_d` then one `p_x_given_d d` line per stratum and one
    /// `p_y_given_xd x d` line per pair, each followed by the row values.
    /// `#` starts a comment.
    pub fn to_text(&self) -> String {
        let row = |r: &[f64]| r.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ");
        let mut out = format!("p_d {}\n", row(&self.p_d));
        for (d, r) in self.p_x_given_d.iter().enumerate() {
            out += &format!("p_x_given_d {d} {}\n", row(r));
        }
        for (x, slice) in self.p_y_given_xd.iter().enumerate() {
            for (d, r) in slice.iter().enumerate() {
                out += &format!("p_y_given_xd {x} {d} {}\n", row(r));
            }
        }
        out
    }
}

fn draw(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave `acc` just below 1; fall back to the last
    // outcome with positive mass.
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(0)
}

/// Parses a probability that may be written as `a/b`.
fn parse_prob(tok: &str) -> std::result::Result<f64, String> {
    match tok.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.parse().map_err(|_| format!("bad numerator in {tok:?}"))?;
            let b: f64 = b.parse().map_err(|_| format!("bad denominator in {tok:?}"))?;
            if b == 0.0 {
                return Err(format!("zero denominator in {tok:?}"));
            }
            Ok(a / b)
        }
        None => tok.parse().map_err(|_| format!("bad number {tok:?}")),
    }
}

fn parse_fixture(text: &str) -> std::result::Result<DiscreteScm, String> {
    let mut p_d = None;
    let mut px: Vec<(usize, Vec<f64>)> = Vec::new();
    let mut py: Vec<(usize, usize, Vec<f64>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let at = |m: String| format!("line {}: {m}", lineno + 1);
        let mut toks = line.split_whitespace();
        let key = toks.next().expect("non-empty line");
        let index = |t: Option<&str>| -> std::result::Result<usize, String> {
            t.ok_or_else(|| at("missing index".into()))?.parse().map_err(|_| at("bad index".into()))
        };
        match key {
            "p_d" => {
                let row = toks.map(parse_prob).collect::<std::result::Result<Vec<_>, _>>().map_err(at)?;
                if p_d.replace(row).is_some() {
                    return Err(at("p_d given twice".into()));
                }
            }
            "p_x_given_d" => {
                let d = index(toks.next())?;
                let row = toks.map(parse_prob).collect::<std::result::Result<Vec<_>, _>>().map_err(at)?;
                px.push((d, row));
            }
            "p_y_given_xd" => {
                let x = index(toks.next())?;
                let d = index(toks.next())?;
                let row = toks.map(parse_prob).collect::<std::result::Result<Vec<_>, _>>().map_err(at)?;
                py.push((x, d, row));
            }
            other => return Err(at(format!("unknown key {other:?}"))),
        }
    }
    let p_d = p_d.ok_or("missing p_d")?;
    let n_d = p_d.len();
    let mut p_x_given_d = vec![None; n_d];
    for (d, row) in px {
        let slot = p_x_given_d.get_mut(d).ok_or(format!("p_x_given_d stratum {d} out of range"))?;
        if slot.replace(row).is_some() {
            return Err(format!("p_x_given_d {d} given twice"));
        }
    }
    let p_x_given_d: Vec<Vec<f64>> = p_x_given_d
        .into_iter()
        .enumerate()
        .map(|(d, r)| r.ok_or(format!("missing p_x_given_d {d}")))
        .collect::<std::result::Result<_, _>>()?;
    let n_x = p_x_given_d.first().map_or(0, Vec::len);
    let mut table = vec![vec![None; n_d]; n_x];
    for (x, d, row) in py {
        let slot = table
            .get_mut(x)
            .and_then(|s| s.get_mut(d))
            .ok_or(format!("p_y_given_xd ({x}, {d}) out of range"))?;
        if slot.replace(row).is_some() {
            return Err(format!("p_y_given_xd ({x}, {d}) given twice"));
        }
    }
    let p_y_given_xd = table
        .into_iter()
        .enumerate()
        .map(|(x, s)| {
            s.into_iter()
                .enumerate()
                .map(|(d, r)| r.ok_or(format!("missing p_y_given_xd {x} {d}")))
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    DiscreteScm::new(p_d, p_x_given_d, p_y_given_xd).map_err(|e| e.to_string())
}

/// Random SCM with strictly positive tables.
pub fn random_scm(n_d: usize, n_x: usize, n_y: usize, rng: &mut impl Rng) -> DiscreteScm {
    let mut row = |n: usize| {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|p| p / s).collect::<Vec<f64>>()
    };
    let p_d = row(n_d);
    let p_x_given_d = (0..n_d).map(|_| row(n_x)).collect();
    let p_y_given_xd = (0..n_x).map(|_| (0..n_d).map(|_| row(n_y)).collect()).collect();
    DiscreteScm { p_d, p_x_given_d, p_y_given_xd }
}

/// First 2×2×2 instance, in lexicographic order over tables with entries
/// `k / denominator`, where the most likely outcome for `x = 0` differs
/// between observing and intervening by at least `margin` on both sides.
/// Rows for `x = 1` are held at one half.
pub fn search_simpson(denominator: u32, margin: f64) -> Option<DiscreteScm> {
    let grid: Vec<f64> = (1..denominator).map(|k| k as f64 / denominator as f64).collect();
    for &pd in &grid {
        for &px0 in &grid {
            for &px1 in &grid {
                for &py0 in &grid {
                    for &py1 in &grid {
                        let scm = DiscreteScm {
                            p_d: vec![pd, 1.0 - pd],
                            p_x_given_d: vec![vec![px0, 1.0 - px0], vec![px1, 1.0 - px1]],
                            p_y_given_xd: vec![
                                vec![vec![py0, 1.0 - py0], vec![py1, 1.0 - py1]],
                                vec![vec![0.5, 0.5], vec![0.5, 0.5]],
                            ],
                        };
                        let c = scm.conditional(0).ok()?;
                        let b = scm.backdoor(0).ok()?;
                        if (c[0] - 0.5) * (b[0] - 0.5) < 0.0 && (c[0] - 0.5).abs() >= margin && (b[0] - 0.5).abs() >= margin {
                            return Some(scm);
                        }
                    }
                }
            }
        }
    }
    None
}

/// The pinned 2×2×2 fixture on which observing and intervening disagree on
/// the most likely outcome for `x = 0`.
pub const SIMPSON_FIXTURE: &str = include_str!("../fixtures/simpson.scm");

pub fn simpson_fixture() -> DiscreteScm {
    DiscreteScm::from_text(SIMPSON_FIXTURE).expect("bundled fixture parses")
}

/// Outcome of one oracle check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// `P(Y | X = x)` and `P(Y | do(X = x))` read off the full joint table
/// `P(d, x, y)` and its mutilated version with `P(x | d)` replaced by the
/// indicator of `x`.
pub fn enumerate_joint(scm: &DiscreteScm, x: usize) -> (Vec<f64>, Vec<f64>) {
    let (n_d, n_x, n_y) = (scm.n_d(), scm.n_x(), scm.n_y());
    let mut obs = vec![0.0; n_y];
    let mut intervened = vec![0.0; n_y];
    let mut px = 0.0;
    for d in 0..n_d {
        for xx in 0..n_x {
            for y in 0..n_y {
                let joint = scm.p_d[d] * scm.p_x_given_d[d][xx] * scm.p_y_given_xd[xx][d][y];
                let mutilated = scm.p_d[d] * if xx == x { 1.0 } else { 0.0 } * scm.p_y_given_xd[xx][d][y];
                if xx == x {
                    obs[y] += joint;
                    px += joint;
                }
                intervened[y] += mutilated;
            }
        }
    }
    (obs.into_iter().map(|v| v / px).collect(), intervened)
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Enumeration agreement on random instances, the pinned reversal fixture,
/// equality of observing and intervening when `X` ignores `D`, and Monte
/// Carlo convergence of [`DiscreteScm::sample_do`] within four standard
/// errors.
pub fn oracle_checks(seed: u64, instances: usize, draws: usize) -> Result<Vec<OracleCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let scm = random_scm(2 + i % 3, 2 + i % 2, 2 + (i / 2) % 3, &mut rng);
        for x in 0..scm.n_x() {
            let (obs, intervened) = enumerate_joint(&scm, x);
            worst = worst.max(max_gap(&scm.conditional(x)?, &obs)).max(max_gap(&scm.backdoor(x)?, &intervened));
        }
    }
    out.push(OracleCheck {
        name: "enumeration".into(),
        passed: worst <= 1e-12,
        detail: format!("{instances} random instances, max gap {worst:.3e}"),
    });

    let fixture = simpson_fixture();
    let c = fixture.conditional(0)?;
    let b = fixture.backdoor(0)?;
    out.push(OracleCheck {
        name: "simpson_reversal".into(),
        passed: numcore::argmax(&c) != numcore::argmax(&b),
        detail: format!("conditional {c:?}, backdoor {b:?}"),
    });

    let mut gap: f64 = 0.0;
    for _ in 0..instances.max(1) {
        let mut scm = random_scm(3, 2, 3, &mut rng);
        let shared = scm.p_x_given_d[0].clone();
        scm.p_x_given_d.iter_mut().for_each(|r| *r = shared.clone());
        for x in 0..2 {
            gap = gap.max(max_gap(&scm.conditional(x)?, &scm.backdoor(x)?));
        }
    }
    out.push(OracleCheck {
        name: "independent_x".into(),
        passed: gap <= 1e-12,
        detail: format!("max gap {gap:.3e} when P(x | d) ignores d"),
    });

    let target = fixture.backdoor(0)?;
    let empirical = fixture.sample_do(0, draws, &mut rng)?;
    let mut worst_z: f64 = 0.0;
    for (p, q) in target.iter().zip(&empirical) {
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        let z = if se > 0.0 { (q - p).abs() / se } else if q == p { 0.0 } else { f64::INFINITY };
        worst_z = worst_z.max(z);
    }
    out.push(OracleCheck {
        name: "sample_do".into(),
        passed: worst_z <= 4.0,
        detail: format!("{draws} draws, max |z| = {worst_z:.2}"),
    });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn argmax(v: &[f64]) -> usize {
        numcore::argmax(v)
    }

    #[test]
    fn d_independent_outcome() {
        let common = vec![0.2, 0.8];
        let scm = DiscreteScm::new(
            vec![0.3, 0.7],
            vec![vec![0.9, 0.1], vec![0.2, 0.8]],
            vec![vec![common.clone(), common.clone()], vec![common.clone(), common.clone()]],
        )
        .unwrap();
        for x in 0..2 {
            assert_eq!(scm.conditional(x).unwrap(), common);
            let b = scm.backdoor(x).unwrap();
            assert!(b.iter().zip(&common).all(|(a, c)| (a - c).abs() < 1e-15));
        }
    }

    #[test]
    fn point_mass_posterior() {
        let scm = DiscreteScm::new(
            vec![0.5, 0.5],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![vec![0.1, 0.9], vec![0.6, 0.4]], vec![vec![0.3, 0.7], vec![0.5, 0.5]]],
        )
        .unwrap();
        assert_eq!(scm.conditional(0).unwrap(), vec![0.1, 0.9]);
        assert_eq!(scm.conditional(1).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_prior_is_plain_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut scm = random_scm(3, 2, 3, &mut rng);
        scm.p_d = vec![1.0 / 3.0; 3];
        let b = scm.backdoor(1).unwrap();
        for (y, by) in b.iter().enumerate() {
            let avg = (0..3).map(|d| scm.p_y_given_xd[1][d][y]).sum::<f64>() / 3.0;
            assert!((by - avg).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_probability_x_is_undefined() {
        let scm = DiscreteScm::new(
            vec![1.0],
            vec![vec![1.0, 0.0]],
            vec![vec![vec![1.0]], vec![vec![1.0]]],
        )
        .unwrap();
        assert!(matches!(scm.conditional(1), Err(LabError::UndefinedConditional(_))));
        assert_eq!(scm.backdoor(1).unwrap(), vec![1.0]);
    }

    #[test]
    fn rejects_bad_rows() {
        let err = DiscreteScm::new(vec![0.5, 0.6], vec![vec![1.0], vec![1.0]], vec![vec![vec![1.0], vec![1.0]]]);
        assert!(matches!(err, Err(LabError::Validation(_))));
    }

    #[test]
    fn deterministic_scm_sampling_is_exact() {
        let scm = DiscreteScm::new(
            vec![0.0, 1.0],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![1.0, 0.0], vec![1.0, 0.0]]],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in [1, 7, 100] {
            assert_eq!(scm.sample_do(0, n, &mut rng).unwrap(), scm.backdoor(0).unwrap());
        }
    }

    #[test]
    fn simpson_fixture_reverses() {
        let scm = simpson_fixture();
        let c = scm.conditional(0).unwrap();
        let b = scm.backdoor(0).unwrap();
        assert_ne!(argmax(&c), argmax(&b));
    }

    #[test]
    fn pinned_fixture_is_first_search_hit() {
        let found = search_simpson(10, 0.04).unwrap();
        let pinned = simpson_fixture();
        assert_eq!(found.p_d.len(), 2);
        for (a, b) in found.to_text().split_whitespace().zip(pinned.to_text().split_whitespace()) {
            match (a.parse::<f64>(), b.parse::<f64>()) {
                (Ok(x), Ok(y)) => assert!((x - y).abs() < 1e-15, "{a} vs {b}"),
                _ => assert_eq!(a, b),
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scm = random_scm(3, 3, 2, &mut rng);
        assert_eq!(DiscreteScm::from_text(&scm.to_text()).unwrap(), scm);
        assert!(DiscreteScm::from_text("p_d 1\nbogus 1").is_err());
    }

    #[test]
    fn oracle_suite_passes() {
        let checks = oracle_checks(1, 10, 20_000).unwrap();
        assert_eq!(checks.len(), 4);
        assert!(checks.iter().all(|c| c.passed), "{checks:?}");
    }
}
