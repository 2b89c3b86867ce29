//! Exact laws on tiny instances by exhaustive summation over environment
//! sequences, generation sizes, and increment sequences.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::environment::{EnvironmentSpec, Family, Measure};
use crate::error::{Error, Result};
use crate::offspring::{OffspringKind, OffspringLaw};

pub const MAX_BPRE_GENERATIONS: usize = 4;
pub const MAX_WALK_STEPS: usize = 12;
/// Largest number of (environment, path) states the enumerations will visit.
pub const STATE_LIMIT: f64 = 5e7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactLaw {
    pub atoms: BTreeMap<i64, f64>,
    /// Probability of the conditioning event under the unconditioned law.
    pub event_probability: f64,
    pub event: String,
}

impl ExactLaw {
    pub fn mass(&self, value: i64) -> f64 {
        self.atoms.get(&value).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.atoms.values().sum()
    }

    fn from_unnormalized(raw: BTreeMap<i64, f64>, event: String) -> Result<Self> {
        let total: f64 = raw.values().sum();
        if total <= 0.0 {
            return Err(Error::Precondition(format!(
                "conditioning event `{event}` has probability zero"
            )));
        }
        let atoms = raw
            .into_iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|(v, p)| (v, p / total))
            .collect();
        Ok(ExactLaw {
            atoms,
            event_probability: total,
            event,
        })
    }
}

/// Conditioning used by [`enumerate_bpre`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BpreEvent {
    None,
    /// `Z_n > 0`.
    Survival,
}

/// Support of a law with finitely many atoms.
fn finite_pmf(law: &OffspringLaw) -> Result<Vec<f64>> {
    match law.kind() {
        OffspringKind::PointMass { k } => {
            let mut w = vec![0.0; *k as usize + 1];
            w[*k as usize] = 1.0;
            Ok(w)
        }
        OffspringKind::FiniteTable { weights } => Ok(weights.clone()),
        _ => Err(Error::invalid(
            "spec",
            "enumeration needs finitely supported offspring laws",
        )),
    }
}

fn convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        if *x == 0.0 {
            continue;
        }
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `q^{*z}` for `z = 0..=max_z`.
fn convolution_powers(q: &[f64], max_z: usize) -> Vec<Vec<f64>> {
    let mut powers = Vec::with_capacity(max_z + 1);
    powers.push(vec![1.0]);
    for z in 1..=max_z {
        let next = convolve(&powers[z - 1], q);
        powers.push(next);
    }
    powers
}

fn mixture_atoms(spec: &EnvironmentSpec, measure: Measure) -> Result<Vec<(Vec<f64>, f64)>> {
    let Family::DiscreteMixture { atoms } = spec.family() else {
        return Err(Error::invalid(
            "spec",
            "enumeration needs a discrete mixture",
        ));
    };
    let probs = spec.atom_probabilities(measure);
    atoms
        .iter()
        .zip(probs)
        .filter(|(_, p)| *p > 0.0)
        .map(|(a, p)| Ok((finite_pmf(&a.law)?, p)))
        .collect()
}

/// Exact law of `functional(Z_0..Z_n, atom indices)` under the annealed law
/// of `spec`, with `Z_0 = 1`, optionally conditioned on survival.
pub fn enumerate_bpre<F>(
    spec: &EnvironmentSpec,
    n: usize,
    event: BpreEvent,
    functional: F,
) -> Result<ExactLaw>
where
    F: Fn(&[u64], &[usize]) -> i64,
{
    if n == 0 || n > MAX_BPRE_GENERATIONS {
        return Err(Error::invalid(
            "n",
            format!("need 1 <= n <= {MAX_BPRE_GENERATIONS}"),
        ));
    }
    let atoms = mixture_atoms(spec, Measure::Annealed)?;
    let max_y = atoms.iter().map(|(q, _)| q.len() - 1).max().unwrap_or(0) as f64;
    // populations in generation k are at most max_y^k
    let mut bound = (atoms.len() as f64).powi(n as i32);
    for k in 1..=n {
        bound *= max_y.powi(k as i32) + 1.0;
    }
    if bound > STATE_LIMIT {
        return Err(Error::StateSpaceTooLarge {
            bound,
            limit: STATE_LIMIT,
        });
    }
    let max_pop = max_y.powi(n as i32 - 1) as usize;
    let powers: Vec<Vec<Vec<f64>>> = atoms
        .iter()
        .map(|(q, _)| convolution_powers(q, max_pop))
        .collect();

    let mut raw: BTreeMap<i64, f64> = BTreeMap::new();
    let mut env = vec![0usize; n];
    loop {
        let env_prob: f64 = env.iter().map(|j| atoms[*j].1).product();
        // paths of generation sizes with their probabilities given env
        let mut paths: Vec<(Vec<u64>, f64)> = vec![(vec![1], 1.0)];
        for &j in env.iter() {
            let mut next = Vec::new();
            for (path, p) in &paths {
                let z = *path.last().expect("nonempty") as usize;
                for (y, q) in powers[j][z].iter().enumerate() {
                    if *q > 0.0 {
                        let mut extended = path.clone();
                        extended.push(y as u64);
                        next.push((extended, p * q));
                    }
                }
            }
            paths = next;
        }
        for (path, p) in paths {
            if event == BpreEvent::Survival && path[n] == 0 {
                continue;
            }
            *raw.entry(functional(&path, &env)).or_insert(0.0) += env_prob * p;
        }
        if !advance(&mut env, atoms.len()) {
            break;
        }
    }
    let event = match event {
        BpreEvent::None => "none".to_string(),
        BpreEvent::Survival => format!("Z_{n} > 0"),
    };
    ExactLaw::from_unnormalized(raw, event)
}

/// Two tables on `{0, 2}` with means `0.8` and `1.4`, mixed so that
/// `E[X e^X] = 0`.
pub fn two_atom_spec() -> EnvironmentSpec {
    let (a, b) = (0.8f64, 1.4f64);
    let p = b * b.ln() / (b * b.ln() - a * a.ln());
    EnvironmentSpec::mixture(vec![
        (
            OffspringLaw::finite_table(vec![0.6, 0.0, 0.4]).expect("valid table"),
            p,
        ),
        (
            OffspringLaw::finite_table(vec![0.3, 0.0, 0.7]).expect("valid table"),
            1.0 - p,
        ),
    ])
    .expect("valid mixture")
}

/// Law of `Z_k` given `Z_n > 0`.
pub fn conditional_generation_law(spec: &EnvironmentSpec, n: usize, k: usize) -> Result<ExactLaw> {
    if k > n {
        return Err(Error::invalid("k", "generation beyond the horizon"));
    }
    enumerate_bpre(spec, n, BpreEvent::Survival, |z, _| z[k] as i64)
}

/// Odometer over `{0..base-1}^len`; false once it wraps.
fn advance(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut().rev() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WalkStatistic {
    /// First index of the minimum of `S_0..S_n`.
    Tau,
    /// Indicator of `max_{1<=k<=n} S_k < 0`.
    MaxNegative,
    /// Indicator of `min_{1<=k<=n} S_k >= 0`.
    MinNonneg,
}

/// Exact law of a walk statistic over all increment sequences of length `n`
/// drawn from `atoms` (value, probability).
pub fn enumerate_walk_atoms(
    atoms: &[(f64, f64)],
    n: usize,
    statistic: WalkStatistic,
) -> Result<ExactLaw> {
    if n == 0 || n > MAX_WALK_STEPS {
        return Err(Error::invalid(
            "n",
            format!("need 1 <= n <= {MAX_WALK_STEPS}"),
        ));
    }
    if atoms.is_empty() {
        return Err(Error::EmptyIncrements);
    }
    let bound = (atoms.len() as f64).powi(n as i32);
    if bound > STATE_LIMIT {
        return Err(Error::StateSpaceTooLarge {
            bound,
            limit: STATE_LIMIT,
        });
    }
    let mut raw = BTreeMap::new();
    let mut idx = vec![0usize; n];
    loop {
        let mut p = 1.0;
        let mut s = 0.0;
        let (mut min, mut tau) = (0.0, 0usize);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (k, j) in idx.iter().enumerate() {
            let (x, q) = atoms[*j];
            p *= q;
            s += x;
            if s < min {
                min = s;
                tau = k + 1;
            }
            lo = lo.min(s);
            hi = hi.max(s);
        }
        let value = match statistic {
            WalkStatistic::Tau => tau as i64,
            WalkStatistic::MaxNegative => i64::from(hi < 0.0),
            WalkStatistic::MinNonneg => i64::from(lo >= 0.0),
        };
        *raw.entry(value).or_insert(0.0) += p;
        if !advance(&mut idx, atoms.len()) {
            break;
        }
    }
    let event = format!("none; statistic {statistic:?} at n = {n}");
    ExactLaw::from_unnormalized(raw, event)
}

/// [`enumerate_walk_atoms`] with the increment atoms of `spec` under its
/// configured measure.
pub fn enumerate_walk(
    spec: &EnvironmentSpec,
    n: usize,
    statistic: WalkStatistic,
) -> Result<ExactLaw> {
    let atoms = spec.increment_atoms(spec.measure());
    if atoms.is_empty() {
        return Err(Error::invalid(
            "spec",
            "walk enumeration needs discrete increments",
        ));
    }
    enumerate_walk_atoms(&atoms, n, statistic)
}

/// `(P(tau_n = n), P(M_n < 0))`, exactly.
pub fn duality_pair(atoms: &[(f64, f64)], n: usize) -> Result<(f64, f64)> {
    let tau = enumerate_walk_atoms(atoms, n, WalkStatistic::Tau)?;
    let neg = enumerate_walk_atoms(atoms, n, WalkStatistic::MaxNegative)?;
    Ok((tau.mass(n as i64), neg.mass(1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::Classification;

    #[test]
    fn shipped_two_atom_spec_is_intermediate() {
        let spec = two_atom_spec();
        assert_eq!(
            spec.classify().unwrap(),
            Classification::IntermediatelySubcritical
        );
        let text = std::fs::read_to_string(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/../../configs/two_atom.json"
        ))
        .unwrap();
        let shipped: EnvironmentSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(
            shipped.classify().unwrap(),
            Classification::IntermediatelySubcritical
        );
        assert!(shipped.oracle_only());
    }
    use crate::walk::path_stats;
    use proptest::prelude::*;

    fn zero_or_two() -> EnvironmentSpec {
        EnvironmentSpec::point(OffspringLaw::finite_table(vec![0.5, 0.0, 0.5]).unwrap()).unwrap()
    }

    #[test]
    fn hand_expansions() {
        let spec = zero_or_two();
        let one = conditional_generation_law(&spec, 1, 1).unwrap();
        assert_eq!(one.atoms.len(), 1);
        assert!((one.mass(2) - 1.0).abs() < 1e-15);

        // P(Z_2 > 0) = 1/2 (1 - 1/4); Z_2 = 2 needs exactly one of the two
        // children to split, Z_2 = 4 needs both
        let two = conditional_generation_law(&spec, 2, 2).unwrap();
        assert!((two.event_probability - 0.375).abs() < 1e-15);
        assert!((two.mass(2) - 2.0 / 3.0).abs() < 1e-14);
        assert!((two.mass(4) - 1.0 / 3.0).abs() < 1e-14);
        assert!((two.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn markov_chain_cross_check() {
        // annealed sizes form a Markov chain; propagate it directly
        let spec = EnvironmentSpec::mixture(vec![
            (
                OffspringLaw::finite_table(vec![0.6, 0.1, 0.3]).unwrap(),
                0.7,
            ),
            (
                OffspringLaw::finite_table(vec![0.2, 0.3, 0.2, 0.3]).unwrap(),
                0.3,
            ),
        ])
        .unwrap();
        let n = 3;
        let law = enumerate_bpre(&spec, n, BpreEvent::None, |z, _| z[n] as i64).unwrap();
        let tables = [vec![0.6, 0.1, 0.3], vec![0.2, 0.3, 0.2, 0.3]];
        let probs = [0.7, 0.3];
        let mut dist = vec![0.0; 28];
        dist[1] = 1.0;
        for _ in 0..n {
            let mut next = vec![0.0; 28];
            for (z, pz) in dist.iter().enumerate() {
                if *pz == 0.0 {
                    continue;
                }
                for (t, pj) in tables.iter().zip(probs) {
                    let mut conv = vec![1.0];
                    for _ in 0..z {
                        conv = convolve(&conv, t);
                    }
                    for (y, q) in conv.iter().enumerate() {
                        next[y] += pz * pj * q;
                    }
                }
            }
            dist = next;
        }
        for (z, p) in dist.iter().enumerate() {
            assert!((law.mass(z as i64) - p).abs() < 1e-14, "z={z}");
        }
    }

    #[test]
    fn state_space_guard() {
        let spec =
            EnvironmentSpec::point(OffspringLaw::finite_table(vec![0.1; 10]).unwrap()).unwrap();
        assert!(matches!(
            enumerate_bpre(&spec, 4, BpreEvent::None, |z, _| z[1] as i64),
            Err(Error::StateSpaceTooLarge { .. })
        ));
        let geo = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        assert!(enumerate_bpre(&geo, 2, BpreEvent::None, |z, _| z[1] as i64).is_err());
    }

    #[test]
    fn walk_examples() {
        let pm = [(1.0, 0.5), (-1.0, 0.5)];
        let neg = enumerate_walk_atoms(&pm, 2, WalkStatistic::MaxNegative).unwrap();
        assert!((neg.mass(1) - 0.25).abs() < 1e-15);
        let down = [(-1.0, 1.0)];
        assert_eq!(
            enumerate_walk_atoms(&down, 7, WalkStatistic::Tau)
                .unwrap()
                .mass(7),
            1.0
        );
        let nonneg = enumerate_walk_atoms(&pm, 2, WalkStatistic::MinNonneg).unwrap();
        assert!((nonneg.mass(1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn spec_walk_uses_configured_measure() {
        let spec = EnvironmentSpec::mixture(vec![
            (OffspringLaw::geometric_with_mean(1f64.exp()).unwrap(), 0.5),
            (
                OffspringLaw::geometric_with_mean((-1f64).exp()).unwrap(),
                0.5,
            ),
        ])
        .unwrap()
        .with_measure(Measure::Annealed);
        let neg = enumerate_walk(&spec, 2, WalkStatistic::MaxNegative).unwrap();
        assert!((neg.mass(1) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn tau_matches_path_stats() {
        let atoms = [(0.7, 0.2), (-0.4, 0.5), (0.0, 0.3)];
        let n = 6;
        let law = enumerate_walk_atoms(&atoms, n, WalkStatistic::Tau).unwrap();
        let mut idx = vec![0usize; n];
        let mut raw = BTreeMap::new();
        loop {
            let xs: Vec<f64> = idx.iter().map(|j| atoms[*j].0).collect();
            let p: f64 = idx.iter().map(|j| atoms[*j].1).product();
            *raw.entry(path_stats(0.0, &xs).unwrap().min_index as i64)
                .or_insert(0.0) += p;
            if !advance(&mut idx, atoms.len()) {
                break;
            }
        }
        for (t, p) in raw {
            assert!((law.mass(t) - p).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn duality_is_exact(
            xs in prop::collection::vec(-2.0f64..2.0, 1..4),
            ws in prop::collection::vec(0.05f64..1.0, 4),
            n in 1usize..9,
        ) {
            let total: f64 = ws[..xs.len()].iter().sum();
            let atoms: Vec<(f64, f64)> = xs.iter().zip(&ws).map(|(x, w)| (*x, w / total)).collect();
            let (tau, neg) = duality_pair(&atoms, n).unwrap();
            prop_assert!((tau - neg).abs() < 1e-12, "{} vs {}", tau, neg);
        }
    }
}
