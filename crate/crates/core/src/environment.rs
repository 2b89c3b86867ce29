//! Random environments: i.i.d. offspring laws `Q_1, Q_2, ...` with
//! `X_k = log m(Q_k)`, sampled either under the original (annealed) law or
//! under the exponentially tilted law with density `e^x / gamma`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::offspring::OffspringLaw;
use crate::parallel::{MonteCarlo, Tag};
use crate::stats::{normal_cdf, Estimate, MeanAccumulator};

/// Absolute tolerance around zero used by [`EnvironmentSpec::classify`].
pub const CLASSIFICATION_TOLERANCE: f64 = 1e-10;

const PROBABILITY_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Annealed,
    #[default]
    Tilted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Supercritical,
    Critical,
    WeaklySubcritical,
    IntermediatelySubcritical,
    StronglySubcritical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureAtom {
    pub law: OffspringLaw,
    pub probability: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "parameters", rename_all = "snake_case")]
pub enum Family {
    /// `X ~ Normal(mu, sigma2)` and, given `X`, a geometric law with mean `e^X`.
    LognormalGeometric {
        mu: f64,
        sigma2: f64,
    },
    DiscreteMixture {
        atoms: Vec<MixtureAtom>,
    },
}

/// `E[X]` and `E[X e^X]` under the annealed law.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub e_x: f64,
    pub e_xex: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SpecConfig {
    #[serde(flatten)]
    family: Family,
    #[serde(default)]
    measure: Measure,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    oracle_only: Option<bool>,
}

/// A validated environment distribution with its tilt constant and moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecConfig", into = "SpecConfig")]
pub struct EnvironmentSpec {
    family: Family,
    measure: Measure,
    oracle_only: bool,
    gamma: f64,
    moments: Moments,
    /// Atom probabilities under the tilted law, empty for continuous families.
    tilted_probabilities: Vec<f64>,
}

impl TryFrom<SpecConfig> for EnvironmentSpec {
    type Error = Error;

    fn try_from(cfg: SpecConfig) -> Result<Self> {
        let mut spec = EnvironmentSpec::new(cfg.family)?.with_measure(cfg.measure);
        match cfg.oracle_only {
            Some(false) if spec.oracle_only => {
                return Err(Error::invalid(
                    "oracle_only",
                    "discrete mixtures have no density and are always oracle_only",
                ))
            }
            Some(flag) => spec.oracle_only = spec.oracle_only || flag,
            None => {}
        }
        Ok(spec)
    }
}

impl From<EnvironmentSpec> for SpecConfig {
    fn from(spec: EnvironmentSpec) -> Self {
        SpecConfig {
            family: spec.family,
            measure: spec.measure,
            oracle_only: Some(spec.oracle_only),
        }
    }
}

/// Distribution of a single walk increment.
#[derive(Clone, Debug, PartialEq)]
pub enum IncrementLaw {
    Normal { mean: f64, sd: f64 },
    Atoms(Vec<(f64, f64)>),
}

impl IncrementLaw {
    /// `P(a <= X <= b)`.
    pub fn prob_between(&self, a: f64, b: f64) -> f64 {
        match self {
            IncrementLaw::Normal { mean, sd } => {
                if b < a {
                    return 0.0;
                }
                normal_cdf((b - mean) / sd) - normal_cdf((a - mean) / sd)
            }
            IncrementLaw::Atoms(atoms) => atoms
                .iter()
                .filter(|(x, _)| *x >= a && *x <= b)
                .map(|(_, p)| p)
                .sum(),
        }
    }

    /// `P(X < t)`.
    pub fn prob_below(&self, t: f64) -> f64 {
        match self {
            IncrementLaw::Normal { mean, sd } => normal_cdf((t - mean) / sd),
            IncrementLaw::Atoms(atoms) => {
                atoms.iter().filter(|(x, _)| *x < t).map(|(_, p)| p).sum()
            }
        }
    }

    /// `E[X - a; a <= X <= b]`.
    pub fn partial_mean_from(&self, a: f64, b: f64) -> f64 {
        match self {
            IncrementLaw::Normal { mean, sd } => {
                if b < a {
                    return 0.0;
                }
                let (alpha, beta) = ((a - mean) / sd, (b - mean) / sd);
                let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
                (mean - a) * (normal_cdf(beta) - normal_cdf(alpha)) - sd * (pdf(beta) - pdf(alpha))
            }
            IncrementLaw::Atoms(atoms) => atoms
                .iter()
                .filter(|(x, _)| *x >= a && *x <= b)
                .map(|(x, p)| (x - a) * p)
                .sum(),
        }
    }
}

/// A realized environment `Q_1..Q_n` with its walk increments.
#[derive(Clone, Debug, PartialEq)]
pub struct Environment {
    pub laws: Vec<OffspringLaw>,
    pub increments: Vec<f64>,
}

impl Environment {
    pub fn from_laws(laws: Vec<OffspringLaw>) -> Result<Self> {
        let increments = laws
            .iter()
            .map(|l| {
                if l.mean() > 0.0 {
                    Ok(l.mean().ln())
                } else {
                    Err(Error::DegenerateMean)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Environment { laws, increments })
    }

    pub fn len(&self) -> usize {
        self.laws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.laws.is_empty()
    }

    /// `S_0 = 0, S_1, ..., S_n`.
    pub fn partial_sums(&self) -> Vec<f64> {
        let mut s = Vec::with_capacity(self.len() + 1);
        s.push(0.0);
        let mut acc = 0.0;
        for x in &self.increments {
            acc += x;
            s.push(acc);
        }
        s
    }

    pub fn push(&mut self, law: OffspringLaw, x: f64) {
        self.laws.push(law);
        self.increments.push(x);
    }
}

impl EnvironmentSpec {
    pub fn new(family: Family) -> Result<Self> {
        let (gamma, moments, tilted, oracle_only) = match &family {
            Family::LognormalGeometric { mu, sigma2 } => {
                if !(*sigma2 > 0.0 && sigma2.is_finite()) {
                    return Err(Error::invalid(
                        "sigma2",
                        format!("variance {sigma2} must be positive"),
                    ));
                }
                if !mu.is_finite() {
                    return Err(Error::invalid("mu", "mean must be finite"));
                }
                let gamma = (mu + sigma2 / 2.0).exp();
                let moments = Moments {
                    e_x: *mu,
                    e_xex: (mu + sigma2) * gamma,
                };
                (gamma, moments, Vec::new(), false)
            }
            Family::DiscreteMixture { atoms } => {
                if atoms.is_empty() {
                    return Err(Error::invalid("atoms", "mixture needs at least one atom"));
                }
                if atoms
                    .iter()
                    .any(|a| !(a.probability >= 0.0 && a.probability.is_finite()))
                {
                    return Err(Error::invalid("atoms", "probabilities must be nonnegative"));
                }
                let total: f64 = atoms.iter().map(|a| a.probability).sum();
                if (total - 1.0).abs() > PROBABILITY_TOLERANCE {
                    return Err(Error::invalid(
                        "atoms",
                        format!("probabilities sum to {total}, not 1"),
                    ));
                }
                let gamma: f64 = atoms.iter().map(|a| a.probability * a.law.mean()).sum();
                if gamma <= 0.0 {
                    return Err(Error::DegenerateMean);
                }
                let mut e_x = 0.0;
                let mut e_xex = 0.0;
                for a in atoms.iter().filter(|a| a.probability > 0.0) {
                    let m = a.law.mean();
                    if m > 0.0 {
                        e_x += a.probability * m.ln();
                        e_xex += a.probability * m.ln() * m;
                    } else {
                        e_x = f64::NEG_INFINITY;
                    }
                }
                let tilted = atoms
                    .iter()
                    .map(|a| a.probability * a.law.mean() / gamma)
                    .collect();
                (gamma, Moments { e_x, e_xex }, tilted, true)
            }
        };
        Ok(EnvironmentSpec {
            family,
            measure: Measure::Tilted,
            oracle_only,
            gamma,
            moments,
            tilted_probabilities: tilted,
        })
    }

    /// The lognormal-geometric family with `mu = -sigma2`, which makes
    /// `E[X e^X] = 0` exactly.
    pub fn calibrate_lognormal(sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::invalid(
                "sigma2",
                format!("variance {sigma2} must be positive"),
            ));
        }
        Self::new(Family::LognormalGeometric {
            mu: -sigma2,
            sigma2,
        })
    }

    pub fn lognormal(mu: f64, sigma2: f64) -> Result<Self> {
        Self::new(Family::LognormalGeometric { mu, sigma2 })
    }

    pub fn mixture(atoms: Vec<(OffspringLaw, f64)>) -> Result<Self> {
        Self::new(Family::DiscreteMixture {
            atoms: atoms
                .into_iter()
                .map(|(law, probability)| MixtureAtom { law, probability })
                .collect(),
        })
    }

    /// Deterministic environment `Q = law`.
    pub fn point(law: OffspringLaw) -> Result<Self> {
        Self::mixture(vec![(law, 1.0)])
    }

    pub fn with_measure(mut self, measure: Measure) -> Self {
        self.measure = measure;
        self
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn measure(&self) -> Measure {
        self.measure
    }

    pub fn oracle_only(&self) -> bool {
        self.oracle_only
    }

    /// `gamma = E[e^X]`.
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn moments(&self) -> Moments {
        self.moments
    }

    pub fn classify(&self) -> Result<Classification> {
        let Moments { e_x, e_xex } = self.moments;
        if !e_x.is_finite() {
            return Err(Error::NonFiniteMoment("E[X]"));
        }
        if !e_xex.is_finite() {
            return Err(Error::NonFiniteMoment("E[X e^X]"));
        }
        let tol = CLASSIFICATION_TOLERANCE;
        Ok(if e_x.abs() <= tol {
            Classification::Critical
        } else if e_x > 0.0 {
            Classification::Supercritical
        } else if e_xex > tol {
            Classification::WeaklySubcritical
        } else if e_xex >= -tol {
            Classification::IntermediatelySubcritical
        } else {
            Classification::StronglySubcritical
        })
    }

    /// Fails unless the spec is intermediately subcritical and usable for
    /// the limit-theorem experiments.
    pub fn require_intermediate(&self, purpose: &'static str) -> Result<()> {
        if self.oracle_only {
            return Err(Error::OracleOnlySpec(purpose));
        }
        match self.classify()? {
            Classification::IntermediatelySubcritical => Ok(()),
            other => Err(Error::Precondition(format!(
                "{purpose} needs an intermediately subcritical environment, got {other:?}"
            ))),
        }
    }

    /// Standard deviation of `X`, which is the same under both measures for
    /// the lognormal family.
    pub fn increment_sd(&self, measure: Measure) -> f64 {
        match &self.family {
            Family::LognormalGeometric { sigma2, .. } => sigma2.sqrt(),
            Family::DiscreteMixture { .. } => {
                let atoms = self.increment_atoms(measure);
                let mean: f64 = atoms.iter().map(|(x, p)| x * p).sum();
                atoms
                    .iter()
                    .map(|(x, p)| p * (x - mean).powi(2))
                    .sum::<f64>()
                    .sqrt()
            }
        }
    }

    /// Mean and variance of `X` under the tilted law of the lognormal family:
    /// `Normal(mu + sigma2, sigma2)`.
    pub fn tilted_normal(&self) -> Option<(f64, f64)> {
        match self.family {
            Family::LognormalGeometric { mu, sigma2 } => Some((mu + sigma2, sigma2)),
            Family::DiscreteMixture { .. } => None,
        }
    }

    /// The law of `X` under `measure`.
    pub fn increment_law(&self, measure: Measure) -> IncrementLaw {
        match self.family {
            Family::LognormalGeometric { mu, sigma2 } => IncrementLaw::Normal {
                mean: match measure {
                    Measure::Annealed => mu,
                    Measure::Tilted => mu + sigma2,
                },
                sd: sigma2.sqrt(),
            },
            Family::DiscreteMixture { .. } => IncrementLaw::Atoms(self.increment_atoms(measure)),
        }
    }

    /// `(x_j, p_j)` pairs of a discrete family under `measure`; atoms with
    /// zero mean are dropped under the tilted law where they have no mass.
    pub fn increment_atoms(&self, measure: Measure) -> Vec<(f64, f64)> {
        match &self.family {
            Family::LognormalGeometric { .. } => Vec::new(),
            Family::DiscreteMixture { atoms } => atoms
                .iter()
                .enumerate()
                .map(|(j, a)| {
                    let p = match measure {
                        Measure::Annealed => a.probability,
                        Measure::Tilted => self.tilted_probabilities[j],
                    };
                    (a.law.mean().ln(), p)
                })
                .filter(|(_, p)| *p > 0.0)
                .collect(),
        }
    }

    /// Atom probabilities under `measure`, in atom order.
    pub fn atom_probabilities(&self, measure: Measure) -> Vec<f64> {
        match &self.family {
            Family::LognormalGeometric { .. } => Vec::new(),
            Family::DiscreteMixture { atoms } => match measure {
                Measure::Annealed => atoms.iter().map(|a| a.probability).collect(),
                Measure::Tilted => self.tilted_probabilities.clone(),
            },
        }
    }

    fn draw_atom<R: Rng + ?Sized>(&self, measure: Measure, rng: &mut R) -> usize {
        let Family::DiscreteMixture { atoms } = &self.family else {
            unreachable!("discrete draw on continuous family")
        };
        let u = rng.random::<f64>();
        let mut acc = 0.0;
        let mut last = 0;
        for (j, a) in atoms.iter().enumerate() {
            let p = match measure {
                Measure::Annealed => a.probability,
                Measure::Tilted => self.tilted_probabilities[j],
            };
            if p > 0.0 {
                last = j;
                acc += p;
                if u < acc {
                    return j;
                }
            }
        }
        last
    }

    /// One increment `X` under `measure`. Zero-mean atoms give `-inf`.
    pub fn sample_increment<R: Rng + ?Sized>(&self, measure: Measure, rng: &mut R) -> f64 {
        match &self.family {
            Family::LognormalGeometric { mu, sigma2 } => {
                let centre = match measure {
                    Measure::Annealed => *mu,
                    Measure::Tilted => mu + sigma2,
                };
                let z: f64 = StandardNormal.sample(rng);
                centre + sigma2.sqrt() * z
            }
            Family::DiscreteMixture { atoms } => {
                atoms[self.draw_atom(measure, rng)].law.mean().ln()
            }
        }
    }

    /// One environment step `(Q, X)` under `measure`.
    pub fn sample_step<R: Rng + ?Sized>(
        &self,
        measure: Measure,
        rng: &mut R,
    ) -> Result<(OffspringLaw, f64)> {
        match &self.family {
            Family::LognormalGeometric { .. } => {
                let x = self.sample_increment(measure, rng);
                Ok((self.law_for_increment(x)?, x))
            }
            Family::DiscreteMixture { atoms } => {
                let a = &atoms[self.draw_atom(measure, rng)];
                Ok((a.law.clone(), a.law.mean().ln()))
            }
        }
    }

    /// The offspring law attached to increment `x` in the lognormal family.
    pub fn law_for_increment(&self, x: f64) -> Result<OffspringLaw> {
        match &self.family {
            Family::LognormalGeometric { .. } => OffspringLaw::geometric_with_mean(x.exp()),
            Family::DiscreteMixture { atoms } => atoms
                .iter()
                .find(|a| a.law.mean().ln() == x)
                .map(|a| a.law.clone())
                .ok_or_else(|| Error::invalid("x", format!("{x} is not an atom of the mixture"))),
        }
    }

    /// The environment whose walk increments are `xs`.
    pub fn environment_from_increments(&self, xs: &[f64]) -> Result<Environment> {
        let laws = xs
            .iter()
            .map(|x| self.law_for_increment(*x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Environment {
            laws,
            increments: xs.to_vec(),
        })
    }

    /// i.i.d. draws `Q_1..Q_n` under `measure`.
    pub fn sample_environment<R: Rng + ?Sized>(
        &self,
        measure: Measure,
        n: usize,
        rng: &mut R,
    ) -> Result<Environment> {
        if n == 0 {
            return Err(Error::invalid("n", "horizon must be at least 1"));
        }
        let mut env = Environment {
            laws: Vec::with_capacity(n),
            increments: Vec::with_capacity(n),
        };
        for _ in 0..n {
            let (law, x) = self.sample_step(measure, rng)?;
            env.push(law, x);
        }
        Ok(env)
    }

    /// `E_P[(log+ zeta(a))^(2 + eps)]` under the tilted law: exact for
    /// discrete mixtures, Monte Carlo with `samples` draws otherwise.
    pub fn log_moment_check_a3(
        &self,
        a: u64,
        eps: f64,
        samples: usize,
        mc: &MonteCarlo,
    ) -> Result<Estimate> {
        if a == 0 {
            return Err(Error::invalid("a", "zeta(a) is defined for a >= 1"));
        }
        let power = 2.0 + eps;
        let g = |law: &OffspringLaw| -> Result<f64> { Ok(law.zeta(a)?.max(1.0).ln().powf(power)) };
        match &self.family {
            Family::DiscreteMixture { atoms } => {
                let mut total = 0.0;
                for (atom, p) in atoms.iter().zip(&self.tilted_probabilities) {
                    if *p > 0.0 {
                        total += p * g(&atom.law)?;
                    }
                }
                Ok(Estimate::exact(total))
            }
            Family::LognormalGeometric { .. } => {
                let acc = mc.fold_chunks(
                    Tag::new("log-moment-a3").with(a),
                    samples,
                    crate::parallel::CHUNK_SIZE,
                    MeanAccumulator::default(),
                    |rng, range| {
                        let mut acc = MeanAccumulator::default();
                        for _ in range {
                            let x = self.sample_increment(Measure::Tilted, rng);
                            acc.push(g(&self.law_for_increment(x)?)?);
                        }
                        Ok(acc)
                    },
                    |acc, chunk| acc.merge(&chunk),
                )?;
                Ok(acc.estimate())
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::MonteCarlo;
    use proptest::prelude::*;

    /// Trapezoid rule for `int f(x) phi(x; mu, s2) dx` on `mu +- 12 sd`.
    fn gauss_quad(mu: f64, s2: f64, f: impl Fn(f64) -> f64) -> f64 {
        let sd = s2.sqrt();
        let n = 200_000;
        let (lo, hi) = (mu - 12.0 * sd, mu + 12.0 * sd);
        let h = (hi - lo) / n as f64;
        let dens = |x: f64| {
            (-(x - mu).powi(2) / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2).sqrt()
        };
        (0..=n)
            .map(|i| {
                let x = lo + i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                w * f(x) * dens(x)
            })
            .sum::<f64>()
            * h
    }

    #[test]
    fn calibration_examples() {
        let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        assert_eq!(
            spec.classify().unwrap(),
            Classification::IntermediatelySubcritical
        );
        assert!((spec.gamma() - (-0.5f64).exp()).abs() < 1e-12);
        assert!((spec.gamma() - 0.606531).abs() < 1e-6);
        assert_eq!(spec.moments().e_x, -1.0);
        let quad = gauss_quad(-1.0, 1.0, f64::exp);
        assert!((quad - spec.gamma()).abs() < 1e-9);
        assert!(EnvironmentSpec::calibrate_lognormal(0.0).is_err());
        assert!(EnvironmentSpec::calibrate_lognormal(-1.0).is_err());
    }

    #[test]
    fn tilted_law_is_centred_normal() {
        let spec = EnvironmentSpec::calibrate_lognormal(0.25).unwrap();
        assert_eq!(spec.tilted_normal(), Some((0.0, 0.25)));
        // density e^x / gamma against Normal(-0.25, 0.25)
        let g = spec.gamma();
        let mass = gauss_quad(-0.25, 0.25, |x| x.exp() / g);
        let mean = gauss_quad(-0.25, 0.25, |x| x * x.exp() / g);
        let var = gauss_quad(-0.25, 0.25, |x| x * x * x.exp() / g);
        assert!((mass - 1.0).abs() < 1e-9);
        assert!(mean.abs() < 1e-9);
        assert!((var - 0.25).abs() < 1e-9);
    }

    #[test]
    fn classification_examples() {
        let point = EnvironmentSpec::point(OffspringLaw::point_mass(1)).unwrap();
        assert_eq!(point.classify().unwrap(), Classification::Critical);
        let strong = EnvironmentSpec::lognormal(-2.0, 1.0).unwrap();
        assert_eq!(
            strong.classify().unwrap(),
            Classification::StronglySubcritical
        );
        let weak = EnvironmentSpec::lognormal(-0.5, 1.0).unwrap();
        assert_eq!(weak.classify().unwrap(), Classification::WeaklySubcritical);
        let sup = EnvironmentSpec::lognormal(0.5, 1.0).unwrap();
        assert_eq!(sup.classify().unwrap(), Classification::Supercritical);
        let dead = EnvironmentSpec::mixture(vec![
            (OffspringLaw::point_mass(0), 0.5),
            (OffspringLaw::point_mass(2), 0.5),
        ])
        .unwrap();
        assert!(matches!(dead.classify(), Err(Error::NonFiniteMoment(_))));
    }

    #[test]
    fn gaussian_moment_formula_matches_quadrature() {
        for &(mu, s2) in &[(-1.0, 1.0), (-2.0, 1.0), (-0.3, 0.5)] {
            let spec = EnvironmentSpec::lognormal(mu, s2).unwrap();
            let q = gauss_quad(mu, s2, |x| x * x.exp());
            assert!((spec.moments().e_xex - q).abs() < 1e-9);
        }
    }

    #[test]
    fn tilted_mean_is_zero_and_annealed_mean_of_exp_is_gamma() {
        let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        let mut rng = MonteCarlo::new(5).stream(Tag::new("env"), 0);
        let mut tilted = MeanAccumulator::default();
        let mut annealed = MeanAccumulator::default();
        for _ in 0..1_000_000 {
            tilted.push(spec.sample_increment(Measure::Tilted, &mut rng));
            annealed.push(spec.sample_increment(Measure::Annealed, &mut rng).exp());
        }
        assert!(
            tilted.estimate().within(0.0, 3.0),
            "{:?}",
            tilted.estimate()
        );
        assert!(
            annealed.estimate().within(spec.gamma(), 3.0),
            "{:?}",
            annealed.estimate()
        );
    }

    #[test]
    fn tilted_mixture_frequencies() {
        let a = OffspringLaw::point_mass(1);
        let b = OffspringLaw::point_mass(3);
        let spec = EnvironmentSpec::mixture(vec![(a, 0.6), (b, 0.4)]).unwrap();
        // p_j e^{x_j} / gamma = (0.6, 1.2) / 1.8
        let expected = 1.2 / 1.8;
        let mut rng = MonteCarlo::new(9).stream(Tag::new("mix"), 0);
        let n = 200_000;
        let hits = (0..n)
            .filter(|_| spec.sample_increment(Measure::Tilted, &mut rng) > 0.5)
            .count();
        let p = crate::stats::proportion(hits as u64, n as u64);
        assert!(p.within(expected, 3.0), "{p:?}");
    }

    #[test]
    fn log_moment_examples() {
        let mc = MonteCarlo::new(1);
        let point = EnvironmentSpec::point(OffspringLaw::point_mass(1)).unwrap();
        assert_eq!(
            point.log_moment_check_a3(1, 1.0, 100, &mc).unwrap().value,
            0.0
        );
        let t1 = OffspringLaw::finite_table(vec![0.2, 0.3, 0.5]).unwrap();
        let t2 = OffspringLaw::finite_table(vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let spec = EnvironmentSpec::mixture(vec![(t1.clone(), 0.5), (t2.clone(), 0.5)]).unwrap();
        let gamma = 0.5 * t1.mean() + 0.5 * t2.mean();
        let direct = [&t1, &t2]
            .iter()
            .map(|l| 0.5 * l.mean() / gamma * l.zeta(1).unwrap().max(1.0).ln().powf(3.0))
            .sum::<f64>();
        let e = spec.log_moment_check_a3(1, 1.0, 0, &mc).unwrap();
        assert!((e.value - direct).abs() < 1e-14);
        assert_eq!(e.stderr, 0.0);
        let ln = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        let a = ln
            .log_moment_check_a3(1, 1.0, 100_000, &MonteCarlo::new(1))
            .unwrap();
        let b = ln
            .log_moment_check_a3(1, 1.0, 100_000, &MonteCarlo::new(2))
            .unwrap();
        assert!(a.value.is_finite() && a.stderr > 0.0);
        assert!(a.agrees_with(&b, 4.0));
    }

    #[test]
    fn json_round_trip() {
        let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"family":"lognormal_geometric","parameters":{"mu":-1.0,"sigma2":1.0},"measure":"tilted","oracle_only":false}"#
        );
        let back: EnvironmentSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let mix = r#"{"family":"discrete_mixture","parameters":{"atoms":[
            {"law":{"kind":"finite_table","weights":[0.5,0.0,0.5]},"probability":0.5},
            {"law":{"kind":"finite_table","weights":[0.25,0.0,0.75]},"probability":0.5}]}}"#;
        let spec: EnvironmentSpec = serde_json::from_str(mix).unwrap();
        assert!(spec.oracle_only());
        assert_eq!(spec.measure(), Measure::Tilted);
        let again: EnvironmentSpec =
            serde_json::from_str(&serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(again, spec);
        let bad = mix.replace("\"probability\":0.5}]", "\"probability\":0.4}]");
        assert!(serde_json::from_str::<EnvironmentSpec>(&bad).is_err());
    }

    proptest! {
        #[test]
        fn calibrated_specs_are_intermediate(s2 in 1e-3f64..20.0) {
            let spec = EnvironmentSpec::calibrate_lognormal(s2).unwrap();
            prop_assert_eq!(spec.classify().unwrap(), Classification::IntermediatelySubcritical);
            prop_assert!((spec.gamma() - (-s2 / 2.0).exp()).abs() < 1e-12);
        }

        #[test]
        fn zero_probability_atoms_do_not_change_classification(
            m1 in 0.2f64..3.0, m2 in 0.2f64..3.0, p in 0.05f64..0.95, extra in 0.01f64..10.0
        ) {
            let a = OffspringLaw::geometric_with_mean(m1).unwrap();
            let b = OffspringLaw::geometric_with_mean(m2).unwrap();
            let c = OffspringLaw::geometric_with_mean(extra).unwrap();
            let base = EnvironmentSpec::mixture(vec![(a.clone(), p), (b.clone(), 1.0 - p)]).unwrap();
            let padded = EnvironmentSpec::mixture(vec![(a, p), (c, 0.0), (b, 1.0 - p)]).unwrap();
            prop_assert_eq!(base.classify().unwrap(), padded.classify().unwrap());
        }
    }

    /// `E[phi e^{S_n}] / gamma^n` under the annealed law equals `E[phi]`
    /// under the tilted law for indicator functionals.
    #[test]
    fn tilting_consistency() {
        for (n, threshold, seed) in [
            (1usize, 0.0, 1u64),
            (2, -0.5, 2),
            (3, 0.3, 3),
            (5, -1.0, 4),
            (5, 0.8, 5),
        ] {
            let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
            let mc = MonteCarlo::new(seed);
            let mut a = mc.stream(Tag::new("tilt-a"), 0);
            let mut b = mc.stream(Tag::new("tilt-b"), 0);
            let samples = 200_000;
            let phi = |xs: &[f64]| {
                if xs.iter().sum::<f64>() / xs.len() as f64 > threshold {
                    1.0
                } else {
                    0.0
                }
            };
            let mut annealed = MeanAccumulator::default();
            let mut tilted = MeanAccumulator::default();
            let gn = spec.gamma().powi(n as i32);
            for _ in 0..samples {
                let xs: Vec<f64> = (0..n)
                    .map(|_| spec.sample_increment(Measure::Annealed, &mut a))
                    .collect();
                annealed.push(phi(&xs) * xs.iter().sum::<f64>().exp() / gn);
                let ys: Vec<f64> = (0..n)
                    .map(|_| spec.sample_increment(Measure::Tilted, &mut b))
                    .collect();
                tilted.push(phi(&ys));
            }
            assert!(
                annealed.estimate().agrees_with(&tilted.estimate(), 3.5),
                "n={n} {:?} vs {:?}",
                annealed.estimate(),
                tilted.estimate()
            );
        }
    }
}
