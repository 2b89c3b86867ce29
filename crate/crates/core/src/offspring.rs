//! Offspring distributions on the nonnegative integers.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest population the simulators accept (2^63 - 1).
pub const POPULATION_LIMIT: u64 = i64::MAX as u64;

/// Generation totals above this many parents are drawn as one compound
/// variate instead of parent by parent.
const COMPOUND_THRESHOLD: u64 = 16;

/// Weight tables must sum to one within this tolerance.
const TABLE_TOLERANCE: f64 = 1e-12;

/// Stop numeric series once the bound on the neglected tail falls below this.
const SERIES_TAIL: f64 = 1e-16;

/// Family and parameters of an offspring law. `Geometric` counts failures
/// before the first success, so its mean is `(1 - s) / s`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OffspringKind {
    Geometric {
        s: f64,
    },
    Poisson {
        lambda: f64,
    },
    PointMass {
        k: u64,
    },
    FiniteTable {
        weights: Vec<f64>,
    },
    /// The size-biased version `y q(y) / m(q)` of a geometric or Poisson law.
    SizeBiased {
        base: Box<OffspringKind>,
    },
}

/// An offspring law with its mean and normalized second factorial moment
/// cached at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OffspringKind", into = "OffspringKind")]
pub struct OffspringLaw {
    kind: OffspringKind,
    mean: f64,
    eta: Option<f64>,
}

impl TryFrom<OffspringKind> for OffspringLaw {
    type Error = Error;

    fn try_from(kind: OffspringKind) -> Result<Self> {
        match kind {
            OffspringKind::Geometric { s } => Self::geometric(s),
            OffspringKind::Poisson { lambda } => Self::poisson(lambda),
            OffspringKind::PointMass { k } => Ok(Self::point_mass(k)),
            OffspringKind::FiniteTable { weights } => Self::finite_table(weights),
            OffspringKind::SizeBiased { base } => {
                let base = OffspringLaw::try_from(*base)?;
                match base.kind {
                    OffspringKind::Geometric { .. } | OffspringKind::Poisson { .. } => {
                        base.size_bias()
                    }
                    _ => Err(Error::invalid(
                        "size_biased",
                        "only geometric and poisson bases are stored in size-biased form",
                    )),
                }
            }
        }
    }
}

impl From<OffspringLaw> for OffspringKind {
    fn from(law: OffspringLaw) -> Self {
        law.kind
    }
}

impl OffspringLaw {
    fn from_kind(kind: OffspringKind) -> Self {
        let mean = kind.raw_moment(1);
        let eta = (mean > 0.0).then(|| (kind.raw_moment(2) - mean) / (mean * mean));
        OffspringLaw { kind, mean, eta }
    }

    pub fn geometric(s: f64) -> Result<Self> {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::invalid(
                "s",
                format!("geometric success probability {s} not in (0,1)"),
            ));
        }
        Ok(Self::from_kind(OffspringKind::Geometric { s }))
    }

    /// Geometric law with the given mean, i.e. success probability `1 / (1 + m)`.
    pub fn geometric_with_mean(m: f64) -> Result<Self> {
        if !(m > 0.0 && m.is_finite()) {
            return Err(Error::invalid(
                "mean",
                format!("geometric mean {m} must be positive and finite"),
            ));
        }
        let s = 1.0 / (1.0 + m);
        Ok(OffspringLaw {
            kind: OffspringKind::Geometric { s },
            mean: m,
            eta: Some(2.0),
        })
    }

    pub fn poisson(lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(
                "lambda",
                format!("poisson rate {lambda} must be positive"),
            ));
        }
        Ok(Self::from_kind(OffspringKind::Poisson { lambda }))
    }

    pub fn point_mass(k: u64) -> Self {
        Self::from_kind(OffspringKind::PointMass { k })
    }

    /// Law with `P(Y = y) = weights[y]`. Trailing zero weights are dropped.
    pub fn finite_table(mut weights: Vec<f64>) -> Result<Self> {
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid(
                "weights",
                "weights must be finite and nonnegative",
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > TABLE_TOLERANCE {
            return Err(Error::invalid(
                "weights",
                format!("weights sum to {total}, not 1"),
            ));
        }
        while weights.len() > 1 && weights.last() == Some(&0.0) {
            weights.pop();
        }
        if weights.is_empty() {
            return Err(Error::invalid("weights", "empty table"));
        }
        Ok(Self::from_kind(OffspringKind::FiniteTable { weights }))
    }

    pub fn kind(&self) -> &OffspringKind {
        &self.kind
    }

    /// `m(q) = sum y q(y)`.
    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// `sum y(y-1) q(y) / m(q)^2`.
    pub fn eta(&self) -> Result<f64> {
        self.eta.ok_or(Error::DegenerateMean)
    }

    /// `E[Y^2]`.
    pub fn second_moment(&self) -> f64 {
        self.kind.raw_moment(2)
    }

    /// `zeta(a) = m(q)^-2 sum_{y >= a} y^2 q(y)`, defined for `a >= 1`.
    pub fn zeta(&self, a: u64) -> Result<f64> {
        if a == 0 {
            return Err(Error::invalid("a", "zeta(a) is defined for a >= 1"));
        }
        if self.mean <= 0.0 {
            return Err(Error::DegenerateMean);
        }
        let tail = match &self.kind {
            OffspringKind::Geometric { s } => {
                // memoryless: Y | Y >= a  is  a + Y'
                let q = 1.0 - s;
                let m = self.mean;
                let a = a as f64;
                q.powf(a) * (a * a + 2.0 * a * m + m + 2.0 * m * m)
            }
            OffspringKind::PointMass { k } => {
                if *k >= a {
                    (*k as f64).powi(2)
                } else {
                    0.0
                }
            }
            OffspringKind::FiniteTable { weights } => weights
                .iter()
                .enumerate()
                .skip(a as usize)
                .map(|(y, w)| (y as f64).powi(2) * w)
                .sum(),
            _ => self.tail_series(a, 2),
        };
        Ok(tail / (self.mean * self.mean))
    }

    /// Numeric `sum_{y >= a} y^power q(y)` for laws whose term ratios are
    /// eventually nonincreasing and below one; the neglected tail is bounded
    /// by a geometric series.
    fn tail_series(&self, a: u64, power: i32) -> f64 {
        let term = |y: u64| (y as f64).powi(power) * self.pmf(y);
        let mut sum = 0.0;
        let mut y = a;
        let mut t = term(y);
        loop {
            sum += t;
            let next = term(y + 1);
            if (y as f64) > self.mean + 1.0 && t > 0.0 {
                let ratio = next / t;
                if ratio < 1.0 && next / (1.0 - ratio) <= SERIES_TAIL * sum.max(f64::MIN_POSITIVE) {
                    return sum + next;
                }
            }
            if t == 0.0 && next == 0.0 && (y as f64) > self.mean + 1.0 {
                return sum;
            }
            y += 1;
            t = next;
        }
    }

    /// `P(Y = y)`.
    pub fn pmf(&self, y: u64) -> f64 {
        self.kind.pmf(y)
    }

    /// Largest support point of a table law.
    pub fn truncation_k(&self) -> Option<usize> {
        match &self.kind {
            OffspringKind::FiniteTable { weights } => Some(weights.len() - 1),
            _ => None,
        }
    }

    /// The size-biased law `y q(y) / m(q)`. It puts no mass on zero and has
    /// mean `E[Y^2] / m`.
    pub fn size_bias(&self) -> Result<OffspringLaw> {
        if self.mean <= 0.0 {
            return Err(Error::DegenerateMean);
        }
        match &self.kind {
            OffspringKind::PointMass { k } => Ok(Self::point_mass(*k)),
            OffspringKind::FiniteTable { weights } => {
                let m = self.mean;
                let w: Vec<f64> = weights
                    .iter()
                    .enumerate()
                    .map(|(y, q)| y as f64 * q / m)
                    .collect();
                Ok(Self::from_kind(OffspringKind::FiniteTable {
                    weights: renormalize(w),
                }))
            }
            OffspringKind::Geometric { .. } | OffspringKind::Poisson { .. } => {
                Ok(Self::from_kind(OffspringKind::SizeBiased {
                    base: Box::new(self.kind.clone()),
                }))
            }
            OffspringKind::SizeBiased { .. } => {
                // materialize as a table with tail mass below 1e-14
                let m = self.mean;
                let mut w = vec![0.0];
                let mut covered = 0.0;
                let mut y = 1u64;
                while 1.0 - covered > 1e-14 || (y as f64) < m {
                    let p = y as f64 * self.pmf(y) / m;
                    w.push(p);
                    covered += p;
                    y += 1;
                }
                Ok(Self::from_kind(OffspringKind::FiniteTable {
                    weights: renormalize(w),
                }))
            }
        }
    }

    /// `P(Y = 0)`.
    pub fn prob_zero(&self) -> f64 {
        self.pmf(0)
    }

    /// `1 - f(1 - y)` with `f` the generating function: the probability that
    /// at least one of the offspring survives when each survives
    /// independently with probability `y`.
    pub fn survival_map(&self, y: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&y));
        match &self.kind {
            OffspringKind::Geometric { .. } => {
                let my = self.mean * y;
                my / (1.0 + my)
            }
            OffspringKind::Poisson { lambda } => -(-lambda * y).exp_m1(),
            OffspringKind::PointMass { k } => none_survive_complement(*k, y),
            OffspringKind::FiniteTable { weights } => weights
                .iter()
                .enumerate()
                .map(|(j, q)| q * none_survive_complement(j as u64, y))
                .sum(),
            OffspringKind::SizeBiased { .. } => {
                if y < 1e-6 {
                    let fact2 = self.kind.raw_moment(2) - self.mean;
                    self.mean * y - 0.5 * fact2 * y * y
                } else {
                    1.0 - self.kind.pgf(1.0 - y)
                }
            }
        }
    }

    /// One draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match &self.kind {
            OffspringKind::Geometric { s } => geometric_draw(*s, rng),
            OffspringKind::Poisson { lambda } => {
                poisson_draw(*lambda, rng).unwrap_or(POPULATION_LIMIT)
            }
            OffspringKind::PointMass { k } => *k,
            OffspringKind::FiniteTable { weights } => table_draw(weights, rng),
            OffspringKind::SizeBiased { base } => match base.as_ref() {
                OffspringKind::Geometric { s } => {
                    1 + geometric_draw(*s, rng) + geometric_draw(*s, rng)
                }
                OffspringKind::Poisson { lambda } => {
                    1 + poisson_draw(*lambda, rng).unwrap_or(POPULATION_LIMIT)
                }
                _ => unreachable!("size-biased base restricted at construction"),
            },
        }
    }

    /// Total offspring of `z` independent parents, i.e. one draw from the
    /// `z`-fold convolution. Closed-form compound draws are used where the
    /// family has one.
    pub fn sample_total<R: Rng + ?Sized>(&self, z: u64, rng: &mut R) -> Result<u64> {
        if z == 0 {
            return Ok(0);
        }
        let total = match &self.kind {
            OffspringKind::Geometric { s } => negative_binomial(z, *s, rng)?,
            OffspringKind::Poisson { lambda } => poisson_draw(z as f64 * lambda, rng)?,
            OffspringKind::PointMass { k } => z
                .checked_mul(*k)
                .ok_or(Error::PopulationOverflow { generation: 0 })?,
            OffspringKind::FiniteTable { weights } => {
                if z <= COMPOUND_THRESHOLD {
                    let mut t = 0u64;
                    for _ in 0..z {
                        t += table_draw(weights, rng);
                    }
                    t
                } else {
                    multinomial_total(weights, z, rng)?
                }
            }
            OffspringKind::SizeBiased { base } => match base.as_ref() {
                OffspringKind::Geometric { s } => {
                    let twice = z
                        .checked_mul(2)
                        .ok_or(Error::PopulationOverflow { generation: 0 })?;
                    z.checked_add(negative_binomial(twice, *s, rng)?)
                        .ok_or(Error::PopulationOverflow { generation: 0 })?
                }
                OffspringKind::Poisson { lambda } => z
                    .checked_add(poisson_draw(z as f64 * lambda, rng)?)
                    .ok_or(Error::PopulationOverflow { generation: 0 })?,
                _ => unreachable!("size-biased base restricted at construction"),
            },
        };
        if total > POPULATION_LIMIT {
            return Err(Error::PopulationOverflow { generation: 0 });
        }
        Ok(total)
    }
}

impl OffspringLaw {
    /// Children of `a` parents when every child independently has surviving
    /// descendants with probability `p` and each parent is conditioned on at
    /// least one such child. Returns `(surviving, doomed)` child counts.
    pub fn sample_survivor_children<R: Rng + ?Sized>(
        &self,
        a: u64,
        p: f64,
        rng: &mut R,
    ) -> Result<(u64, u64)> {
        if a == 0 {
            return Ok((0, 0));
        }
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(
                "p",
                format!("survival probability {p} not in (0,1]"),
            ));
        }
        let overflow = || Error::PopulationOverflow { generation: 0 };
        match &self.kind {
            OffspringKind::Geometric { s } => {
                // S | S >= 1 is 1 + geometric, and T | S is negative binomial
                let q = 1.0 - s;
                let doomed_success = 1.0 - q * (1.0 - p);
                let rho = q * p / doomed_success;
                let surviving = a
                    .checked_add(negative_binomial(a, 1.0 - rho, rng)?)
                    .ok_or_else(overflow)?;
                let trials = surviving.checked_add(a).ok_or_else(overflow)?;
                Ok((surviving, negative_binomial(trials, doomed_success, rng)?))
            }
            OffspringKind::Poisson { lambda } => {
                let mut surviving = 0u64;
                for _ in 0..a {
                    surviving += zero_truncated_poisson(lambda * p, rng)?;
                }
                Ok((surviving, poisson_draw(a as f64 * lambda * (1.0 - p), rng)?))
            }
            OffspringKind::PointMass { k } => {
                let mut surviving = 0u64;
                for _ in 0..a {
                    surviving += binomial_at_least_one(*k, p, rng)?;
                }
                Ok((surviving, a * k - surviving))
            }
            OffspringKind::FiniteTable { weights } => {
                // Y from q(y) (1 - (1-p)^y), then S | Y from Binomial(Y, p) given S >= 1
                let tilted: Vec<f64> = weights
                    .iter()
                    .enumerate()
                    .map(|(y, q)| q * none_survive_complement(y as u64, p))
                    .collect();
                if tilted.iter().sum::<f64>() <= 0.0 {
                    return Err(Error::invalid("p", "no child can survive under this law"));
                }
                let tilted = renormalize(tilted);
                let (mut surviving, mut doomed) = (0u64, 0u64);
                for _ in 0..a {
                    let y = table_draw(&tilted, rng);
                    let s = binomial_at_least_one(y, p, rng)?;
                    surviving += s;
                    doomed += y - s;
                }
                Ok((surviving, doomed))
            }
            OffspringKind::SizeBiased { .. } => Err(Error::invalid(
                "law",
                "survivor split is not defined for size-biased laws",
            )),
        }
    }

    /// Total children of `b` parents conditioned on none of the children
    /// having surviving descendants, i.e. offspring drawn from
    /// `q(y) (1 - p)^y / f(1 - p)`.
    pub fn sample_doomed_children<R: Rng + ?Sized>(
        &self,
        b: u64,
        p: f64,
        rng: &mut R,
    ) -> Result<u64> {
        if b == 0 || p >= 1.0 {
            return Ok(0);
        }
        match &self.kind {
            OffspringKind::Geometric { s } => {
                negative_binomial(b, 1.0 - (1.0 - s) * (1.0 - p), rng)
            }
            OffspringKind::Poisson { lambda } => poisson_draw(b as f64 * lambda * (1.0 - p), rng),
            OffspringKind::PointMass { k } => {
                if *k > 0 && p > 0.0 {
                    Err(Error::invalid(
                        "p",
                        "a point mass parent cannot have only doomed children",
                    ))
                } else {
                    b.checked_mul(*k)
                        .ok_or(Error::PopulationOverflow { generation: 0 })
                }
            }
            OffspringKind::FiniteTable { weights } => {
                let tilted: Vec<f64> = weights
                    .iter()
                    .enumerate()
                    .map(|(y, q)| q * (1.0 - p).powi(y as i32))
                    .collect();
                let law = OffspringLaw::from_kind(OffspringKind::FiniteTable {
                    weights: renormalize(tilted),
                });
                law.sample_total(b, rng)
            }
            OffspringKind::SizeBiased { .. } => Err(Error::invalid(
                "law",
                "doomed split is not defined for size-biased laws",
            )),
        }
    }
}

/// Binomial(k, p) conditioned on being at least one.
fn binomial_at_least_one<R: Rng + ?Sized>(k: u64, p: f64, rng: &mut R) -> Result<u64> {
    if k == 0 {
        return Err(Error::invalid(
            "k",
            "cannot condition an empty binomial on a success",
        ));
    }
    if p >= 1.0 {
        return Ok(k);
    }
    let accept = none_survive_complement(k, p);
    if accept > 0.25 {
        let law = Binomial::new(k, p).map_err(|e| Error::invalid("p", e.to_string()))?;
        loop {
            let s = law.sample(rng);
            if s > 0 {
                return Ok(s);
            }
        }
    }
    // inversion from j = 1 with P(S = j) = C(k,j) p^j (1-p)^(k-j) / accept
    let u = rng.random::<f64>() * accept;
    let ratio = p / (1.0 - p);
    let mut term = k as f64 * p * (1.0 - p).powf(k as f64 - 1.0);
    let mut acc = 0.0;
    for j in 1..=k {
        acc += term;
        if u < acc {
            return Ok(j);
        }
        term *= ratio * (k - j) as f64 / (j + 1) as f64;
    }
    Ok(1)
}

/// Poisson(mu) conditioned on being at least one.
fn zero_truncated_poisson<R: Rng + ?Sized>(mu: f64, rng: &mut R) -> Result<u64> {
    if mu > 1.0 {
        loop {
            let s = poisson_draw(mu, rng)?;
            if s > 0 {
                return Ok(s);
            }
        }
    }
    let norm = -(-mu).exp_m1();
    let u = rng.random::<f64>() * norm;
    let mut term = mu * (-mu).exp();
    let mut acc = 0.0;
    let mut j = 1u64;
    loop {
        acc += term;
        if u < acc || term < 1e-300 {
            return Ok(j);
        }
        j += 1;
        term *= mu / j as f64;
    }
}

fn renormalize(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    while w.len() > 1 && w.last() == Some(&0.0) {
        w.pop();
    }
    w
}

/// `1 - (1 - y)^k`.
fn none_survive_complement(k: u64, y: f64) -> f64 {
    if k == 0 || y == 0.0 {
        0.0
    } else if y >= 1.0 {
        1.0
    } else {
        -(k as f64 * (-y).ln_1p()).exp_m1()
    }
}

impl OffspringKind {
    /// `E[Y^j]`, from factorial moments for the parametric families.
    fn raw_moment(&self, j: u32) -> f64 {
        match self {
            OffspringKind::Geometric { s } => {
                let m = (1.0 - s) / s;
                // E[(Y)_k] = k! m^k
                from_factorial_moments(j, |k| factorial(k) * m.powi(k as i32))
            }
            OffspringKind::Poisson { lambda } => {
                from_factorial_moments(j, |k| lambda.powi(k as i32))
            }
            OffspringKind::PointMass { k } => (*k as f64).powi(j as i32),
            OffspringKind::FiniteTable { weights } => weights
                .iter()
                .enumerate()
                .map(|(y, q)| (y as f64).powi(j as i32) * q)
                .sum(),
            OffspringKind::SizeBiased { base } => base.raw_moment(j + 1) / base.raw_moment(1),
        }
    }

    fn pmf(&self, y: u64) -> f64 {
        match self {
            OffspringKind::Geometric { s } => s * (1.0 - s).powf(y as f64),
            OffspringKind::Poisson { lambda } => {
                if y == 0 {
                    (-lambda).exp()
                } else {
                    (-lambda + y as f64 * lambda.ln() - libm::lgamma(y as f64 + 1.0)).exp()
                }
            }
            OffspringKind::PointMass { k } => {
                if y == *k {
                    1.0
                } else {
                    0.0
                }
            }
            OffspringKind::FiniteTable { weights } => {
                weights.get(y as usize).copied().unwrap_or(0.0)
            }
            OffspringKind::SizeBiased { base } => y as f64 * base.pmf(y) / base.raw_moment(1),
        }
    }

    fn pgf(&self, x: f64) -> f64 {
        match self {
            OffspringKind::Geometric { s } => s / (1.0 - (1.0 - s) * x),
            OffspringKind::Poisson { lambda } => (lambda * (x - 1.0)).exp(),
            OffspringKind::PointMass { k } => x.powf(*k as f64),
            OffspringKind::FiniteTable { weights } => {
                weights.iter().rev().fold(0.0, |acc, w| acc * x + w)
            }
            OffspringKind::SizeBiased { base } => match base.as_ref() {
                // x f'(x) / m
                OffspringKind::Geometric { s } => {
                    let q = 1.0 - s;
                    x * s * s / ((1.0 - q * x) * (1.0 - q * x))
                }
                OffspringKind::Poisson { lambda } => x * (lambda * (x - 1.0)).exp(),
                other => unreachable!("size-biased {other:?}"),
            },
        }
    }
}

fn factorial(k: u32) -> f64 {
    (1..=k).map(f64::from).product()
}

/// Raw moment of order `j` from factorial moments via Stirling numbers of
/// the second kind.
fn from_factorial_moments<F: Fn(u32) -> f64>(j: u32, factorial_moment: F) -> f64 {
    (0..=j).map(|k| stirling2(j, k) * factorial_moment(k)).sum()
}

fn stirling2(n: u32, k: u32) -> f64 {
    let mut row = vec![1.0f64];
    for i in 1..=n {
        let mut next = vec![0.0; i as usize + 1];
        for (kk, slot) in next.iter_mut().enumerate().skip(1) {
            let same = if kk < row.len() {
                kk as f64 * row[kk]
            } else {
                0.0
            };
            *slot = same + row[kk - 1];
        }
        row = next;
    }
    row.get(k as usize).copied().unwrap_or(0.0)
}

fn geometric_draw<R: Rng + ?Sized>(s: f64, rng: &mut R) -> u64 {
    // floor(log U / log(1 - s)) with U in (0, 1]
    let u = 1.0 - rng.random::<f64>();
    let v = (u.ln() / (-s).ln_1p()).floor();
    if v >= POPULATION_LIMIT as f64 {
        POPULATION_LIMIT
    } else {
        v as u64
    }
}

fn poisson_draw<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> Result<u64> {
    if lambda <= 0.0 {
        return Ok(0);
    }
    if lambda >= POPULATION_LIMIT as f64 / 2.0 {
        return Err(Error::PopulationOverflow { generation: 0 });
    }
    let draw: f64 = Poisson::new(lambda)
        .expect("rate checked above")
        .sample(rng);
    if draw > POPULATION_LIMIT as f64 {
        return Err(Error::PopulationOverflow { generation: 0 });
    }
    Ok(draw as u64)
}

/// Sum of `z` geometric(s) variables: a Gamma-mixed Poisson for large `z`.
fn negative_binomial<R: Rng + ?Sized>(z: u64, s: f64, rng: &mut R) -> Result<u64> {
    if s >= 1.0 || z == 0 {
        return Ok(0);
    }
    if z <= COMPOUND_THRESHOLD {
        let mut t = 0u64;
        for _ in 0..z {
            t = t.saturating_add(geometric_draw(s, rng));
        }
        return Ok(t);
    }
    let scale = (1.0 - s) / s;
    let rate = Gamma::new(z as f64, scale)
        .map_err(|e| Error::invalid("s", e.to_string()))?
        .sample(rng);
    poisson_draw(rate, rng)
}

fn table_draw<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> u64 {
    let u = rng.random::<f64>();
    let mut acc = 0.0;
    for (y, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return y as u64;
        }
    }
    // rounding leaves u above the last partial sum: take the last atom with mass
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0) as u64
}

/// Total of `z` table draws via sequential binomial splitting of the counts.
fn multinomial_total<R: Rng + ?Sized>(weights: &[f64], z: u64, rng: &mut R) -> Result<u64> {
    let mut remaining = z;
    let mut rest = 1.0;
    let mut total: u64 = 0;
    for (y, &w) in weights.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let count = if rest <= w || y == weights.len() - 1 {
            remaining
        } else {
            let p = (w / rest).clamp(0.0, 1.0);
            Binomial::new(remaining, p)
                .expect("probability clamped")
                .sample(rng)
        };
        remaining -= count;
        rest -= w;
        total = (y as u64)
            .checked_mul(count)
            .and_then(|c| total.checked_add(c))
            .ok_or(Error::PopulationOverflow { generation: 0 })?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parallel::{MonteCarlo, Tag};
    use proptest::prelude::*;

    fn geo(s: f64) -> OffspringLaw {
        OffspringLaw::geometric(s).unwrap()
    }

    /// Direct numeric sum `sum_{y < cutoff} f(y) q(y)`, independent of the
    /// closed forms.
    fn brute_sum(law: &OffspringLaw, cutoff: u64, f: impl Fn(f64) -> f64) -> f64 {
        (0..cutoff).map(|y| f(y as f64) * law.pmf(y)).sum()
    }

    #[test]
    fn means() {
        assert_eq!(geo(0.5).mean(), 1.0);
        assert_eq!(OffspringLaw::point_mass(2).mean(), 2.0);
        assert!((OffspringLaw::poisson(0.7).unwrap().mean() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn eta_examples() {
        assert_eq!(OffspringLaw::point_mass(1).eta().unwrap(), 0.0);
        assert!((OffspringLaw::poisson(2.0).unwrap().eta().unwrap() - 1.0).abs() < 1e-12);
        // numeric sum over y <= 200 against the closed form
        let g = geo(0.5);
        let m = brute_sum(&g, 201, |y| y);
        let fact2 = brute_sum(&g, 201, |y| y * (y - 1.0));
        assert!((fact2 / (m * m) - 2.0).abs() < 1e-12);
        assert!((g.eta().unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(
            OffspringLaw::point_mass(0).eta(),
            Err(Error::DegenerateMean)
        ));
    }

    #[test]
    fn zeta_examples() {
        assert_eq!(OffspringLaw::point_mass(1).zeta(2).unwrap(), 0.0);
        assert_eq!(OffspringLaw::point_mass(1).zeta(1).unwrap(), 1.0);
        let g = geo(0.5);
        let numeric = brute_sum(&g, 400, |y| y * y);
        assert!((numeric - 3.0).abs() < 1e-12);
        assert!((g.zeta(1).unwrap() - 3.0).abs() < 1e-12);
        assert!(g.zeta(0).is_err());
    }

    #[test]
    fn zeta_tail_matches_numeric_sum_for_every_family() {
        let laws = [
            geo(0.3),
            OffspringLaw::poisson(2.5).unwrap(),
            geo(0.4).size_bias().unwrap(),
            OffspringLaw::poisson(1.5).unwrap().size_bias().unwrap(),
        ];
        for law in &laws {
            let m = law.mean();
            for a in 1..6u64 {
                let direct: f64 = (a..600)
                    .map(|y| (y as f64).powi(2) * law.pmf(y))
                    .sum::<f64>()
                    / (m * m);
                assert!(
                    (law.zeta(a).unwrap() - direct).abs() < 1e-10,
                    "{law:?} a={a}"
                );
            }
        }
    }

    #[test]
    fn cached_moments_match_numeric_sums() {
        let laws = [
            geo(0.2),
            OffspringLaw::poisson(3.0).unwrap(),
            OffspringLaw::finite_table(vec![0.2, 0.3, 0.5]).unwrap(),
            geo(0.5).size_bias().unwrap(),
            OffspringLaw::poisson(0.8).unwrap().size_bias().unwrap(),
        ];
        for law in &laws {
            let m = brute_sum(law, 800, |y| y);
            let f2 = brute_sum(law, 800, |y| y * (y - 1.0));
            assert!((law.mean() - m).abs() < 1e-12, "{law:?}");
            assert!((law.eta().unwrap() - f2 / (m * m)).abs() < 1e-10, "{law:?}");
            assert!(law.eta().unwrap() >= 0.0);
        }
    }

    #[test]
    fn size_bias_examples() {
        assert_eq!(
            OffspringLaw::point_mass(2).size_bias().unwrap(),
            OffspringLaw::point_mass(2)
        );
        let sb = geo(0.5).size_bias().unwrap();
        assert!((sb.mean() - 3.0).abs() < 1e-12);
        assert_eq!(sb.pmf(0), 0.0);
        let t = OffspringLaw::finite_table(vec![0.5, 0.0, 0.5])
            .unwrap()
            .size_bias()
            .unwrap();
        assert_eq!(
            t.kind(),
            &OffspringKind::FiniteTable {
                weights: vec![0.0, 0.0, 1.0]
            }
        );
        assert!(OffspringLaw::point_mass(0).size_bias().is_err());
    }

    #[test]
    fn size_bias_of_size_bias_is_a_table_with_the_right_mean() {
        let sb = geo(0.5).size_bias().unwrap();
        let sb2 = sb.size_bias().unwrap();
        // mean of the twice size-biased law is E[Y^3] / E[Y^2] of the base
        let base = geo(0.5);
        let e2 = brute_sum(&base, 600, |y| y * y);
        let e3 = brute_sum(&base, 600, |y| y * y * y);
        assert!((sb2.mean() - e3 / e2).abs() < 1e-10);
        assert!(sb2.truncation_k().is_some());
    }

    #[test]
    fn survival_map_is_one_minus_pgf() {
        let laws = [
            geo(0.35),
            OffspringLaw::poisson(1.3).unwrap(),
            OffspringLaw::point_mass(3),
            OffspringLaw::finite_table(vec![0.3, 0.2, 0.5]).unwrap(),
            geo(0.35).size_bias().unwrap(),
        ];
        for law in &laws {
            for &y in &[0.0f64, 1e-3, 0.3, 0.9, 1.0] {
                let direct = 1.0 - brute_sum(law, 600, |k| (1.0 - y).powf(k));
                assert!(
                    (law.survival_map(y) - direct).abs() < 1e-12,
                    "{law:?} y={y}"
                );
            }
        }
        assert!(
            (OffspringLaw::finite_table(vec![0.3, 0.7])
                .unwrap()
                .survival_map(1.0)
                - 0.7)
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn generation_total_edge_cases() {
        let mut rng = MonteCarlo::new(1).stream(Tag::new("edge"), 0);
        assert_eq!(geo(0.5).sample_total(0, &mut rng).unwrap(), 0);
        assert_eq!(
            OffspringLaw::point_mass(3)
                .sample_total(4, &mut rng)
                .unwrap(),
            12
        );
        let r = OffspringLaw::point_mass(1 << 40).sample_total(1 << 30, &mut rng);
        assert!(matches!(r, Err(Error::PopulationOverflow { .. })));
    }

    #[test]
    fn geometric_total_mean_clt() {
        let mut rng = MonteCarlo::new(2).stream(Tag::new("clt"), 0);
        let g = geo(0.5);
        let n = 1_000_000;
        let mut acc = crate::stats::MeanAccumulator::default();
        for _ in 0..n {
            acc.push(g.sample_total(10, &mut rng).unwrap() as f64);
        }
        let e = acc.estimate();
        assert!(e.within(10.0, 3.0), "{e:?}");
    }

    #[test]
    fn compound_draws_match_individual_draws_in_mean() {
        let mut rng = MonteCarlo::new(3).stream(Tag::new("compound"), 0);
        let laws = [
            geo(0.3),
            OffspringLaw::poisson(1.7).unwrap(),
            OffspringLaw::finite_table(vec![0.1, 0.4, 0.2, 0.3]).unwrap(),
            geo(0.6).size_bias().unwrap(),
        ];
        for law in &laws {
            let z = 40;
            let mut acc = crate::stats::MeanAccumulator::default();
            for _ in 0..100_000 {
                acc.push(law.sample_total(z, &mut rng).unwrap() as f64);
            }
            assert!(
                acc.estimate().within(z as f64 * law.mean(), 3.5),
                "{law:?} {:?}",
                acc.estimate()
            );
        }
    }

    #[test]
    fn serde_uses_kind_tags() {
        let law = geo(0.25);
        let json = serde_json::to_string(&law).unwrap();
        assert_eq!(json, r#"{"kind":"geometric","s":0.25}"#);
        let back: OffspringLaw = serde_json::from_str(&json).unwrap();
        assert_eq!(back, law);
        let bad =
            serde_json::from_str::<OffspringLaw>(r#"{"kind":"finite_table","weights":[0.5,0.4]}"#);
        assert!(bad.is_err());
    }

    proptest! {
        #[test]
        fn size_bias_table_is_normalized(raw in proptest::collection::vec(0.0f64..1.0, 2..12)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 1e-3 && raw[1..].iter().sum::<f64>() > 1e-6);
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let w = renormalize(w);
            let law = OffspringLaw::finite_table(w).unwrap();
            let sb = law.size_bias().unwrap();
            let k = sb.truncation_k().unwrap() as u64;
            let s: f64 = (0..=k).map(|y| sb.pmf(y)).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert_eq!(sb.pmf(0), 0.0);
            prop_assert!((sb.mean() - law.second_moment() / law.mean()).abs() < 1e-12);
        }

        #[test]
        fn zeta_is_nonincreasing(s in 0.05f64..0.95, lambda in 0.1f64..6.0) {
            for law in [geo(s), OffspringLaw::poisson(lambda).unwrap()] {
                let mut prev = f64::INFINITY;
                for a in 1..8 {
                    let z = law.zeta(a).unwrap();
                    prop_assert!(z <= prev + 1e-15);
                    prev = z;
                }
            }
        }
    }

    #[test]
    fn totals_are_additive_in_distribution() {
        for (s, z1, z2, seed) in [
            (0.51, 21, 23, 902),
            (0.2, 1, 29, 1),
            (0.35, 7, 3, 2),
            (0.8, 12, 12, 3),
            (0.65, 2, 1, 4),
        ] {
            let law = geo(s);
            let mc = MonteCarlo::new(seed);
            let mut a = mc.stream(Tag::new("add-a"), 0);
            let mut b = mc.stream(Tag::new("add-b"), 0);
            let n = 100_000;
            let joint: Vec<f64> = (0..n)
                .map(|_| law.sample_total(z1 + z2, &mut a).unwrap() as f64)
                .collect();
            let split: Vec<f64> = (0..n)
                .map(|_| {
                    (law.sample_total(z1, &mut b).unwrap() + law.sample_total(z2, &mut b).unwrap())
                        as f64
                })
                .collect();
            let ea = crate::stats::WeightedEcdf::unweighted(&joint).unwrap();
            let eb = crate::stats::WeightedEcdf::unweighted(&split).unwrap();
            let d = ea.ks_distance(&eb);
            // integer-valued samples make the asymptotic critical value conservative
            assert!(
                d < crate::stats::ks_critical_value(n as f64, n as f64, 0.001),
                "s={s} z=({z1},{z2}) KS {d}"
            );
        }
    }
}
