//! Estimators shared by the samplers and experiments: plain and
//! self-normalized means, weighted laws, TV and Kolmogorov-Smirnov distances.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A point estimate with its standard error. `stderr == 0` marks an exact value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0 }
    }

    pub fn new(value: f64, stderr: f64) -> Self {
        Estimate { value, stderr }
    }

    /// Is `|self - target| <= k * stderr`? Exact values must match to 1e-12.
    pub fn within(&self, target: f64, k: f64) -> bool {
        let tol = (k * self.stderr).max(1e-12);
        (self.value - target).abs() <= tol
    }

    /// Standard error of `self - other` for independent estimates.
    pub fn joint_stderr(&self, other: &Estimate) -> f64 {
        self.stderr.hypot(other.stderr)
    }

    pub fn agrees_with(&self, other: &Estimate, k: f64) -> bool {
        let tol = (k * self.joint_stderr(other)).max(1e-12);
        (self.value - other.value).abs() <= tol
    }
}

/// Sample mean with standard error `sd / sqrt(n)`.
pub fn mean_estimate(values: &[f64]) -> Estimate {
    let n = values.len();
    if n == 0 {
        return Estimate::new(f64::NAN, f64::NAN);
    }
    let mut acc = MeanAccumulator::default();
    for &v in values {
        acc.push(v);
    }
    acc.estimate()
}

/// Running mean/variance (Welford). Merging is order-sensitive in the last
/// bits, so merge chunks in a fixed order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MeanAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &MeanAccumulator) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        let mean = self.mean + d * other.n as f64 / n as f64;
        let m2 = self.m2 + other.m2 + d * d * (self.n as f64) * (other.n as f64) / n as f64;
        *self = MeanAccumulator { n, mean, m2 };
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn estimate(&self) -> Estimate {
        if self.n == 0 {
            return Estimate::new(f64::NAN, f64::NAN);
        }
        let var = if self.n > 1 {
            self.m2 / (self.n - 1) as f64
        } else {
            0.0
        };
        Estimate::new(self.mean, (var / self.n as f64).sqrt())
    }
}

/// Bernoulli frequency with binomial standard error.
pub fn proportion(successes: u64, trials: u64) -> Estimate {
    if trials == 0 {
        return Estimate::new(f64::NAN, f64::NAN);
    }
    let p = successes as f64 / trials as f64;
    Estimate::new(p, (p * (1.0 - p) / trials as f64).sqrt())
}

/// Kish effective sample size `(sum w)^2 / sum w^2`.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    let (s, s2) = weights
        .iter()
        .fold((0.0, 0.0), |(s, s2), &w| (s + w, s2 + w * w));
    if s2 == 0.0 {
        0.0
    } else {
        s * s / s2
    }
}

/// Self-normalized weighted mean `sum w f / sum w` with delta-method
/// standard error `sqrt(sum w^2 (f - mean)^2) / sum w`.
// TODO: the delta-method error understates the spread of self-normalized
// estimates with heavy-tailed weights (about 1.3x at n=256); replace with a
// tail-robust estimate.
pub fn weighted_mean(values: &[f64], weights: &[f64]) -> Result<Estimate> {
    debug_assert_eq!(values.len(), weights.len());
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::ZeroEffectiveSample);
    }
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values
        .iter()
        .zip(weights)
        .map(|(v, w)| w * w * (v - mean) * (v - mean))
        .sum::<f64>();
    Ok(Estimate::new(mean, var.sqrt() / total))
}

/// Weighted frequency of `pred` among the samples.
pub fn weighted_fraction<F: Fn(f64) -> bool>(
    values: &[f64],
    weights: &[f64],
    pred: F,
) -> Result<Estimate> {
    let ind: Vec<f64> = values
        .iter()
        .map(|&v| if pred(v) { 1.0 } else { 0.0 })
        .collect();
    weighted_mean(&ind, weights)
}

/// A weighted law on the integers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightedPmf {
    /// value -> (mass, standard error)
    pub atoms: BTreeMap<i64, Estimate>,
}

impl WeightedPmf {
    pub fn from_samples(values: &[i64], weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroEffectiveSample);
        }
        let mut mass: BTreeMap<i64, f64> = BTreeMap::new();
        let mut sq: BTreeMap<i64, f64> = BTreeMap::new();
        let mut all_sq = 0.0;
        for (&v, &w) in values.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            *mass.entry(v).or_default() += w;
            *sq.entry(v).or_default() += w * w;
            all_sq += w * w;
        }
        // sum_i w_i^2 (1{v_i = a} - p)^2 = sq_a (1 - 2p) + p^2 sum w^2
        let atoms = mass
            .into_iter()
            .map(|(v, m)| {
                let p = m / total;
                let s = sq[&v];
                let var = (s * (1.0 - 2.0 * p) + p * p * all_sq).max(0.0);
                (v, Estimate::new(p, var.sqrt() / total))
            })
            .collect();
        Ok(WeightedPmf { atoms })
    }

    pub fn mass(&self, value: i64) -> f64 {
        self.atoms.get(&value).map_or(0.0, |e| e.value)
    }

    pub fn support_min(&self) -> Option<i64> {
        self.atoms.keys().next().copied()
    }
}

/// Total-variation distance between two weighted integer laws, computed on
/// atoms carrying at least `min_mass` in either law plus one lumped atom
/// for everything else. The standard error treats atom errors as independent.
pub fn tv_distance_lumped(a: &WeightedPmf, b: &WeightedPmf, min_mass: f64) -> Estimate {
    let mut keys: Vec<i64> = a
        .atoms
        .iter()
        .chain(b.atoms.iter())
        .filter(|(_, e)| e.value >= min_mass)
        .map(|(k, _)| *k)
        .collect();
    keys.sort_unstable();
    keys.dedup();
    let mut sum = 0.0;
    let mut var = 0.0;
    let (mut rest_a, mut rest_b) = (1.0, 1.0);
    let (mut rest_var_a, mut rest_var_b) = (0.0, 0.0);
    for k in &keys {
        let ea = a.atoms.get(k).copied().unwrap_or(Estimate::exact(0.0));
        let eb = b.atoms.get(k).copied().unwrap_or(Estimate::exact(0.0));
        sum += (ea.value - eb.value).abs();
        var += ea.stderr * ea.stderr + eb.stderr * eb.stderr;
        rest_a -= ea.value;
        rest_b -= eb.value;
        rest_var_a += ea.stderr * ea.stderr;
        rest_var_b += eb.stderr * eb.stderr;
    }
    sum += (rest_a.max(0.0) - rest_b.max(0.0)).abs();
    var += rest_var_a + rest_var_b;
    Estimate::new(0.5 * sum, 0.5 * var.sqrt())
}

/// Weighted empirical CDF evaluated on its own jump points.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedEcdf {
    points: Vec<f64>,
    cdf: Vec<f64>,
}

impl WeightedEcdf {
    pub fn new(values: &[f64], weights: &[f64]) -> Result<Self> {
        let mut pairs: Vec<(f64, f64)> = values
            .iter()
            .copied()
            .zip(weights.iter().copied())
            .filter(|(_, w)| *w > 0.0)
            .collect();
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        if total <= 0.0 {
            return Err(Error::ZeroEffectiveSample);
        }
        pairs.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut points = Vec::with_capacity(pairs.len());
        let mut cdf = Vec::with_capacity(pairs.len());
        let mut acc = 0.0;
        for (v, w) in pairs {
            acc += w;
            if points.last() == Some(&v) {
                *cdf.last_mut().unwrap() = acc / total;
            } else {
                points.push(v);
                cdf.push(acc / total);
            }
        }
        Ok(WeightedEcdf { points, cdf })
    }

    pub fn unweighted(values: &[f64]) -> Result<Self> {
        Self::new(values, &vec![1.0; values.len()])
    }

    /// `F(t) = P(V <= t)`.
    pub fn eval(&self, t: f64) -> f64 {
        let i = self.points.partition_point(|&p| p <= t);
        if i == 0 {
            0.0
        } else {
            self.cdf[i - 1]
        }
    }

    /// `F(t-) = P(V < t)`.
    fn eval_left(&self, t: f64) -> f64 {
        let i = self.points.partition_point(|&p| p < t);
        if i == 0 {
            0.0
        } else {
            self.cdf[i - 1]
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    /// Sup distance to another empirical CDF.
    pub fn ks_distance(&self, other: &WeightedEcdf) -> f64 {
        self.points
            .iter()
            .chain(other.points.iter())
            .map(|&t| (self.eval(t) - other.eval(t)).abs())
            .fold(0.0, f64::max)
    }

    /// Sup distance to a continuous reference CDF, checking both sides of
    /// every jump.
    pub fn ks_to_cdf<F: Fn(f64) -> f64>(&self, reference: F) -> f64 {
        self.points
            .iter()
            .map(|&t| {
                let f = reference(t);
                (self.eval(t) - f).abs().max((self.eval_left(t) - f).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// Two-sample KS critical value for sizes `n`, `m` at level `alpha`
/// (asymptotic Kolmogorov distribution).
pub fn ks_critical_value(n: f64, m: f64, alpha: f64) -> f64 {
    let c = (-0.5 * (alpha / 2.0).ln()).sqrt();
    c * ((n + m) / (n * m)).sqrt()
}

/// Pearson correlation with the large-sample standard error `(1 - rho^2) / sqrt(n - 1)`.
pub fn correlation(x: &[f64], y: &[f64]) -> Estimate {
    let n = x.len().min(y.len());
    if n < 3 {
        return Estimate::new(0.0, f64::INFINITY);
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Estimate::new(0.0, 1.0 / ((n - 1) as f64).sqrt());
    }
    let rho = sxy / (sxx * syy).sqrt();
    Estimate::new(rho, (1.0 - rho * rho) / ((n - 1) as f64).sqrt())
}

/// Ordinary least squares `y = a + b x` with classical standard errors.
pub fn linear_regression(x: &[f64], y: &[f64]) -> (Estimate, Estimate) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - intercept - slope * a;
            r * r
        })
        .sum();
    let s2 = rss / (n - 2.0);
    let se_slope = (s2 / sxx).sqrt();
    let se_intercept = (s2 * (1.0 / n + mx * mx / sxx)).sqrt();
    (
        Estimate::new(intercept, se_intercept),
        Estimate::new(slope, se_slope),
    )
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// CDF of Beta(1/2, 1/2), the arcsine law.
pub fn arcsine_cdf(t: f64) -> f64 {
    if t <= 0.0 {
        0.0
    } else if t >= 1.0 {
        1.0
    } else {
        std::f64::consts::FRAC_2_PI * t.sqrt().asin()
    }
}

/// `log(sum exp(x_i))` without overflow.
pub fn log_sum_exp(values: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.into_iter().collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulator_merge_matches_single_pass() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64).sin() * 3.0 + 1.0).collect();
        let whole = mean_estimate(&xs);
        let mut a = MeanAccumulator::default();
        let mut b = MeanAccumulator::default();
        xs[..37].iter().for_each(|&x| a.push(x));
        xs[37..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        let merged = a.estimate();
        assert!((whole.value - merged.value).abs() < 1e-12);
        assert!((whole.stderr - merged.stderr).abs() < 1e-12);
    }

    #[test]
    fn weighted_mean_with_unit_weights_is_plain_mean() {
        let xs = [1.0, 2.0, 4.0, 7.0];
        let e = weighted_mean(&xs, &[1.0; 4]).unwrap();
        assert!((e.value - 3.5).abs() < 1e-15);
        assert!(weighted_mean(&xs, &[0.0; 4]).is_err());
    }

    #[test]
    fn pmf_masses_sum_to_one() {
        let v = [1, 1, 2, 5, 5, 5];
        let w = [0.5, 1.0, 2.0, 0.1, 0.2, 0.2];
        let pmf = WeightedPmf::from_samples(&v, &w).unwrap();
        let total: f64 = pmf.atoms.values().map(|e| e.value).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((pmf.mass(2) - 2.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn tv_of_identical_laws_is_zero_and_disjoint_is_one() {
        let a = WeightedPmf::from_samples(&[1, 2], &[1.0, 1.0]).unwrap();
        let b = WeightedPmf::from_samples(&[3, 4], &[1.0, 1.0]).unwrap();
        assert_eq!(tv_distance_lumped(&a, &a, 1e-3).value, 0.0);
        assert!((tv_distance_lumped(&a, &b, 1e-3).value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tv_lumps_small_atoms() {
        // atoms 10 and 11 are below the threshold in both laws and are lumped
        let a = WeightedPmf::from_samples(&[1, 10], &[0.9995, 0.0005]).unwrap();
        let b = WeightedPmf::from_samples(&[1, 11], &[0.9995, 0.0005]).unwrap();
        assert!(tv_distance_lumped(&a, &b, 1e-3).value < 1e-12);
    }

    #[test]
    fn ks_distances() {
        let a = WeightedEcdf::unweighted(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = WeightedEcdf::unweighted(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(a.ks_distance(&b), 0.0);
        let c = WeightedEcdf::unweighted(&[10.0]).unwrap();
        assert_eq!(a.ks_distance(&c), 1.0);
        // a point mass at 0.5 against uniform(0,1): both sides of the jump give 1/2
        let d = WeightedEcdf::unweighted(&[0.5]).unwrap();
        assert!((d.ks_to_cdf(|t| t.clamp(0.0, 1.0)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn arcsine_cdf_midpoint() {
        assert!((arcsine_cdf(0.5) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-12);
    }

    #[test]
    fn regression_recovers_line() {
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 2.0 + 0.5 * v + if (*v as i64) % 2 == 0 { 0.1 } else { -0.1 })
            .collect();
        let (a, b) = linear_regression(&x, &y);
        assert!((b.value - 0.5).abs() < 0.01);
        assert!((a.value - 2.0).abs() < 0.1);
    }
}
