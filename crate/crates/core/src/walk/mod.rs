//! The associated random walk `S_k = X_1 + ... + X_k`: extremal statistics,
//! conditioned path samplers and renewal functions.

mod renewal;

pub use renewal::{
    check_harmonicity, estimate_renewal, uniform_grid, Probe, RenewalOptions, RenewalTable, Side,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{EnvironmentSpec, Measure};
use crate::error::{Error, Result};
use crate::parallel::{MonteCarlo, StreamRng, Tag, CHUNK_SIZE};
use crate::stats::{Estimate, WeightedEcdf};

/// A walk with its partial sums and extremal statistics. `running_min` and
/// `running_max` are taken over `S_1..S_n` and exclude `S_0`.
#[derive(Clone, Debug, PartialEq)]
pub struct WalkPath {
    pub start: f64,
    pub increments: Vec<f64>,
    pub sums: Vec<f64>,
    /// First index in `0..=n` where the minimum of `S_0..S_n` is attained.
    pub min_index: usize,
    pub running_min: f64,
    pub running_max: f64,
}

impl WalkPath {
    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    pub fn end(&self) -> f64 {
        *self.sums.last().expect("sums has n + 1 entries")
    }

    /// The path driven by the increments in reverse order, from the same start.
    pub fn reversed(&self) -> WalkPath {
        let inc: Vec<f64> = self.increments.iter().rev().copied().collect();
        path_stats(self.start, &inc).expect("nonempty by construction")
    }
}

pub fn path_stats(start: f64, increments: &[f64]) -> Result<WalkPath> {
    if increments.is_empty() {
        return Err(Error::EmptyIncrements);
    }
    let mut sums = Vec::with_capacity(increments.len() + 1);
    sums.push(start);
    let mut acc = start;
    let mut min_index = 0;
    let mut min_value = start;
    let mut running_min = f64::INFINITY;
    let mut running_max = f64::NEG_INFINITY;
    for (k, x) in increments.iter().enumerate() {
        acc += x;
        sums.push(acc);
        running_min = running_min.min(acc);
        running_max = running_max.max(acc);
        if acc < min_value {
            min_value = acc;
            min_index = k + 1;
        }
    }
    Ok(WalkPath {
        start,
        increments: increments.to_vec(),
        sums,
        min_index,
        running_min,
        running_max,
    })
}

/// Conditioning events for walks started at 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// `L_n >= 0`.
    StayNonneg,
    /// `M_n < 0`.
    StayNeg,
    /// `tau_n = n`, realized as the time reversal of a `StayNeg` path.
    MinAtEnd,
}

/// Draws increments under the tilted law into `buf` until `keep` fails on a
/// partial sum or `n` steps are done. Returns whether all `n` sums passed.
fn run_while<R: Rng + ?Sized>(
    spec: &EnvironmentSpec,
    n: usize,
    rng: &mut R,
    buf: &mut Vec<f64>,
    keep: impl Fn(f64) -> bool,
) -> bool {
    buf.clear();
    let mut s = 0.0;
    for _ in 0..n {
        let x = spec.sample_increment(Measure::Tilted, rng);
        buf.push(x);
        s += x;
        if !keep(s) {
            return false;
        }
    }
    true
}

fn keep_fn(kind: Conditioning) -> fn(f64) -> bool {
    match kind {
        Conditioning::StayNonneg => |s| s >= 0.0,
        Conditioning::StayNeg | Conditioning::MinAtEnd => |s| s < 0.0,
    }
}

/// Rejection sampler for walks of length `n` under the tilted law
/// conditioned on `kind`. Each attempt stops at the first violation.
#[derive(Clone, Debug)]
pub struct ConditionedSampler<'a> {
    pub spec: &'a EnvironmentSpec,
    pub kind: Conditioning,
    pub n: usize,
    /// Attempts allowed per accepted path.
    pub max_attempts: u64,
}

/// A conditioned path with the number of attempts used to get it.
#[derive(Clone, Debug)]
pub struct Accepted {
    pub path: WalkPath,
    pub attempts: u64,
}

impl<'a> ConditionedSampler<'a> {
    pub fn new(spec: &'a EnvironmentSpec, kind: Conditioning, n: usize) -> Self {
        ConditionedSampler {
            spec,
            kind,
            n,
            max_attempts: 100_000_000,
        }
    }

    pub fn with_max_attempts(mut self, max_attempts: u64) -> Self {
        self.max_attempts = max_attempts.max(1);
        self
    }

    /// Increments of one accepted path, in the order they were drawn.
    fn accept_raw<R: Rng + ?Sized>(&self, rng: &mut R, buf: &mut Vec<f64>) -> Result<u64> {
        if self.n == 0 {
            return Err(Error::EmptyIncrements);
        }
        let keep = keep_fn(self.kind);
        for attempt in 1..=self.max_attempts {
            if run_while(self.spec, self.n, rng, buf, keep) {
                if self.kind == Conditioning::MinAtEnd {
                    buf.reverse();
                }
                return Ok(attempt);
            }
        }
        Err(Error::AttemptsExhausted {
            attempts: self.max_attempts,
            accepted: 0,
            rate: 0.0,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Accepted> {
        let mut buf = Vec::with_capacity(self.n);
        let attempts = self.accept_raw(rng, &mut buf)?;
        Ok(Accepted {
            path: path_stats(0.0, &buf)?,
            attempts,
        })
    }

    /// `count` accepted paths in sample order, plus the acceptance rate.
    pub fn sample_many(
        &self,
        mc: &MonteCarlo,
        tag: Tag,
        count: usize,
    ) -> Result<(Vec<WalkPath>, Estimate)> {
        let chunks = mc.map_chunks(tag, count, CHUNK_SIZE, |rng, range| {
            let mut paths = Vec::with_capacity(range.len());
            let mut attempts = 0u64;
            for _ in range {
                let a = self
                    .sample(rng)
                    .map_err(|e| with_rate(e, paths.len() as u64, attempts))?;
                attempts += a.attempts;
                paths.push(a.path);
            }
            Ok((paths, attempts))
        })?;
        let mut all = Vec::with_capacity(count);
        let mut attempts = 0;
        for (p, a) in chunks {
            all.extend(p);
            attempts += a;
        }
        Ok((all, acceptance_estimate(count as u64, attempts)))
    }
}

fn with_rate(e: Error, accepted: u64, previous: u64) -> Error {
    match e {
        Error::AttemptsExhausted { attempts, .. } => {
            let total = attempts + previous;
            Error::AttemptsExhausted {
                attempts: total,
                accepted,
                rate: accepted as f64 / total as f64,
            }
        }
        other => other,
    }
}

fn acceptance_estimate(accepted: u64, attempts: u64) -> Estimate {
    crate::stats::proportion(accepted, attempts.max(1))
}

/// One conditioned path; see [`ConditionedSampler`].
pub fn sample_conditioned_path<R: Rng + ?Sized>(
    spec: &EnvironmentSpec,
    kind: Conditioning,
    n: usize,
    rng: &mut R,
    max_attempts: u64,
) -> Result<WalkPath> {
    Ok(ConditionedSampler::new(spec, kind, n)
        .with_max_attempts(max_attempts)
        .sample(rng)?
        .path)
}

/// Path drawn without conditioning and weighted by `h(S_n) / h(0)` on the
/// event, with `h = u` for `StayNonneg` and `h = v` for `StayNeg`. This
/// realizes the Doob transform of the killed walk, not the finite-`n`
/// conditioning.
pub fn sample_h_transformed<R: Rng + ?Sized>(
    spec: &EnvironmentSpec,
    kind: Conditioning,
    n: usize,
    table: &RenewalTable,
    rng: &mut R,
) -> Result<(WalkPath, f64)> {
    let expected = match kind {
        Conditioning::StayNonneg => Side::U,
        Conditioning::StayNeg => Side::V,
        Conditioning::MinAtEnd => {
            return Err(Error::invalid(
                "kind",
                "h-transform weighting covers stay_nonneg and stay_neg",
            ))
        }
    };
    if table.side != expected {
        return Err(Error::invalid(
            "table",
            "renewal table is for the other side",
        ));
    }
    let mut buf = Vec::with_capacity(n);
    let survived = run_while(spec, n, rng, &mut buf, keep_fn(kind));
    while buf.len() < n {
        buf.push(spec.sample_increment(Measure::Tilted, rng));
    }
    let path = path_stats(0.0, &buf)?;
    let weight = if survived {
        let h0 = match kind {
            Conditioning::StayNeg => table.v_at_zero.map(|e| e.value).unwrap_or(1.0),
            _ => 1.0,
        };
        table.value_at(path.end())? / h0
    } else {
        0.0
    };
    Ok((path, weight))
}

/// Direct estimates of `P(tau_n = n)` and `P(M_n < 0)` from the same number
/// of unconditioned tilted walks on independent streams.
pub fn duality_probabilities(
    spec: &EnvironmentSpec,
    n: usize,
    samples: usize,
    mc: &MonteCarlo,
) -> Result<(Estimate, Estimate)> {
    if n == 0 {
        return Err(Error::EmptyIncrements);
    }
    let count = |tag: Tag, event: &(dyn Fn(&mut StreamRng) -> bool + Sync)| -> Result<Estimate> {
        let hits = mc.fold_chunks(
            tag,
            samples,
            CHUNK_SIZE,
            0u64,
            |rng, range| Ok(range.filter(|_| event(rng)).count() as u64),
            |acc, c| *acc += c,
        )?;
        Ok(crate::stats::proportion(hits, samples as u64))
    };
    let min_at_end = count(Tag::new("duality-tau").with(n as u64), &|rng| {
        // tau_n = n iff S_n < S_k for every k < n
        let mut s = 0.0;
        let mut min_before = 0.0f64;
        for k in 0..n {
            if k > 0 {
                min_before = min_before.min(s);
            }
            s += spec.sample_increment(Measure::Tilted, rng);
        }
        s < min_before.min(0.0)
    })?;
    let stay_neg = count(Tag::new("duality-max").with(n as u64), &|rng| {
        let mut s = 0.0;
        for _ in 0..n {
            s += spec.sample_increment(Measure::Tilted, rng);
            if s >= 0.0 {
                return false;
            }
        }
        true
    })?;
    Ok((min_at_end, stay_neg))
}

/// Acceptance probability of `kind` at horizon `n` from `trials` attempts.
pub fn acceptance_probability(
    spec: &EnvironmentSpec,
    kind: Conditioning,
    n: usize,
    trials: usize,
    mc: &MonteCarlo,
) -> Result<Estimate> {
    let keep = keep_fn(kind);
    let hits = mc.fold_chunks(
        Tag::new("acceptance").with(n as u64).with(kind as u64),
        trials,
        CHUNK_SIZE,
        0u64,
        |rng, range| {
            let mut buf = Vec::with_capacity(n);
            Ok(range
                .filter(|_| run_while(spec, n, rng, &mut buf, keep))
                .count() as u64)
        },
        |acc, c| *acc += c,
    )?;
    Ok(crate::stats::proportion(hits, trials as u64))
}

/// Empirical law of `tau_n / n` under the tilted measure.
#[derive(Clone, Debug)]
pub struct MinimumPositionLaw {
    pub n: usize,
    pub fractions: Vec<f64>,
}

impl MinimumPositionLaw {
    pub fn ecdf(&self) -> Result<WeightedEcdf> {
        WeightedEcdf::unweighted(&self.fractions)
    }

    pub fn ks_to<F: Fn(f64) -> f64>(&self, reference: F) -> Result<f64> {
        Ok(self.ecdf()?.ks_to_cdf(reference))
    }

    /// Relative frequencies on `bins` equal-width bins of `[0, 1]`, as
    /// `(left edge, right edge, frequency)`.
    pub fn histogram(&self, bins: usize) -> Vec<(f64, f64, f64)> {
        histogram(&self.fractions, 0.0, 1.0, bins)
    }
}

pub(crate) fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64, f64)> {
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for v in values {
        let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len().max(1) as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            (
                lo + i as f64 * width,
                lo + (i + 1) as f64 * width,
                *c as f64 / n,
            )
        })
        .collect()
}

pub fn minimum_position_law(
    spec: &EnvironmentSpec,
    n: usize,
    samples: usize,
    mc: &MonteCarlo,
) -> Result<MinimumPositionLaw> {
    if n == 0 {
        return Err(Error::EmptyIncrements);
    }
    let fractions = mc.collect(
        Tag::new("minimum-position").with(n as u64),
        samples,
        |rng| {
            let mut s = 0.0;
            let mut min = 0.0;
            let mut tau = 0usize;
            for k in 1..=n {
                s += spec.sample_increment(Measure::Tilted, rng);
                if s < min {
                    min = s;
                    tau = k;
                }
            }
            Ok(tau as f64 / n as f64)
        },
    )?;
    Ok(MinimumPositionLaw { n, fractions })
}

/// Rescaled walks `S_k / a_n` conditioned on `M_n < x`.
#[derive(Clone, Debug)]
pub struct MeanderSnapshot {
    pub n: usize,
    pub level: f64,
    pub scale: f64,
    /// Times `n/4, n/2, 3n/4, n`, rounded down and at least 1.
    pub times: Vec<usize>,
    /// One row per accepted path, one column per entry of `times`.
    pub values: Vec<Vec<f64>>,
    pub acceptance: Estimate,
}

impl MeanderSnapshot {
    pub fn endpoints(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|row| *row.last().expect("n is a snapshot time"))
            .collect()
    }
}

pub fn meander_scaling_snapshot(
    spec: &EnvironmentSpec,
    n: usize,
    level: f64,
    samples: usize,
    mc: &MonteCarlo,
    max_attempts: u64,
) -> Result<MeanderSnapshot> {
    if n == 0 {
        return Err(Error::EmptyIncrements);
    }
    if level < 0.0 {
        return Err(Error::invalid("x", "level must be nonnegative"));
    }
    // a_n = sigma sqrt(n) in the finite-variance case
    let scale = spec.increment_sd(Measure::Tilted) * (n as f64).sqrt();
    let times: Vec<usize> = [1, 2, 3, 4].iter().map(|q| (q * n / 4).max(1)).collect();
    let chunks = mc.map_chunks(
        Tag::new("meander").with(n as u64),
        samples,
        CHUNK_SIZE,
        |rng, range| {
            let mut rows = Vec::with_capacity(range.len());
            let mut attempts = 0u64;
            let mut buf = Vec::with_capacity(n);
            for _ in range {
                let mut ok = false;
                for _ in 0..max_attempts {
                    attempts += 1;
                    if run_while(spec, n, rng, &mut buf, |s| s < level) {
                        ok = true;
                        break;
                    }
                }
                if !ok {
                    return Err(Error::AttemptsExhausted {
                        attempts,
                        accepted: rows.len() as u64,
                        rate: rows.len() as f64 / attempts as f64,
                    });
                }
                let mut row = Vec::with_capacity(times.len());
                let mut s = 0.0;
                let mut next = 0;
                for (k, x) in buf.iter().enumerate() {
                    s += x;
                    while next < times.len() && times[next] == k + 1 {
                        row.push(s / scale);
                        next += 1;
                    }
                }
                rows.push(row);
            }
            Ok((rows, attempts))
        },
    )?;
    let mut values = Vec::with_capacity(samples);
    let mut attempts = 0;
    for (rows, a) in chunks {
        values.extend(rows);
        attempts += a;
    }
    Ok(MeanderSnapshot {
        n,
        level,
        scale,
        times,
        values,
        acceptance: acceptance_estimate(samples as u64, attempts),
    })
}

/// `P(min_{1<=i<=r}(S_i - S_r) <= S'_n | tau'_n = n)` for independent
/// walks `S` (unconditioned) and `S'` (minimum at the end). For `r = 0` the
/// minimum over the empty range is taken as 0.
pub fn two_walk_overshoot_probability(
    spec: &EnvironmentSpec,
    n: usize,
    r: usize,
    samples: usize,
    mc: &MonteCarlo,
    max_attempts: u64,
) -> Result<Estimate> {
    if r >= n {
        return Err(Error::invalid("r", format!("need r < n, got r={r}, n={n}")));
    }
    let sampler =
        ConditionedSampler::new(spec, Conditioning::StayNeg, n).with_max_attempts(max_attempts);
    let hits = mc.fold_chunks(
        Tag::new("two-walk").with(n as u64).with(r as u64),
        samples,
        CHUNK_SIZE,
        0u64,
        |rng, range| {
            let mut hits = 0u64;
            let mut buf = Vec::with_capacity(n);
            let mut inc = Vec::with_capacity(r);
            for _ in range {
                // a min-at-end walk ends where the stay-negative walk it reverses ends
                sampler.accept_raw(rng, &mut buf)?;
                let end: f64 = buf.iter().sum();
                inc.clear();
                inc.extend((0..r).map(|_| spec.sample_increment(Measure::Tilted, rng)));
                // min over i of S_i - S_r = -(max suffix sum of the increments after i)
                let mut suffix = 0.0f64;
                let mut min = 0.0f64;
                for x in inc.iter().rev().take(r.saturating_sub(1)) {
                    suffix += x;
                    min = min.min(-suffix);
                }
                if min <= end {
                    hits += 1;
                }
            }
            Ok(hits)
        },
        |acc, h| *acc += h,
    )?;
    Ok(crate::stats::proportion(hits, samples as u64))
}
