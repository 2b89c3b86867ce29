//! Quenched branching dynamics, exact quenched survival, and importance
//! sampling of the process conditioned on survival up to a horizon.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{Environment, EnvironmentSpec, Measure};
use crate::error::{Error, Result};
use crate::offspring::OffspringLaw;
use crate::parallel::{MonteCarlo, StreamRng, Tag, CHUNK_SIZE};
use crate::stats::{effective_sample_size, Estimate, MeanAccumulator};
use crate::walk::{path_stats, WalkPath};

/// Above this size the rejection strategy stops simulating individuals and
/// draws the survival indicator from its exact conditional law.
const EXACT_INDICATOR_THRESHOLD: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationTrace {
    pub env: Environment,
    pub walk: WalkPath,
    /// `Z_0..Z_n`; after a cap is hit only the simulated prefix is present.
    pub sizes: Vec<u64>,
    /// Last generation with a positive population.
    pub survived_to: usize,
    pub capped: bool,
}

/// Runs `Z_k` through the first `horizon` laws of `env` from `Z_0 = z0`.
/// With a cap, simulation stops at the first generation above it and the
/// trace is flagged.
pub fn simulate_quenched<R: Rng + ?Sized>(
    env: &Environment,
    z0: u64,
    horizon: usize,
    rng: &mut R,
    cap: Option<u64>,
) -> Result<GenerationTrace> {
    if horizon == 0 || horizon > env.len() {
        return Err(Error::invalid(
            "horizon",
            format!("need 1 <= horizon <= {}", env.len()),
        ));
    }
    let mut sizes = Vec::with_capacity(horizon + 1);
    sizes.push(z0);
    let mut z = z0;
    let mut capped = false;
    let mut survived_to = 0;
    for (k, law) in env.laws[..horizon].iter().enumerate() {
        z = law
            .sample_total(z, rng)
            .map_err(|e| at_generation(e, k + 1))?;
        sizes.push(z);
        if z > 0 {
            survived_to = k + 1;
        }
        if cap.is_some_and(|c| z > c) {
            capped = true;
            break;
        }
    }
    if z0 == 0 {
        survived_to = 0;
    }
    Ok(GenerationTrace {
        walk: path_stats(0.0, &env.increments[..horizon])?,
        env: env.clone(),
        sizes,
        survived_to,
        capped,
    })
}

fn at_generation(e: Error, generation: usize) -> Error {
    match e {
        Error::PopulationOverflow { .. } => Error::PopulationOverflow { generation },
        other => other,
    }
}

/// `p_k = P(Z_n > 0 | Z_k = 1, Pi)` for `k = 0..=n`, by the backward
/// recursion `p_{k-1} = 1 - f_k(1 - p_k)`.
pub fn survival_profile(laws: &[OffspringLaw]) -> Vec<f64> {
    let n = laws.len();
    let mut p = vec![1.0; n + 1];
    for k in (1..=n).rev() {
        p[k - 1] = laws[k - 1].survival_map(p[k]);
    }
    p
}

/// `P(Z_n > 0 | Pi)` for `Z_0 = 1`.
pub fn quenched_survival(laws: &[OffspringLaw], n: usize) -> Result<f64> {
    if n > laws.len() {
        return Err(Error::invalid(
            "n",
            format!("environment has only {} laws", laws.len()),
        ));
    }
    Ok(survival_profile(&laws[..n])[0])
}

/// Survival through the closed form for linear-fractional laws,
/// `1 / P(Z_n > 0 | Pi) = e^{-S_n} + sum_k (eta_k / 2) e^{-S_{k-1}}`.
pub fn quenched_survival_linear_fractional(laws: &[OffspringLaw]) -> Result<f64> {
    let mut s = 0.0f64;
    let mut acc = 0.0;
    for law in laws {
        if !matches!(
            law.kind(),
            crate::offspring::OffspringKind::Geometric { .. }
        ) {
            return Err(Error::invalid("laws", "closed form needs geometric laws"));
        }
        acc += law.eta()? / 2.0 * (-s).exp();
        s += law.mean().ln();
    }
    Ok(1.0 / ((-s).exp() + acc))
}

/// Draws `Z_0..Z_horizon` from the quenched law conditioned on
/// `Z_n > 0`, `n = laws.len()`, with `Z_0 = 1`. Individuals are split into
/// those with descendants at `n` and those without, which makes the
/// conditioning exact without rejection. `profile` is `survival_profile(laws)`.
pub fn sizes_given_survival<R: Rng + ?Sized>(
    laws: &[OffspringLaw],
    profile: &[f64],
    horizon: usize,
    rng: &mut R,
) -> Result<Vec<u64>> {
    if horizon > laws.len() || profile.len() != laws.len() + 1 {
        return Err(Error::invalid(
            "horizon",
            format!("need horizon <= {} and a matching profile", laws.len()),
        ));
    }
    if profile[0] <= 0.0 {
        return Err(Error::Precondition(
            "survival to the horizon has probability zero".into(),
        ));
    }
    let mut sizes = Vec::with_capacity(horizon + 1);
    sizes.push(1u64);
    let (mut alive, mut doomed) = (1u64, 0u64);
    for k in 1..=horizon {
        let law = &laws[k - 1];
        let (a, t) = law
            .sample_survivor_children(alive, profile[k], rng)
            .map_err(|e| at_generation(e, k))?;
        let b = law
            .sample_doomed_children(doomed, profile[k], rng)
            .map_err(|e| at_generation(e, k))?;
        alive = a;
        doomed = t
            .checked_add(b)
            .ok_or(Error::PopulationOverflow { generation: k })?;
        let total = alive
            .checked_add(doomed)
            .ok_or(Error::PopulationOverflow { generation: k })?;
        sizes.push(total);
    }
    Ok(sizes)
}

/// `P(at least one of z independent particles survives)` for single-particle
/// survival `p`.
fn any_survives(z: u64, p: f64) -> f64 {
    if z == 0 || p <= 0.0 {
        0.0
    } else if p >= 1.0 {
        1.0
    } else {
        -(z as f64 * (-p).ln_1p()).exp_m1()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Simulate to the horizon and weight by `e^{-S_n} 1{Z_n > 0}`.
    TiltedRejection,
    /// Weight by `e^{-S_n} P(Z_n > 0 | Pi)` and draw the population from its
    /// quenched law given survival.
    TiltedRaoBlackwell,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tilted_rejection" => Ok(Strategy::TiltedRejection),
            "tilted_rao_blackwell" => Ok(Strategy::TiltedRaoBlackwell),
            other => Err(Error::invalid(
                "strategy",
                format!("unknown strategy `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    pub n: usize,
    pub r: usize,
    pub samples: usize,
    pub strategy: Strategy,
    /// Length of the environment prefix averaged by the prefix functional.
    pub prefix_len: usize,
    /// The prefix functional clips the mean increment to `[-clip, clip]`.
    pub clip: f64,
    pub enforce_assumptions: bool,
}

impl SamplerOptions {
    /// `r = ceil(sqrt(n))` and a prefix of the same length.
    pub fn new(n: usize, samples: usize, strategy: Strategy) -> Self {
        let r = default_r(n);
        SamplerOptions {
            n,
            r,
            samples,
            strategy,
            prefix_len: r,
            clip: 1.0,
            enforce_assumptions: true,
        }
    }
}

pub fn default_r(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}

/// One weighted draw, as a row.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightedSample {
    pub observables: BTreeMap<&'static str, f64>,
    pub weight: f64,
    pub meta: SampleMeta,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleMeta {
    pub n: usize,
    pub r: usize,
    pub tau_r: usize,
    pub s_r: f64,
    pub s_tau_r: f64,
}

/// Weighted draws realizing the law of the process given `Z_n > 0`, stored
/// column by column.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightedSampleSet {
    pub n: usize,
    pub r: usize,
    pub weight: Vec<f64>,
    /// `Z_{tau_r}`.
    pub z_tau_r: Vec<u64>,
    pub z_r: Vec<u64>,
    /// `Z_r e^{-(S_r - S_{tau_r})}`.
    pub z_r_scaled: Vec<f64>,
    pub tau_r: Vec<usize>,
    pub s_r: Vec<f64>,
    pub s_tau_r: Vec<f64>,
    /// `X_{tau_r}`, NaN when `tau_r = 0`.
    pub x_before_tau: Vec<f64>,
    /// `X_{tau_r + 1}`, NaN when `tau_r = n`.
    pub x_after_tau: Vec<f64>,
    /// Clipped mean of the first `prefix_len` increments.
    pub prefix_functional: Vec<f64>,
}

pub const OBSERVABLES: [&str; 7] = [
    "z_tau_r",
    "z_r",
    "z_r_scaled",
    "tau_r",
    "s_r_minus_s_tau_r",
    "x_before_tau",
    "x_after_tau",
];

impl WeightedSampleSet {
    pub fn len(&self) -> usize {
        self.weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weight.is_empty()
    }

    fn append(&mut self, other: WeightedSampleSet) {
        self.weight.extend(other.weight);
        self.z_tau_r.extend(other.z_tau_r);
        self.z_r.extend(other.z_r);
        self.z_r_scaled.extend(other.z_r_scaled);
        self.tau_r.extend(other.tau_r);
        self.s_r.extend(other.s_r);
        self.s_tau_r.extend(other.s_tau_r);
        self.x_before_tau.extend(other.x_before_tau);
        self.x_after_tau.extend(other.x_after_tau);
        self.prefix_functional.extend(other.prefix_functional);
    }

    /// Column of a named observable (see [`OBSERVABLES`], plus
    /// `prefix_functional`).
    pub fn observable(&self, name: &str) -> Option<Vec<f64>> {
        Some(match name {
            "z_tau_r" => self.z_tau_r.iter().map(|z| *z as f64).collect(),
            "z_r" => self.z_r.iter().map(|z| *z as f64).collect(),
            "z_r_scaled" => self.z_r_scaled.clone(),
            "tau_r" => self.tau_r.iter().map(|t| *t as f64).collect(),
            "s_r_minus_s_tau_r" => self
                .s_r
                .iter()
                .zip(&self.s_tau_r)
                .map(|(a, b)| a - b)
                .collect(),
            "x_before_tau" => self.x_before_tau.clone(),
            "x_after_tau" => self.x_after_tau.clone(),
            "prefix_functional" => self.prefix_functional.clone(),
            _ => return None,
        })
    }

    pub fn get(&self, i: usize) -> WeightedSample {
        let mut observables = BTreeMap::new();
        for name in OBSERVABLES
            .iter()
            .chain(std::iter::once(&"prefix_functional"))
        {
            let v = match *name {
                "z_tau_r" => self.z_tau_r[i] as f64,
                "z_r" => self.z_r[i] as f64,
                "z_r_scaled" => self.z_r_scaled[i],
                "tau_r" => self.tau_r[i] as f64,
                "s_r_minus_s_tau_r" => self.s_r[i] - self.s_tau_r[i],
                "x_before_tau" => self.x_before_tau[i],
                "x_after_tau" => self.x_after_tau[i],
                _ => self.prefix_functional[i],
            };
            observables.insert(*name, v);
        }
        WeightedSample {
            observables,
            weight: self.weight[i],
            meta: SampleMeta {
                n: self.n,
                r: self.r,
                tau_r: self.tau_r[i],
                s_r: self.s_r[i],
                s_tau_r: self.s_tau_r[i],
            },
        }
    }

    pub fn effective_sample_size(&self) -> f64 {
        effective_sample_size(&self.weight)
    }

    /// Self-normalized estimate of `E[f | Z_n > 0]`.
    pub fn weighted_mean(&self, values: &[f64]) -> Result<Estimate> {
        crate::stats::weighted_mean(values, &self.weight)
    }

    /// Unnormalized estimate of `P(Z_n > 0) / gamma^n`, the mean weight.
    pub fn mean_weight(&self) -> Estimate {
        crate::stats::mean_estimate(&self.weight)
    }

    /// CSV with the weight, every observable and the meta fields.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["weight"];
        header.extend(OBSERVABLES);
        header.extend(["prefix_functional", "n", "r", "s_r", "s_tau_r"]);
        w.write_record(&header)?;
        for i in 0..self.len() {
            let s = self.get(i);
            let mut row = vec![s.weight.to_string()];
            for name in OBSERVABLES {
                row.push(s.observables[name].to_string());
            }
            row.push(s.observables["prefix_functional"].to_string());
            row.extend([
                self.n.to_string(),
                self.r.to_string(),
                s.meta.s_r.to_string(),
                s.meta.s_tau_r.to_string(),
            ]);
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub spec: EnvironmentSpec,
    pub n: usize,
    pub r: usize,
    pub samples: usize,
    pub strategy: Strategy,
    pub seed: u64,
}

impl SampleManifest {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Draws `opts.samples` weighted samples: environments and populations come
/// from the tilted measure, weights undo the tilt and restrict to survival.
pub fn conditioned_survival_sampler(
    spec: &EnvironmentSpec,
    opts: &SamplerOptions,
    mc: &MonteCarlo,
) -> Result<WeightedSampleSet> {
    let (n, r) = (opts.n, opts.r);
    if r == 0 || r > n {
        return Err(Error::invalid(
            "r",
            format!("need 1 <= r <= n, got r={r}, n={n}"),
        ));
    }
    if opts.prefix_len == 0 || opts.prefix_len > n {
        return Err(Error::invalid(
            "prefix_len",
            "prefix must have between 1 and n steps",
        ));
    }
    if opts.enforce_assumptions {
        spec.require_intermediate("conditioned survival sampling")?;
    }
    let tag = Tag::new("conditioned-survival")
        .with(n as u64)
        .with(r as u64)
        .with(opts.strategy as u64);
    let set = mc.fold_chunks(
        tag,
        opts.samples,
        CHUNK_SIZE,
        WeightedSampleSet {
            n,
            r,
            ..Default::default()
        },
        |rng, range| {
            let mut out = WeightedSampleSet::default();
            for _ in range {
                one_sample(spec, opts, rng, &mut out)?;
            }
            Ok(out)
        },
        |acc, chunk| acc.append(chunk),
    )?;
    if set.weight.iter().sum::<f64>() <= 0.0 {
        return Err(Error::ZeroEffectiveSample);
    }
    Ok(set)
}

fn one_sample(
    spec: &EnvironmentSpec,
    opts: &SamplerOptions,
    rng: &mut StreamRng,
    out: &mut WeightedSampleSet,
) -> Result<()> {
    let (n, r) = (opts.n, opts.r);
    let env = spec.sample_environment(Measure::Tilted, n, rng)?;
    let sums = env.partial_sums();
    let (sizes, survival) = match opts.strategy {
        Strategy::TiltedRaoBlackwell => {
            let profile = survival_profile(&env.laws);
            let sizes = if profile[0] > 0.0 {
                sizes_given_survival(&env.laws, &profile, r, rng)?
            } else {
                vec![0; r + 1]
            };
            (sizes, profile[0])
        }
        Strategy::TiltedRejection => {
            let mut sizes = Vec::with_capacity(r + 1);
            sizes.push(1u64);
            let mut z = 1u64;
            for k in 1..=r {
                z = env.laws[k - 1]
                    .sample_total(z, rng)
                    .map_err(|e| at_generation(e, k))?;
                sizes.push(z);
            }
            let mut alive = z;
            let mut indicator = None;
            for k in r + 1..=n {
                if alive == 0 {
                    break;
                }
                if alive > EXACT_INDICATOR_THRESHOLD {
                    let p = survival_profile(&env.laws[k - 1..])[0];
                    indicator = Some(rng.random::<f64>() < any_survives(alive, p));
                    break;
                }
                alive = env.laws[k - 1]
                    .sample_total(alive, rng)
                    .map_err(|e| at_generation(e, k))?;
            }
            (sizes, f64::from(u8::from(indicator.unwrap_or(alive > 0))))
        }
    };
    let z = sizes[r];
    let weight = (-sums[n]).exp() * survival;
    let mut tau = 0;
    for k in 1..=r {
        if sums[k] < sums[tau] {
            tau = k;
        }
    }
    out.weight.push(weight);
    out.z_tau_r.push(sizes[tau]);
    out.z_r.push(z);
    out.z_r_scaled.push(z as f64 * (sums[tau] - sums[r]).exp());
    out.tau_r.push(tau);
    out.s_r.push(sums[r]);
    out.s_tau_r.push(sums[tau]);
    out.x_before_tau.push(if tau > 0 {
        env.increments[tau - 1]
    } else {
        f64::NAN
    });
    out.x_after_tau.push(if tau < n {
        env.increments[tau]
    } else {
        f64::NAN
    });
    let prefix = &env.increments[..opts.prefix_len];
    let mean = prefix.iter().sum::<f64>() / prefix.len() as f64;
    out.prefix_functional
        .push(mean.clamp(-opts.clip, opts.clip));
    Ok(())
}

/// Estimates `E[Z_n] / gamma^n` by averaging `Z_n e^{-S_n}` over tilted
/// environments (or `Z_n / gamma^n` over annealed ones).
pub fn annealed_mean_ratio(
    spec: &EnvironmentSpec,
    n: usize,
    samples: usize,
    measure: Measure,
    mc: &MonteCarlo,
) -> Result<Estimate> {
    let gamma_n = spec.gamma().powi(n as i32);
    let acc = mc.fold_chunks(
        Tag::new("annealed-mean")
            .with(n as u64)
            .with(measure as u64),
        samples,
        CHUNK_SIZE,
        MeanAccumulator::default(),
        |rng, range| {
            let mut acc = MeanAccumulator::default();
            for _ in range {
                let env = spec.sample_environment(measure, n, rng)?;
                let trace = simulate_quenched(&env, 1, n, rng, None)?;
                let zn = *trace.sizes.last().unwrap() as f64;
                acc.push(match measure {
                    Measure::Tilted => zn * (-trace.walk.end()).exp(),
                    Measure::Annealed => zn / gamma_n,
                });
            }
            Ok(acc)
        },
        |acc, c| acc.merge(&c),
    )?;
    Ok(acc.estimate())
}

/// Monte Carlo `E[Z_n | Pi]` over `replicas` runs in the fixed environment.
pub fn quenched_mean(
    env: &Environment,
    z0: u64,
    replicas: usize,
    mc: &MonteCarlo,
    tag: Tag,
) -> Result<Estimate> {
    let acc = mc.fold_chunks(
        tag,
        replicas,
        CHUNK_SIZE,
        MeanAccumulator::default(),
        |rng, range| {
            let mut acc = MeanAccumulator::default();
            for _ in range {
                let mut z = z0;
                for (k, law) in env.laws.iter().enumerate() {
                    if z == 0 {
                        break;
                    }
                    z = law
                        .sample_total(z, rng)
                        .map_err(|e| at_generation(e, k + 1))?;
                }
                acc.push(z as f64);
            }
            Ok(acc)
        },
        |acc, c| acc.merge(&c),
    )?;
    Ok(acc.estimate())
}

/// Sanity bound `P(Z_n > 0 | Pi) <= exp(min_k S_k)`.
pub fn survival_bound(env: &Environment) -> f64 {
    env.partial_sums()
        .into_iter()
        .fold(f64::INFINITY, f64::min)
        .exp()
}
