use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::{
    ceil_sqrt, fmt_estimate, ExperimentId, ExperimentResult, Report, RunConfig, Thresholds, Verdict,
};
use crate::environment::{EnvironmentSpec, Measure};
use crate::error::{Error, Result};
use crate::oracle::duality_pair;
use crate::parallel::{MonteCarlo, Tag, CHUNK_SIZE};
use crate::stats::{arcsine_cdf, correlation, Estimate, WeightedEcdf};
use crate::walk::{
    check_harmonicity, duality_probabilities, estimate_renewal, minimum_position_law, path_stats,
    sample_h_transformed, two_walk_overshoot_probability, uniform_grid, ConditionedSampler,
    Conditioning, RenewalOptions, RenewalTable, Side,
};

const MAX_ATTEMPTS: u64 = 100_000_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct E3Params {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub r: Option<usize>,
    pub samples: usize,
    /// Draws for the stay-nonnegative and stay-negative reference laws.
    pub reference_samples: usize,
    pub renewal_samples: usize,
}

impl Default for E3Params {
    fn default() -> Self {
        E3Params {
            n: 400,
            m: 0,
            k: 3,
            r: None,
            samples: 100_000,
            reference_samples: 100_000,
            renewal_samples: 100_000,
        }
    }
}

impl E3Params {
    pub fn resolve(cfg: &RunConfig) -> Self {
        let d = Self::default();
        E3Params {
            n: cfg
                .n
                .as_ref()
                .and_then(|v| v.first().copied())
                .unwrap_or(d.n),
            r: cfg.r,
            samples: cfg.samples.unwrap_or(d.samples),
            reference_samples: cfg.samples.unwrap_or(d.reference_samples),
            ..d
        }
    }
}

/// Mean of the offspring means `e^x`, each clipped to `[0, 10]`.
fn block_feature(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut count) = (0.0, 0usize);
    for x in xs {
        sum += x.exp().clamp(0.0, 10.0);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Features of `(Q_{tau+1..tau+k})` and `(Q_tau, .., Q_{tau-k+1})`, with
/// `Q_j = Q_1` for `j <= 0`.
fn blocks(increments: &[f64], tau: usize, k: usize) -> (f64, f64) {
    let forward = block_feature((tau..tau + k).map(|j| increments[j]));
    let backward = block_feature((0..k).map(|d| {
        let j = tau as isize - d as isize; // law index Q_j is increments[j - 1]
        increments[(j.max(1) - 1) as usize]
    }));
    (forward, backward)
}

pub fn run_e3(
    spec: &EnvironmentSpec,
    p: &E3Params,
    th: &Thresholds,
    mc: &MonteCarlo,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let mut report = Report::new(
        ExperimentId::E3,
        spec,
        mc.seed,
        serde_json::to_value(p)?,
        th,
        out,
    )?;
    let r = p.r.unwrap_or_else(|| ceil_sqrt(p.n));
    if p.m >= p.n || r + p.k >= p.n - p.m {
        return Err(Error::invalid("n", "need r + k < n - m"));
    }
    if p.k == 0 {
        report.exact("correlation", 0.0);
        report.require("independence", true, "empty blocks");
        return Ok(report.finish());
    }
    let sampler = ConditionedSampler::new(spec, Conditioning::MinAtEnd, p.n - p.m)
        .with_max_attempts(MAX_ATTEMPTS);
    let rows = mc.fold_chunks(
        Tag::new("e3-min-at-end").with(p.n as u64).with(p.m as u64),
        p.samples,
        CHUNK_SIZE,
        (Vec::with_capacity(p.samples), 0u64),
        |rng, range| {
            let mut feats = Vec::with_capacity(range.len());
            let mut attempts = 0;
            for _ in range {
                let a = sampler.sample(rng)?;
                attempts += a.attempts;
                let head = path_stats(0.0, &a.path.increments[..r])?;
                let (f, b) = blocks(&a.path.increments, head.min_index, p.k);
                feats.push((f, b, head.min_index));
            }
            Ok((feats, attempts))
        },
        |acc, (f, a)| {
            acc.0.extend(f);
            acc.1 += a;
        },
    )?;
    let (feats, attempts) = rows;
    report.stat(
        "acceptance",
        crate::stats::proportion(p.samples as u64, attempts.max(1)),
    );
    let forward: Vec<f64> = feats.iter().map(|f| f.0).collect();
    let backward: Vec<f64> = feats.iter().map(|f| f.1).collect();
    let corr = correlation(&forward, &backward);
    report.stat("correlation", corr);
    report.require(
        "independence",
        corr.value.abs() < th.sigma_k * corr.stderr,
        format!("corr = {} against {} SE", fmt_estimate(&corr), th.sigma_k),
    );
    let within = within_stratum_correlation(&feats, p.k);
    report.stat("correlation_given_tau", within);
    report.require(
        "independence_given_tau",
        within.value.abs() < th.sigma_k * within.stderr,
        format!(
            "pooled over tau_r >= {}: corr = {} against {} SE",
            p.k,
            fmt_estimate(&within),
            th.sigma_k
        ),
    );

    let renewal = RenewalOptions {
        samples: p.renewal_samples,
        ..Default::default()
    };
    let mut ks_checks = Vec::new();
    for (side, kind, name, sample) in [
        (Side::U, Conditioning::StayNonneg, "forward", &forward),
        (Side::V, Conditioning::StayNeg, "backward", &backward),
    ] {
        let table = estimate_renewal(spec, side, &uniform_grid(side, 12.0, 0.05), &renewal, mc)?;
        let reference = h_transformed_features(spec, kind, p.k, &table, p.reference_samples, mc)?;
        let ks = WeightedEcdf::unweighted(sample)?.ks_distance(&reference);
        report.exact(format!("ks_{name}"), ks);
        ks_checks.push((name, ks));
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.1).collect();
        let own = WeightedEcdf::unweighted(sample)?;
        let rows: Vec<Vec<String>> = grid
            .iter()
            .flat_map(|t| {
                [
                    vec![
                        format!("{name}_conditioned"),
                        t.to_string(),
                        own.eval(*t).to_string(),
                    ],
                    vec![
                        format!("{name}_reference"),
                        t.to_string(),
                        reference.eval(*t).to_string(),
                    ],
                ]
            })
            .collect();
        report.csv(
            &format!("plot_{name}_ecdf.csv"),
            &["series", "x", "y"],
            &rows,
        )?;
    }
    for (name, ks) in ks_checks {
        report.require(
            format!("{name}_block_law"),
            ks < th.e3_ks,
            format!(
                "KS to the conditioned reference law = {ks:.6} against {}",
                th.e3_ks
            ),
        );
    }
    report.note(format!(
        "Blocks of {} environments around the minimum position of the first {r} steps, given the minimum of {} steps at its end.",
        p.k,
        p.n - p.m
    ));
    report.note("Reference laws are Doob transforms weighted by the estimated renewal functions.");
    report.note("Blocks are independent given tau_r exactly; the unconditional correlation comes from mixing over tau_r and shrinks like r^{-1/2}.");
    Ok(report.finish())
}

/// Correlation of the block features after centering within each value of
/// `tau_r`, over the strata `tau_r >= k` where the blocks share no law.
fn within_stratum_correlation(feats: &[(f64, f64, usize)], k: usize) -> Estimate {
    let mut strata: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for &(f, b, tau) in feats.iter().filter(|x| x.2 >= k) {
        let e = strata.entry(tau).or_default();
        e.0 += f;
        e.1 += b;
        e.2 += 1;
    }
    let (fs, bs): (Vec<f64>, Vec<f64>) = feats
        .iter()
        .filter(|x| x.2 >= k && strata[&x.2].2 > 1)
        .map(|&(f, b, tau)| {
            let (sf, sb, c) = strata[&tau];
            (f - sf / c as f64, b - sb / c as f64)
        })
        .unzip();
    correlation(&fs, &bs)
}

/// Weighted ECDF of the block feature of the first `k` steps under the Doob
/// transform for `kind`.
fn h_transformed_features(
    spec: &EnvironmentSpec,
    kind: Conditioning,
    k: usize,
    table: &RenewalTable,
    samples: usize,
    mc: &MonteCarlo,
) -> Result<WeightedEcdf> {
    let pairs = mc.collect(
        Tag::new("e3-reference").with(kind as u64).with(k as u64),
        samples,
        |rng| {
            let (path, w) = sample_h_transformed(spec, kind, k, table, rng)?;
            Ok((block_feature(path.increments.iter().copied()), w))
        },
    )?;
    let (values, weights): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    WeightedEcdf::new(&values, &weights)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct E5Params {
    pub n_list: Vec<usize>,
    pub samples: usize,
    pub arcsine_n: usize,
    pub arcsine_samples: usize,
}

impl Default for E5Params {
    fn default() -> Self {
        E5Params {
            n_list: vec![50],
            samples: 1_000_000,
            arcsine_n: 2000,
            arcsine_samples: 100_000,
        }
    }
}

impl E5Params {
    pub fn resolve(cfg: &RunConfig) -> Self {
        let d = Self::default();
        E5Params {
            n_list: cfg.n.clone().unwrap_or(d.n_list),
            samples: cfg.samples.unwrap_or(d.samples),
            ..d
        }
    }
}

pub fn run_e5(
    spec: &EnvironmentSpec,
    p: &E5Params,
    th: &Thresholds,
    mc: &MonteCarlo,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let mut report = Report::new(
        ExperimentId::E5,
        spec,
        mc.seed,
        serde_json::to_value(p)?,
        th,
        out,
    )?;
    let atoms = spec.increment_atoms(Measure::Tilted);
    for &n in &p.n_list {
        let (tau, neg) = duality_probabilities(spec, n, p.samples, mc)?;
        report.stat(format!("n{n}.p_min_at_end"), tau);
        report.stat(format!("n{n}.p_stay_negative"), neg);
        let se = tau.joint_stderr(&neg);
        let diff = (tau.value - neg.value).abs();
        report.require(
            format!("duality_n{n}"),
            diff <= th.sigma_k * se || diff == 0.0,
            format!(
                "|{} - {}| against {} joint SE",
                fmt_estimate(&tau),
                fmt_estimate(&neg),
                th.sigma_k
            ),
        );
        if !atoms.is_empty() && n <= crate::oracle::MAX_WALK_STEPS {
            let (a, b) = duality_pair(&atoms, n)?;
            report.exact(format!("n{n}.exact_p_min_at_end"), a);
            report.exact(format!("n{n}.exact_p_stay_negative"), b);
            report.require(
                format!("exact_duality_n{n}"),
                (a - b).abs() < 1e-12,
                "enumeration over all increment sequences",
            );
        }
    }
    let law = minimum_position_law(spec, p.arcsine_n, p.arcsine_samples, mc)?;
    let ks = law.ks_to(arcsine_cdf)?;
    report.exact("arcsine_ks", ks);
    report.require(
        "arcsine",
        ks <= th.e5_arcsine_ks,
        format!(
            "KS of tau_n / n at n={} against Beta(1/2, 1/2) = {ks:.6}, threshold {}",
            p.arcsine_n, th.e5_arcsine_ks
        ),
    );
    let hist: Vec<Vec<String>> = law
        .histogram(50)
        .into_iter()
        .map(|(lo, hi, m)| {
            vec![
                lo.to_string(),
                hi.to_string(),
                m.to_string(),
                (arcsine_cdf(hi) - arcsine_cdf(lo)).to_string(),
            ]
        })
        .collect();
    report.csv(
        "hist_tau_fraction.csv",
        &["lo", "hi", "mass", "arcsine_mass"],
        &hist,
    )?;
    let ecdf = law.ecdf()?;
    let plot: Vec<Vec<String>> = (0..=100)
        .flat_map(|i| {
            let t = i as f64 / 100.0;
            [
                vec![
                    "empirical".to_string(),
                    t.to_string(),
                    ecdf.eval(t).to_string(),
                ],
                vec![
                    "arcsine".to_string(),
                    t.to_string(),
                    arcsine_cdf(t).to_string(),
                ],
            ]
        })
        .collect();
    report.csv("plot_tau_cdf.csv", &["series", "x", "y"], &plot)?;
    Ok(report.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct E6Params {
    pub samples: usize,
    pub extent: f64,
    pub step: f64,
    pub fixed_k: Option<usize>,
    pub u_points: Vec<f64>,
    pub v_points: Vec<f64>,
}

impl Default for E6Params {
    fn default() -> Self {
        E6Params {
            samples: 100_000,
            extent: 12.0,
            step: 0.05,
            fixed_k: None,
            u_points: vec![0.0, 0.5, 1.0, 2.0],
            v_points: vec![-2.0, -1.0, -0.5],
        }
    }
}

impl E6Params {
    pub fn resolve(cfg: &RunConfig) -> Self {
        let d = Self::default();
        E6Params {
            samples: cfg.samples.unwrap_or(d.samples),
            fixed_k: cfg.r,
            ..d
        }
    }
}

pub fn run_e6(
    spec: &EnvironmentSpec,
    p: &E6Params,
    th: &Thresholds,
    mc: &MonteCarlo,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let mut report = Report::new(
        ExperimentId::E6,
        spec,
        mc.seed,
        serde_json::to_value(p)?,
        th,
        out,
    )?;
    for (side, points) in [(Side::U, &p.u_points), (Side::V, &p.v_points)] {
        let opts = RenewalOptions {
            samples: p.samples,
            fixed_k: p.fixed_k,
            probes: points.clone(),
            ..Default::default()
        };
        let table = estimate_renewal(spec, side, &uniform_grid(side, p.extent, p.step), &opts, mc)?;
        let label = side.label();
        report.exact(format!("{label}.truncation_k"), table.truncation_k as f64);
        report.stat(format!("{label}.last_term"), table.last_term);
        if table.truncation_warning {
            report.check(
                format!("{label}_truncation"),
                Verdict::Inconclusive,
                "the last series term exceeds its standard error",
            );
        }
        for &x in points {
            let res = check_harmonicity(&table, x)?;
            report.stat(format!("{label}.residual_at_{x}"), res);
            report.require(
                format!("{label}_harmonic_at_{x}"),
                res.within(0.0, th.sigma_k),
                format!("residual {} against {} SE", fmt_estimate(&res), th.sigma_k),
            );
        }
        match side {
            Side::U => {
                let u0 = table.value_at(0.0)?;
                report.exact("u.at_0", u0);
                report.require("u_at_zero", u0 == 1.0, format!("u(0) = {u0}"));
            }
            Side::V => {
                let above = table.value_at(0.5)?;
                report.require(
                    "v_vanishes_above_zero",
                    above == 0.0,
                    format!("v(0.5) = {above}"),
                );
                if let Some(v0) = table.v_at_zero {
                    report.stat("v.at_0_from_below", v0);
                }
            }
        }
        report.file(&format!("{label}_table.csv"), |path| table.write_csv(path))?;
    }
    report.note("Expectations over the next increment are computed in closed form on the interpolated tables; only the tables are random.");
    Ok(report.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct E7Params {
    pub pairs: Vec<(usize, usize)>,
    pub samples: usize,
}

impl Default for E7Params {
    fn default() -> Self {
        E7Params {
            pairs: vec![(100, 10), (400, 20), (1600, 40)],
            samples: 100_000,
        }
    }
}

impl E7Params {
    pub fn resolve(cfg: &RunConfig) -> Self {
        let d = Self::default();
        E7Params {
            pairs: cfg
                .n
                .as_ref()
                .map(|ns| {
                    ns.iter()
                        .map(|&n| (n, cfg.r.unwrap_or_else(|| ceil_sqrt(n))))
                        .collect()
                })
                .unwrap_or(d.pairs),
            samples: cfg.samples.unwrap_or(d.samples),
        }
    }
}

pub fn run_e7(
    spec: &EnvironmentSpec,
    p: &E7Params,
    th: &Thresholds,
    mc: &MonteCarlo,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let mut report = Report::new(
        ExperimentId::E7,
        spec,
        mc.seed,
        serde_json::to_value(p)?,
        th,
        out,
    )?;
    let mut estimates = Vec::new();
    for &(n, r) in &p.pairs {
        let e = two_walk_overshoot_probability(spec, n, r, p.samples, mc, MAX_ATTEMPTS)?;
        report.stat(format!("n{n}_r{r}.overshoot"), e);
        estimates.push((n, r, e));
    }
    let decreasing = estimates.windows(2).all(|w| w[1].2.value < w[0].2.value);
    report.require(
        "strictly_decreasing",
        decreasing,
        "overshoot estimates decrease along the schedule",
    );
    let separated = estimates
        .windows(2)
        .all(|w| w[0].2.value - w[1].2.value > th.sigma_k * w[0].2.joint_stderr(&w[1].2));
    report.exact("separated_by_sigma_k", f64::from(u8::from(separated)));
    let plot: Vec<Vec<String>> = estimates
        .iter()
        .map(|(n, _, e)| vec!["overshoot".to_string(), n.to_string(), e.value.to_string()])
        .collect();
    report.csv("plot_overshoot.csv", &["series", "x", "y"], &plot)?;
    Ok(report.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::OffspringLaw;

    #[test]
    fn block_indices() {
        let xs = [0.0, 0.5, 1.0, 1.5, 2.0];
        let (f, b) = blocks(&xs, 2, 2);
        assert!((f - (1f64.exp() + 1.5f64.exp()) / 2.0).abs() < 1e-12);
        assert!((b - (0.5f64.exp() + 1.0) / 2.0).abs() < 1e-12);
        // Q_j = Q_1 for j <= 0
        let (_, b0) = blocks(&xs, 0, 3);
        assert_eq!(b0, 1.0);
        assert_eq!(block_feature([5.0].into_iter()), 10.0);
    }

    #[test]
    fn stratum_centering_removes_shared_tau_effects() {
        let mut feats = Vec::new();
        for tau in [3usize, 4, 9] {
            for (e, d) in [(1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)] {
                feats.push((tau as f64 + e, tau as f64 + d, tau));
            }
        }
        // strata below k share the law Q_1 and are left out
        feats.push((100.0, 100.0, 0));
        let (f, b): (Vec<f64>, Vec<f64>) = feats.iter().map(|x| (x.0, x.1)).unzip();
        assert!(correlation(&f, &b).value > 0.9);
        assert_eq!(within_stratum_correlation(&feats, 3).value, 0.0);
    }

    #[test]
    fn e3_with_empty_blocks_is_vacuous() {
        let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        let p = E3Params {
            k: 0,
            ..Default::default()
        };
        let res = run_e3(&spec, &p, &Thresholds::default(), &MonteCarlo::new(1), None).unwrap();
        assert_eq!(res.statistics["correlation"].value, 0.0);
        assert_eq!(res.verdict, Verdict::Pass);
    }

    #[test]
    fn e5_degenerate_walk() {
        let spec =
            EnvironmentSpec::point(OffspringLaw::geometric_with_mean((-1f64).exp()).unwrap())
                .unwrap();
        let p = E5Params {
            n_list: vec![5],
            samples: 1000,
            arcsine_n: 10,
            arcsine_samples: 100,
        };
        let res = run_e5(&spec, &p, &Thresholds::default(), &MonteCarlo::new(1), None).unwrap();
        assert_eq!(res.statistics["n5.p_min_at_end"].value, 1.0);
        assert_eq!(res.statistics["n5.p_stay_negative"].value, 1.0);
        assert_eq!(res.statistics["n5.exact_p_min_at_end"].value, 1.0);
    }
}
