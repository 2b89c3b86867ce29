use std::path::Path;

use serde::Serialize;

use super::{
    ceil_sqrt, fmt_estimate, ExperimentId, ExperimentResult, Report, RunConfig, Thresholds, Verdict,
};
use crate::bpre::{conditioned_survival_sampler, SamplerOptions, Strategy};
use crate::environment::{Classification, EnvironmentSpec};
use crate::error::{Error, Result};
use crate::parallel::{MonteCarlo, Tag, CHUNK_SIZE};
use crate::spine::{simulate_spine, submartingale_terms, wplus_trajectory, BoundCheck};
use crate::stats::{median, proportion, quantile, Estimate, MeanAccumulator};
use crate::walk::{ConditionedSampler, Conditioning};

const MAX_ATTEMPTS: u64 = 100_000_000;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct E4Params {
    /// Horizons `2k`; the increment `|W_{2k} - W_k|` is reported for each.
    pub horizons: Vec<usize>,
    pub samples: usize,
    pub cap: u64,
    /// Levels `k` of the maximal inequality.
    pub bound_levels: Vec<usize>,
    pub bound_eps: f64,
}

impl Default for E4Params {
    fn default() -> Self {
        E4Params {
            horizons: vec![50, 100, 200],
            samples: 10_000,
            cap: 1 << 62,
            bound_levels: vec![0, 10],
            bound_eps: 0.5,
        }
    }
}

impl E4Params {
    pub fn resolve(cfg: &RunConfig) -> Self {
        let d = Self::default();
        E4Params {
            horizons: cfg.n.clone().unwrap_or(d.horizons),
            samples: cfg.samples.unwrap_or(d.samples),
            ..d
        }
    }
}

struct E4Row {
    increments: Vec<f64>,
    terminal: f64,
    capped: bool,
    bounds: Vec<(bool, f64)>,
}

pub fn run_e4(
    spec: &EnvironmentSpec,
    p: &E4Params,
    th: &Thresholds,
    mc: &MonteCarlo,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let mut report = Report::new(
        ExperimentId::E4,
        spec,
        mc.seed,
        serde_json::to_value(p)?,
        th,
        out,
    )?;
    if p.horizons.is_empty()
        || p.horizons.iter().any(|&h| h < 2 || h % 2 == 1)
        || p.horizons.windows(2).any(|w| w[0] >= w[1])
    {
        return Err(Error::invalid(
            "horizons",
            "need an increasing list of even horizons",
        ));
    }
    let horizon = *p.horizons.last().expect("nonempty");
    let sampler = ConditionedSampler::new(spec, Conditioning::StayNonneg, horizon)
        .with_max_attempts(MAX_ATTEMPTS);
    let rows = mc.fold_chunks(
        Tag::new("e4-spine").with(horizon as u64),
        p.samples,
        CHUNK_SIZE,
        Vec::with_capacity(p.samples),
        |rng, range| {
            let mut rows = Vec::with_capacity(range.len());
            for _ in range {
                let walk = sampler.sample(rng)?.path;
                let env = spec.environment_from_increments(&walk.increments)?;
                let trace = simulate_spine(&env, horizon, rng, Some(p.cap))?;
                let mut w = wplus_trajectory(&trace);
                // a capped trace keeps its last value
                let last = *w.last().expect("generation 0 is always present");
                w.resize(horizon + 1, last);
                let increments = p
                    .horizons
                    .iter()
                    .map(|&h| (w[h] - w[h / 2]).abs())
                    .collect();
                let bounds = if trace.capped {
                    Vec::new()
                } else {
                    p.bound_levels
                        .iter()
                        .map(|&k| submartingale_terms(&trace, k, p.bound_eps))
                        .collect::<Result<_>>()?
                };
                rows.push(E4Row {
                    increments,
                    terminal: w[horizon],
                    capped: trace.capped,
                    bounds,
                });
            }
            Ok(rows)
        },
        |acc, rows| acc.extend(rows),
    )?;

    let capped = rows.iter().filter(|r| r.capped).count();
    report.stat(
        "capped_fraction",
        proportion(capped as u64, rows.len() as u64),
    );
    let mut medians = Vec::new();
    for (j, &h) in p.horizons.iter().enumerate() {
        let mut d: Vec<f64> = rows.iter().map(|r| r.increments[j]).collect();
        let m = median(&mut d);
        report.exact(format!("median_abs_increment_k{}", h / 2), m);
        medians.push((h / 2, m));
    }
    let decreasing = medians.windows(2).all(|w| w[1].1 < w[0].1);
    report.require(
        "increments_shrink",
        decreasing,
        format!("medians of |W_2k - W_k|: {medians:?}"),
    );

    let mut terminal: Vec<f64> = rows.iter().map(|r| r.terminal).collect();
    terminal.sort_by(f64::total_cmp);
    for q in [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99] {
        report.exact(format!("terminal_quantile_{q}"), quantile(&terminal, q));
    }
    let small = terminal
        .iter()
        .filter(|&&w| w < th.e4_small_terminal)
        .count();
    let small_frac = proportion(small as u64, terminal.len() as u64);
    report.stat("terminal_small_fraction", small_frac);
    report.require(
        "positive_limit",
        small_frac.value < th.e4_small_fraction,
        format!(
            "fraction of W_{horizon} below {} = {} against {}",
            th.e4_small_terminal,
            fmt_estimate(&small_frac),
            th.e4_small_fraction
        ),
    );

    let uncapped: Vec<&E4Row> = rows.iter().filter(|r| !r.capped).collect();
    if uncapped.is_empty() {
        report.check(
            "maximal_inequality",
            Verdict::Inconclusive,
            "every trace hit the population cap",
        );
    } else {
        for (j, &k) in p.bound_levels.iter().enumerate() {
            let hits = uncapped.iter().filter(|r| r.bounds[j].0).count();
            let mut rhs = MeanAccumulator::default();
            uncapped.iter().for_each(|r| rhs.push(r.bounds[j].1));
            let b = BoundCheck::from_parts(
                proportion(hits as u64, uncapped.len() as u64),
                rhs.estimate(),
            );
            report.stat(format!("k{k}.exceedance"), b.exceedance);
            report.stat(format!("k{k}.bound"), b.bound);
            report.require(
                format!("maximal_inequality_k{k}"),
                b.holds,
                format!(
                    "{} against {}",
                    fmt_estimate(&b.exceedance),
                    fmt_estimate(&b.bound)
                ),
            );
        }
    }

    let plot: Vec<Vec<String>> = medians
        .iter()
        .map(|(k, m)| {
            vec![
                "median_abs_increment".to_string(),
                k.to_string(),
                m.to_string(),
            ]
        })
        .collect();
    report.csv("plot_increments.csv", &["series", "x", "y"], &plot)?;
    let hist = log10_histogram(&terminal, 40);
    report.csv("hist_log10_terminal.csv", &["lo", "hi", "fraction"], &hist)?;
    report.note(format!(
        "Environments are drawn given S_k >= 0 for k <= {horizon}; traces reaching {} individuals keep their last W value.",
        p.cap
    ));
    Ok(report.finish())
}

fn log10_histogram(values: &[f64], bins: usize) -> Vec<Vec<String>> {
    let logs: Vec<f64> = values
        .iter()
        .filter(|v| **v > 0.0)
        .map(|v| v.log10())
        .collect();
    if logs.is_empty() {
        return Vec::new();
    }
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut counts = vec![0usize; bins];
    for x in &logs {
        counts[(((x - lo) / width) as usize).min(bins - 1)] += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let a = lo + i as f64 * width;
            vec![
                a.to_string(),
                (a + width).to_string(),
                (*c as f64 / values.len() as f64).to_string(),
            ]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct E8Params {
    pub n: usize,
    pub samples: usize,
    pub m_list: Vec<usize>,
    /// Prefix length; `None` means `⌈√n⌉`.
    pub prefix_len: Option<usize>,
    pub clip: f64,
    pub strategy: Strategy,
}

impl Default for E8Params {
    fn default() -> Self {
        E8Params {
            n: 256,
            samples: 100_000,
            m_list: vec![0, 1, 2],
            prefix_len: None,
            clip: 1.0,
            strategy: Strategy::TiltedRaoBlackwell,
        }
    }
}

impl E8Params {
    pub fn resolve(cfg: &RunConfig) -> Self {
        let d = Self::default();
        E8Params {
            n: cfg
                .n
                .as_ref()
                .and_then(|v| v.first().copied())
                .unwrap_or(d.n),
            samples: cfg.samples.unwrap_or(d.samples),
            prefix_len: cfg.r,
            strategy: cfg.strategy,
            ..d
        }
    }
}

fn clipped_prefix_mean(xs: &[f64], clip: f64) -> f64 {
    (xs.iter().sum::<f64>() / xs.len() as f64).clamp(-clip, clip)
}

pub fn run_e8(
    spec: &EnvironmentSpec,
    p: &E8Params,
    th: &Thresholds,
    mc: &MonteCarlo,
    out: Option<&Path>,
) -> Result<ExperimentResult> {
    let mut report = Report::new(
        ExperimentId::E8,
        spec,
        mc.seed,
        serde_json::to_value(p)?,
        th,
        out,
    )?;
    let len = p.prefix_len.unwrap_or_else(|| ceil_sqrt(p.n));
    if len == 0 || p.m_list.iter().any(|&m| m + len > p.n) {
        return Err(Error::invalid(
            "m_list",
            "need 1 <= prefix_len <= n - m for every m",
        ));
    }
    let intermediate = spec.classify()? == Classification::IntermediatelySubcritical;
    let opts = SamplerOptions {
        prefix_len: len,
        clip: p.clip,
        enforce_assumptions: intermediate,
        ..SamplerOptions::new(p.n, p.samples, p.strategy)
    };
    let set = conditioned_survival_sampler(spec, &opts, mc)?;
    let surv = set.weighted_mean(&set.prefix_functional)?;
    report.stat("survival", surv);
    report.exact("survival.ess", set.effective_sample_size());

    let mut walks = Vec::new();
    for &m in &p.m_list {
        let sampler = ConditionedSampler::new(spec, Conditioning::MinAtEnd, p.n - m)
            .with_max_attempts(MAX_ATTEMPTS);
        let acc = mc.fold_chunks(
            Tag::new("e8-min-at-end").with(p.n as u64).with(m as u64),
            p.samples,
            CHUNK_SIZE,
            MeanAccumulator::default(),
            |rng, range| {
                let mut acc = MeanAccumulator::default();
                for _ in range {
                    let a = sampler.sample(rng)?;
                    acc.push(clipped_prefix_mean(&a.path.increments[..len], p.clip));
                }
                Ok(acc)
            },
            |acc, part| acc.merge(&part),
        )?;
        let e = acc.estimate();
        report.stat(format!("min_at_end_m{m}"), e);
        walks.push((m, e));
    }

    let agree = |a: &Estimate, b: &Estimate| a.agrees_with(b, th.sigma_k) || a.value == b.value;
    for (m, e) in &walks {
        report.require(
            format!("survival_vs_m{m}"),
            agree(&surv, e),
            format!(
                "{} against {} within {} joint SE",
                fmt_estimate(&surv),
                fmt_estimate(e),
                th.sigma_k
            ),
        );
    }
    if let Some((m0, base)) = walks.first() {
        for (m, e) in walks.iter().skip(1) {
            report.require(
                format!("m{m0}_vs_m{m}"),
                agree(base, e),
                format!(
                    "{} against {} within {} joint SE",
                    fmt_estimate(base),
                    fmt_estimate(e),
                    th.sigma_k
                ),
            );
        }
    }
    let rows: Vec<Vec<String>> = std::iter::once(("survival".to_string(), surv))
        .chain(walks.iter().map(|(m, e)| (format!("min_at_end_m{m}"), *e)))
        .map(|(name, e)| vec![name, e.value.to_string(), e.stderr.to_string()])
        .collect();
    report.csv("functional_means.csv", &["source", "mean", "stderr"], &rows)?;
    report.note(format!(
        "Functional: mean of the first {len} increments clipped to [-{c}, {c}].",
        c = p.clip
    ));
    Ok(report.finish())
}
