//! Renewal functions of the tilted walk,
//!
//! ```text
//! u(x) = 1 + sum_{k>=1} P(-S_k <= x, M_k < 0),   x >= 0,
//! v(x) = 1 + sum_{k>=1} P(-S_k >  x, L_k > 0),   x <= 0,
//! ```
//!
//! estimated by truncating the series at `K` and averaging per-path visit
//! counts. Truncation makes `u_K` fail harmonicity by exactly
//! `P(M_{K+1} < 0, -S_{K+1} > x)` (and `v_K` by `P(L_{K+1} > 0, S_{K+1} >= -x)`),
//! so tables carry an estimate of that defect alongside the values.

use std::path::Path;

use serde::Serialize;

use crate::environment::{EnvironmentSpec, IncrementLaw, Measure};
use crate::error::{Error, Result};
use crate::parallel::{MonteCarlo, Tag, CHUNK_SIZE};
use crate::stats::{normal_cdf, proportion, Estimate, MeanAccumulator};

/// Harmonicity checks give up if more than this much of the law of `x + X`
/// falls beyond the grid.
const MAX_MISSING_MASS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    U,
    V,
}

impl Side {
    pub fn label(self) -> &'static str {
        match self {
            Side::U => "u",
            Side::V => "v",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RenewalOptions {
    pub samples: usize,
    /// Upper bound for the adaptive truncation.
    pub k_max: usize,
    /// Skips the adaptive rule.
    pub fixed_k: Option<usize>,
    /// Points whose harmonicity residual is estimated path by path.
    pub probes: Vec<f64>,
    /// Require an intermediately subcritical spec.
    pub enforce_assumptions: bool,
}

impl Default for RenewalOptions {
    fn default() -> Self {
        RenewalOptions {
            samples: 200_000,
            k_max: 1 << 21,
            fixed_k: None,
            probes: Vec::new(),
            enforce_assumptions: true,
        }
    }
}

/// Harmonicity residual at one point, estimated from the same paths as the
/// table so that its standard error accounts for their correlation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Probe {
    pub x: f64,
    /// `E[h(x+X); x+X in side] - h(x)` plus the truncation defect.
    pub residual: Estimate,
    /// Same without the defect.
    pub raw_residual: Estimate,
    pub defect: Estimate,
}

#[derive(Clone, Debug, Serialize)]
pub struct RenewalTable {
    pub side: Side,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Truncation defect at each grid point.
    pub defect: Vec<f64>,
    pub defect_stderr: Vec<f64>,
    pub truncation_k: usize,
    pub samples: usize,
    /// Estimate of the `K`-th series term at the outermost grid point.
    pub last_term: Estimate,
    pub truncation_warning: bool,
    /// `E[v(X); X < 0]`, for `v` tables.
    pub v_at_zero: Option<Estimate>,
    pub probes: Vec<Probe>,
    #[serde(skip)]
    law: IncrementLaw,
}

impl RenewalTable {
    /// Linear interpolation on the grid. `u` vanishes below 0 and `v` above 0;
    /// at 0 the `v` table holds the series value `1`.
    pub fn value_at(&self, x: f64) -> Result<f64> {
        match self.side {
            Side::U if x < 0.0 => return Ok(0.0),
            Side::V if x > 0.0 => return Ok(0.0),
            _ => {}
        }
        interpolate(&self.grid, &self.values, x).ok_or(Error::OutOfGrid {
            lo: self.grid[0],
            hi: *self.grid.last().unwrap(),
            missing: 1.0,
        })
    }

    pub fn probe(&self, x: f64) -> Option<&Probe> {
        self.probes.iter().find(|p| (p.x - x).abs() < 1e-12)
    }

    /// CSV with columns `x,value,stderr,side`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["x", "value", "stderr", "side"])?;
        for ((x, v), se) in self.grid.iter().zip(&self.values).zip(&self.stderr) {
            w.write_record([
                x.to_string(),
                v.to_string(),
                se.to_string(),
                self.side.label().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn interpolate(grid: &[f64], values: &[f64], x: f64) -> Option<f64> {
    if x < grid[0] || x > *grid.last()? {
        return None;
    }
    let j = grid.partition_point(|g| *g <= x);
    if j == 0 {
        return Some(values[0]);
    }
    if j == grid.len() {
        return Some(values[grid.len() - 1]);
    }
    let (a, b) = (grid[j - 1], grid[j]);
    let t = (x - a) / (b - a);
    Some(values[j - 1] * (1.0 - t) + values[j] * t)
}

/// Weights `w_j = E[phi_j(x + X); x + X in side]` of the hat functions on
/// the grid, so that `E[h(x+X); x+X in side] = sum_j w_j h_j` for the
/// piecewise-linear `h`. Also returns the mass of `x + X` beyond the grid.
fn hat_weights(law: &IncrementLaw, grid: &[f64], x: f64, side: Side) -> (Vec<f64>, f64) {
    let g = grid.len();
    let mut w = vec![0.0; g];
    let (lo, hi) = (grid[0], grid[g - 1]);
    match law {
        IncrementLaw::Atoms(atoms) => {
            let mut missing = 0.0;
            for &(step, p) in atoms {
                let y = x + step;
                let inside = match side {
                    Side::U => y >= 0.0,
                    Side::V => y < 0.0,
                };
                if !inside {
                    continue;
                }
                if y < lo || y > hi {
                    missing += p;
                    continue;
                }
                let j = grid.partition_point(|gr| *gr <= y);
                if j == 0 || j == g {
                    w[j.min(g - 1)] += p;
                } else {
                    let t = (y - grid[j - 1]) / (grid[j] - grid[j - 1]);
                    w[j - 1] += p * (1.0 - t);
                    w[j] += p * t;
                }
            }
            (w, missing)
        }
        IncrementLaw::Normal { mean, sd } => {
            let shifted = IncrementLaw::Normal {
                mean: mean + x,
                sd: *sd,
            };
            for j in 0..g - 1 {
                let (a, b) = (grid[j], grid[j + 1]);
                let h = b - a;
                let p = shifted.prob_between(a, b);
                let rise = shifted.partial_mean_from(a, b) / h;
                w[j] += p - rise;
                w[j + 1] += rise;
            }
            let missing = match side {
                Side::U => 1.0 - normal_cdf((hi - mean - x) / sd),
                Side::V => normal_cdf((lo - mean - x) / sd),
            };
            (w, missing)
        }
    }
}

fn prepare_grid(grid: &[f64], side: Side) -> Result<Vec<f64>> {
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("grid", "grid points must be finite"));
    }
    let ok = match side {
        Side::U => grid.iter().all(|x| *x >= 0.0),
        Side::V => grid.iter().all(|x| *x <= 0.0),
    };
    if !ok {
        return Err(Error::invalid(
            "grid",
            format!("{} grid must lie on its sign side", side.label()),
        ));
    }
    let mut g = grid.to_vec();
    g.push(0.0);
    g.sort_by(f64::total_cmp);
    g.dedup();
    if g.len() < 2 {
        return Err(Error::invalid("grid", "grid needs a point other than 0"));
    }
    Ok(g)
}

/// Evenly spaced grid from 0 to `extent` on the given side.
pub fn uniform_grid(side: Side, extent: f64, step: f64) -> Vec<f64> {
    let n = (extent / step).round() as usize;
    (0..=n)
        .map(|i| match side {
            Side::U => i as f64 * step,
            Side::V => -(i as f64) * step,
        })
        .collect()
}

/// `t = -S_k` for paths alive on the side: `S < 0` for `u`, `S > 0` for `v`.
fn alive(side: Side, s: f64) -> bool {
    match side {
        Side::U => s < 0.0,
        Side::V => s > 0.0,
    }
}

/// First grid index `j` with `x_j >= t`.
fn split(grid: &[f64], t: f64) -> usize {
    grid.partition_point(|x| *x < t)
}

/// Whether the series term at grid value `x` counts a path at `t = -S_k`.
fn counts(side: Side, x: f64, t: f64) -> bool {
    match side {
        Side::U => t <= x,
        Side::V => x < t,
    }
}

struct ProbePlan {
    x: f64,
    weights: Vec<f64>,
    mass: f64,
    /// Grid interpolation of the per-path count at `x`.
    at: (usize, usize, f64),
}

fn interp_index(grid: &[f64], x: f64) -> (usize, usize, f64) {
    let j = grid.partition_point(|g| *g <= x);
    if j == 0 {
        (0, 0, 0.0)
    } else if j == grid.len() {
        (j - 1, j - 1, 0.0)
    } else {
        (j - 1, j, (x - grid[j - 1]) / (grid[j] - grid[j - 1]))
    }
}

#[derive(Clone)]
struct Acc {
    n: u64,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    defect_hits: Vec<u64>,
    probes: Vec<[MeanAccumulator; 3]>,
    v0: MeanAccumulator,
    last_term: u64,
}

impl Acc {
    fn new(g: usize, probes: usize) -> Self {
        Acc {
            n: 0,
            sum: vec![0.0; g],
            sumsq: vec![0.0; g],
            defect_hits: vec![0; g + 1],
            probes: vec![Default::default(); probes],
            v0: MeanAccumulator::default(),
            last_term: 0,
        }
    }

    fn merge(&mut self, o: &Acc) {
        self.n += o.n;
        for j in 0..self.sum.len() {
            self.sum[j] += o.sum[j];
            self.sumsq[j] += o.sumsq[j];
        }
        for (a, b) in self.defect_hits.iter_mut().zip(&o.defect_hits) {
            *a += b;
        }
        for (a, b) in self.probes.iter_mut().zip(&o.probes) {
            for i in 0..3 {
                a[i].merge(&b[i]);
            }
        }
        self.v0.merge(&o.v0);
        self.last_term += o.last_term;
    }
}

/// Expected count of the `K`-th series term targeted by the adaptive rule.
const TARGET_LAST_COUNT: f64 = 0.01;
/// Hits a dyadic block needs before its level is trusted for the tail fit.
const FIT_MIN_HITS: u64 = 50;

fn dyadic_block(k: usize) -> usize {
    (usize::BITS - 1 - k.leading_zeros()) as usize
}

/// Truncation from pilot term counts pooled over the blocks `[2^j, 2^{j+1})`.
/// The series terms decay like `A k^{-3/2}`; `A` is fitted on the last block
/// with at least `FIT_MIN_HITS` hits and `K` solves `A K^{-3/2} = TARGET_LAST_COUNT`.
/// Without such a block, `K` is the end of the first empty block. `None`
/// means the rule asks for more than `k_max` terms.
fn adaptive_k(block_counts: &[u64], k_max: usize) -> Option<usize> {
    let block_end = |j: usize| ((1usize << (j + 1)) - 1).min(k_max);
    let fitted = (0..block_counts.len())
        .rev()
        .find(|&j| block_counts[j] >= FIT_MIN_HITS && (1usize << j) <= k_max);
    let k = match fitted {
        Some(j) => {
            let weight: f64 = ((1usize << j)..=block_end(j))
                .map(|k| (k as f64).powf(-1.5))
                .sum();
            let a = block_counts[j] as f64 / weight;
            ((a / TARGET_LAST_COUNT).powf(2.0 / 3.0).ceil() as usize).max(1)
        }
        None => block_end(block_counts.iter().position(|&c| c == 0)?),
    };
    (k <= k_max).then_some(k)
}

/// Builds a renewal table for `side` on `grid` (0 is always added).
pub fn estimate_renewal(
    spec: &EnvironmentSpec,
    side: Side,
    grid: &[f64],
    opts: &RenewalOptions,
    mc: &MonteCarlo,
) -> Result<RenewalTable> {
    if opts.enforce_assumptions {
        spec.require_intermediate("renewal estimation")?;
    }
    if opts.samples < 2 {
        return Err(Error::invalid("samples", "need at least two paths"));
    }
    let grid = prepare_grid(grid, side)?;
    let g = grid.len();
    let top = match side {
        Side::U => grid[g - 1],
        Side::V => grid[0],
    };
    let law = spec.increment_law(Measure::Tilted);
    let samples = opts.samples;
    let step = |rng: &mut crate::parallel::StreamRng| spec.sample_increment(Measure::Tilted, rng);

    let truncation_k = match opts.fixed_k {
        Some(k) if k >= 1 => k,
        Some(_) => return Err(Error::invalid("K", "truncation must be at least 1")),
        None => {
            let k_max = opts.k_max.max(3);
            let blocks = dyadic_block(k_max) + 1;
            let term_counts = mc.fold_chunks(
                Tag::new("renewal-pilot").with(side as u64),
                samples,
                CHUNK_SIZE,
                vec![0u64; blocks],
                |rng, range| {
                    let mut c = vec![0u64; blocks];
                    for _ in range {
                        let mut s = 0.0;
                        for k in 1..=k_max {
                            s += step(rng);
                            if !alive(side, s) {
                                break;
                            }
                            if counts(side, top, -s) {
                                c[dyadic_block(k)] += 1;
                            }
                        }
                    }
                    Ok(c)
                },
                |acc, c| acc.iter_mut().zip(c).for_each(|(a, b)| *a += b),
            )?;
            adaptive_k(&term_counts, k_max).unwrap_or(k_max)
        }
    };

    let mut plans = Vec::new();
    for &x in &opts.probes {
        let on_side = match side {
            Side::U => x >= 0.0,
            Side::V => x < 0.0,
        };
        if !on_side {
            return Err(Error::invalid(
                "probes",
                format!("probe {x} is not inside the {} domain", side.label()),
            ));
        }
        plans.push(probe_plan(&law, &grid, x, side)?);
    }
    let v0_plan = match side {
        // left out when the grid is too short to integrate against
        Side::V => probe_plan(&law, &grid, 0.0, side).ok(),
        Side::U => None,
    };

    let k = truncation_k;
    let acc = mc.fold_chunks(
        Tag::new("renewal").with(side as u64),
        samples,
        CHUNK_SIZE,
        Acc::new(g, plans.len()),
        |rng, range| {
            let mut acc = Acc::new(g, plans.len());
            let mut hits = vec![0u32; g + 1];
            let mut c = vec![0.0f64; g];
            for _ in range {
                hits.iter_mut().for_each(|h| *h = 0);
                let mut s = 0.0;
                let mut survivor: Option<f64> = None;
                for step_k in 1..=k + 1 {
                    s += step(rng);
                    if !alive(side, s) {
                        break;
                    }
                    let t = -s;
                    if step_k <= k {
                        hits[split(&grid, t)] += 1;
                        if step_k == k && counts(side, top, t) {
                            acc.last_term += 1;
                        }
                    } else {
                        survivor = Some(t);
                    }
                }
                // u: count at x_j = #{t <= x_j}; v: count at x_j = #{t > x_j}
                match side {
                    Side::U => {
                        let mut run = 0u32;
                        for j in 0..g {
                            run += hits[j];
                            c[j] = f64::from(run);
                        }
                    }
                    Side::V => {
                        let mut run = hits[g];
                        for j in (0..g).rev() {
                            c[j] = f64::from(run);
                            run += hits[j];
                        }
                    }
                }
                for ((sum, sumsq), &cj) in acc.sum.iter_mut().zip(acc.sumsq.iter_mut()).zip(&c[..g])
                {
                    *sum += cj;
                    *sumsq += cj * cj;
                }
                if let Some(t) = survivor {
                    acc.defect_hits[split(&grid, t)] += 1;
                }
                let defect_at = |x: f64| match (survivor, side) {
                    (Some(t), Side::U) => f64::from(u8::from(t > x)),
                    (Some(t), Side::V) => f64::from(u8::from(t <= x)),
                    (None, _) => 0.0,
                };
                for (plan, slots) in plans.iter().zip(acc.probes.iter_mut()) {
                    let expectation: f64 = plan.weights.iter().zip(&c).map(|(w, cj)| w * cj).sum();
                    let (a, b, t) = plan.at;
                    let here = c[a] * (1.0 - t) + c[b] * t;
                    let d = defect_at(plan.x);
                    slots[0].push(expectation - here + d);
                    slots[1].push(expectation - here);
                    slots[2].push(d);
                }
                if let Some(plan) = &v0_plan {
                    acc.v0
                        .push(plan.weights.iter().zip(&c).map(|(w, cj)| w * cj).sum());
                }
                acc.n += 1;
            }
            Ok(acc)
        },
        |acc, chunk| acc.merge(&chunk),
    )?;

    let n = acc.n as f64;
    let mut values = Vec::with_capacity(g);
    let mut stderr = Vec::with_capacity(g);
    for j in 0..g {
        let mean = acc.sum[j] / n;
        let var = (acc.sumsq[j] / n - mean * mean).max(0.0) * n / (n - 1.0);
        values.push(1.0 + mean);
        stderr.push((var / n).sqrt());
    }
    // defect at x_j: u counts survivors with t > x_j, v those with t <= x_j
    let mut defect = vec![0.0; g];
    let mut defect_stderr = vec![0.0; g];
    for j in 0..g {
        let hits: u64 = match side {
            Side::U => acc.defect_hits[j + 1..].iter().sum(),
            Side::V => acc.defect_hits[..=j].iter().sum(),
        };
        let e = proportion(hits, acc.n);
        defect[j] = e.value;
        defect_stderr[j] = e.stderr;
    }
    let probes = plans
        .iter()
        .zip(&acc.probes)
        .map(|(plan, slots)| {
            let shift = plan.mass - 1.0;
            let r = slots[0].estimate();
            let raw = slots[1].estimate();
            Probe {
                x: plan.x,
                residual: Estimate::new(r.value + shift, r.stderr),
                raw_residual: Estimate::new(raw.value + shift, raw.stderr),
                defect: slots[2].estimate(),
            }
        })
        .collect();
    let v_at_zero = v0_plan.map(|plan| {
        let e = acc.v0.estimate();
        Estimate::new(plan.mass + e.value, e.stderr)
    });
    let last_term = proportion(acc.last_term, acc.n);
    Ok(RenewalTable {
        side,
        grid,
        values,
        stderr,
        defect,
        defect_stderr,
        truncation_k,
        samples,
        truncation_warning: last_term.value > last_term.stderr,
        last_term,
        v_at_zero,
        probes,
        law,
    })
}

fn probe_plan(law: &IncrementLaw, grid: &[f64], x: f64, side: Side) -> Result<ProbePlan> {
    let (weights, missing) = hat_weights(law, grid, x, side);
    if missing > MAX_MISSING_MASS {
        return Err(Error::OutOfGrid {
            lo: grid[0],
            hi: grid[grid.len() - 1],
            missing,
        });
    }
    let mass = weights.iter().sum();
    Ok(ProbePlan {
        x,
        weights,
        mass,
        at: interp_index(grid, x),
    })
}

/// Harmonicity residual `E[h(x+X); x+X in side] - h(x)` of a table, with the
/// truncation defect added back. Points registered as probes when the table
/// was built return their path-level estimate; other points combine the
/// table's standard errors as if fully correlated, which overstates the
/// error.
pub fn check_harmonicity(table: &RenewalTable, x: f64) -> Result<Estimate> {
    let on_side = match table.side {
        Side::U => x >= 0.0,
        Side::V => x < 0.0,
    };
    if !on_side {
        return Err(Error::invalid(
            "x",
            format!("{x} is not inside the {} domain", table.side.label()),
        ));
    }
    if let Some(p) = table.probe(x) {
        return Ok(p.residual);
    }
    let plan = probe_plan(&table.law, &table.grid, x, table.side)?;
    let expectation: f64 = plan
        .weights
        .iter()
        .zip(&table.values)
        .map(|(w, v)| w * v)
        .sum();
    let spread: f64 = plan
        .weights
        .iter()
        .zip(&table.stderr)
        .map(|(w, s)| w * s)
        .sum();
    let here = interpolate(&table.grid, &table.values, x).expect("on grid");
    let here_se = interpolate(&table.grid, &table.stderr, x).expect("on grid");
    let d = interpolate(&table.grid, &table.defect, x).expect("on grid");
    let d_se = interpolate(&table.grid, &table.defect_stderr, x).expect("on grid");
    let se = (here_se * here_se + spread * spread + d_se * d_se).sqrt();
    Ok(Estimate::new(expectation - here + d, se))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::offspring::OffspringLaw;

    fn spec() -> EnvironmentSpec {
        EnvironmentSpec::calibrate_lognormal(1.0).unwrap()
    }

    #[test]
    fn hat_weights_sum_to_the_mass_on_the_side() {
        let law = IncrementLaw::Normal { mean: 0.0, sd: 1.0 };
        let grid = uniform_grid(Side::U, 12.0, 0.05);
        let (w, missing) = hat_weights(&law, &grid, 0.5, Side::U);
        let mass: f64 = w.iter().sum();
        assert!((mass - (1.0 - normal_cdf(-0.5))).abs() < 1e-12);
        assert!(missing < 1e-20);
        // linear functions are integrated exactly
        let lin: f64 = w.iter().zip(&grid).map(|(w, g)| w * g).sum();
        let exact = 0.5 * (1.0 - normal_cdf(-0.5))
            + (-0.125f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        assert!((lin - exact).abs() < 1e-12);
    }

    #[test]
    fn u_at_zero_is_one_and_v_vanishes_above_zero() {
        let opts = RenewalOptions {
            samples: 20_000,
            fixed_k: Some(200),
            ..Default::default()
        };
        let mc = MonteCarlo::new(1);
        let u = estimate_renewal(&spec(), Side::U, &[0.5, 1.0, 2.0], &opts, &mc).unwrap();
        assert_eq!(u.values[0], 1.0);
        assert_eq!(u.stderr[0], 0.0);
        assert_eq!(u.value_at(-0.1).unwrap(), 0.0);
        assert!(u.values.windows(2).all(|w| w[0] <= w[1]));
        let v = estimate_renewal(&spec(), Side::V, &[-1.0, -0.5], &opts, &mc).unwrap();
        assert_eq!(v.value_at(0.3).unwrap(), 0.0);
        assert_eq!(*v.values.last().unwrap(), 1.0);
        assert!(v.values.windows(2).all(|w| w[0] >= w[1]));
        assert!(estimate_renewal(&spec(), Side::U, &[-1.0], &opts, &mc).is_err());
    }

    #[test]
    fn adaptive_rule_inverts_the_tail_law() {
        // counts of an exact 1000 k^{-3/2} tail; the last block is ignored
        let counts: Vec<u64> = (0..12)
            .map(|j| {
                ((1u64 << j)..(1u64 << (j + 1)))
                    .map(|k| 1000.0 * (k as f64).powf(-1.5))
                    .sum::<f64>()
                    .round() as u64
            })
            .collect();
        // (1000 / 0.01)^{2/3}
        let k = adaptive_k(&counts, 1 << 20).unwrap();
        assert!((k as f64 - 2154.43).abs() < 30.0, "{k}");
        assert_eq!(adaptive_k(&counts, 1000), None);
        assert_eq!(adaptive_k(&[3, 1, 0, 2], 100), Some(7));
        assert_eq!(adaptive_k(&[3, 1, 2], 100), None);
    }

    #[test]
    fn degenerate_negative_steps_give_a_staircase() {
        let c = -0.5f64;
        let law = OffspringLaw::finite_table(vec![1.0 - c.exp(), c.exp()]).unwrap();
        let spec = EnvironmentSpec::point(law).unwrap();
        let opts = RenewalOptions {
            samples: 10,
            fixed_k: Some(50),
            probes: vec![0.25, 1.0],
            enforce_assumptions: false,
            ..Default::default()
        };
        let grid = uniform_grid(Side::U, 40.0, 0.25);
        let u = estimate_renewal(&spec, Side::U, &grid, &opts, &MonteCarlo::new(1)).unwrap();
        // u(x) = 1 + #{k <= K : k/2 <= x}
        for (x, v) in u.grid.iter().zip(&u.values) {
            let expected = 1.0 + ((x / 0.5).floor()).min(50.0);
            assert_eq!(*v, expected, "x={x}");
        }
        // E[u(x + c); x + c >= 0] = u(x - 1/2) from the table
        let r = check_harmonicity(&u, 1.0).unwrap();
        assert!((r.value - 0.0).abs() < 1e-12 && r.stderr == 0.0, "{r:?}");
        let r = check_harmonicity(&u, 0.25).unwrap();
        assert!(r.value.abs() < 1e-12, "{r:?}");
        let conservative = check_harmonicity(&u, 3.0).unwrap();
        assert!(conservative.value.abs() < 1e-12, "{conservative:?}");
    }

    #[test]
    fn harmonicity_residuals_are_small() {
        let opts = RenewalOptions {
            samples: 100_000,
            probes: vec![0.0, 0.5, 1.0, 2.0],
            ..Default::default()
        };
        let mc = MonteCarlo::new(7);
        let grid = uniform_grid(Side::U, 12.0, 0.05);
        let u = estimate_renewal(&spec(), Side::U, &grid, &opts, &mc).unwrap();
        for x in [0.0, 0.5, 1.0, 2.0] {
            let r = check_harmonicity(&u, x).unwrap();
            assert!(r.within(0.0, 3.0), "u x={x} {r:?} K={}", u.truncation_k);
        }
        let vopts = RenewalOptions {
            probes: vec![-2.0, -1.0, -0.5],
            ..opts
        };
        let v = estimate_renewal(
            &spec(),
            Side::V,
            &uniform_grid(Side::V, 12.0, 0.05),
            &vopts,
            &mc,
        )
        .unwrap();
        for x in [-2.0, -1.0, -0.5] {
            let r = check_harmonicity(&v, x).unwrap();
            assert!(r.within(0.0, 3.0), "v x={x} {r:?}");
        }
        let v0 = v.v_at_zero.unwrap();
        assert!(
            v0.value > 0.9 && v0.value <= 1.0 + 3.0 * v0.stderr,
            "{v0:?}"
        );
    }

    #[test]
    fn csv_export() {
        let opts = RenewalOptions {
            samples: 1_000,
            fixed_k: Some(10),
            ..Default::default()
        };
        let u = estimate_renewal(&spec(), Side::U, &[1.0], &opts, &MonteCarlo::new(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.csv");
        u.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("x,value,stderr,side"));
        assert!(lines.next().unwrap().starts_with("0,1,0,u"));
    }
}
