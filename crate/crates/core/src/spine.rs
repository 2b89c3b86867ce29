//! Branching tree with a distinguished spine: the spine particle reproduces
//! by the size-biased law, everybody else by the ordinary one. Side
//! populations are kept as generation counts.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::Environment;
use crate::error::{Error, Result};
use crate::offspring::OffspringLaw;
use crate::stats::{proportion, Estimate, MeanAccumulator};
use crate::walk::{path_stats, WalkPath};

#[derive(Clone, Debug, PartialEq)]
pub struct SpineTrace {
    /// The full environment; only the first `horizon` laws have been used.
    pub env: Environment,
    pub walk: WalkPath,
    /// Offspring of the spine particle, one entry per generation `1..=horizon`.
    pub spine_offspring: Vec<u64>,
    /// `sides[i][j]` is the population at generation `i + 1 + j` of the side
    /// tree rooted at the spine's non-spine children in generation `i + 1`.
    /// Stored until the side tree dies out; missing entries are zero.
    sides: Vec<Vec<u64>>,
    /// `Z~_0..Z~_horizon`.
    pub totals: Vec<u64>,
    /// Simulation stopped early because a total exceeded the cap.
    pub capped: bool,
}

impl SpineTrace {
    pub fn horizon(&self) -> usize {
        self.totals.len() - 1
    }

    /// `Z~_k^i`, zero for `i >= k`.
    pub fn side(&self, k: usize, i: usize) -> u64 {
        if i >= k || i >= self.sides.len() {
            return 0;
        }
        self.sides[i].get(k - i - 1).copied().unwrap_or(0)
    }

    /// Checks `Z~_k = 1 + sum_i Z~_k^i` for every simulated generation.
    pub fn representation_holds(&self) -> bool {
        (0..=self.horizon()).all(|k| {
            let sum: u128 = (0..k).map(|i| u128::from(self.side(k, i))).sum();
            u128::from(self.totals[k]) == 1 + sum
        })
    }

    /// Drops everything after generation `k >= 1`.
    pub fn truncate(&mut self, k: usize) {
        if k == 0 || k >= self.horizon() {
            return;
        }
        self.drop_after(k);
    }

    fn drop_after(&mut self, k: usize) {
        self.totals.truncate(k + 1);
        self.spine_offspring.truncate(k);
        self.sides.truncate(k);
        for (i, side) in self.sides.iter_mut().enumerate() {
            side.truncate(k - i);
        }
        self.walk = path_stats(0.0, &self.env.increments[..k]).expect("prefix of a valid walk");
        self.capped = false;
    }

    /// Continues the simulation from the current horizon to `horizon`.
    pub fn resume<R: Rng + ?Sized>(
        &mut self,
        horizon: usize,
        rng: &mut R,
        cap: Option<u64>,
    ) -> Result<()> {
        if horizon > self.env.len() {
            return Err(Error::invalid(
                "horizon",
                format!("environment has only {} laws", self.env.len()),
            ));
        }
        if self.capped {
            return Err(Error::Precondition(
                "cannot resume a capped spine trace".into(),
            ));
        }
        for k in self.horizon() + 1..=horizon {
            match self.step(k, rng) {
                Ok(total) => {
                    if cap.is_some_and(|c| total > c) {
                        self.capped = true;
                        break;
                    }
                }
                // any overflow is above the cap
                Err(Error::PopulationOverflow { .. }) if cap.is_some() => {
                    self.drop_after(k - 1);
                    self.capped = true;
                    return Ok(());
                }
                Err(e) => return Err(e),
            }
        }
        self.walk = path_stats(0.0, &self.env.increments[..self.horizon()])?;
        Ok(())
    }

    /// Adds generation `k` and returns its total.
    fn step<R: Rng + ?Sized>(&mut self, k: usize, rng: &mut R) -> Result<u64> {
        let law = &self.env.laws[k - 1];
        for (i, side) in self.sides.iter_mut().enumerate() {
            if side.len() == k - i - 1 && side.last().is_some_and(|z| *z > 0) {
                let z = law
                    .sample_total(*side.last().expect("checked"), rng)
                    .map_err(|e| overflow_at(e, k))?;
                if z > 0 {
                    side.push(z);
                }
            }
        }
        let spine = law.size_bias()?.sample(rng);
        self.spine_offspring.push(spine);
        self.sides.push(if spine > 1 {
            vec![spine - 1]
        } else {
            Vec::new()
        });
        let mut total = 1u64;
        for i in 0..k {
            total = total
                .checked_add(self.side(k, i))
                .ok_or(Error::PopulationOverflow { generation: k })?;
        }
        self.totals.push(total);
        Ok(total)
    }

    /// `(k, Z~_k, S_k)` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["k", "total", "s_k"])?;
        for (k, z) in self.totals.iter().enumerate() {
            w.write_record([k.to_string(), z.to_string(), self.walk.sums[k].to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Nonzero `(k, i, Z~_k^i)` entries.
    pub fn write_sides_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["k", "i", "count"])?;
        for (i, side) in self.sides.iter().enumerate() {
            for (j, z) in side.iter().enumerate() {
                w.write_record([(i + 1 + j).to_string(), i.to_string(), z.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn overflow_at(e: Error, generation: usize) -> Error {
    match e {
        Error::PopulationOverflow { .. } => Error::PopulationOverflow { generation },
        other => other,
    }
}

/// Simulates the spine tree through the first `horizon` laws of `env`.
pub fn simulate_spine<R: Rng + ?Sized>(
    env: &Environment,
    horizon: usize,
    rng: &mut R,
    cap: Option<u64>,
) -> Result<SpineTrace> {
    if horizon == 0 || horizon > env.len() {
        return Err(Error::invalid(
            "horizon",
            format!("need 1 <= horizon <= {}", env.len()),
        ));
    }
    if env.laws.iter().any(|l| l.mean() <= 0.0) {
        return Err(Error::DegenerateMean);
    }
    let mut trace = SpineTrace {
        env: env.clone(),
        walk: path_stats(0.0, &env.increments[..horizon])?,
        spine_offspring: Vec::with_capacity(horizon),
        sides: Vec::with_capacity(horizon),
        totals: vec![1],
        capped: false,
    };
    trace.resume(horizon, rng, cap)?;
    Ok(trace)
}

/// `e^{-S_k} Z~_k` for `k = 0..=horizon`.
pub fn wplus_trajectory(trace: &SpineTrace) -> Vec<f64> {
    trace
        .totals
        .iter()
        .zip(&trace.walk.sums)
        .map(|(z, s)| *z as f64 * (-s).exp())
        .collect()
}

/// Both sides of the maximal inequality for the side mass born after `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    /// Frequency of `sup_{m > k} e^{-S_m} sum_{i=k}^{m-1} Z~_m^i >= eps`.
    pub exceedance: Estimate,
    /// `(1/eps) E[1 ∧ sum_{i >= k} eta_{i+1} e^{-S_i}]`.
    pub bound: Estimate,
    pub holds: bool,
}

/// Per-trace terms of [`spine_submartingale_bound`]: whether the side mass
/// born after `k` exceeded `eps`, and `(1/eps) (1 ∧ sum_{i>=k} eta_{i+1} e^{-S_i})`.
pub fn submartingale_terms(trace: &SpineTrace, k: usize, eps: f64) -> Result<(bool, f64)> {
    let n = trace.horizon();
    let s = &trace.walk.sums;
    let exceeded = (k + 1..=n).any(|m| {
        let mass: f64 = (k..m).map(|i| trace.side(m, i) as f64).sum();
        mass * (-s[m]).exp() >= eps
    });
    let mut series = 0.0;
    for (law, si) in trace.env.laws.iter().zip(s).take(n).skip(k) {
        series += law.eta()? * (-si).exp();
    }
    Ok((exceeded, series.min(1.0) / eps))
}

pub fn spine_submartingale_bound(traces: &[SpineTrace], k: usize, eps: f64) -> Result<BoundCheck> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::invalid("eps", "need 0 < eps < 1"));
    }
    if traces.is_empty() {
        return Err(Error::ZeroEffectiveSample);
    }
    let mut hits = 0u64;
    let mut rhs = MeanAccumulator::default();
    for t in traces {
        let (exceeded, bound) = submartingale_terms(t, k, eps)?;
        hits += u64::from(exceeded);
        rhs.push(bound);
    }
    Ok(BoundCheck::from_parts(
        proportion(hits, traces.len() as u64),
        rhs.estimate(),
    ))
}

impl BoundCheck {
    pub fn from_parts(exceedance: Estimate, bound: Estimate) -> Self {
        let holds = exceedance.value <= bound.value + 3.0 * exceedance.joint_stderr(&bound);
        BoundCheck {
            exceedance,
            bound,
            holds,
        }
    }
}

/// Window quantities around the minimum position `tau_r` of `S_0..S_r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaBeta {
    pub tau: usize,
    /// `sum_{|i - tau| <= a} Z~_r^i`.
    pub z_hat_r: u64,
    /// `sum_{|i - tau| <= a} Z~_{tau+a}^i` when `tau + a <= r`.
    pub z_hat_tau_a: Option<u64>,
    /// `e^{S_tau - S_r} Z^_{a,r}`.
    pub alpha: f64,
    /// `alpha` without the side tree born at generation `tau + a + 1`, which
    /// is empty at time `tau + a`.
    pub alpha_carried: f64,
    /// `e^{S_tau - S_{tau+a}} Z^_{a,tau+a}`.
    pub beta: Option<f64>,
    pub window_in_range: bool,
}

pub fn alpha_beta(trace: &SpineTrace, a: usize, r: usize) -> Result<AlphaBeta> {
    if r == 0 || r > trace.horizon() {
        return Err(Error::invalid(
            "r",
            format!("need 1 <= r <= {}", trace.horizon()),
        ));
    }
    let s = &trace.walk.sums;
    let mut tau = 0;
    for k in 1..=r {
        if s[k] < s[tau] {
            tau = k;
        }
    }
    let lo = tau.saturating_sub(a);
    let window = |k: usize, hi: usize| -> u64 {
        (lo..=hi.min(k.saturating_sub(1)))
            .map(|i| trace.side(k, i))
            .sum()
    };
    let z_hat_r = if r == 0 { 0 } else { window(r, tau + a) };
    let carried = if tau + a >= 1 {
        window(r, (tau + a).saturating_sub(1))
    } else {
        0
    };
    let scale = (s[tau] - s[r]).exp();
    let in_range = tau + a <= r;
    let (z_hat_tau_a, beta) = if in_range {
        let z = window(tau + a, tau + a);
        (Some(z), Some((s[tau] - s[tau + a]).exp() * z as f64))
    } else {
        (None, None)
    };
    Ok(AlphaBeta {
        tau,
        z_hat_r,
        z_hat_tau_a,
        alpha: scale * z_hat_r as f64,
        alpha_carried: if in_range {
            scale * carried as f64
        } else {
            scale * z_hat_r as f64
        },
        beta,
        window_in_range: in_range,
    })
}

/// `E[Z~_n^i | Pi] = eta_{i+1} e^{S_n - S_i}` for a fixed environment.
pub fn side_mean(env: &Environment, i: usize, n: usize) -> Result<f64> {
    if i >= n || n > env.len() {
        return Err(Error::invalid("i", format!("need i < n <= {}", env.len())));
    }
    let law: &OffspringLaw = &env.laws[i];
    let drift: f64 = env.increments[i..n].iter().sum();
    Ok(law.eta()? * law.mean() * (drift - env.increments[i]).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{EnvironmentSpec, Measure};
    use crate::parallel::{MonteCarlo, Tag};
    use crate::stats::linear_regression;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn point_env(k: u64, n: usize) -> Environment {
        Environment::from_laws(vec![OffspringLaw::point_mass(k); n]).unwrap()
    }

    #[test]
    fn overflow_counts_as_capped() {
        let env = point_env(1 << 40, 4);
        let mut rng = StdRng::seed_from_u64(1);
        let t = simulate_spine(&env, 4, &mut rng, Some(1 << 62)).unwrap();
        assert!(t.capped);
        assert_eq!(t.horizon(), 1);
        assert!(t.representation_holds());
        assert!(matches!(
            simulate_spine(&env, 4, &mut rng, None),
            Err(Error::PopulationOverflow { generation: 2 })
        ));
    }

    #[test]
    fn point_mass_trees() {
        let mut rng = MonteCarlo::new(1).stream(Tag::new("t"), 0);
        let t = simulate_spine(&point_env(1, 8), 8, &mut rng, None).unwrap();
        assert_eq!(t.totals, vec![1; 9]);
        assert!((0..=8).all(|k| (0..k).all(|i| t.side(k, i) == 0)));
        assert!(wplus_trajectory(&t).iter().all(|w| *w == 1.0));
        let ab = alpha_beta(&t, 2, 8).unwrap();
        assert_eq!((ab.alpha, ab.beta), (0.0, Some(0.0)));

        let t = simulate_spine(&point_env(2, 10), 10, &mut rng, None).unwrap();
        assert_eq!(t.totals[10], 1024);
        assert!(t.representation_holds());
        for w in wplus_trajectory(&t) {
            assert!((w - 1.0).abs() < 1e-12);
        }
        let none = spine_submartingale_bound(
            &[simulate_spine(&point_env(1, 5), 5, &mut rng, None).unwrap()],
            0,
            0.5,
        )
        .unwrap();
        assert_eq!(none.exceedance.value, 0.0);
    }

    #[test]
    fn wide_window_covers_everything() {
        let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        let mc = MonteCarlo::new(2);
        let mut rng = mc.stream(Tag::new("w"), 0);
        for _ in 0..50 {
            let env = spec
                .sample_environment(Measure::Tilted, 12, &mut rng)
                .unwrap();
            let t = simulate_spine(&env, 12, &mut rng, None).unwrap();
            let ab = alpha_beta(&t, 12, 12).unwrap();
            assert_eq!(ab.z_hat_r, t.totals[12] - 1);
        }
    }

    #[test]
    fn side_means_match_closed_form() {
        let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        let mc = MonteCarlo::new(4);
        let env = spec
            .sample_environment(Measure::Tilted, 10, &mut mc.stream(Tag::new("env"), 0))
            .unwrap();
        let pairs = [(0usize, 5usize), (2, 10), (4, 7)];
        let traces = mc
            .collect(Tag::new("sides"), 100_000, |rng| {
                simulate_spine(&env, 10, rng, None)
            })
            .unwrap();
        for (i, n) in pairs {
            let mut acc = MeanAccumulator::default();
            for t in &traces {
                acc.push(t.side(n, i) as f64);
            }
            let target = side_mean(&env, i, n).unwrap();
            let e = acc.estimate();
            assert!(e.within(target, 3.0), "({i},{n}): {e:?} vs {target}");
        }
        assert!(traces.iter().all(SpineTrace::representation_holds));
    }

    #[test]
    fn truncate_then_resume_keeps_prefix() {
        let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        let mut rng = MonteCarlo::new(5).stream(Tag::new("r"), 0);
        let env = spec
            .sample_environment(Measure::Tilted, 20, &mut rng)
            .unwrap();
        let full = simulate_spine(&env, 20, &mut rng, None).unwrap();
        let mut t = full.clone();
        t.truncate(7);
        assert_eq!(t.horizon(), 7);
        assert_eq!(&t.totals[..], &full.totals[..8]);
        assert!(t.representation_holds());
        t.resume(20, &mut rng, None).unwrap();
        assert_eq!(t.horizon(), 20);
        assert!(t.representation_holds());
        assert_eq!(&t.totals[..8], &full.totals[..8]);
    }

    #[test]
    fn carried_alpha_regresses_on_beta() {
        // replicas share (Pi, Z^_{a,tau+a}) and differ after tau + a
        let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        let mc = MonteCarlo::new(6);
        let (a, r) = (2usize, 16usize);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut rng = mc.stream(Tag::new("ab"), 0);
        while xs.len() < 40_000 {
            let env = spec
                .sample_environment(Measure::Tilted, r, &mut rng)
                .unwrap();
            let mut base = simulate_spine(&env, r, &mut rng, None).unwrap();
            let tau = alpha_beta(&base, a, r).unwrap().tau;
            if tau + a > r {
                continue;
            }
            base.truncate(tau + a);
            for _ in 0..20 {
                let mut t = base.clone();
                t.resume(r, &mut rng, None).unwrap();
                let ab = alpha_beta(&t, a, r).unwrap();
                xs.push(ab.beta.unwrap());
                ys.push(ab.alpha_carried);
            }
        }
        let (intercept, slope) = linear_regression(&xs, &ys);
        assert!(slope.within(1.0, 3.0), "{slope:?}");
        assert!(intercept.within(0.0, 3.0), "{intercept:?}");
    }

    #[test]
    fn maximal_inequality_holds() {
        let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
        let mc = MonteCarlo::new(7);
        let env = spec
            .sample_environment(Measure::Tilted, 30, &mut mc.stream(Tag::new("env"), 0))
            .unwrap();
        let traces = mc
            .collect(Tag::new("mi"), 20_000, |rng| {
                simulate_spine(&env, 30, rng, None)
            })
            .unwrap();
        let c = spine_submartingale_bound(&traces, 0, 0.5).unwrap();
        assert!(c.holds, "{c:?}");
    }

    #[test]
    fn csv_exports() {
        let mut rng = MonteCarlo::new(8).stream(Tag::new("c"), 0);
        let t = simulate_spine(&point_env(2, 3), 3, &mut rng, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.write_csv(&dir.path().join("t.csv")).unwrap();
        t.write_sides_csv(&dir.path().join("s.csv")).unwrap();
        let totals = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(totals.lines().nth(4).unwrap(), "3,8,2.0794415416798357");
        let sides = std::fs::read_to_string(dir.path().join("s.csv")).unwrap();
        assert_eq!(sides.lines().count(), 1 + 3 + 2 + 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn representation_and_spine_survival(seed in 0u64..1_000_000, n in 1usize..30) {
            let spec = EnvironmentSpec::calibrate_lognormal(1.0).unwrap();
            let mut rng = MonteCarlo::new(seed).stream(Tag::new("p"), 0);
            let env = spec.sample_environment(Measure::Tilted, n, &mut rng).unwrap();
            let t = simulate_spine(&env, n, &mut rng, Some(1 << 50)).unwrap();
            prop_assert!(t.representation_holds());
            prop_assert!(t.totals.iter().all(|z| *z >= 1));
            prop_assert!(t.spine_offspring.iter().all(|k| *k >= 1));
            prop_assert!((0..=t.horizon()).all(|k| (k..k + 3).all(|i| t.side(k, i) == 0)));
        }
    }
}
