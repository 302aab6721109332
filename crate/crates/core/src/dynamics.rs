//! Birth–death rate equation for the vibrational populations.
//!
//! ```text
//! dp_n/dt = η²A₊[n p_{n−1} − (n+1) p_n] + η²A₋[(n+1) p_{n+1} − n p_n]
//! ```
//!
//! The ladder is truncated at `N` levels with no heating out of the top
//! level, so total probability is conserved exactly; the top-level
//! population is monitored as the truncation leakage.

use std::io::{self, Write};
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ode::{Dopri5, OdeError, Tolerances};
use crate::rates::{RateResult, Regime};
use crate::sweep::format_float;

pub const DEFAULT_LEAK_BOUND: f64 = 1e-8;
pub const MIN_TRUNCATION: usize = 20;
const MAX_TRUNCATION: usize = 1 << 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("truncation leakage: top level population {population:e} exceeds {bound:e} at N = {truncation}")]
    TruncationLeak { truncation: usize, population: f64, bound: f64 },
    #[error("no steady state in the {0:?} regime")]
    NoSteadyState(Regime),
    #[error("target ground occupation {target} is unreachable (steady state {steady})")]
    Unreachable { target: f64, steady: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// Occupations `p_n`, `n = 0..N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationVector {
    pub p: Vec<f64>,
}

/// Smallest truncation whose dropped thermal tail `r^N` stays below 1e-12.
fn default_truncation(nbar: f64) -> usize {
    if nbar <= 0.0 {
        return MIN_TRUNCATION;
    }
    let r = nbar / (1.0 + nbar);
    MIN_TRUNCATION.max((1e-12f64.ln() / r.ln()).ceil() as usize)
}

impl PopulationVector {
    pub fn new(p: Vec<f64>) -> Result<Self, DynamicsError> {
        let v = Self { p };
        v.check()?;
        Ok(v)
    }

    /// Pure Fock state `|n⟩`.
    pub fn fock(n: usize, truncation: Option<usize>) -> Result<Self, DynamicsError> {
        let size = truncation.unwrap_or_else(|| MIN_TRUNCATION.max(10 * n));
        if n >= size {
            return Err(DynamicsError::InvalidInput(format!("Fock level {n} outside truncation {size}")));
        }
        let mut p = vec![0.0; size];
        p[n] = 1.0;
        Ok(Self { p })
    }

    /// Thermal distribution with mean `nbar`, truncated and renormalized.
    pub fn thermal(nbar: f64, truncation: Option<usize>) -> Result<Self, DynamicsError> {
        if !(nbar >= 0.0 && nbar.is_finite()) {
            return Err(DynamicsError::InvalidInput(format!("thermal mean must be non-negative, got {nbar}")));
        }
        let size = truncation.unwrap_or_else(|| default_truncation(nbar));
        if size == 0 {
            return Err(DynamicsError::InvalidInput("empty truncation".into()));
        }
        let r = nbar / (1.0 + nbar);
        Ok(Self::geometric(r, size))
    }

    fn geometric(r: f64, size: usize) -> Self {
        let mut p: Vec<f64> = std::iter::successors(Some(1.0), |x| Some(x * r)).take(size).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        Self { p }
    }

    pub fn truncation(&self) -> usize {
        self.p.len()
    }

    pub fn mean(&self) -> f64 {
        self.p.iter().enumerate().map(|(n, p)| n as f64 * p).sum()
    }

    pub fn ground(&self) -> f64 {
        self.p[0]
    }

    pub fn total(&self) -> f64 {
        self.p.iter().sum()
    }

    pub fn leakage(&self) -> f64 {
        *self.p.last().unwrap_or(&0.0)
    }

    /// Zero-padded copy with `size` levels.
    pub fn extended(&self, size: usize) -> Self {
        let mut p = self.p.clone();
        p.resize(size.max(p.len()), 0.0);
        Self { p }
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        let n = self.p.len().max(other.p.len());
        let get = |v: &Vec<f64>, i: usize| v.get(i).copied().unwrap_or(0.0);
        0.5 * (0..n).map(|i| (get(&self.p, i) - get(&other.p, i)).abs()).sum::<f64>()
    }

    fn check(&self) -> Result<(), DynamicsError> {
        if self.p.is_empty() {
            return Err(DynamicsError::InvalidInput("empty population vector".into()));
        }
        if let Some((n, x)) = self.p.iter().enumerate().find(|(_, x)| !(**x >= 0.0)) {
            return Err(DynamicsError::InvalidInput(format!("p_{n} = {x} is negative")));
        }
        let s = self.total();
        if (s - 1.0).abs() > 1e-9 {
            return Err(DynamicsError::InvalidInput(format!("populations sum to {s}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolveOptions {
    pub tol: Tolerances,
    pub leak_bound: f64,
    /// Double the truncation and restart when the leak bound is crossed.
    pub auto_truncate: bool,
    /// Number of uniformly spaced samples, including both end points.
    pub samples: usize,
    pub store_populations: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self {
            tol: Tolerances { rtol: 1e-8, atol: 1e-14, ..Tolerances::default() },
            leak_bound: DEFAULT_LEAK_BOUND,
            auto_truncate: true,
            samples: 101,
            store_populations: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoolingTrajectory {
    /// Sample times in units of 1/ν.
    pub times: Vec<f64>,
    pub mean_n: Vec<f64>,
    pub ground_occupation: Vec<f64>,
    pub leakage: Vec<f64>,
    pub populations: Option<Vec<Vec<f64>>>,
    pub truncation: usize,
    /// Most negative population met anywhere along the integration.
    pub min_population: f64,
    /// Largest deviation of the total probability from one.
    pub max_norm_error: f64,
}

impl CoolingTrajectory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "time,mean_n,p0,leakage")?;
        for i in 0..self.times.len() {
            writeln!(
                w,
                "{},{},{},{}",
                format_float(self.times[i]),
                format_float(self.mean_n[i]),
                format_float(self.ground_occupation[i]),
                format_float(self.leakage[i])
            )?;
        }
        Ok(())
    }
}

/// Right-hand side of the truncated rate equation.
#[derive(Debug, Clone, Copy)]
struct Ladder {
    up: f64,
    down: f64,
}

impl Ladder {
    fn new(r: &RateResult, eta: f64) -> Self {
        let e2 = eta * eta;
        Self { up: e2 * r.a_plus, down: e2 * r.a_minus }
    }

    fn rhs(&self, p: &[f64], dp: &mut [f64]) {
        let top = p.len() - 1;
        for n in 0..p.len() {
            let nf = n as f64;
            let mut d = -self.down * nf * p[n];
            if n < top {
                d -= self.up * (nf + 1.0) * p[n];
                d += self.down * (nf + 1.0) * p[n + 1];
            }
            if n > 0 {
                d += self.up * nf * p[n - 1];
            }
            dp[n] = d;
        }
    }
}

fn check_rates(r: &RateResult, eta: f64) -> Result<(), DynamicsError> {
    if !(r.a_plus >= 0.0 && r.a_minus >= 0.0 && eta >= 0.0) || !(r.a_plus + r.a_minus + eta).is_finite() {
        return Err(DynamicsError::InvalidInput("rates and eta must be finite and non-negative".into()));
    }
    Ok(())
}

pub fn evolve(
    p0: &PopulationVector,
    rates: &RateResult,
    eta: f64,
    t_final: f64,
    opts: &EvolveOptions,
) -> Result<CoolingTrajectory, DynamicsError> {
    p0.check()?;
    check_rates(rates, eta)?;
    if !(t_final > 0.0 && t_final.is_finite()) {
        return Err(DynamicsError::InvalidInput(format!("t_final must be positive, got {t_final}")));
    }
    let mut start = p0.clone();
    loop {
        match evolve_fixed(&start, rates, eta, t_final, opts) {
            Err(DynamicsError::TruncationLeak { truncation, .. })
                if opts.auto_truncate && truncation * 2 <= MAX_TRUNCATION =>
            {
                start = start.extended(truncation * 2);
            }
            other => return other,
        }
    }
}

fn evolve_fixed(
    p0: &PopulationVector,
    rates: &RateResult,
    eta: f64,
    t_final: f64,
    opts: &EvolveOptions,
) -> Result<CoolingTrajectory, DynamicsError> {
    let ladder = Ladder::new(rates, eta);
    let n = p0.truncation();
    let samples = opts.samples.max(2);
    let mut traj = CoolingTrajectory {
        times: Vec::with_capacity(samples),
        mean_n: Vec::with_capacity(samples),
        ground_occupation: Vec::with_capacity(samples),
        leakage: Vec::with_capacity(samples),
        populations: opts.store_populations.then(Vec::new),
        truncation: n,
        min_population: p0.p.iter().copied().fold(f64::INFINITY, f64::min),
        max_norm_error: (p0.total() - 1.0).abs(),
    };
    let record = |traj: &mut CoolingTrajectory, t: f64, p: &[f64]| {
        let v = PopulationVector { p: p.to_vec() };
        traj.times.push(t);
        traj.mean_n.push(v.mean());
        traj.ground_occupation.push(v.ground());
        traj.leakage.push(v.leakage());
        if let Some(pops) = traj.populations.as_mut() {
            pops.push(v.p);
        }
    };
    record(&mut traj, 0.0, &p0.p);

    let mut stepper = Dopri5::new(0.0, p0.p.clone(), opts.tol);
    let mut rhs = |_t: f64, p: &[f64], dp: &mut [f64]| ladder.rhs(p, dp);
    let mut leak = None;
    let mut min_p = traj.min_population;
    let mut norm_err = traj.max_norm_error;
    for k in 1..samples {
        let t = t_final * k as f64 / (samples - 1) as f64;
        let flow = stepper.advance_to(t, &mut rhs, |_, p| {
            let top = p[p.len() - 1];
            min_p = p.iter().copied().fold(min_p, f64::min);
            norm_err = norm_err.max((p.iter().sum::<f64>() - 1.0).abs());
            if top > opts.leak_bound {
                leak = Some(top);
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })?;
        if flow.is_break() {
            return Err(DynamicsError::TruncationLeak {
                truncation: n,
                population: leak.unwrap_or(f64::NAN),
                bound: opts.leak_bound,
            });
        }
        record(&mut traj, t, stepper.state());
    }
    traj.min_population = min_p;
    traj.max_norm_error = norm_err;
    Ok(traj)
}

/// Truncated geometric distribution `p_n ∝ (A₊/A₋)ⁿ`.
pub fn steady_state(rates: &RateResult, truncation: usize) -> Result<PopulationVector, DynamicsError> {
    if rates.regime != Regime::Cooling {
        return Err(DynamicsError::NoSteadyState(rates.regime));
    }
    if truncation == 0 {
        return Err(DynamicsError::InvalidInput("empty truncation".into()));
    }
    Ok(PopulationVector::geometric(rates.a_plus / rates.a_minus, truncation))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundOccupation {
    /// `1 − A₊/A₋`.
    pub closed_form: f64,
    /// `p_0` of the distribution truncated at the requested size.
    pub truncated: f64,
}

pub fn ground_state_occupation(rates: &RateResult, truncation: usize) -> Result<GroundOccupation, DynamicsError> {
    let ss = steady_state(rates, truncation)?;
    Ok(GroundOccupation { closed_form: 1.0 - rates.a_plus / rates.a_minus, truncated: ss.ground() })
}

/// Earliest time at which the ground occupation reaches `target`.
///
/// The trajectory is marched until the target is crossed, then the crossing
/// is refined by bisection, re-integrating from the last state before it.
pub fn time_to_occupation(
    p0: &PopulationVector,
    rates: &RateResult,
    eta: f64,
    target: f64,
    opts: &EvolveOptions,
) -> Result<f64, DynamicsError> {
    p0.check()?;
    check_rates(rates, eta)?;
    if p0.ground() >= target {
        return Ok(0.0);
    }
    if rates.regime != Regime::Cooling || eta == 0.0 {
        return Err(DynamicsError::Unreachable { target, steady: p0.ground() });
    }
    let steady = 1.0 - rates.a_plus / rates.a_minus;
    if target >= steady {
        return Err(DynamicsError::Unreachable { target, steady });
    }

    let ladder = Ladder::new(rates, eta);
    let mut rhs = |_t: f64, p: &[f64], dp: &mut [f64]| ladder.rhs(p, dp);
    let mut start = p0.clone();
    let (t_lo, p_lo, t_hi) = 'outer: loop {
        let n = start.truncation();
        let mut stepper = Dopri5::new(0.0, start.p.clone(), opts.tol);
        let mut prev = (0.0, start.p.clone());
        let mut crossed = None;
        let mut leaked = false;
        loop {
            let flow = stepper.advance_to(f64::INFINITY, &mut rhs, |t, p| {
                if p[n - 1] > opts.leak_bound {
                    leaked = true;
                    ControlFlow::Break(())
                } else if p[0] >= target {
                    crossed = Some(t);
                    ControlFlow::Break(())
                } else {
                    prev = (t, p.to_vec());
                    ControlFlow::Continue(())
                }
            })?;
            debug_assert!(flow.is_break());
            if leaked {
                if opts.auto_truncate && n * 2 <= MAX_TRUNCATION {
                    start = start.extended(n * 2);
                    continue 'outer;
                }
                return Err(DynamicsError::TruncationLeak {
                    truncation: n,
                    population: stepper.state()[n - 1],
                    bound: opts.leak_bound,
                });
            }
            if let Some(t) = crossed {
                break 'outer (prev.0, prev.1, t);
            }
        }
    };

    // bisection on the elapsed time from the last state below target
    let (mut lo, mut hi) = (0.0, t_hi - t_lo);
    while hi - lo > 1e-12 * t_hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        let mut s = Dopri5::new(0.0, p_lo.clone(), opts.tol);
        let _ = s.advance_to(mid, &mut rhs, |_, _| ControlFlow::Continue(()))?;
        if s.state()[0] >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(t_lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rr(a_plus: f64, a_minus: f64) -> RateResult {
        RateResult::from_coefficients(a_plus, a_minus, 1.0)
    }

    /// Mean phonon number from the closed linear ODE d⟨n⟩/dt = −W⟨n⟩ + η²A₊.
    fn mean_oracle(n0: f64, a_plus: f64, a_minus: f64, eta: f64, t: f64) -> f64 {
        let w = eta * eta * (a_minus - a_plus);
        let ninf = a_plus / (a_minus - a_plus);
        ninf + (n0 - ninf) * (-w * t).exp()
    }

    #[test]
    fn ground_state_stays_put_without_heating() {
        let p0 = PopulationVector::fock(0, None).unwrap();
        let t = evolve(&p0, &rr(0.0, 1.0), 0.1, 100.0, &EvolveOptions::default()).unwrap();
        assert!(t.ground_occupation.iter().all(|&g| g == 1.0));
        assert!(t.mean_n.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn zero_eta_freezes() {
        let p0 = PopulationVector::thermal(2.0, None).unwrap();
        let t = evolve(&p0, &rr(0.5, 1.0), 0.0, 50.0, &EvolveOptions::default()).unwrap();
        let m0 = p0.mean();
        assert!(t.mean_n.iter().all(|&m| (m - m0).abs() < 1e-15));
    }

    #[test]
    fn mean_follows_closed_form() {
        let p0 = PopulationVector::thermal(2.0, None).unwrap();
        let eta = 0.1;
        let opts = EvolveOptions { store_populations: true, ..Default::default() };
        let t = evolve(&p0, &rr(0.5, 1.0), eta, 2000.0, &opts).unwrap();
        assert!(t.leakage.iter().all(|&l| l < DEFAULT_LEAK_BOUND));
        let n0 = t.mean_n[0];
        for (time, m) in t.times.iter().zip(&t.mean_n) {
            let want = mean_oracle(n0, 0.5, 1.0, eta, *time);
            assert!((m - want).abs() <= 1e-6 * want, "t = {time}: {m} vs {want}");
        }
        assert!(t.max_norm_error < 1e-9);
        assert!(t.min_population > -1e-12, "{}", t.min_population);
        for p in t.populations.as_ref().unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn leak_without_auto_truncation_errors() {
        let p0 = PopulationVector::fock(0, Some(5)).unwrap();
        let opts = EvolveOptions { auto_truncate: false, ..Default::default() };
        let r = evolve(&p0, &rr(2.0, 1.0), 0.3, 100.0, &opts);
        assert!(matches!(r, Err(DynamicsError::TruncationLeak { truncation: 5, .. })));
    }

    #[test]
    fn long_time_limit_is_steady_state() {
        let r = rr(0.3, 1.0);
        let p0 = PopulationVector::fock(3, Some(40)).unwrap();
        let t = evolve(&p0, &r, 1.0, 200.0, &EvolveOptions { store_populations: true, ..Default::default() }).unwrap();
        let last = PopulationVector { p: t.populations.unwrap().pop().unwrap() };
        let ss = steady_state(&r, last.truncation()).unwrap();
        assert!(last.total_variation(&ss) < 1e-6);
    }

    #[test]
    fn steady_state_examples() {
        let ss = steady_state(&rr(0.5, 1.0), 200).unwrap();
        assert!((ss.mean() - 1.0).abs() < 1e-12);
        let ss = steady_state(&rr(0.0, 1.0), 10).unwrap();
        assert_eq!(ss.p[0], 1.0);
        assert!(matches!(steady_state(&rr(1.0, 1.0), 10), Err(DynamicsError::NoSteadyState(Regime::Marginal))));
        assert!(matches!(steady_state(&rr(2.0, 1.0), 10), Err(DynamicsError::NoSteadyState(Regime::Heating))));
    }

    #[test]
    fn ground_occupation_examples() {
        let g = ground_state_occupation(&rr(0.01, 1.0), 50).unwrap();
        assert!((g.closed_form - 0.99).abs() < 1e-15);
        assert!((g.truncated - g.closed_form).abs() < 1e-15);
        assert_eq!(ground_state_occupation(&rr(0.0, 1.0), 5).unwrap().closed_form, 1.0);
        assert!(ground_state_occupation(&rr(1.0, 0.5), 5).is_err());
    }

    #[test]
    fn time_to_occupation_edges() {
        let r = rr(0.1, 1.0);
        let opts = EvolveOptions::default();
        let p0 = PopulationVector::fock(0, None).unwrap();
        assert_eq!(time_to_occupation(&p0, &r, 0.1, 0.5, &opts).unwrap(), 0.0);
        let hot = PopulationVector::thermal(3.0, None).unwrap();
        assert!(matches!(time_to_occupation(&hot, &r, 0.1, 0.95, &opts), Err(DynamicsError::Unreachable { .. })));
    }

    #[test]
    fn time_to_occupation_matches_thermal_closed_form() {
        // a thermal start stays thermal, so p0(t) = 1/(1 + ⟨n⟩(t))
        let (ap, am, eta) = (0.05, 1.0, 0.2);
        let p0 = PopulationVector::thermal(4.0, Some(400)).unwrap();
        let n0 = p0.mean();
        let target = 0.9;
        let w = eta * eta * (am - ap);
        let ninf = ap / (am - ap);
        let n_target = 1.0 / target - 1.0;
        let want = ((n0 - ninf) / (n_target - ninf)).ln() / w;
        let got = time_to_occupation(&p0, &rr(ap, am), eta, target, &EvolveOptions::default()).unwrap();
        assert!((got - want).abs() < 0.05 * want, "{got} vs {want}");
        assert!((got - want).abs() < 1e-5 * want, "{got} vs {want}");
    }

    #[test]
    fn constructors_validate() {
        assert!(PopulationVector::new(vec![0.5, 0.6]).is_err());
        assert!(PopulationVector::new(vec![1.1, -0.1]).is_err());
        assert_eq!(PopulationVector::fock(25, None).unwrap().truncation(), 250);
        assert!(PopulationVector::fock(5, Some(5)).is_err());
        let th = PopulationVector::thermal(5.0, None).unwrap();
        assert_eq!(th.truncation(), 152);
        assert!((th.mean() - 5.0).abs() < 1e-9);
        assert!(PopulationVector::thermal(-1.0, None).is_err());
    }

    #[test]
    fn trajectory_csv_header() {
        let p0 = PopulationVector::fock(1, None).unwrap();
        let t = evolve(&p0, &rr(0.0, 1.0), 0.5, 1.0, &EvolveOptions { samples: 3, ..Default::default() }).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("time,mean_n,p0,leakage\n"));
        assert_eq!(s.lines().count(), 4);
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(32))]
        #[test]
        fn trajectories_conserve_probability(
            a_plus in 0.0..2.0f64,
            a_minus in 0.0..2.0f64,
            eta in 0.01..0.5f64,
            n0 in 0.0..4.0f64,
            span in 0.1..3.0f64,
        ) {
            // a few rate times, so heating runs stay bounded
            let t_final = span / (eta * eta * (a_plus + a_minus + 0.1));
            let p0 = PopulationVector::thermal(n0, None).unwrap();
            let t = evolve(&p0, &RateResult::from_coefficients(a_plus, a_minus, eta), eta, t_final, &EvolveOptions::default()).unwrap();
            proptest::prop_assert!(t.max_norm_error < 1e-9, "{}", t.max_norm_error);
            proptest::prop_assert!(t.min_population >= -1e-12, "{}", t.min_population);
            proptest::prop_assert!(t.times.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn cooling_mean_matches_closed_form(
            a_plus in 0.0..0.9f64,
            gap in 0.05..2.0f64,
            eta in 0.05..0.3f64,
            n0 in 0.0..3.0f64,
        ) {
            let a_minus = a_plus + gap;
            let p0 = PopulationVector::thermal(n0, None).unwrap();
            let w = eta * eta * gap;
            let t = evolve(&p0, &RateResult::from_coefficients(a_plus, a_minus, eta), eta, 3.0 / w, &EvolveOptions::default()).unwrap();
            let m0 = t.mean_n[0];
            for (time, m) in t.times.iter().zip(&t.mean_n) {
                let want = mean_oracle(m0, a_plus, a_minus, eta, *time);
                proptest::prop_assert!((m - want).abs() <= 1e-6 * want.max(1e-12), "t = {}: {} vs {}", time, m, want);
            }
        }
    }
}
