//! Adaptive Dormand–Prince 5(4) integrator for linear-ish systems of real or
//! complex ODEs stored as flat slices.

use std::ops::{Add, ControlFlow, Mul};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::C64;

pub trait OdeScalar: Copy + Default + Add<Output = Self> + Mul<f64, Output = Self> {
    fn magnitude(self) -> f64;
}

impl OdeScalar for f64 {
    fn magnitude(self) -> f64 {
        self.abs()
    }
}

impl OdeScalar for C64 {
    fn magnitude(self) -> f64 {
        self.norm()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepSizeUnderflow { t: f64, h: f64 },
    #[error("step budget of {0} steps exhausted")]
    TooManySteps(usize),
    #[error("non-finite state at t = {0}")]
    NonFinite(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, max_steps: 50_000_000 }
    }
}

const C: [f64; 6] = [1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0];
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Integrator state. The right-hand side is supplied per call so that the
/// same stepper can be resumed with borrowed generators.
pub struct Dopri5<S: OdeScalar> {
    t: f64,
    h: Option<f64>,
    y: Vec<S>,
    k: [Vec<S>; 7],
    tmp: Vec<S>,
    fsal: bool,
    tol: Tolerances,
    steps: usize,
}

impl<S: OdeScalar> Dopri5<S> {
    pub fn new(t0: f64, y0: Vec<S>, tol: Tolerances) -> Self {
        let n = y0.len();
        let z = || vec![S::default(); n];
        Self { t: t0, h: None, y: y0, k: [z(), z(), z(), z(), z(), z(), z()], tmp: z(), fsal: false, tol, steps: 0 }
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &[S] {
        &self.y
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    fn weighted_norm(&self, v: &[S], w: &[S]) -> f64 {
        let n = v.len().max(1) as f64;
        let s: f64 = v
            .iter()
            .zip(w)
            .map(|(a, b)| {
                let sc = self.tol.atol + self.tol.rtol * b.magnitude();
                (a.magnitude() / sc).powi(2)
            })
            .sum();
        (s / n).sqrt()
    }

    fn initial_step<F>(&mut self, rhs: &mut F, span: f64) -> f64
    where
        F: FnMut(f64, &[S], &mut [S]),
    {
        rhs(self.t, &self.y, &mut self.k[0]);
        self.fsal = true;
        let d0 = self.weighted_norm(&self.y, &self.y);
        let d1 = self.weighted_norm(&self.k[0], &self.y);
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        let h0 = h0.min(span.abs());
        for ((t, y), k) in self.tmp.iter_mut().zip(&self.y).zip(&self.k[0]) {
            *t = *y + *k * h0;
        }
        rhs(self.t + h0, &self.tmp, &mut self.k[1]);
        let mut diff = vec![S::default(); self.y.len()];
        for ((d, a), b) in diff.iter_mut().zip(&self.k[1]).zip(&self.k[0]) {
            *d = *a + *b * -1.0;
        }
        let d2 = self.weighted_norm(&diff, &self.y) / h0;
        let h1 = if d1.max(d2) <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / d1.max(d2)).powf(0.2) };
        (100.0 * h0).min(h1).min(span.abs())
    }

    /// Integrates up to `t_end`, calling `hook` after every accepted step.
    /// The hook may stop integration early by returning `Break`.
    pub fn advance_to<F, H>(&mut self, t_end: f64, rhs: &mut F, mut hook: H) -> Result<ControlFlow<()>, OdeError>
    where
        F: FnMut(f64, &[S], &mut [S]),
        H: FnMut(f64, &[S]) -> ControlFlow<()>,
    {
        if t_end <= self.t {
            return Ok(ControlFlow::Continue(()));
        }
        let mut h = match self.h {
            Some(h) => h,
            None => self.initial_step(rhs, t_end - self.t),
        };
        if !self.fsal {
            rhs(self.t, &self.y, &mut self.k[0]);
            self.fsal = true;
        }
        let n = self.y.len();
        while self.t < t_end {
            if self.steps >= self.tol.max_steps {
                return Err(OdeError::TooManySteps(self.tol.max_steps));
            }
            let remaining = t_end - self.t;
            let last = h >= remaining * (1.0 - 1e-12);
            let hs = if last { remaining } else { h };
            if hs <= 1e-14 * self.t.abs().max(1.0) {
                return Err(OdeError::StepSizeUnderflow { t: self.t, h: hs });
            }

            self.stage(1, &A2, hs, rhs);
            self.stage(2, &A3, hs, rhs);
            self.stage(3, &A4, hs, rhs);
            self.stage(4, &A5, hs, rhs);
            self.stage(5, &A6, hs, rhs);
            // 5th-order solution into tmp, then k7 = f(t+h, y5)
            for i in 0..n {
                let mut acc = self.y[i];
                for (j, b) in B.iter().enumerate() {
                    if *b != 0.0 {
                        acc = acc + self.k[j][i] * (hs * b);
                    }
                }
                self.tmp[i] = acc;
            }
            let (head, tail) = self.k.split_at_mut(6);
            rhs(self.t + hs, &self.tmp, &mut tail[0]);
            let k = [&head[0], &head[1], &head[2], &head[3], &head[4], &head[5], &tail[0]];

            let mut err = 0.0;
            let mut finite = true;
            for i in 0..n {
                let mut e = S::default();
                for (j, c) in E.iter().enumerate() {
                    if *c != 0.0 {
                        e = e + k[j][i] * (hs * c);
                    }
                }
                let ynew = self.tmp[i].magnitude();
                finite &= ynew.is_finite();
                let sc = self.tol.atol + self.tol.rtol * self.y[i].magnitude().max(ynew);
                err += (e.magnitude() / sc).powi(2);
            }
            if !finite {
                return Err(OdeError::NonFinite(self.t));
            }
            let err = (err / n.max(1) as f64).sqrt();
            self.steps += 1;

            if err <= 1.0 {
                self.t = if last { t_end } else { self.t + hs };
                std::mem::swap(&mut self.y, &mut self.tmp);
                self.k.swap(0, 6);
                let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
                // keep the natural step when the last one was truncated
                h = if last { h.max(hs * factor) } else { hs * factor };
                self.h = Some(h);
                if hook(self.t, &self.y).is_break() {
                    return Ok(ControlFlow::Break(()));
                }
            } else {
                h = hs * (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            }
        }
        Ok(ControlFlow::Continue(()))
    }

    fn stage<F>(&mut self, s: usize, a: &[f64], h: f64, rhs: &mut F)
    where
        F: FnMut(f64, &[S], &mut [S]),
    {
        for i in 0..self.y.len() {
            let mut acc = self.y[i];
            for (j, aj) in a.iter().enumerate() {
                acc = acc + self.k[j][i] * (h * aj);
            }
            self.tmp[i] = acc;
        }
        let t = self.t + C[s - 1] * h;
        rhs(t, &self.tmp, &mut self.k[s]);
    }
}
