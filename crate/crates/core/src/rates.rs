//! Closed-form heating and cooling coefficients.
//!
//! At second order in the Lamb-Dicke parameter the motion changes by one
//! phonon through five scattering amplitudes. Spontaneous emission carries
//! the diffusive amplitude `T_S` and the mechanical amplitudes `T_L^γ`,
//! `T_c^γ`, which interfere with each other. Cavity decay carries `T_L^κ` and
//! `T_c^κ`, which interfere among themselves only:
//!
//! ```text
//! A± = γα|T_S|² + γ|φ_L T_L^{γ,±} + φ_c T_c^{γ,±}|² + κ|φ_L T_L^{κ,±} + φ_c T_c^{κ,±}|²
//! ```
//!
//! The heating coefficient `A₊` probes the internal response at `−ν`, the
//! cooling coefficient `A₋` at `+ν`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::units::{Issue, SystemParams};
use crate::C64;

/// Poles closer than this (relative to the squared frequency scale) are rejected.
pub const POLE_TOL: f64 = 1e-12;
/// Relative width of the marginal band around `A₋ = A₊`.
pub const MARGINAL_TOL: f64 = 1e-12;
/// Excited-state population above which the weak-drive forms are flagged.
pub const WEAK_DRIVE_LIMIT: f64 = 0.01;
/// Default relative level below which an amplitude counts as suppressed.
pub const SUPPRESSION_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sideband {
    /// `n → n+1`, upper sign.
    Heating,
    /// `n → n-1`, lower sign.
    Cooling,
}

impl Sideband {
    /// Frequency argument `∓ν` at which the internal response is probed.
    pub fn offset(self) -> f64 {
        match self {
            Sideband::Heating => -1.0,
            Sideband::Cooling => 1.0,
        }
    }

    pub fn symbol(self) -> char {
        match self {
            Sideband::Heating => '+',
            Sideband::Cooling => '-',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// `f(0)`
    Carrier,
    /// `f(-ν)`
    Blue,
    /// `f(+ν)`
    Red,
}

impl Denominator {
    fn at(x: f64) -> Self {
        if x == 0.0 {
            Denominator::Carrier
        } else if x < 0.0 {
            Denominator::Blue
        } else {
            Denominator::Red
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum RateError {
    #[error("singular point: denominator {which:?} vanishes (|f| = {magnitude:e})")]
    Singular { which: Denominator, magnitude: f64 },
    #[error("optimal detuning undefined at delta_c = {delta_c} (pole at delta_c = -nu)")]
    OptimalDetuningPole { delta_c: f64 },
}

/// `f(x) = (x + δc + iκ/2)(x + Δ + iγ/2) − g²`.
pub fn f(x: f64, p: &SystemParams) -> C64 {
    C64::new(x + p.delta_c, 0.5 * p.kappa) * C64::new(x + p.delta, 0.5 * p.gamma) - p.g * p.g
}

fn checked_f(x: f64, p: &SystemParams) -> Result<C64, RateError> {
    let v = f(x, p);
    let scale = p.frequency_scale();
    if v.norm() < POLE_TOL * scale * scale || !v.is_finite() {
        return Err(RateError::Singular { which: Denominator::at(x), magnitude: v.norm() });
    }
    Ok(v)
}

/// The five scattering amplitudes for one sideband.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeSet {
    pub sign: Sideband,
    pub t_s: C64,
    pub t_l_gamma: C64,
    pub t_l_kappa: C64,
    pub t_c_gamma: C64,
    pub t_c_kappa: C64,
}

impl AmplitudeSet {
    /// Interfering spontaneous-emission amplitude `φ_L T_L^γ + φ_c T_c^γ`.
    pub fn gamma_channel(&self, p: &SystemParams) -> C64 {
        self.t_l_gamma * p.phi_l + self.t_c_gamma * p.phi_c
    }

    /// Interfering cavity-decay amplitude `φ_L T_L^κ + φ_c T_c^κ`.
    pub fn kappa_channel(&self, p: &SystemParams) -> C64 {
        self.t_l_kappa * p.phi_l + self.t_c_kappa * p.phi_c
    }

    /// `A±` assembled from these amplitudes.
    pub fn coefficient(&self, p: &SystemParams) -> f64 {
        p.gamma * p.alpha * self.t_s.norm_sqr()
            + p.gamma * self.gamma_channel(p).norm_sqr()
            + p.kappa * self.kappa_channel(p).norm_sqr()
    }
}

pub fn amplitudes(p: &SystemParams, sign: Sideband) -> Result<AmplitudeSet, RateError> {
    let x = sign.offset();
    let f0 = checked_f(0.0, p)?;
    let fx = checked_f(x, p)?;
    let i = C64::i();
    let g2 = p.g * p.g;
    let cav = C64::new(p.delta_c, 0.5 * p.kappa);

    let t_s = cav * p.omega / f0;
    let t_l_gamma = i * p.omega * C64::new(p.delta_c + x, 0.5 * p.kappa) / fx;
    let t_l_kappa = i * p.omega * p.g / fx;
    let t_c_gamma = -C64::new(2.0 * p.delta_c + x, p.kappa) * (p.omega * g2) / (f0 * fx);
    let t_c_kappa = -(C64::new(p.delta + x, 0.5 * p.gamma) * cav + g2) * (p.omega * p.g) / (f0 * fx);

    Ok(AmplitudeSet { sign, t_s, t_l_gamma, t_l_kappa, t_c_gamma, t_c_kappa })
}

/// `A₊` or `A₋` alone.
pub fn coefficient(p: &SystemParams, sign: Sideband) -> Result<f64, RateError> {
    Ok(amplitudes(p, sign)?.coefficient(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Cooling,
    Heating,
    Marginal,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Cooling => "cooling",
            Regime::Heating => "heating",
            Regime::Marginal => "marginal",
        }
    }

    pub fn classify(a_plus: f64, a_minus: f64) -> Self {
        let diff = a_minus - a_plus;
        if diff.abs() < MARGINAL_TOL * a_minus.max(a_plus).max(1.0) {
            Regime::Marginal
        } else if diff > 0.0 {
            Regime::Cooling
        } else {
            Regime::Heating
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cooling" => Ok(Regime::Cooling),
            "heating" => Ok(Regime::Heating),
            "marginal" => Ok(Regime::Marginal),
            other => Err(format!("unknown regime `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub a_plus: f64,
    pub a_minus: f64,
    /// `⟨n⟩∞ = A₊/(A₋ − A₊)`, only in the cooling regime.
    pub nbar_ss: Option<f64>,
    /// `W = η²(A₋ − A₊)`.
    pub w: f64,
    pub regime: Regime,
}

impl RateResult {
    pub fn from_coefficients(a_plus: f64, a_minus: f64, eta: f64) -> Self {
        let regime = Regime::classify(a_plus, a_minus);
        let nbar_ss = (regime == Regime::Cooling).then(|| a_plus / (a_minus - a_plus));
        Self { a_plus, a_minus, nbar_ss, w: eta * eta * (a_minus - a_plus), regime }
    }
}

pub fn rates(p: &SystemParams) -> Result<RateResult, RateError> {
    let a_plus = coefficient(p, Sideband::Heating)?;
    let a_minus = coefficient(p, Sideband::Cooling)?;
    Ok(RateResult::from_coefficients(a_plus, a_minus, p.eta))
}

/// `(Γ_{n→n+1}, Γ_{n→n−1}) = (η²(n+1)A₊, η²nA₋)`.
pub fn phonon_transition_rates(n: u32, r: &RateResult, eta: f64) -> (f64, f64) {
    let e2 = eta * eta;
    let n = f64::from(n);
    (e2 * (n + 1.0) * r.a_plus, e2 * n * r.a_minus)
}

/// Atomic detuning that puts the cooling denominator on resonance,
/// `Re f(ν) = 0`: `Δ_opt = (g² + γκ/4)/(δc + ν) − ν`.
pub fn delta_opt(delta_c: f64, p: &SystemParams) -> Result<f64, RateError> {
    let shifted = delta_c + 1.0;
    if shifted.abs() <= POLE_TOL * delta_c.abs().max(1.0) {
        return Err(RateError::OptimalDetuningPole { delta_c });
    }
    Ok((p.g * p.g + 0.25 * p.gamma * p.kappa) / shifted - 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptPoint {
    pub delta_c: f64,
    /// NaN when flagged.
    pub delta_opt: f64,
    pub flagged: bool,
}

pub fn opt_curve(delta_c_grid: &[f64], p: &SystemParams) -> Vec<OptPoint> {
    delta_c_grid
        .iter()
        .map(|&delta_c| match delta_opt(delta_c, p) {
            Ok(d) => OptPoint { delta_c, delta_opt: d, flagged: false },
            Err(_) => OptPoint { delta_c, delta_opt: f64::NAN, flagged: true },
        })
        .collect()
}

/// Flags a weak-drive violation: the closed forms assume the laser barely
/// perturbs `|g, 0_c⟩`, with excited population `|T_S|²`.
pub fn weak_drive_issue(p: &SystemParams) -> Option<Issue> {
    let a = amplitudes(p, Sideband::Heating).ok()?;
    let pe = a.t_s.norm_sqr();
    (pe > WEAK_DRIVE_LIMIT).then(|| {
        Issue::warning("omega", format!("excited population |T_S|^2 = {pe:.3e} exceeds {WEAK_DRIVE_LIMIT}; weak-drive forms strained"))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmplitudeKind {
    TS,
    TLGamma,
    TLKappa,
    TCGamma,
    TCKappa,
}

/// Physical process a suppressed amplitude switches off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Diffusion,
    Heating,
    Cooling,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuppressionEntry {
    pub amplitude: AmplitudeKind,
    pub sign: Sideband,
    pub magnitude: f64,
    /// Numerator of the amplitude measured against the frequency scale;
    /// independent of Ω.
    pub relative: f64,
    pub suppressed: bool,
    pub channel: Option<Channel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    pub threshold: f64,
    pub entries: Vec<SuppressionEntry>,
}

impl SuppressionReport {
    pub fn suppressed(&self) -> impl Iterator<Item = &SuppressionEntry> {
        self.entries.iter().filter(|e| e.suppressed)
    }

    pub fn channel_suppressed(&self, channel: Channel) -> bool {
        self.suppressed().any(|e| e.channel == Some(channel))
    }
}

/// Magnitudes of all amplitudes and which of them sit near a zero.
///
/// Each amplitude is compared with the value its numerator would have at the
/// largest frequency scale `S`: `|δc + iκ/2|/S` for `T_S`,
/// `|2δc ∓ ν + iκ|/S` for `T_c^γ`, and so on. A ratio below `threshold`
/// means the amplitude is held small by interference rather than by a large
/// denominator. `T_L^κ` and `T_c^κ` carry a factor `g/S` and only vanish
/// with the coupling.
pub fn suppression_report(p: &SystemParams, threshold: f64) -> Result<SuppressionReport, RateError> {
    let s = p.frequency_scale();
    let mut entries = Vec::with_capacity(9);
    for sign in [Sideband::Heating, Sideband::Cooling] {
        let a = amplitudes(p, sign)?;
        let x = sign.offset();
        let cav = C64::new(p.delta_c, 0.5 * p.kappa);
        let mut push = |amplitude, value: C64, relative: f64, channel| {
            entries.push(SuppressionEntry {
                amplitude,
                sign,
                magnitude: value.norm(),
                relative,
                suppressed: relative < threshold,
                channel: if relative < threshold { channel } else { None },
            })
        };
        if sign == Sideband::Heating {
            push(AmplitudeKind::TS, a.t_s, cav.norm() / s, Some(Channel::Diffusion));
        }
        let mech = match sign {
            Sideband::Heating => Channel::Heating,
            Sideband::Cooling => Channel::Cooling,
        };
        push(AmplitudeKind::TLGamma, a.t_l_gamma, C64::new(p.delta_c + x, 0.5 * p.kappa).norm() / s, None);
        push(AmplitudeKind::TLKappa, a.t_l_kappa, p.g / s, None);
        push(AmplitudeKind::TCGamma, a.t_c_gamma, C64::new(2.0 * p.delta_c + x, p.kappa).norm() / s, Some(mech));
        let num = C64::new(p.delta + x, 0.5 * p.gamma) * cav + p.g * p.g;
        push(AmplitudeKind::TCKappa, a.t_c_kappa, p.g / s * num.norm() / (s * s), None);
    }
    Ok(SuppressionReport { threshold, entries })
}
