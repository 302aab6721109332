//! Physical parameters in trap-frequency units.
//!
//! Everything downstream of this module works with `ν = 1` and `ħ = 1`:
//! detunings, couplings and decay rates are plain `f64` multiples of the
//! trap frequency, and the Lamb-Dicke parameter carries the recoil scale.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Reduced Planck constant in J·s (CODATA 2018, exact).
pub const HBAR: f64 = 1.054_571_817e-34;

/// Angular-dispersion factor for a dipole emission pattern projected on one
/// motional axis.
pub const DEFAULT_ALPHA: f64 = 0.4;

/// Lamb-Dicke parameter above which the second-order expansion is flagged.
pub const LAMB_DICKE_WARN: f64 = 0.3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UnitsError {
    #[error("{name} must be strictly positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("invalid parameter document: {0}")]
    Document(String),
}

/// All model parameters in units of the trap frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemParams {
    /// Atom–laser detuning Δ.
    pub delta: f64,
    /// Cavity–laser detuning δc.
    pub delta_c: f64,
    /// Atom–cavity coupling at the trap centre.
    pub g: f64,
    /// Laser Rabi frequency Ω.
    pub omega: f64,
    /// Spontaneous-emission rate γ.
    pub gamma: f64,
    /// Cavity field decay rate κ.
    pub kappa: f64,
    /// Lamb-Dicke parameter η.
    pub eta: f64,
    /// Recoil geometry factor of the laser.
    pub phi_l: f64,
    /// Recoil geometry factor of the cavity mode.
    pub phi_c: f64,
    /// Angular dispersion of the spontaneous-emission recoil.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

impl Default for SystemParams {
    /// Good-cavity reference set, with both detunings at zero.
    fn default() -> Self {
        Self::good_cavity(0.0, 0.0)
    }
}

impl SystemParams {
    /// Good-cavity reference set: η = 0.1, φ_L = φ_c = √½, Ω = ν, g = 7ν,
    /// γ = 10ν, κ = 0.01ν, α = 2/5.
    pub fn good_cavity(delta: f64, delta_c: f64) -> Self {
        Self {
            delta,
            delta_c,
            g: 7.0,
            omega: 1.0,
            gamma: 10.0,
            kappa: 0.01,
            eta: 0.1,
            phi_l: std::f64::consts::FRAC_1_SQRT_2,
            phi_c: std::f64::consts::FRAC_1_SQRT_2,
            alpha: DEFAULT_ALPHA,
        }
    }

    /// Free-space limit: no cavity coupling and no cavity recoil.
    ///
    /// The empty cavity still needs a non-vanishing `δc + iκ/2` for the
    /// amplitudes to be evaluable, so κ is set to ν; it drops out of `A±`.
    pub fn free_space(delta: f64, omega: f64, gamma: f64, phi_l: f64) -> Self {
        Self {
            delta,
            delta_c: 0.0,
            g: 0.0,
            omega,
            gamma,
            kappa: 1.0,
            eta: 0.1,
            phi_l,
            phi_c: 0.0,
            alpha: DEFAULT_ALPHA,
        }
    }

    /// Sets the laser recoil factor for a laser propagating at `theta`
    /// (radians) to the motional axis.
    pub fn with_laser_angle(mut self, theta: f64) -> Self {
        self.phi_l = phi_from_angle(theta);
        self
    }

    pub fn with_detunings(mut self, delta: f64, delta_c: f64) -> Self {
        self.delta = delta;
        self.delta_c = delta_c;
        self
    }

    /// Largest frequency scale of the problem, never below ν.
    pub fn frequency_scale(&self) -> f64 {
        [self.delta.abs(), self.delta_c.abs(), self.g, self.gamma, self.kappa, 1.0]
            .into_iter()
            .fold(0.0, f64::max)
    }

    pub fn validate(&self) -> ValidationReport {
        validate(self)
    }

    /// Overlays the keys of a JSON object onto `self`.
    ///
    /// Unknown keys are rejected so that typos do not silently fall back to
    /// defaults.
    pub fn overlay(&self, patch: &Map<String, Value>) -> Result<Self, UnitsError> {
        let mut base = match serde_json::to_value(self) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("SystemParams serializes to an object"),
        };
        for (k, v) in patch {
            if !base.contains_key(k) {
                return Err(UnitsError::Document(format!("unknown parameter `{k}`")));
            }
            base.insert(k.clone(), v.clone());
        }
        serde_json::from_value(Value::Object(base)).map_err(|e| UnitsError::Document(e.to_string()))
    }
}

/// Recoil projection of a beam at angle `theta` to the motional axis.
pub fn phi_from_angle(theta: f64) -> f64 {
    theta.cos()
}

/// Laboratory parameters. Rates and detunings are angular frequencies in rad/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalInputs {
    /// Atomic mass in kg.
    pub mass: f64,
    /// Optical wavenumber in 1/m.
    pub wavenumber: f64,
    /// Trap angular frequency in rad/s.
    pub trap_freq: f64,
    pub delta: f64,
    pub delta_c: f64,
    pub g: f64,
    pub omega: f64,
    pub gamma: f64,
    pub kappa: f64,
    pub phi_l: f64,
    pub phi_c: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn require_positive(name: &'static str, value: f64) -> Result<(), UnitsError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(UnitsError::NonPositive { name, value })
    }
}

/// η = √(ħk²/2Mν).
pub fn lamb_dicke(mass: f64, wavenumber: f64, trap_freq: f64) -> Result<f64, UnitsError> {
    require_positive("mass", mass)?;
    require_positive("wavenumber", wavenumber)?;
    require_positive("trap_freq", trap_freq)?;
    Ok((HBAR * wavenumber * wavenumber / (2.0 * mass * trap_freq)).sqrt())
}

pub fn normalize(inputs: &PhysicalInputs) -> Result<SystemParams, UnitsError> {
    let nu = inputs.trap_freq;
    require_positive("trap_freq", nu)?;
    let eta = lamb_dicke(inputs.mass, inputs.wavenumber, nu)?;
    Ok(SystemParams {
        delta: inputs.delta / nu,
        delta_c: inputs.delta_c / nu,
        g: inputs.g / nu,
        omega: inputs.omega / nu,
        gamma: inputs.gamma / nu,
        kappa: inputs.kappa / nu,
        eta,
        phi_l: inputs.phi_l,
        phi_c: inputs.phi_c,
        alpha: inputs.alpha,
    })
}

/// Inverse of [`normalize`]: the wavenumber is reconstructed from η.
pub fn denormalize(params: &SystemParams, mass: f64, trap_freq: f64) -> Result<PhysicalInputs, UnitsError> {
    require_positive("mass", mass)?;
    require_positive("trap_freq", trap_freq)?;
    require_positive("eta", params.eta)?;
    let nu = trap_freq;
    Ok(PhysicalInputs {
        mass,
        wavenumber: params.eta * (2.0 * mass * nu / HBAR).sqrt(),
        trap_freq: nu,
        delta: params.delta * nu,
        delta_c: params.delta_c * nu,
        g: params.g * nu,
        omega: params.omega * nu,
        gamma: params.gamma * nu,
        kappa: params.kappa * nu,
        phi_l: params.phi_l,
        phi_c: params.phi_c,
        alpha: params.alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Violation,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub field: String,
    pub message: String,
}

impl Issue {
    pub fn violation(field: &str, message: impl Into<String>) -> Self {
        Self { severity: Severity::Violation, field: field.to_string(), message: message.into() }
    }

    pub fn warning(field: &str, message: impl Into<String>) -> Self {
        Self { severity: Severity::Warning, field: field.to_string(), message: message.into() }
    }
}

/// Violated invariants and soft warnings. Empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.issues.is_empty()
    }

    pub fn is_valid(&self) -> bool {
        self.violations().next().is_none()
    }

    pub fn violations(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Violation)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &Issue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }

    pub fn push(&mut self, issue: Issue) {
        self.issues.push(issue);
    }
}

pub fn validate(p: &SystemParams) -> ValidationReport {
    let mut report = ValidationReport::default();
    let fields = [
        ("delta", p.delta),
        ("delta_c", p.delta_c),
        ("g", p.g),
        ("omega", p.omega),
        ("gamma", p.gamma),
        ("kappa", p.kappa),
        ("eta", p.eta),
        ("phi_l", p.phi_l),
        ("phi_c", p.phi_c),
        ("alpha", p.alpha),
    ];
    for (name, v) in fields {
        if !v.is_finite() {
            report.push(Issue::violation(name, format!("{name} is not finite ({v})")));
        }
    }
    for (name, v) in [("gamma", p.gamma), ("kappa", p.kappa), ("g", p.g), ("omega", p.omega)] {
        if v < 0.0 {
            report.push(Issue::violation(name, format!("{name} must be non-negative, got {v}")));
        }
    }
    if !(p.eta > 0.0) {
        report.push(Issue::violation("eta", format!("eta must be positive, got {}", p.eta)));
    } else if p.eta > LAMB_DICKE_WARN {
        report.push(Issue::warning(
            "eta",
            format!("eta = {} exceeds {LAMB_DICKE_WARN}; Lamb-Dicke expansion strained", p.eta),
        ));
    }
    for (name, v) in [("phi_l", p.phi_l), ("phi_c", p.phi_c)] {
        if !(-1.0..=1.0).contains(&v) {
            report.push(Issue::violation(name, format!("{name} must lie in [-1, 1], got {v}")));
        }
    }
    if !(0.0..=1.0).contains(&p.alpha) {
        report.push(Issue::violation("alpha", format!("alpha must lie in [0, 1], got {}", p.alpha)));
    }
    report
}

/// Reads a parameter document.
///
/// A document carrying `"units": "si"` holds [`PhysicalInputs`] and is
/// normalized; otherwise its keys are [`SystemParams`] fields overlaid on
/// `base`.
pub fn params_from_json(doc: &Value, base: &SystemParams) -> Result<SystemParams, UnitsError> {
    let Value::Object(map) = doc else {
        return Err(UnitsError::Document("expected a JSON object".into()));
    };
    match map.get("units").and_then(Value::as_str) {
        Some("si") => {
            let mut m = map.clone();
            m.remove("units");
            let inputs: PhysicalInputs =
                serde_json::from_value(Value::Object(m)).map_err(|e| UnitsError::Document(e.to_string()))?;
            normalize(&inputs)
        }
        Some("trap") | None => {
            let mut m = map.clone();
            m.remove("units");
            base.overlay(&m)
        }
        Some(other) => Err(UnitsError::Document(format!("unknown units marker `{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cesium() -> PhysicalInputs {
        let nu = 2.0 * PI * 500e3;
        PhysicalInputs {
            mass: 2.21e-25,
            wavenumber: 2.0 * PI / 852e-9,
            trap_freq: nu,
            delta: 3.0 * nu,
            delta_c: 0.5 * nu,
            g: 2.0 * PI * 5e6,
            omega: nu,
            gamma: 2.0 * PI * 5e6,
            kappa: 2.0 * PI * 100e3,
            phi_l: 0.5,
            phi_c: 0.5,
            alpha: 0.4,
        }
    }

    #[test]
    fn cesium_lamb_dicke() {
        // hbar k^2 / (2 M nu) evaluated by hand: 5.73531e-21 / 1.38858e-18 = 4.13035e-3
        let inp = cesium();
        let eta = lamb_dicke(inp.mass, inp.wavenumber, inp.trap_freq).unwrap();
        assert!((eta - 0.064_268).abs() < 2e-6, "eta = {eta}");
    }

    #[test]
    fn lamb_dicke_limits() {
        let nu = 2.0 * PI * 500e3;
        assert!(lamb_dicke(2e-25, 1e-3, nu).unwrap() < 1e-10);
        assert!(lamb_dicke(1e10, 7e6, nu).unwrap() < 1e-15);
        assert!(matches!(lamb_dicke(0.0, 7e6, nu), Err(UnitsError::NonPositive { name: "mass", .. })));
        assert!(lamb_dicke(2e-25, -1.0, nu).is_err());
        assert!(lamb_dicke(2e-25, 7e6, 0.0).is_err());
    }

    #[test]
    fn normalize_reference_rates() {
        let p = normalize(&cesium()).unwrap();
        assert!((p.gamma - 10.0).abs() < 1e-12);
        assert!((p.kappa - 0.2).abs() < 1e-12);
        assert!((p.g - 10.0).abs() < 1e-12);
        assert_eq!(p.phi_l, 0.5);
    }

    #[test]
    fn normalize_identity_in_trap_units() {
        let mut inp = cesium();
        inp.trap_freq = 1.0;
        inp.delta = 3.0;
        inp.gamma = 10.0;
        let p = normalize(&inp).unwrap();
        assert_eq!(p.delta, 3.0);
        assert_eq!(p.gamma, 10.0);
        assert_eq!(p.kappa, inp.kappa);
        inp.trap_freq = -1.0;
        assert!(normalize(&inp).is_err());
    }

    #[test]
    fn good_cavity_set_is_clean() {
        let r = SystemParams::good_cavity(31.0, 0.5).validate();
        assert!(r.is_empty(), "{r:?}");
    }

    #[test]
    fn large_eta_warns() {
        let mut p = SystemParams::good_cavity(0.0, 0.0);
        p.eta = 0.5;
        let r = validate(&p);
        assert!(r.is_valid());
        assert_eq!(r.warnings().count(), 1);
        assert_eq!(r.issues[0].field, "eta");
    }

    #[test]
    fn negative_kappa_violates() {
        let mut p = SystemParams::good_cavity(0.0, 0.0);
        p.kappa = -1.0;
        let r = validate(&p);
        assert!(!r.is_valid());
        assert_eq!(r.violations().next().unwrap().field, "kappa");
        p.kappa = 0.01;
        p.phi_c = 1.5;
        p.alpha = -0.1;
        p.eta = 0.0;
        assert_eq!(validate(&p).violations().count(), 3);
    }

    #[test]
    fn laser_angle_constructor() {
        let p = SystemParams::good_cavity(0.0, 0.0).with_laser_angle(PI / 2.0);
        assert!(p.phi_l.abs() < 1e-15);
        assert_eq!(SystemParams::good_cavity(0.0, 0.0).with_laser_angle(0.0).phi_l, 1.0);
    }

    #[test]
    fn json_documents() {
        let base = SystemParams::default();
        let doc: Value = serde_json::json!({"delta": 3.5, "kappa": 0.2});
        let p = params_from_json(&doc, &base).unwrap();
        assert_eq!(p.delta, 3.5);
        assert_eq!(p.kappa, 0.2);
        assert_eq!(p.g, 7.0);

        let bad: Value = serde_json::json!({"kapa": 0.2});
        assert!(params_from_json(&bad, &base).is_err());

        let mut si = serde_json::to_value(cesium()).unwrap();
        si["units"] = Value::from("si");
        let p = params_from_json(&si, &base).unwrap();
        assert!((p.gamma - 10.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalize_round_trip(
            delta in -100.0..100.0f64, delta_c in -10.0..10.0f64, g in 0.0..20.0f64,
            eta in 0.01..0.3f64, mass in 1e-26..1e-24f64, nu in 1e5..1e7f64,
        ) {
            let p = SystemParams { delta, delta_c, g, eta, ..SystemParams::default() };
            let back = normalize(&denormalize(&p, mass, nu).unwrap()).unwrap();
            for (a, b) in [(p.delta, back.delta), (p.delta_c, back.delta_c), (p.g, back.g),
                           (p.eta, back.eta), (p.kappa, back.kappa), (p.omega, back.omega)] {
                prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1.0));
            }
        }

        #[test]
        fn lamb_dicke_monotone(m in 1e-26..1e-24f64, k in 1e6..1e7f64, nu in 1e5..1e7f64, s in 1.01..3.0f64) {
            let e = lamb_dicke(m, k, nu).unwrap();
            prop_assert!(lamb_dicke(m * s, k, nu).unwrap() < e);
            prop_assert!(lamb_dicke(m, k, nu * s).unwrap() < e);
            prop_assert!(lamb_dicke(m, k * s, nu).unwrap() > e);
        }
    }
}
