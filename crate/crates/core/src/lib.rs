//! Cooling of a harmonically trapped atom coupled to a driving laser and a
//! lossy optical-cavity mode.
//!
//! All frequencies are expressed in units of the trap frequency `ν` and
//! `ħ = 1`. The crate is organised bottom-up:
//!
//! * [`units`]: physical parameters, SI conversion, Lamb-Dicke parameter.
//! * [`rates`]: closed-form scattering amplitudes and the heating/cooling
//!   coefficients `A±`, steady-state phonon number and cooling rate.
//! * [`dynamics`]: birth–death rate equation for the vibrational populations.
//! * [`hilbert`]: dense operators and Liouvillians on atom ⊗ cavity (⊗ motion).
//! * [`oracle`]: numerical cross-checks of the closed-form rates.
//! * [`sweep`]: detuning grids, CSV records and SVG heatmaps.

pub mod dynamics;
pub mod hilbert;
pub mod ode;
pub mod oracle;
pub mod rates;
pub mod sweep;
pub mod units;

pub use num_complex::Complex64 as C64;

pub use rates::{RateResult, Regime, Sideband};
pub use units::SystemParams;
