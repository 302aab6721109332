//! Detuning grids over (δc, Δ), their CSV records and SVG heatmaps.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rates::{self, RateError, Regime};
use crate::units::SystemParams;

pub const SWEEP_HEADER: &str = "delta_c,delta,a_plus,a_minus,nbar,w,regime";
pub const OPT_CURVE_HEADER: &str = "delta_c,delta_opt,nbar,w,regime";
pub const DEFAULT_MAX_POINTS: usize = 1_000_000;

/// 17 significant digits; parses back to the identical `f64`.
pub fn format_float(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{x:.16e}")
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SweepError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("grid of {points} points exceeds the limit of {max}")]
    Overflow { points: usize, max: usize },
    #[error("at delta_c = {delta_c}, delta = {delta}: {source}")]
    Singular { delta_c: f64, delta: f64, source: RateError },
    #[error("malformed CSV at line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Inclusive, uniformly spaced axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub step: f64,
}

impl GridAxis {
    pub fn new(min: f64, max: f64, step: f64) -> Self {
        Self { min, max, step }
    }

    pub fn check(&self, name: &str) -> Result<(), SweepError> {
        if !(self.min.is_finite() && self.max.is_finite() && self.step.is_finite()) {
            return Err(SweepError::Grid(format!("{name} axis has non-finite bounds")));
        }
        if self.step <= 0.0 {
            return Err(SweepError::Grid(format!("{name} step must be positive")));
        }
        if self.max < self.min {
            return Err(SweepError::Grid(format!("{name} range is empty")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        ((self.max - self.min) / self.step + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.min + i as f64 * self.step).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub delta_c: GridAxis,
    pub delta: GridAxis,
    pub base: SystemParams,
    pub max_points: usize,
}

impl SweepSpec {
    /// Window holding the low-temperature valley along the optimal-detuning
    /// curve, the heating regions, and the cavity-sideband branch at large
    /// negative Δ: δc ∈ [−5, 5]ν in steps of 0.05ν, Δ ∈ [−200, 60]ν in
    /// steps of 0.5ν.
    pub fn default_window(base: SystemParams) -> Self {
        Self {
            delta_c: GridAxis::new(-5.0, 5.0, 0.05),
            delta: GridAxis::new(-200.0, 60.0, 0.5),
            base,
            max_points: DEFAULT_MAX_POINTS,
        }
    }

    pub fn points(&self) -> usize {
        self.delta_c.len().saturating_mul(self.delta.len())
    }

    pub fn check(&self) -> Result<(), SweepError> {
        self.delta_c.check("delta_c")?;
        self.delta.check("delta")?;
        let points = self.points();
        if points > self.max_points {
            return Err(SweepError::Overflow { points, max: self.max_points });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub delta_c: f64,
    pub delta: f64,
    pub a_plus: f64,
    pub a_minus: f64,
    /// Absent outside the cooling regime.
    pub nbar: Option<f64>,
    pub w: f64,
    pub regime: Regime,
}

impl SweepRecord {
    pub fn evaluate(base: &SystemParams, delta_c: f64, delta: f64) -> Result<Self, SweepError> {
        let p = base.with_detunings(delta, delta_c);
        let r = rates::rates(&p).map_err(|source| SweepError::Singular { delta_c, delta, source })?;
        Ok(Self { delta_c, delta, a_plus: r.a_plus, a_minus: r.a_minus, nbar: r.nbar_ss, w: r.w, regime: r.regime })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            format_float(self.delta_c),
            format_float(self.delta),
            format_float(self.a_plus),
            format_float(self.a_minus),
            self.nbar.map(format_float).unwrap_or_default(),
            format_float(self.w),
            self.regime.as_str()
        )
    }
}

/// Evaluates every grid point, δc outer and Δ inner. Either all records are
/// returned or none.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRecord>, SweepError> {
    spec.check()?;
    let dcs = spec.delta_c.values();
    let ds = spec.delta.values();
    let nd = ds.len();
    (0..dcs.len() * nd)
        .into_par_iter()
        .map(|k| SweepRecord::evaluate(&spec.base, dcs[k / nd], ds[k % nd]))
        .collect()
}

pub fn write_records<W: Write>(mut w: W, records: &[SweepRecord]) -> io::Result<()> {
    writeln!(w, "{SWEEP_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

fn parse_field(s: &str, line: usize, name: &str) -> Result<f64, SweepError> {
    s.trim().parse().map_err(|_| SweepError::Parse { line, message: format!("bad {name} value `{s}`") })
}

pub fn read_records<R: BufRead>(r: R) -> Result<Vec<SweepRecord>, SweepError> {
    let mut lines = r.lines().enumerate();
    match lines.next() {
        Some((_, Ok(h))) if h.trim() == SWEEP_HEADER => {}
        _ => return Err(SweepError::Parse { line: 1, message: "missing header".into() }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| SweepError::Parse { line: line_no, message: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(SweepError::Parse { line: line_no, message: format!("expected 7 fields, got {}", f.len()) });
        }
        out.push(SweepRecord {
            delta_c: parse_field(f[0], line_no, "delta_c")?,
            delta: parse_field(f[1], line_no, "delta")?,
            a_plus: parse_field(f[2], line_no, "a_plus")?,
            a_minus: parse_field(f[3], line_no, "a_minus")?,
            nbar: if f[4].is_empty() { None } else { Some(parse_field(f[4], line_no, "nbar")?) },
            w: parse_field(f[5], line_no, "w")?,
            regime: f[6].trim().parse().map_err(|m| SweepError::Parse { line: line_no, message: m })?,
        });
    }
    Ok(out)
}

/// One row of the optimal-detuning table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptCurveRow {
    pub delta_c: f64,
    pub delta_opt: f64,
    pub nbar: Option<f64>,
    pub w: f64,
    /// `None` when the point sits on a pole.
    pub regime: Option<Regime>,
}

impl OptCurveRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            format_float(self.delta_c),
            format_float(self.delta_opt),
            self.nbar.map(format_float).unwrap_or_default(),
            format_float(self.w),
            self.regime.map_or("singular", Regime::as_str)
        )
    }
}

/// Rates evaluated along `Δ = Δ_opt(δc)`; poles are flagged per row.
pub fn opt_curve_rows(delta_c_grid: &[f64], base: &SystemParams) -> Vec<OptCurveRow> {
    rates::opt_curve(delta_c_grid, base)
        .into_iter()
        .map(|pt| {
            let eval = (!pt.flagged)
                .then(|| rates::rates(&base.with_detunings(pt.delta_opt, pt.delta_c)).ok())
                .flatten();
            match eval {
                Some(r) => OptCurveRow { delta_c: pt.delta_c, delta_opt: pt.delta_opt, nbar: r.nbar_ss, w: r.w, regime: Some(r.regime) },
                None => OptCurveRow { delta_c: pt.delta_c, delta_opt: pt.delta_opt, nbar: None, w: f64::NAN, regime: None },
            }
        })
        .collect()
}

pub fn write_opt_curve<W: Write>(mut w: W, rows: &[OptCurveRow]) -> io::Result<()> {
    writeln!(w, "{OPT_CURVE_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeatmapQuantity {
    /// Steady-state phonon number on a log scale.
    Nbar,
    /// Cooling rate `W` on a linear scale.
    W,
}

const LEVELS: usize = 48;
const HEATING_FILL: &str = "#c8102e";

/// Dark-to-light ramp: darkest cells hold the smallest values.
fn ramp(level: usize) -> String {
    let t = level as f64 / (LEVELS - 1) as f64;
    let c = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(8.0, 250.0), c(16.0, 246.0), c(48.0, 222.0))
}

/// Renders a sweep as an SVG heatmap with δc on the horizontal axis and Δ on
/// the vertical axis. Heating cells get a fixed accent colour; the
/// optimal-detuning curve is overlaid as a dashed line.
pub fn render_heatmap(spec: &SweepSpec, records: &[SweepRecord], quantity: HeatmapQuantity) -> String {
    let nx = spec.delta_c.len();
    let ny = spec.delta.len();
    let (w_px, h_px, margin) = (720.0, 720.0, 60.0);
    let cw = w_px / nx as f64;
    let ch = h_px / ny as f64;

    let value = |r: &SweepRecord| -> Option<f64> {
        match quantity {
            HeatmapQuantity::Nbar => r.nbar.filter(|n| *n > 0.0).map(f64::log10),
            HeatmapQuantity::W => (r.regime == Regime::Cooling).then_some(r.w),
        }
    };
    let (lo, hi) = records
        .iter()
        .filter_map(value)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    // W is better the larger it is; flip so the darkest cells are the best
    let level = |v: f64| {
        let t = ((v - lo) / span).clamp(0.0, 1.0);
        let t = if quantity == HeatmapQuantity::W { 1.0 - t } else { t };
        (t * (LEVELS - 1) as f64).round() as usize
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        w_px + 2.0 * margin + 120.0,
        h_px + 2.0 * margin,
        w_px + 2.0 * margin + 120.0,
        h_px + 2.0 * margin
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<g shape-rendering="crispEdges">"#);
    for ix in 0..nx {
        let column = &records[ix * ny..(ix + 1) * ny];
        let x = margin + ix as f64 * cw;
        // merge runs of equal colour along Δ
        let mut run_start = 0;
        let mut run_fill: Option<String> = None;
        let flush = |svg: &mut String, start: usize, end: usize, fill: &Option<String>| {
            if let Some(fill) = fill {
                let y = margin + h_px - end as f64 * ch;
                let _ = writeln!(
                    svg,
                    r#"<rect x="{x:.3}" y="{y:.3}" width="{:.3}" height="{:.3}" fill="{fill}"/>"#,
                    cw + 0.01,
                    (end - start) as f64 * ch + 0.01
                );
            }
        };
        for (iy, r) in column.iter().enumerate() {
            let fill = match (r.regime, value(r)) {
                (Regime::Heating, _) => Some(HEATING_FILL.to_string()),
                (_, Some(v)) => Some(ramp(level(v))),
                _ => None,
            };
            if fill != run_fill {
                flush(&mut svg, run_start, iy, &run_fill);
                run_start = iy;
                run_fill = fill;
            }
        }
        flush(&mut svg, run_start, ny, &run_fill);
    }
    let _ = writeln!(svg, "</g>");

    // optimal-detuning overlay, split at the pole
    let to_px = |dc: f64, d: f64| {
        let px = margin + (dc - spec.delta_c.min) / (spec.delta_c.max - spec.delta_c.min).max(1e-300) * w_px;
        let py = margin + h_px - (d - spec.delta.min) / (spec.delta.max - spec.delta.min).max(1e-300) * h_px;
        (px, py)
    };
    let fine: Vec<f64> = (0..=2000)
        .map(|i| spec.delta_c.min + (spec.delta_c.max - spec.delta_c.min) * i as f64 / 2000.0)
        .collect();
    let mut segment: Vec<(f64, f64)> = Vec::new();
    let mut segments = Vec::new();
    for pt in rates::opt_curve(&fine, &spec.base) {
        let inside = !pt.flagged && pt.delta_opt >= spec.delta.min && pt.delta_opt <= spec.delta.max;
        if inside {
            segment.push(to_px(pt.delta_c, pt.delta_opt));
        } else if segment.len() > 1 {
            segments.push(std::mem::take(&mut segment));
        } else {
            segment.clear();
        }
    }
    if segment.len() > 1 {
        segments.push(segment);
    }
    for seg in segments {
        let pts: Vec<String> = seg.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="black" stroke-width="1.5" stroke-dasharray="6,4"/>"#,
            pts.join(" ")
        );
    }

    // frame, axis labels and legend
    let _ = writeln!(
        svg,
        r#"<rect x="{margin}" y="{margin}" width="{w_px}" height="{h_px}" fill="none" stroke="black"/>"#
    );
    let label = |svg: &mut String, x: f64, y: f64, anchor: &str, text: &str| {
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{y:.1}" font-family="sans-serif" font-size="12" text-anchor="{anchor}">{text}</text>"#);
    };
    label(&mut svg, margin, margin + h_px + 18.0, "start", &format!("{}", spec.delta_c.min));
    label(&mut svg, margin + w_px, margin + h_px + 18.0, "end", &format!("{}", spec.delta_c.max));
    label(&mut svg, margin + w_px / 2.0, margin + h_px + 36.0, "middle", "cavity detuning δc / ν");
    label(&mut svg, margin - 6.0, margin + h_px, "end", &format!("{}", spec.delta.min));
    label(&mut svg, margin - 6.0, margin + 10.0, "end", &format!("{}", spec.delta.max));
    label(&mut svg, margin - 6.0, margin + h_px / 2.0, "end", "Δ / ν");
    let title = match quantity {
        HeatmapQuantity::Nbar => "log10 ⟨n⟩∞",
        HeatmapQuantity::W => "W / ν",
    };
    label(&mut svg, margin + w_px / 2.0, margin - 20.0, "middle", title);
    let lx = margin + w_px + 20.0;
    for i in 0..LEVELS {
        let y = margin + i as f64 * (200.0 / LEVELS as f64);
        let _ = writeln!(svg, r#"<rect x="{lx}" y="{y:.2}" width="20" height="{:.2}" fill="{}"/>"#, 200.0 / LEVELS as f64 + 0.2, ramp(i));
    }
    let (top, bottom) = match quantity {
        HeatmapQuantity::Nbar => (lo, hi),
        HeatmapQuantity::W => (hi, lo),
    };
    label(&mut svg, lx + 26.0, margin + 10.0, "start", &format!("{top:.3}"));
    label(&mut svg, lx + 26.0, margin + 200.0, "start", &format!("{bottom:.3}"));
    let _ = writeln!(svg, r#"<rect x="{lx}" y="{:.1}" width="20" height="14" fill="{HEATING_FILL}"/>"#, margin + 220.0);
    label(&mut svg, lx + 26.0, margin + 232.0, "start", "heating");
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_format_round_trips() {
        for x in [0.0, -0.0, 1.0 / 3.0, 31.683_333_333_333_33, 1e-300, -7.5e12, f64::MIN_POSITIVE] {
            let s = format_float(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
        assert_eq!(format_float(f64::NAN), "NaN");
    }

    #[test]
    fn axis_lengths() {
        assert_eq!(GridAxis::new(-5.0, 5.0, 0.05).len(), 201);
        assert_eq!(GridAxis::new(-200.0, 60.0, 0.5).len(), 521);
        assert_eq!(GridAxis::new(1.0, 1.0, 0.1).values(), vec![1.0]);
        assert!(GridAxis::new(1.0, 0.0, 0.1).check("x").is_err());
        assert!(GridAxis::new(0.0, 1.0, 0.0).check("x").is_err());
    }

    #[test]
    fn overflow_rejected() {
        let mut spec = SweepSpec::default_window(SystemParams::default());
        spec.max_points = 1000;
        assert!(matches!(run_sweep(&spec), Err(SweepError::Overflow { .. })));
    }

    #[test]
    fn singular_point_aborts_sweep() {
        let mut base = SystemParams::free_space(0.0, 1.0, 1.0, 1.0);
        base.kappa = 0.0;
        let spec = SweepSpec {
            delta_c: GridAxis::new(-2.0, 2.0, 1.0),
            delta: GridAxis::new(0.0, 1.0, 0.5),
            base,
            max_points: 100,
        };
        assert!(matches!(run_sweep(&spec), Err(SweepError::Singular { .. })));
    }

    #[test]
    fn single_point_matches_rates() {
        let base = SystemParams::good_cavity(0.0, 0.0);
        let spec = SweepSpec {
            delta_c: GridAxis::new(0.5, 0.5, 1.0),
            delta: GridAxis::new(31.0, 31.0, 1.0),
            base,
            max_points: 10,
        };
        let recs = run_sweep(&spec).unwrap();
        assert_eq!(recs.len(), 1);
        let r = rates::rates(&base.with_detunings(31.0, 0.5)).unwrap();
        assert_eq!(recs[0].a_plus, r.a_plus);
        assert_eq!(recs[0].nbar, r.nbar_ss);
    }

    #[test]
    fn heatmap_is_wellformed() {
        let spec = SweepSpec {
            delta_c: GridAxis::new(-2.0, 2.0, 0.5),
            delta: GridAxis::new(-10.0, 60.0, 5.0),
            base: SystemParams::default(),
            max_points: 1000,
        };
        let recs = run_sweep(&spec).unwrap();
        for q in [HeatmapQuantity::Nbar, HeatmapQuantity::W] {
            let svg = render_heatmap(&spec, &recs, q);
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
            assert!(svg.contains(HEATING_FILL));
            assert!(svg.contains("stroke-dasharray"));
        }
    }

    #[test]
    fn opt_curve_rows_flag_pole() {
        let rows = opt_curve_rows(&[-1.0, 0.5], &SystemParams::default());
        assert!(rows[0].regime.is_none() && rows[0].delta_opt.is_nan());
        assert!(rows[0].csv_row().ends_with(",singular"));
        assert_eq!(rows[1].regime, Some(Regime::Cooling));
    }

    proptest::proptest! {
        #![proptest_config(proptest::test_runner::Config::with_cases(48))]
        #[test]
        fn csv_round_trip_is_exact(
            dc_min in -5.0..5.0f64,
            d_min in -100.0..60.0f64,
            dc_step in 0.01..1.0f64,
            d_step in 0.1..10.0f64,
            omega in 0.0..3.0f64,
        ) {
            let mut base = SystemParams::default();
            base.omega = omega;
            let spec = SweepSpec {
                delta_c: GridAxis::new(dc_min, dc_min + 4.0 * dc_step, dc_step),
                delta: GridAxis::new(d_min, d_min + 6.0 * d_step, d_step),
                base,
                max_points: DEFAULT_MAX_POINTS,
            };
            let records = match run_sweep(&spec) {
                Ok(r) => r,
                Err(SweepError::Singular { .. }) => return Ok(()),
                Err(e) => panic!("{e}"),
            };
            proptest::prop_assert_eq!(records.len(), spec.points());
            let mut first = Vec::new();
            write_records(&mut first, &records).unwrap();
            let back = read_records(first.as_slice()).unwrap();
            proptest::prop_assert_eq!(&back, &records);
            let mut second = Vec::new();
            write_records(&mut second, &run_sweep(&spec).unwrap()).unwrap();
            proptest::prop_assert_eq!(first, second);
            for r in &records {
                proptest::prop_assert_eq!(r.regime, Regime::classify(r.a_plus, r.a_minus));
                proptest::prop_assert_eq!(r.nbar.is_some(), r.regime == Regime::Cooling);
            }
        }
    }
}
