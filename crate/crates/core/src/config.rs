//! Scenario configuration: structured key-value text with SI-unit suffixes.
//!
//! Grammar, line by line:
//!
//! ```text
//! # comment (also after '#' nowhere: comments occupy whole lines)
//! [section]
//! key = value
//! ```
//!
//! Values are typed per key. Lengths require a unit suffix (`m`, `cm`, `mm`,
//! `um`, `nm`), times likewise (`s`, `ms`, `us`, `ns`); bare numbers are
//! accepted only for dimensionless keys. Lists are comma-separated. Unknown
//! sections or keys are errors, as are unitless lengths. Every key has a
//! scenario-supplied default; the resolved configuration (defaults included)
//! is echoed next to the outputs and parses back to an identical value.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub grid: GridConfig,
    pub source: SourceConfig,
    pub envelope: EnvelopeConfig,
    pub ensemble: EnsembleConfig,
    pub arms: ArmsConfig,
    pub object: ObjectConfig,
    pub detector: DetectorConfig,
    pub analysis: AnalysisConfig,
    pub sweep: SweepConfig,
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub pitch: f64,
    pub wavelength: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SourceMethod {
    SpectralSynthesis,
    PhaseScreenDiffuser,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceConfig {
    pub method: SourceMethod,
    pub correlation_length: f64,
    pub mean_intensity: f64,
    pub correlation_time: f64,
    /// Used only by the phase-screen-diffuser method.
    pub screen_correlation_length: f64,
    pub diffuser_distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvelopeKind {
    FlatTop,
    Gaussian,
    None,
}

/// Finite beam footprint applied to the stationary speckle at the source
/// plane. Keeps propagating fields inside the windowing guard and gives the
/// beam a meaningful near/far field.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvelopeConfig {
    pub kind: EnvelopeKind,
    pub flat_radius: f64,
    pub edge_width: f64,
    pub waist: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleConfig {
    pub n_realizations: usize,
    pub master_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmsConfig {
    pub z_object: f64,
    pub z_reference: f64,
    pub lens: bool,
    pub lens_focal_length: f64,
    pub lens_z1: f64,
    pub lens_z2: f64,
    pub lens_aperture: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectConfig {
    pub y1: f64,
    pub y2: f64,
    pub hole_side: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub side: f64,
    pub scan_half_span: f64,
    pub scan_step: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisConfig {
    /// Background scan positions stay this many correlation lengths away
    /// from every open object point.
    pub background_margin_lc: f64,
    /// Fraction of the grid extent the source footprint may occupy.
    pub guard_fraction: f64,
    /// Realizations fed to the speckle-metrics estimators.
    pub metric_frames: usize,
    /// Equivalent-point instances per axis for the pair-correlation bank.
    pub points_per_axis: usize,
    pub point_spacing: f64,
    /// Separation (in correlation lengths) beyond which two points count as
    /// uncorrelated.
    pub pair_separation_lc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub ratios: Vec<usize>,
    pub sides_over_lc: Vec<f64>,
    pub z_over_zr: Vec<f64>,
    pub site_spacing: f64,
    pub background_radius: f64,
    pub background_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutputConfig {
    pub frame_dump: usize,
}

const LENGTH_UNITS: [(&str, f64); 5] =
    [("nm", 1e-9), ("um", 1e-6), ("mm", 1e-3), ("cm", 1e-2), ("m", 1.0)];
const TIME_UNITS: [(&str, f64); 4] = [("ns", 1e-9), ("us", 1e-6), ("ms", 1e-3), ("s", 1.0)];

struct Line<'a> {
    path: &'a str,
    number: usize,
}

impl Line<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Config { path: self.path.to_string(), line: self.number, message: message.into() }
    }
}

fn parse_suffixed(value: &str, units: &[(&str, f64)], what: &str, at: &Line) -> Result<f64> {
    for (suffix, scale) in units {
        if let Some(prefix) = value.strip_suffix(suffix) {
            let prefix = prefix.trim_end();
            if prefix.is_empty() {
                return Err(at.err(format!("missing numeric value before unit '{suffix}'")));
            }
            let number: f64 = prefix
                .parse()
                .map_err(|_| at.err(format!("invalid number '{prefix}' in {what} value")))?;
            if !number.is_finite() {
                return Err(at.err(format!("{what} value must be finite")));
            }
            return Ok(number * scale);
        }
    }
    Err(at.err(format!(
        "{what} value '{value}' needs a unit suffix ({})",
        units.iter().map(|(s, _)| *s).collect::<Vec<_>>().join(", ")
    )))
}

fn parse_length(value: &str, at: &Line) -> Result<f64> {
    parse_suffixed(value, &LENGTH_UNITS, "length", at)
}

fn parse_time(value: &str, at: &Line) -> Result<f64> {
    parse_suffixed(value, &TIME_UNITS, "time", at)
}

fn parse_float(value: &str, at: &Line) -> Result<f64> {
    value.parse().map_err(|_| at.err(format!("invalid number '{value}'")))
}

fn parse_usize(value: &str, at: &Line) -> Result<usize> {
    value.parse().map_err(|_| at.err(format!("invalid integer '{value}'")))
}

fn parse_u64(value: &str, at: &Line) -> Result<u64> {
    value.parse().map_err(|_| at.err(format!("invalid integer '{value}'")))
}

fn parse_usize_list(value: &str, at: &Line) -> Result<Vec<usize>> {
    value.split(',').map(|part| parse_usize(part.trim(), at)).collect()
}

fn parse_float_list(value: &str, at: &Line) -> Result<Vec<f64>> {
    value.split(',').map(|part| parse_float(part.trim(), at)).collect()
}

/// Parses `path` on top of the scenario defaults in `base`.
pub fn parse_config(path: &Path, base: ScenarioConfig) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigFile {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_config_str(&text, &path.display().to_string(), base)
}

pub fn parse_config_str(text: &str, path: &str, base: ScenarioConfig) -> Result<ScenarioConfig> {
    let mut cfg = base;
    let mut section: Option<String> = None;
    for (idx, raw) in text.lines().enumerate() {
        let at = Line { path, number: idx + 1 };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| at.err("unterminated section header"))?
                .trim();
            section = Some(name.to_string());
            if !KNOWN_SECTIONS.contains(&name) {
                return Err(at.err(format!(
                    "unknown section '[{name}]'; known sections: {}",
                    KNOWN_SECTIONS.join(", ")
                )));
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| at.err("expected 'key = value'"))?;
        let key = key.trim();
        let value = value.trim();
        if value.is_empty() {
            return Err(at.err(format!("empty value for key '{key}'")));
        }
        let section = section
            .as_deref()
            .ok_or_else(|| at.err("key before any [section] header"))?;
        apply_key(&mut cfg, section, key, value, &at)?;
    }
    Ok(cfg)
}

const KNOWN_SECTIONS: [&str; 10] = [
    "grid", "source", "envelope", "ensemble", "arms", "object", "detector", "analysis", "sweep",
    "output",
];

fn apply_key(
    cfg: &mut ScenarioConfig,
    section: &str,
    key: &str,
    value: &str,
    at: &Line,
) -> Result<()> {
    match (section, key) {
        ("grid", "nx") => cfg.grid.nx = parse_usize(value, at)?,
        ("grid", "ny") => cfg.grid.ny = parse_usize(value, at)?,
        ("grid", "pitch") => cfg.grid.pitch = parse_length(value, at)?,
        ("grid", "wavelength") => cfg.grid.wavelength = parse_length(value, at)?,

        ("source", "method") => {
            cfg.source.method = match value {
                "spectral-synthesis" => SourceMethod::SpectralSynthesis,
                "phase-screen-diffuser" => SourceMethod::PhaseScreenDiffuser,
                other => {
                    return Err(at.err(format!(
                        "unknown method '{other}' (expected spectral-synthesis or phase-screen-diffuser)"
                    )))
                }
            }
        }
        ("source", "l_c") => cfg.source.correlation_length = parse_length(value, at)?,
        ("source", "mean_intensity") => cfg.source.mean_intensity = parse_float(value, at)?,
        ("source", "tau_c") => cfg.source.correlation_time = parse_time(value, at)?,
        ("source", "screen_l_c") => cfg.source.screen_correlation_length = parse_length(value, at)?,
        ("source", "diffuser_distance") => cfg.source.diffuser_distance = parse_length(value, at)?,

        ("envelope", "kind") => {
            cfg.envelope.kind = match value {
                "flat-top" => EnvelopeKind::FlatTop,
                "gaussian" => EnvelopeKind::Gaussian,
                "none" => EnvelopeKind::None,
                other => return Err(at.err(format!("unknown envelope kind '{other}'"))),
            }
        }
        ("envelope", "flat_radius") => cfg.envelope.flat_radius = parse_length(value, at)?,
        ("envelope", "edge_width") => cfg.envelope.edge_width = parse_length(value, at)?,
        ("envelope", "waist") => cfg.envelope.waist = parse_length(value, at)?,

        ("ensemble", "realizations") => cfg.ensemble.n_realizations = parse_usize(value, at)?,
        ("ensemble", "seed") => cfg.ensemble.master_seed = parse_u64(value, at)?,

        ("arms", "z_object") => cfg.arms.z_object = parse_length(value, at)?,
        ("arms", "z_reference") => cfg.arms.z_reference = parse_length(value, at)?,
        ("arms", "lens") => {
            cfg.arms.lens = match value {
                "on" => true,
                "off" => false,
                other => return Err(at.err(format!("lens must be 'on' or 'off', got '{other}'"))),
            }
        }
        ("arms", "lens_f") => cfg.arms.lens_focal_length = parse_length(value, at)?,
        ("arms", "lens_z1") => cfg.arms.lens_z1 = parse_length(value, at)?,
        ("arms", "lens_z2") => cfg.arms.lens_z2 = parse_length(value, at)?,
        ("arms", "lens_aperture") => {
            cfg.arms.lens_aperture =
                if value == "none" { None } else { Some(parse_length(value, at)?) }
        }

        ("object", "y1") => cfg.object.y1 = parse_length(value, at)?,
        ("object", "y2") => cfg.object.y2 = parse_length(value, at)?,
        ("object", "hole_side") => cfg.object.hole_side = parse_length(value, at)?,

        ("detector", "side") => cfg.detector.side = parse_length(value, at)?,
        ("detector", "scan_half_span") => cfg.detector.scan_half_span = parse_length(value, at)?,
        ("detector", "scan_step") => cfg.detector.scan_step = parse_length(value, at)?,

        ("analysis", "background_margin_lc") => {
            cfg.analysis.background_margin_lc = parse_float(value, at)?
        }
        ("analysis", "guard_fraction") => cfg.analysis.guard_fraction = parse_float(value, at)?,
        ("analysis", "metric_frames") => cfg.analysis.metric_frames = parse_usize(value, at)?,
        ("analysis", "points_per_axis") => cfg.analysis.points_per_axis = parse_usize(value, at)?,
        ("analysis", "point_spacing") => cfg.analysis.point_spacing = parse_length(value, at)?,
        ("analysis", "pair_separation_lc") => {
            cfg.analysis.pair_separation_lc = parse_float(value, at)?
        }

        ("sweep", "ratios") => cfg.sweep.ratios = parse_usize_list(value, at)?,
        ("sweep", "sides_over_lc") => cfg.sweep.sides_over_lc = parse_float_list(value, at)?,
        ("sweep", "z_over_zr") => cfg.sweep.z_over_zr = parse_float_list(value, at)?,
        ("sweep", "site_spacing") => cfg.sweep.site_spacing = parse_length(value, at)?,
        ("sweep", "background_radius") => cfg.sweep.background_radius = parse_length(value, at)?,
        ("sweep", "background_count") => cfg.sweep.background_count = parse_usize(value, at)?,

        ("output", "frame_dump") => cfg.output.frame_dump = parse_usize(value, at)?,

        _ => {
            return Err(at.err(format!("unknown key '{key}' in section '[{section}]'")));
        }
    }
    Ok(())
}

fn float(v: f64) -> String {
    format!("{v:e}")
}

fn length(v: f64) -> String {
    format!("{v:e}m")
}

fn time(v: f64) -> String {
    format!("{v:e}s")
}

/// Serializes the fully resolved configuration in the config grammar.
/// `parse_config_str` on the result reproduces the value exactly.
pub fn write_config(cfg: &ScenarioConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# resolved configuration (defaults applied)");
    let _ = writeln!(s, "[grid]");
    let _ = writeln!(s, "nx = {}", cfg.grid.nx);
    let _ = writeln!(s, "ny = {}", cfg.grid.ny);
    let _ = writeln!(s, "pitch = {}", length(cfg.grid.pitch));
    let _ = writeln!(s, "wavelength = {}", length(cfg.grid.wavelength));

    let _ = writeln!(s, "\n[source]");
    let method = match cfg.source.method {
        SourceMethod::SpectralSynthesis => "spectral-synthesis",
        SourceMethod::PhaseScreenDiffuser => "phase-screen-diffuser",
    };
    let _ = writeln!(s, "method = {method}");
    let _ = writeln!(s, "l_c = {}", length(cfg.source.correlation_length));
    let _ = writeln!(s, "mean_intensity = {}", float(cfg.source.mean_intensity));
    let _ = writeln!(s, "tau_c = {}", time(cfg.source.correlation_time));
    let _ = writeln!(s, "screen_l_c = {}", length(cfg.source.screen_correlation_length));
    let _ = writeln!(s, "diffuser_distance = {}", length(cfg.source.diffuser_distance));

    let _ = writeln!(s, "\n[envelope]");
    let kind = match cfg.envelope.kind {
        EnvelopeKind::FlatTop => "flat-top",
        EnvelopeKind::Gaussian => "gaussian",
        EnvelopeKind::None => "none",
    };
    let _ = writeln!(s, "kind = {kind}");
    let _ = writeln!(s, "flat_radius = {}", length(cfg.envelope.flat_radius));
    let _ = writeln!(s, "edge_width = {}", length(cfg.envelope.edge_width));
    let _ = writeln!(s, "waist = {}", length(cfg.envelope.waist));

    let _ = writeln!(s, "\n[ensemble]");
    let _ = writeln!(s, "realizations = {}", cfg.ensemble.n_realizations);
    let _ = writeln!(s, "seed = {}", cfg.ensemble.master_seed);

    let _ = writeln!(s, "\n[arms]");
    let _ = writeln!(s, "z_object = {}", length(cfg.arms.z_object));
    let _ = writeln!(s, "z_reference = {}", length(cfg.arms.z_reference));
    let _ = writeln!(s, "lens = {}", if cfg.arms.lens { "on" } else { "off" });
    let _ = writeln!(s, "lens_f = {}", length(cfg.arms.lens_focal_length));
    let _ = writeln!(s, "lens_z1 = {}", length(cfg.arms.lens_z1));
    let _ = writeln!(s, "lens_z2 = {}", length(cfg.arms.lens_z2));
    match cfg.arms.lens_aperture {
        Some(d) => {
            let _ = writeln!(s, "lens_aperture = {}", length(d));
        }
        None => {
            let _ = writeln!(s, "lens_aperture = none");
        }
    }

    let _ = writeln!(s, "\n[object]");
    let _ = writeln!(s, "y1 = {}", length(cfg.object.y1));
    let _ = writeln!(s, "y2 = {}", length(cfg.object.y2));
    let _ = writeln!(s, "hole_side = {}", length(cfg.object.hole_side));

    let _ = writeln!(s, "\n[detector]");
    let _ = writeln!(s, "side = {}", length(cfg.detector.side));
    let _ = writeln!(s, "scan_half_span = {}", length(cfg.detector.scan_half_span));
    let _ = writeln!(s, "scan_step = {}", length(cfg.detector.scan_step));

    let _ = writeln!(s, "\n[analysis]");
    let _ = writeln!(s, "background_margin_lc = {}", float(cfg.analysis.background_margin_lc));
    let _ = writeln!(s, "guard_fraction = {}", float(cfg.analysis.guard_fraction));
    let _ = writeln!(s, "metric_frames = {}", cfg.analysis.metric_frames);
    let _ = writeln!(s, "points_per_axis = {}", cfg.analysis.points_per_axis);
    let _ = writeln!(s, "point_spacing = {}", length(cfg.analysis.point_spacing));
    let _ = writeln!(s, "pair_separation_lc = {}", float(cfg.analysis.pair_separation_lc));

    let _ = writeln!(s, "\n[sweep]");
    let ratios: Vec<String> = cfg.sweep.ratios.iter().map(|r| r.to_string()).collect();
    let _ = writeln!(s, "ratios = {}", ratios.join(","));
    let sides: Vec<String> = cfg.sweep.sides_over_lc.iter().map(|v| float(*v)).collect();
    let _ = writeln!(s, "sides_over_lc = {}", sides.join(","));
    let zs: Vec<String> = cfg.sweep.z_over_zr.iter().map(|v| float(*v)).collect();
    let _ = writeln!(s, "z_over_zr = {}", zs.join(","));
    let _ = writeln!(s, "site_spacing = {}", length(cfg.sweep.site_spacing));
    let _ = writeln!(s, "background_radius = {}", length(cfg.sweep.background_radius));
    let _ = writeln!(s, "background_count = {}", cfg.sweep.background_count);

    let _ = writeln!(s, "\n[output]");
    let _ = writeln!(s, "frame_dump = {}", cfg.output.frame_dump);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios;

    fn base() -> ScenarioConfig {
        scenarios::equal_plane::default_config()
    }

    #[test]
    fn unit_suffixes_convert_to_meters() {
        let cfg = parse_config_str("[source]\nl_c = 80um\n", "test", base()).unwrap();
        assert!((cfg.source.correlation_length - 8e-5).abs() < 1e-20);
        let cfg = parse_config_str("[grid]\nwavelength = 532nm\n", "test", base()).unwrap();
        assert!((cfg.grid.wavelength - 5.32e-7).abs() < 1e-20);
        let cfg = parse_config_str("[arms]\nz_object = 10cm\n", "test", base()).unwrap();
        assert!((cfg.arms.z_object - 0.1).abs() < 1e-20);
    }

    #[test]
    fn omitted_keys_keep_scenario_defaults() {
        let cfg = parse_config_str("[source]\nl_c = 120um\n", "test", base()).unwrap();
        assert_eq!(cfg.grid.wavelength, base().grid.wavelength);
        assert_eq!(cfg.grid.nx, base().grid.nx);
    }

    #[test]
    fn unitless_length_is_rejected() {
        let err = parse_config_str("[source]\nl_c = 80\n", "test", base()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unit suffix"), "{msg}");
        assert!(msg.contains("test:2"), "{msg}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_config_str("[grid]\nnx 512\n", "cfg", base()).unwrap_err();
        assert!(err.to_string().contains("cfg:2"), "{err}");
        let err = parse_config_str("nx = 512\n", "cfg", base()).unwrap_err();
        assert!(err.to_string().contains("before any [section]"), "{err}");
    }

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        let err = parse_config_str("[grid]\nnz = 4\n", "cfg", base()).unwrap_err();
        assert!(err.to_string().contains("unknown key 'nz'"), "{err}");
        let err = parse_config_str("[gird]\n", "cfg", base()).unwrap_err();
        assert!(err.to_string().contains("unknown section"), "{err}");
    }

    #[test]
    fn negative_lengths_parse() {
        let cfg = parse_config_str("[object]\ny1 = -0.5mm\n", "cfg", base()).unwrap();
        assert!((cfg.object.y1 + 5e-4).abs() < 1e-20);
    }

    #[test]
    fn missing_file_is_reported() {
        let err = parse_config(Path::new("/nonexistent/cfg.txt"), base()).unwrap_err();
        assert!(matches!(err, Error::ConfigFile { .. }));
    }

    #[test]
    fn resolved_config_round_trips_exactly() {
        for cfg in [
            scenarios::equal_plane::default_config(),
            scenarios::two_hole::default_config(),
            scenarios::contrast_sweep::default_config(),
            scenarios::lens_ghost::default_config(),
            scenarios::near_to_far::default_config(),
            scenarios::resolution::default_config(),
        ] {
            let text = write_config(&cfg);
            let reparsed = parse_config_str(&text, "echo", base()).unwrap();
            assert_eq!(cfg, reparsed);
        }
    }
}
