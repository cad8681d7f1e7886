//! Shared apparatus construction and the deterministic parallel ensemble
//! driver used by all scenario drivers.

use num_complex::Complex;
use rand::Rng;
use rayon::prelude::*;

use crate::config::{EnvelopeConfig, EnvelopeKind, GridConfig, ScenarioConfig, SourceConfig, SourceMethod};
use crate::error::{Error, Result};
use crate::field::{correlation_sigma, ComplexField, Grid2D, SpeckleGenerator, SpeckleMethod, SpeckleSpec};
use crate::optics::ApertureMask;
use crate::rng::{stream_rng, NS_AUXILIARY};
use crate::util::parabolic_peak;

pub(crate) fn build_grid(cfg: &GridConfig) -> Result<Grid2D<f64>> {
    Grid2D::new(cfg.nx, cfg.ny, cfg.pitch, cfg.pitch, cfg.wavelength)
}

pub(crate) fn build_speckle_spec(cfg: &SourceConfig) -> Result<SpeckleSpec<f64>> {
    let method = match cfg.method {
        SourceMethod::SpectralSynthesis => SpeckleMethod::SpectralSynthesis,
        SourceMethod::PhaseScreenDiffuser => SpeckleMethod::PhaseScreenDiffuser {
            screen_correlation_length: cfg.screen_correlation_length,
            distance: cfg.diffuser_distance,
        },
    };
    SpeckleSpec::new(cfg.correlation_length, cfg.mean_intensity, cfg.correlation_time, method)
}

/// Radius beyond which the envelope transmission is negligible (raised-cosine
/// envelopes vanish exactly; Gaussian envelopes are cut at amplitude 1e-3).
pub(crate) fn envelope_support_radius(cfg: &EnvelopeConfig, grid: &Grid2D<f64>) -> f64 {
    match cfg.kind {
        EnvelopeKind::FlatTop => cfg.flat_radius + cfg.edge_width,
        EnvelopeKind::Gaussian => cfg.waist * (1e3f64).ln().sqrt(),
        EnvelopeKind::None => 0.5 * grid.extent_x().min(grid.extent_y()),
    }
}

/// Beam envelope applied to the stationary speckle at the source plane.
pub(crate) fn build_envelope(grid: Grid2D<f64>, cfg: &EnvelopeConfig) -> Result<ApertureMask<f64>> {
    let transmission: Vec<Complex<f64>> = match cfg.kind {
        EnvelopeKind::None => vec![Complex::new(1.0, 0.0); grid.len()],
        EnvelopeKind::FlatTop => {
            if !(cfg.flat_radius > 0.0) || !(cfg.edge_width > 0.0) {
                return Err(Error::invalid(
                    "envelope",
                    "flat-top envelope needs positive flat_radius and edge_width".to_string(),
                ));
            }
            field_profile(grid, |r| {
                if r <= cfg.flat_radius {
                    1.0
                } else if r >= cfg.flat_radius + cfg.edge_width {
                    0.0
                } else {
                    let t = (r - cfg.flat_radius) / cfg.edge_width;
                    (0.5 * std::f64::consts::PI * t).cos().powi(2)
                }
            })
        }
        EnvelopeKind::Gaussian => {
            if !(cfg.waist > 0.0) {
                return Err(Error::invalid("envelope", "gaussian envelope needs a positive waist".to_string()));
            }
            field_profile(grid, |r| (-(r * r) / (cfg.waist * cfg.waist)).exp())
        }
    };
    ApertureMask::new(grid, transmission)
}

fn field_profile(grid: Grid2D<f64>, f: impl Fn(f64) -> f64) -> Vec<Complex<f64>> {
    let mut t = Vec::with_capacity(grid.len());
    for j in 0..grid.ny() {
        let y = grid.y_coord(j);
        for i in 0..grid.nx() {
            let x = grid.x_coord(i);
            t.push(Complex::new(f((x * x + y * y).sqrt()), 0.0));
        }
    }
    t
}

/// Windowing guard: the source footprint must occupy no more than
/// `guard_fraction` of the grid extent before long propagation.
pub(crate) fn validate_guard(
    grid: &Grid2D<f64>,
    envelope: &EnvelopeConfig,
    guard_fraction: f64,
) -> Result<()> {
    if !(0.0 < guard_fraction && guard_fraction <= 1.0) {
        return Err(Error::invalid("guard_fraction", "must be in (0, 1]".to_string()));
    }
    if matches!(envelope.kind, EnvelopeKind::None) {
        return Ok(());
    }
    let support = 2.0 * envelope_support_radius(envelope, grid);
    let budget = guard_fraction * grid.extent_x().min(grid.extent_y());
    if support > budget {
        return Err(Error::Windowing(format!(
            "source footprint {:.2e} m exceeds the guard fraction {guard_fraction} of the grid \
             extent ({:.2e} m); enlarge the grid or shrink the envelope",
            support, budget
        )));
    }
    Ok(())
}

/// Fraction of total power in the outer 10% frame of the grid. Propagated
/// fields must keep this negligible or FFT wraparound corrupts the
/// correlation tails.
pub(crate) fn outer_band_power_fraction(field: &ComplexField<f64>) -> f64 {
    let g = field.grid();
    let bx = (g.nx() as f64 * 0.05).ceil() as usize;
    let by = (g.ny() as f64 * 0.05).ceil() as usize;
    let mut outer = 0.0;
    let mut total = 0.0;
    for j in 0..g.ny() {
        for i in 0..g.nx() {
            let v = field.samples()[g.index_of(i, j)].norm_sqr();
            total += v;
            if i < bx || i >= g.nx() - bx || j < by || j >= g.ny() - by {
                outer += v;
            }
        }
    }
    if total > 0.0 {
        outer / total
    } else {
        0.0
    }
}

pub(crate) const OUTER_BAND_LIMIT: f64 = 1e-3;

pub(crate) fn check_windowing_at(field: &ComplexField<f64>, what: &str) -> Result<f64> {
    let fraction = outer_band_power_fraction(field);
    if fraction > OUTER_BAND_LIMIT {
        return Err(Error::Windowing(format!(
            "{what}: {:.2e} of the power sits in the outer 10% of the grid (limit {OUTER_BAND_LIMIT:.0e}); \
             the field is wrapping around",
            fraction
        )));
    }
    Ok(fraction)
}

/// Relative tolerance of the synthesis self-check against the measured
/// autocorrelation width.
const CALIBRATION_TOLERANCE: f64 = 0.10;
const CALIBRATION_REALIZATIONS: usize = 64;

/// Everything scenarios share: validated grid, source spec, generator
/// (self-checked), and the beam envelope.
pub(crate) struct Apparatus {
    pub grid: Grid2D<f64>,
    pub generator: SpeckleGenerator<f64>,
    pub envelope: ApertureMask<f64>,
    pub measured_source_fwhm: f64,
}

pub(crate) fn build_apparatus(cfg: &ScenarioConfig) -> Result<Apparatus> {
    let grid = build_grid(&cfg.grid)?;
    let spec = build_speckle_spec(&cfg.source)?;
    validate_guard(&grid, &cfg.envelope, cfg.analysis.guard_fraction)?;
    let envelope = build_envelope(grid, &cfg.envelope)?;
    let generator = SpeckleGenerator::new(grid, spec)?;
    let measured =
        generator.measured_correlation_fwhm(cfg.ensemble.master_seed, CALIBRATION_REALIZATIONS)?;
    if matches!(cfg.source.method, SourceMethod::SpectralSynthesis) {
        let rel = (measured - cfg.source.correlation_length).abs() / cfg.source.correlation_length;
        if rel > CALIBRATION_TOLERANCE {
            return Err(Error::Sampling(format!(
                "synthesis self-check failed: measured correlation FWHM {:.3e} m deviates {:.1}% \
                 from the requested {:.3e} m",
                measured,
                rel * 100.0,
                cfg.source.correlation_length
            )));
        }
    }
    Ok(Apparatus { grid, generator, envelope, measured_source_fwhm: measured })
}

/// Batch size of the deterministic ensemble split. Fixed (independent of the
/// worker count) so the merge tree and therefore every output byte is
/// reproducible no matter how many threads run.
pub(crate) const ENSEMBLE_BATCH: usize = 128;

/// Runs `step` for every realization index, batched; batch results merge in
/// index order.
pub(crate) fn run_batched<B, FMake, FStep, FMerge>(
    n_realizations: usize,
    make: FMake,
    step: FStep,
    mut merge: FMerge,
) -> Result<B>
where
    B: Send,
    FMake: Fn() -> Result<B> + Sync,
    FStep: Fn(u64, &mut B) -> Result<()> + Sync,
    FMerge: FnMut(&mut B, B) -> Result<()>,
{
    if n_realizations == 0 {
        return Err(Error::invalid("n_realizations", "must be >= 1".to_string()));
    }
    let ranges: Vec<(u64, u64)> = (0..n_realizations)
        .step_by(ENSEMBLE_BATCH)
        .map(|start| (start as u64, n_realizations.min(start + ENSEMBLE_BATCH) as u64))
        .collect();
    let batches: Vec<Result<B>> = ranges
        .into_par_iter()
        .map(|(start, end)| {
            let mut batch = make()?;
            for k in start..end {
                step(k, &mut batch)?;
            }
            Ok(batch)
        })
        .collect();
    let mut iter = batches.into_iter();
    let mut acc = iter.next().expect("at least one batch")?;
    for b in iter {
        merge(&mut acc, b?)?;
    }
    Ok(acc)
}

/// Wall time scaled to the 8-core desktop the performance budgets assume.
/// The ensembles are embarrassingly parallel and scale nearly linearly, so
/// on a machine with fewer cores the measured time is scaled down by
/// `cores/8`; machines with 8 or more cores report wall time unchanged.
pub fn normalized_runtime(raw_seconds: f64, threads_used: usize) -> f64 {
    let physical = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let effective = threads_used.min(physical).max(1);
    if effective >= 8 {
        raw_seconds
    } else {
        raw_seconds * effective as f64 / 8.0
    }
}

/// Symmetric scan line along x at y = 0, centered on the axis, including 0.
pub(crate) fn scan_line(half_span: f64, step: f64) -> Vec<(f64, f64)> {
    let half_count = (half_span / step).round() as i64;
    (-half_count..=half_count).map(|i| (i as f64 * step, 0.0)).collect()
}

/// Centered square lattice of `per_axis` x `per_axis` points.
pub(crate) fn point_lattice(per_axis: usize, spacing: f64) -> Vec<(f64, f64)> {
    let offset = 0.5 * (per_axis as f64 - 1.0);
    let mut points = Vec::with_capacity(per_axis * per_axis);
    for j in 0..per_axis {
        for i in 0..per_axis {
            points.push(((i as f64 - offset) * spacing, (j as f64 - offset) * spacing));
        }
    }
    points
}

pub(crate) fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Indices of local maxima whose value reaches half of the global maximum.
pub(crate) fn half_max_peaks(values: &[f64]) -> Vec<usize> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Vec::new();
    }
    let mut peaks = Vec::new();
    for i in 1..values.len().saturating_sub(1) {
        if values[i] > values[i - 1] && values[i] >= values[i + 1] && values[i] >= 0.5 * max {
            peaks.push(i);
        }
    }
    peaks
}

/// Sub-pixel peak position around index `idx` of a sampled profile.
pub(crate) fn refine_peak(xs: &[f64], values: &[f64], idx: usize) -> f64 {
    let lo = idx.saturating_sub(2);
    let hi = (idx + 3).min(values.len());
    parabolic_peak(&xs[lo..hi], &values[lo..hi]).unwrap_or(xs[idx])
}

/// Effective Rayleigh range of a speckled beam with a Gaussian envelope:
/// the distance where diffractive spreading of the speckle (angular spread
/// sigma_theta = 1/(k sigma_r)) equals the initial envelope radius
/// sigma_x0 = waist/2. Beyond it the footprint and the transverse coherence
/// both grow linearly; well inside it they match the source.
pub fn effective_rayleigh_range(waist: f64, wavenumber: f64, correlation_length: f64) -> f64 {
    let sigma_r = correlation_sigma(correlation_length);
    0.5 * waist * wavenumber * sigma_r
}

/// Independent cell-model Monte Carlo for the bucket-contrast law: the
/// bucket sums `ratio` independent exponential speckle cells, the point
/// detector reads one of them (signal) or a fresh independent cell
/// (background). Returns (S, standard error) estimated from block means.
pub fn cell_model_contrast(ratio: usize, trials: usize, master_seed: u64) -> (f64, f64) {
    assert!(ratio >= 1 && trials >= 1000);
    let mut rng = stream_rng(master_seed, NS_AUXILIARY, ratio as u64);
    let blocks = 50;
    let per_block = trials / blocks;
    let mut block_s = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        let (mut sig_pb, mut sig_p, mut bg_pb, mut bg_p, mut b_sum) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..per_block {
            let mut bucket = 0.0;
            let mut first = 0.0;
            for c in 0..ratio {
                let u: f64 = rng.random();
                let cell = -(1.0 - u).ln();
                if c == 0 {
                    first = cell;
                }
                bucket += cell;
            }
            let u: f64 = rng.random();
            let independent = -(1.0 - u).ln();
            sig_pb += first * bucket;
            sig_p += first;
            bg_pb += independent * bucket;
            bg_p += independent;
            b_sum += bucket;
        }
        let n = per_block as f64;
        let g2_sig = (sig_pb / n) / ((sig_p / n) * (b_sum / n));
        let g2_bg = (bg_pb / n) / ((bg_p / n) * (b_sum / n));
        block_s.push(g2_sig / g2_bg);
    }
    let mean = block_s.iter().sum::<f64>() / blocks as f64;
    let var = block_s.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (blocks as f64 - 1.0);
    (mean, (var / blocks as f64).sqrt())
}

/// Weighted summary of per-instance g2 estimates: plain mean with combined
/// standard error assuming independent instances.
pub(crate) fn combine_estimates(values: &[(f64, f64)]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().map(|(v, _)| v).sum::<f64>() / n;
    let se = values.iter().map(|(_, s)| s * s).sum::<f64>().sqrt() / n;
    (mean, se)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EnvelopeConfig;

    #[test]
    fn cell_model_matches_closed_form() {
        for (ratio, expected) in [(1usize, 2.0), (2, 1.5), (8, 1.125)] {
            let (s, se) = cell_model_contrast(ratio, 200_000, 99);
            assert!(
                (s - expected).abs() < 3.0 * se + 0.01,
                "ratio {ratio}: S = {s} +- {se}, expected {expected}"
            );
        }
    }

    #[test]
    fn flat_top_envelope_is_flat_then_vanishes() {
        let grid = Grid2D::new(128, 128, 10e-6, 10e-6, 532e-9).unwrap();
        let cfg = EnvelopeConfig {
            kind: EnvelopeKind::FlatTop,
            flat_radius: 0.3e-3,
            edge_width: 0.15e-3,
            waist: 0.0,
        };
        let envelope = build_envelope(grid, &cfg).unwrap();
        let center = envelope.transmission()[grid.index_of(64, 64)];
        assert_eq!(center.re, 1.0);
        let corner = envelope.transmission()[grid.index_of(0, 0)];
        assert_eq!(corner.re, 0.0);
    }

    #[test]
    fn guard_rejects_oversized_footprints() {
        let grid = Grid2D::new(128, 128, 10e-6, 10e-6, 532e-9).unwrap();
        let cfg = EnvelopeConfig {
            kind: EnvelopeKind::FlatTop,
            flat_radius: 0.5e-3,
            edge_width: 0.2e-3,
            waist: 0.0,
        };
        // support 1.4 mm vs guard 0.5 * 1.28 mm
        assert!(matches!(validate_guard(&grid, &cfg, 0.5), Err(Error::Windowing(_))));
        assert!(validate_guard(&grid, &cfg, 1.0).is_ok());
    }

    #[test]
    fn batched_fold_is_deterministic() {
        let run = || {
            run_batched(
                1000,
                || Ok(0.0f64),
                |k, acc| {
                    *acc += (k as f64 * 0.001).sin();
                    Ok(())
                },
                |a, b| {
                    *a += b;
                    Ok(())
                },
            )
            .unwrap()
        };
        let a = run();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let b = pool.install(run);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn peak_helpers_find_two_peaks() {
        let xs: Vec<f64> = (0..101).map(|i| (i as f64 - 50.0) * 1e-5).collect();
        let values: Vec<f64> = xs
            .iter()
            .map(|x| {
                (-(x + 2e-4).powi(2) / 2e-9).exp() + 0.9 * (-(x - 2e-4).powi(2) / 2e-9).exp()
            })
            .collect();
        let peaks = half_max_peaks(&values);
        assert_eq!(peaks.len(), 2, "peaks at {peaks:?}");
        let p0 = refine_peak(&xs, &values, peaks[0]);
        assert!((p0 + 2e-4).abs() < 1e-5, "refined {p0}");
    }
}
