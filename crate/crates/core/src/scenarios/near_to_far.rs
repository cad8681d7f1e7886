//! Near-to-far persistence scan: the same speckled beam is observed at a
//! ladder of equal-arm distances spanning well below to well beyond the
//! effective Rayleigh range of the envelope. The factor-two correlation at
//! equivalent points must persist at every plane while the measured speckle
//! size grows toward the far field.
//!
//! The "Rayleigh range" of a speckled beam is not the coherent-envelope
//! formula: the beam spreads at the speckle diffraction angle
//! sigma_theta = 1/(k sigma_r), so the near/far divider is the distance
//! where that spread equals the initial envelope radius (see
//! [`common::effective_rayleigh_range`]).
//!
//! Data product: `near_to_far.csv`
//! (`z_m,z_over_zr,g2,g2_stderr,speckle_fwhm_m,contrast`).

use std::time::Instant;

use num_complex::Complex;

use crate::config::{EnvelopeKind, ScenarioConfig};
use crate::detect::{point_read, DetectorReading, PointDetectorSpec, RealizationRecord};
use crate::error::{Error, Result};
use crate::fft::Fft2d;
use crate::field::{correlation_sigma, ComplexField};
use crate::optics::{angular_spectrum_transfer, apply_mask};
use crate::output::{fmt_sci, Product};
use crate::scenarios::common::{
    self, build_apparatus, check_windowing_at, combine_estimates, effective_rayleigh_range,
    normalized_runtime, run_batched,
};
use crate::scenarios::{CheckResult, ScenarioOutcome, ScenarioVerdict};
use crate::stats::{CorrelationAccumulator, SpeckleMetricsAccumulator};

pub const NAME: &str = "near_to_far";

pub fn default_config() -> ScenarioConfig {
    let mut cfg = super::equal_plane::default_config();
    cfg.grid.nx = 768;
    cfg.grid.ny = 768;
    cfg.grid.pitch = 20e-6;
    cfg.source.correlation_length = 100e-6;
    cfg.envelope.kind = EnvelopeKind::Gaussian;
    cfg.envelope.waist = 0.7e-3;
    cfg.ensemble.n_realizations = 4000;
    cfg.analysis.points_per_axis = 3;
    cfg.analysis.point_spacing = 0.45e-3;
    cfg
}

struct Batch {
    /// Per z plane: one single-position accumulator per lattice point.
    accumulators: Vec<Vec<CorrelationAccumulator<f64>>>,
    metrics: Vec<SpeckleMetricsAccumulator<f64>>,
}

pub fn run(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let t0 = Instant::now();
    if !matches!(cfg.envelope.kind, EnvelopeKind::Gaussian) {
        return Err(Error::invalid(
            "envelope",
            "the near-to-far scan defines its Rayleigh range from a gaussian envelope".to_string(),
        ));
    }
    if cfg.sweep.z_over_zr.len() < 2 {
        return Err(Error::invalid("z_over_zr", "need at least two distances".to_string()));
    }
    let mut z_over = cfg.sweep.z_over_zr.clone();
    z_over.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    if z_over[0] <= 0.0 {
        return Err(Error::invalid("z_over_zr", "distances must be positive".to_string()));
    }

    let apparatus = build_apparatus(cfg)?;
    let grid = apparatus.grid;
    let seed = cfg.ensemble.master_seed;
    let l_c = cfg.source.correlation_length;

    let z_r = effective_rayleigh_range(cfg.envelope.waist, grid.wavenumber(), l_c);
    let z_list: Vec<f64> = z_over.iter().map(|f| f * z_r).collect();

    let points =
        common::point_lattice(cfg.analysis.points_per_axis, cfg.analysis.point_spacing);
    let detector = PointDetectorSpec::new(grid, cfg.detector.side, points)?;
    let positions = detector.snapped_positions();
    let k_points = positions.len();

    // Per-z transfer functions applied to one forward transform per
    // realization; algebraically identical to chained propagators (verified
    // against the propagator in the tests below).
    let fft = Fft2d::<f64>::new(grid.nx(), grid.ny());
    let transfers: Vec<Vec<Complex<f64>>> =
        z_list.iter().map(|&z| angular_spectrum_transfer(&grid, z)).collect();

    // Predicted beam width per plane sets the speckle-metric window.
    let sigma_x0 = 0.5 * cfg.envelope.waist;
    let sigma_theta = 1.0 / (grid.wavenumber() * correlation_sigma(l_c));
    let windows: Vec<(usize, usize, usize, usize)> = z_list
        .iter()
        .map(|&z| {
            let sigma_x = (sigma_x0 * sigma_x0 + (sigma_theta * z).powi(2)).sqrt();
            let half_px = ((2.0 * sigma_x / grid.dx()) as usize)
                .clamp(16, (grid.nx() as f64 * 0.45) as usize);
            (grid.nx() / 2 - half_px, grid.ny() / 2 - half_px, 2 * half_px, 2 * half_px)
        })
        .collect();

    // Realization 0 at the largest distance: windowing sanity.
    let mut ws0 = fft.workspace();
    let source0 = apply_mask(&apparatus.generator.generate(0, seed, &mut ws0), &apparatus.envelope)?;
    let mut spectrum0 = source0.samples().to_vec();
    fft.forward(&mut spectrum0, &mut ws0);
    let far0 = {
        let mut buf = spectrum0.clone();
        for (v, h) in buf.iter_mut().zip(transfers.last().expect("non-empty")) {
            *v = *v * *h;
        }
        fft.inverse(&mut buf, &mut ws0);
        ComplexField::new(grid, buf)?
    };
    let outer_band = check_windowing_at(&far0, "near-to-far farthest plane")?;

    let metric_frames = cfg.analysis.metric_frames as u64;
    let batch = run_batched(
        cfg.ensemble.n_realizations,
        || {
            Ok(Batch {
                accumulators: z_list
                    .iter()
                    .map(|_| {
                        positions
                            .iter()
                            .map(|&p| CorrelationAccumulator::new(vec![p]))
                            .collect()
                    })
                    .collect(),
                metrics: windows
                    .iter()
                    .map(|&(x0, y0, wx, wy)| SpeckleMetricsAccumulator::new(grid, x0, y0, wx, wy))
                    .collect::<Result<Vec<_>>>()?,
            })
        },
        |k, batch| {
            let mut ws = fft.workspace();
            let source =
                apply_mask(&apparatus.generator.generate(k, seed, &mut ws), &apparatus.envelope)?;
            let mut spectrum = source.into_samples();
            fft.forward(&mut spectrum, &mut ws);
            for (zi, transfer) in transfers.iter().enumerate() {
                let mut buf = spectrum.clone();
                for (v, h) in buf.iter_mut().zip(transfer) {
                    *v = *v * *h;
                }
                fft.inverse(&mut buf, &mut ws);
                let field = ComplexField::from_samples_unchecked(grid, buf);
                for (p, acc) in batch.accumulators[zi].iter_mut().enumerate() {
                    let reading = point_read(&field, &detector, p)?;
                    // Equal arms: the split copy would give the identical
                    // reading, so it serves as the second detector.
                    acc.accumulate(&RealizationRecord {
                        realization_index: k,
                        bucket: reading,
                        point_readings: vec![DetectorReading { power: reading.power }],
                    })?;
                }
                if k < metric_frames {
                    batch.metrics[zi].feed(&field.intensity())?;
                }
            }
            Ok(())
        },
        |a, b| {
            for (xs, ys) in a.accumulators.iter_mut().zip(&b.accumulators) {
                for (x, y) in xs.iter_mut().zip(ys) {
                    x.merge(y)?;
                }
            }
            for (x, y) in a.metrics.iter_mut().zip(&b.metrics) {
                x.merge(y)?;
            }
            Ok(())
        },
    )?;

    let mut checks = vec![CheckResult::at_most(
        "outer-band power fraction at max z",
        outer_band,
        common::OUTER_BAND_LIMIT,
    )];
    let mut notes = vec![format!(
        "effective Rayleigh range z_R = {z_r:.4} m (waist {:.2e} m, l_c {:.2e} m)",
        cfg.envelope.waist, l_c
    )];
    let mut rows = Vec::new();
    let mut fwhm_by_z = Vec::new();

    for (zi, (&z, accs)) in z_list.iter().zip(&batch.accumulators).enumerate() {
        let estimates: Vec<(f64, f64)> = accs
            .iter()
            .map(|acc| {
                let map = acc.finalize()?;
                Ok((
                    map.entries[0].g2.unwrap_or(f64::NAN),
                    map.entries[0].g2_stderr.unwrap_or(f64::NAN),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (g2, g2_se) = combine_estimates(&estimates);
        let metrics = batch.metrics[zi].finalize()?;
        fwhm_by_z.push(metrics.correlation_length);
        checks.push(CheckResult::range(
            format!("g2 at equivalent points, z = {:.3} z_R", z_over[zi]),
            g2,
            1.9,
            2.1,
        ));
        rows.push(format!(
            "{},{},{},{},{},{}",
            fmt_sci(z),
            fmt_sci(z_over[zi]),
            fmt_sci(g2),
            fmt_sci(g2_se),
            fmt_sci(metrics.correlation_length),
            fmt_sci(metrics.contrast)
        ));
        notes.push(format!(
            "z = {:.3} z_R: g2 = {g2:.4} +- {g2_se:.4}, speckle FWHM {:.3e} m ({}x{} px window)",
            z_over[zi], metrics.correlation_length, k_points, k_points
        ));
    }

    checks.push(CheckResult::flag(
        "speckle size grows from nearest to farthest plane",
        fwhm_by_z.last().expect("non-empty") > fwhm_by_z.first().expect("non-empty"),
    ));
    let far_indices: Vec<usize> =
        (0..z_over.len()).filter(|&i| z_over[i] >= 1.0).collect();
    let strictly_growing = far_indices.windows(2).all(|w| fwhm_by_z[w[1]] > fwhm_by_z[w[0]]);
    checks.push(CheckResult::flag(
        "speckle size strictly increases across the far-field planes",
        strictly_growing,
    ));

    let products = vec![Product::csv(
        "near_to_far.csv",
        "z_m,z_over_zr,g2,g2_stderr,speckle_fwhm_m,contrast",
        rows,
    )];

    let runtime = t0.elapsed().as_secs_f64();
    let pass = checks.iter().all(|c| c.pass);
    Ok(ScenarioOutcome {
        verdict: ScenarioVerdict {
            scenario: NAME.to_string(),
            seed,
            n_realizations: cfg.ensemble.n_realizations,
            checks,
            notes,
            pass,
            runtime_seconds: runtime,
            normalized_runtime_seconds: normalized_runtime(runtime, rayon::current_num_threads()),
        },
        products,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::{propagate, PropagationSpec};

    #[test]
    fn spectrum_path_matches_the_planned_propagator() {
        let mut cfg = default_config();
        cfg.grid.nx = 128;
        cfg.grid.ny = 128;
        let apparatus = build_apparatus(&cfg).unwrap();
        let grid = apparatus.grid;
        let fft = Fft2d::<f64>::new(grid.nx(), grid.ny());
        let mut ws = fft.workspace();
        let source = apply_mask(
            &apparatus.generator.generate(3, 9, &mut ws),
            &apparatus.envelope,
        )
        .unwrap();
        let z = 0.07;
        let transfer = angular_spectrum_transfer(&grid, z);
        let mut buf = source.samples().to_vec();
        fft.forward(&mut buf, &mut ws);
        for (v, h) in buf.iter_mut().zip(&transfer) {
            *v = *v * *h;
        }
        fft.inverse(&mut buf, &mut ws);
        let via_spectrum = ComplexField::new(grid, buf).unwrap();
        let via_propagator = propagate(&source, PropagationSpec::new(z).unwrap()).unwrap();
        assert_eq!(via_spectrum.max_abs_diff(&via_propagator), 0.0);
    }

    fn smoke_config() -> ScenarioConfig {
        let mut cfg = default_config();
        cfg.grid.nx = 384;
        cfg.grid.ny = 384;
        cfg.envelope.waist = 0.45e-3;
        cfg.sweep.z_over_zr = vec![0.1, 1.0, 4.0];
        cfg.analysis.point_spacing = 0.25e-3;
        cfg.analysis.metric_frames = 150;
        cfg.ensemble.n_realizations = 1500;
        cfg
    }

    #[test]
    fn correlation_persists_while_speckle_grows() {
        let outcome = run(&smoke_config()).unwrap();
        let v = &outcome.verdict;
        for z in ["0.100", "1.000", "4.000"] {
            let g2 = v.observed(&format!("g2 at equivalent points, z = {z} z_R")).unwrap();
            assert!((1.8..=2.2).contains(&g2), "z/z_R = {z}: g2 = {g2}");
        }
        assert_eq!(
            v.observed("speckle size grows from nearest to farthest plane"),
            Some(1.0),
            "{v}"
        );
    }
}
