//! Lens-assisted ghost imaging: the reference arm carries an imaging relay
//! (propagate z1, thin lens, propagate z2 with 1/z1 + 1/z2 = 1/f) while the
//! object arm propagates the distance z1 to the two-hole screen and bucket.
//! The correlation image at the relay's image plane is the object-plane
//! pattern copied and stretched by the magnification m = -z2/z1: peaks land
//! at m*y1 and m*y2 and their separation scales by |m| within 2%.
//!
//! Without a lens and with unequal arm distances the scenario acts as a
//! diagnostic: the correlation peaks wash out (plane mismatch).
//!
//! Data products: `ghost_image.csv`, `ghost_image.pgm`, `lens_ghost.csv`.

use std::time::Instant;

use crate::config::ScenarioConfig;
use crate::detect::{bucket_read, point_read, DetectorReading, PointDetectorSpec, RealizationRecord};
use crate::error::{Error, Result};
use crate::optics::{
    apply_mask, magnification, make_two_hole_mask, ArmChain, ArmElement, ArmSpec, LensSpec,
};
use crate::output::{fmt_sci, Product, ProductData};
use crate::scenarios::common::{
    self, build_apparatus, check_windowing_at, normalized_runtime, run_batched,
};
use crate::scenarios::{CheckResult, ScenarioOutcome, ScenarioVerdict};
use crate::stats::{ghost_image, CorrelationAccumulator, SpeckleMetricsAccumulator};

pub const NAME: &str = "lens_ghost";

pub fn default_config() -> ScenarioConfig {
    let mut cfg = super::equal_plane::default_config();
    cfg.arms.lens = true;
    cfg.arms.lens_focal_length = 0.2;
    cfg.arms.lens_z1 = 0.4;
    cfg.arms.lens_z2 = 0.4;
    cfg.arms.z_object = 0.4;
    cfg.arms.z_reference = 0.4; // informational; the relay defines the arm
    cfg.object.y1 = -0.25e-3;
    cfg.object.y2 = 0.5e-3;
    cfg.object.hole_side = 10e-6;
    cfg.detector.side = 10e-6;
    cfg.detector.scan_half_span = 1.3e-3;
    cfg.detector.scan_step = 10e-6;
    cfg.ensemble.n_realizations = 5000;
    cfg
}

struct Batch {
    accumulator: CorrelationAccumulator<f64>,
    metrics: SpeckleMetricsAccumulator<f64>,
}

pub fn run(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let t0 = Instant::now();
    let diagnostic = !cfg.arms.lens;
    if !diagnostic && (cfg.arms.z_object - cfg.arms.lens_z1).abs() > 1e-12 {
        return Err(Error::invalid(
            "z_object",
            format!(
                "the object plane must sit at the relay object distance lens_z1 = {} m",
                cfg.arms.lens_z1
            ),
        ));
    }
    let l_c = cfg.source.correlation_length;
    if cfg.object.hole_side >= l_c {
        return Err(Error::invalid(
            "hole_side",
            "holes must be small compared to the correlation length".to_string(),
        ));
    }
    if (cfg.object.y1 - cfg.object.y2).abs() <= l_c {
        return Err(Error::invalid(
            "y2",
            "hole separation must exceed the correlation length".to_string(),
        ));
    }
    let apparatus = build_apparatus(cfg)?;
    let grid = apparatus.grid;
    let seed = cfg.ensemble.master_seed;

    let mask = make_two_hole_mask(grid, cfg.object.y1, cfg.object.y2, cfg.object.hole_side)?;
    let object_arm = ArmChain::compile(ArmSpec::free_space(cfg.arms.z_object), grid)?;
    let reference_arm = if diagnostic {
        ArmChain::compile(ArmSpec::free_space(cfg.arms.z_reference), grid)?
    } else {
        let lens = LensSpec::new(cfg.arms.lens_focal_length, cfg.arms.lens_aperture)?;
        ArmChain::compile(
            ArmSpec {
                elements: vec![ArmElement::ImageRelay {
                    z1: cfg.arms.lens_z1,
                    lens,
                    z2: cfg.arms.lens_z2,
                }],
            },
            grid,
        )?
    };

    let m = if diagnostic { 1.0 } else { magnification(cfg.arms.lens_z1, cfg.arms.lens_z2) };
    let expected_peaks = {
        let mut p = [m * cfg.object.y1, m * cfg.object.y2];
        p.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        p
    };
    let expected_separation = expected_peaks[1] - expected_peaks[0];

    let scan = common::scan_line(cfg.detector.scan_half_span, cfg.detector.scan_step);
    let detector = PointDetectorSpec::new(grid, cfg.detector.side, scan)?;
    let positions = detector.snapped_positions();
    let xs: Vec<f64> = positions.iter().map(|p| p.0).collect();
    if expected_peaks[0] < xs[0] || expected_peaks[1] > xs[xs.len() - 1] {
        return Err(Error::invalid(
            "scan_half_span",
            format!(
                "expected image peaks at {:.3e} m and {:.3e} m fall outside the scan",
                expected_peaks[0], expected_peaks[1]
            ),
        ));
    }
    let margin = cfg.analysis.background_margin_lc * l_c * m.abs().max(1.0);
    let background: Vec<usize> = positions
        .iter()
        .enumerate()
        .filter(|(_, &(x, _))| expected_peaks.iter().all(|&p| (x - p).abs() > margin))
        .map(|(i, _)| i)
        .collect();

    // Windowing checks at both detection planes on realization 0.
    let mut ws0 = object_arm.workspace();
    let source0 = apply_mask(&apparatus.generator.generate(0, seed, &mut ws0), &apparatus.envelope)?;
    let outer_obj =
        check_windowing_at(&object_arm.evaluate(&source0, &mut ws0)?, "lens-ghost object plane")?;
    let reference0 = reference_arm.evaluate(&source0, &mut ws0)?;
    let outer_ref = check_windowing_at(&reference0, "lens-ghost image plane")?;
    let outer_band = outer_obj.max(outer_ref);

    let (mx0, my0, mwx, mwy) = super::equal_plane::metric_window_for(&grid, &cfg.envelope);
    let metric_frames = cfg.analysis.metric_frames as u64;

    let batch = run_batched(
        cfg.ensemble.n_realizations,
        || {
            Ok(Batch {
                accumulator: CorrelationAccumulator::new(positions.clone()),
                metrics: SpeckleMetricsAccumulator::new(grid, mx0, my0, mwx, mwy)?,
            })
        },
        |k, batch| {
            let mut ws = object_arm.workspace();
            let source =
                apply_mask(&apparatus.generator.generate(k, seed, &mut ws), &apparatus.envelope)?;
            // Arms differ; evaluate both on the split copies.
            let field_obj = object_arm.evaluate(&source, &mut ws)?;
            let field_ref = reference_arm.evaluate(&source, &mut ws)?;
            let bucket = bucket_read(&apply_mask(&field_obj, &mask)?);
            let point_readings: Vec<DetectorReading<f64>> = (0..detector.len())
                .map(|p| point_read(&field_ref, &detector, p))
                .collect::<Result<_>>()?;
            batch.accumulator.accumulate(&RealizationRecord {
                realization_index: k,
                bucket,
                point_readings,
            })?;
            if k < metric_frames {
                batch.metrics.feed(&field_ref.intensity())?;
            }
            Ok(())
        },
        |a, b| {
            a.accumulator.merge(&b.accumulator)?;
            a.metrics.merge(&b.metrics)?;
            Ok(())
        },
    )?;

    let map = batch.accumulator.finalize()?;
    let image = ghost_image(&map);
    let metrics = batch.metrics.finalize()?;

    let mut checks = Vec::new();
    let mut notes = Vec::new();

    if diagnostic {
        // Plane mismatch: no correlation structure should survive at the
        // would-be peak positions.
        let bg_std = region_std(&image, &background);
        let peak_c = expected_peaks
            .iter()
            .map(|&p| {
                image
                    .iter()
                    .zip(&xs)
                    .filter(|(_, &x)| (x - p).abs() < 3.0 * l_c)
                    .map(|(c, _)| c.abs())
                    .fold(0.0f64, f64::max)
            })
            .fold(0.0f64, f64::max);
        checks.push(CheckResult::at_most(
            "ghost peaks washed out (max |C| vs 5x background noise)",
            peak_c,
            5.0 * bg_std,
        ));
        notes.push(format!(
            "correlation-plane mismatch diagnostic: no lens, z_object = {} m, z_reference = {} m",
            cfg.arms.z_object, cfg.arms.z_reference
        ));
    } else {
        let peaks = common::half_max_peaks(&image);
        checks.push(CheckResult::range(
            "ghost-image peaks above half maximum",
            peaks.len() as f64,
            2.0,
            2.0,
        ));
        if peaks.len() == 2 {
            let mut refined: Vec<f64> =
                peaks.iter().map(|&i| common::refine_peak(&xs, &image, i)).collect();
            refined.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let separation = refined[1] - refined[0];
            checks.push(CheckResult::range(
                "peak separation / (|m| * hole separation)",
                separation / expected_separation,
                0.98,
                1.02,
            ));
            let tol = (2.0 * grid.dx()).max(0.01 * expected_separation);
            checks.push(CheckResult::at_most(
                "peak 1 offset from m*y (meters)",
                (refined[0] - expected_peaks[0]).abs(),
                tol,
            ));
            checks.push(CheckResult::at_most(
                "peak 2 offset from m*y (meters)",
                (refined[1] - expected_peaks[1]).abs(),
                tol,
            ));
            notes.push(format!(
                "m = {m:.3}: peaks at {:.6e} m and {:.6e} m, separation {:.6e} m \
                 (expected {:.6e} m)",
                refined[0], refined[1], separation, expected_separation
            ));
        }
        notes.push(format!(
            "image-plane l_c {:.3e} m (source {:.3e} m stretched by |m| = {:.2})",
            metrics.correlation_length,
            l_c,
            m.abs()
        ));
    }
    checks.push(CheckResult::at_most(
        "outer-band power fraction",
        outer_band,
        common::OUTER_BAND_LIMIT,
    ));

    let measured_separation = {
        let peaks = common::half_max_peaks(&image);
        if peaks.len() == 2 {
            let a = common::refine_peak(&xs, &image, peaks[0]);
            let b = common::refine_peak(&xs, &image, peaks[1]);
            (b - a).abs()
        } else {
            f64::NAN
        }
    };
    let products = vec![
        Product::csv(
            "ghost_image.csv",
            "x_m,g2,covariance,stderr",
            map.entries
                .iter()
                .zip(&xs)
                .map(|(e, x)| {
                    format!(
                        "{},{},{},{}",
                        fmt_sci(*x),
                        fmt_sci(e.g2.unwrap_or(f64::NAN)),
                        fmt_sci(e.covariance),
                        fmt_sci(e.g2_stderr.unwrap_or(f64::NAN))
                    )
                })
                .collect(),
        ),
        Product {
            filename: "ghost_image.pgm".to_string(),
            data: ProductData::PgmP2 { width: image.len(), height: 1, values: image.clone() },
        },
        Product::csv(
            "lens_ghost.csv",
            "magnification,expected_separation_m,measured_separation_m,relative_error",
            vec![format!(
                "{},{},{},{}",
                fmt_sci(m),
                fmt_sci(expected_separation),
                fmt_sci(measured_separation),
                fmt_sci((measured_separation - expected_separation).abs() / expected_separation)
            )],
        ),
    ];

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

fn region_std(values: &[f64], indices: &[usize]) -> f64 {
    if indices.len() < 2 {
        return f64::INFINITY;
    }
    let n = indices.len() as f64;
    let mean = indices.iter().map(|&i| values[i]).sum::<f64>() / n;
    let var = indices.iter().map(|&i| (values[i] - mean).powi(2)).sum::<f64>() / (n - 1.0);
    var.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config() -> ScenarioConfig {
        let mut cfg = default_config();
        cfg.grid.nx = 192;
        cfg.grid.ny = 192;
        cfg.source.correlation_length = 50e-6;
        cfg.envelope.flat_radius = 0.3e-3;
        cfg.envelope.edge_width = 0.08e-3;
        cfg.analysis.guard_fraction = 0.55;
        cfg.arms.lens_focal_length = 0.065;
        cfg.arms.lens_z1 = 0.13;
        cfg.arms.lens_z2 = 0.13;
        cfg.arms.z_object = 0.13;
        cfg.object.y1 = -0.1e-3;
        cfg.object.y2 = 0.2e-3;
        cfg.detector.scan_half_span = 0.38e-3;
        cfg.ensemble.n_realizations = 1200;
        cfg.analysis.metric_frames = 120;
        cfg
    }

    #[test]
    fn unit_magnification_mirrors_the_holes() {
        let outcome = run(&smoke_config()).unwrap();
        let v = &outcome.verdict;
        assert_eq!(v.observed("ghost-image peaks above half maximum"), Some(2.0));
        let ratio = v.observed("peak separation / (|m| * hole separation)").unwrap();
        assert!((0.95..=1.05).contains(&ratio), "separation ratio {ratio}");
    }

    #[test]
    fn double_magnification_doubles_the_separation() {
        let mut cfg = smoke_config();
        // z1 = 1.5 f, z2 = 3 f -> m = -2.
        cfg.arms.lens_z1 = 0.0975;
        cfg.arms.lens_z2 = 0.195;
        cfg.arms.z_object = 0.0975;
        cfg.object.y1 = -0.05e-3;
        cfg.object.y2 = 0.1e-3;
        cfg.detector.scan_half_span = 0.32e-3;
        let outcome = run(&cfg).unwrap();
        let ratio = outcome
            .verdict
            .observed("peak separation / (|m| * hole separation)")
            .unwrap();
        assert!((0.95..=1.05).contains(&ratio), "separation ratio {ratio}");
        // expected separation = 2 * 0.15 mm
        let note = outcome.verdict.notes.iter().find(|n| n.contains("m = -2")).unwrap();
        assert!(note.contains("3.0"), "{note}");
    }

    #[test]
    fn missing_lens_with_unequal_arms_washes_out_the_peaks() {
        let mut cfg = smoke_config();
        cfg.arms.lens = false;
        cfg.arms.z_object = 0.05;
        cfg.arms.z_reference = 0.08;
        cfg.ensemble.n_realizations = 800;
        let outcome = run(&cfg).unwrap();
        assert!(outcome.verdict.pass, "washout diagnostic failed:\n{}", outcome.verdict);
        assert!(outcome.verdict.notes.iter().any(|n| n.contains("mismatch diagnostic")));
    }

    #[test]
    fn imaging_condition_violation_is_rejected() {
        let mut cfg = smoke_config();
        cfg.arms.lens_z2 = 0.15; // violates 1/z1 + 1/z2 = 1/f by ~10%
        let err = run(&cfg).unwrap_err();
        assert!(err.to_string().contains("required z2"), "{err}");
    }
}
