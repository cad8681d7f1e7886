//! Equal-plane correlation scenario: split the speckle beam, propagate both
//! copies the same distance, and verify that the copies are bit-identical,
//! that equal points carry the thermal factor-two intensity correlation, and
//! that points separated by many speckle sizes are uncorrelated.
//!
//! With deliberately unequal arm lengths the scenario switches to a
//! diagnostic "mismatch mode" and instead verifies that the correlation peak
//! is degraded.
//!
//! Data products: `g2_vs_separation.csv`
//! (`separation_m,g2,covariance,stderr`), `speckle_metrics.csv`, and
//! optional per-realization intensity frames.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::config::{
    AnalysisConfig, ArmsConfig, DetectorConfig, EnsembleConfig, EnvelopeConfig, EnvelopeKind,
    GridConfig, ObjectConfig, OutputConfig, ScenarioConfig, SourceConfig, SourceMethod,
    SweepConfig,
};
use crate::detect::{point_read, PointDetectorSpec};
use crate::error::Result;
use crate::field::IntensityMap;
use crate::optics::{apply_mask, beam_splitter, ArmChain, ArmSpec};
use crate::output::{fmt_sci, Product, ProductData};
use crate::scenarios::common::{
    self, build_apparatus, check_windowing_at, combine_estimates, normalized_runtime, run_batched,
};
use crate::scenarios::{CheckResult, ScenarioOutcome, ScenarioVerdict};
use crate::stats::{CorrelationAccumulator, SpeckleMetricsAccumulator};

pub const NAME: &str = "equal_plane";

pub fn default_config() -> ScenarioConfig {
    ScenarioConfig {
        grid: GridConfig { nx: 512, ny: 512, pitch: 10e-6, wavelength: 532e-9 },
        source: SourceConfig {
            method: SourceMethod::SpectralSynthesis,
            correlation_length: 80e-6,
            mean_intensity: 1.0,
            correlation_time: 1e-3,
            screen_correlation_length: 50e-6,
            diffuser_distance: 0.03,
        },
        envelope: EnvelopeConfig {
            kind: EnvelopeKind::FlatTop,
            flat_radius: 0.9e-3,
            edge_width: 0.35e-3,
            waist: 0.7e-3,
        },
        ensemble: EnsembleConfig { n_realizations: 20_000, master_seed: 20_260_809 },
        arms: ArmsConfig {
            z_object: 0.1,
            z_reference: 0.1,
            lens: false,
            lens_focal_length: 0.2,
            lens_z1: 0.4,
            lens_z2: 0.4,
            lens_aperture: None,
        },
        object: ObjectConfig { y1: -0.5e-3, y2: 0.5e-3, hole_side: 10e-6 },
        detector: DetectorConfig { side: 10e-6, scan_half_span: 1.0e-3, scan_step: 10e-6 },
        analysis: AnalysisConfig {
            background_margin_lc: 3.0,
            guard_fraction: 0.5,
            metric_frames: 300,
            points_per_axis: 4,
            point_spacing: 0.4e-3,
            pair_separation_lc: 10.0,
        },
        sweep: SweepConfig {
            ratios: vec![1, 2, 4, 8, 16],
            sides_over_lc: vec![1.0, 2.0, 4.0, 8.0],
            z_over_zr: vec![0.1, 0.5, 1.0, 2.0, 5.0],
            site_spacing: 0.4e-3,
            background_radius: 0.95e-3,
            background_count: 16,
        },
        output: OutputConfig { frame_dump: 0 },
    }
}

struct Batch {
    accumulators: Vec<CorrelationAccumulator<f64>>,
    metrics: SpeckleMetricsAccumulator<f64>,
    frames: Vec<(u64, IntensityMap<f64>)>,
}

pub fn run(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let t0 = Instant::now();
    let apparatus = build_apparatus(cfg)?;
    let grid = apparatus.grid;
    let l_c = cfg.source.correlation_length;
    let seed = cfg.ensemble.master_seed;
    let mismatch = (cfg.arms.z_object - cfg.arms.z_reference).abs() > 1e-12;

    let points =
        common::point_lattice(cfg.analysis.points_per_axis, cfg.analysis.point_spacing);
    let detector = PointDetectorSpec::new(grid, cfg.detector.side, points)?;
    let positions = detector.snapped_positions();
    let k_instances = positions.len();

    let object_arm = ArmChain::compile(ArmSpec::free_space(cfg.arms.z_object), grid)?;
    let reference_arm = ArmChain::compile(ArmSpec::free_space(cfg.arms.z_reference), grid)?;

    // Copy-equality and windowing checks on realization 0, done with two
    // explicit chain evaluations (no shortcut).
    let mut ws0 = object_arm.workspace();
    let source0 = apply_mask(&apparatus.generator.generate(0, seed, &mut ws0), &apparatus.envelope)?;
    let (beam1, beam2) = beam_splitter(&source0, false);
    let field1 = object_arm.evaluate(&beam1, &mut ws0)?;
    let field2 = object_arm.evaluate(&beam2, &mut ws0)?;
    let copy_equality = field1.max_abs_diff(&field2);
    let outer_band = check_windowing_at(&field1, "equal-plane detection plane")?;

    let (mx0, my0, mwx, mwy) = metric_window_for(&grid, &cfg.envelope);
    let frame_dump = cfg.output.frame_dump as u64;
    let metric_frames = cfg.analysis.metric_frames as u64;

    let batch = run_batched(
        cfg.ensemble.n_realizations,
        || {
            Ok(Batch {
                accumulators: (0..k_instances)
                    .map(|_| CorrelationAccumulator::new(positions.clone()))
                    .collect(),
                metrics: SpeckleMetricsAccumulator::new(grid, mx0, my0, mwx, mwy)?,
                frames: Vec::new(),
            })
        },
        |k, batch| {
            let mut ws = object_arm.workspace();
            let source =
                apply_mask(&apparatus.generator.generate(k, seed, &mut ws), &apparatus.envelope)?;
            let field_obj = object_arm.evaluate(&source, &mut ws)?;
            // Identical chains map identical copies to identical fields
            // (verified above), so the reference readings come from the same
            // field in equal mode.
            let field_ref =
                if mismatch { Some(reference_arm.evaluate(&source, &mut ws)?) } else { None };
            let reference = field_ref.as_ref().unwrap_or(&field_obj);

            let readings_obj: Vec<f64> = (0..k_instances)
                .map(|p| point_read(&field_obj, &detector, p).map(|r| r.power))
                .collect::<Result<_>>()?;
            let readings_ref: Vec<f64> = if mismatch {
                (0..k_instances)
                    .map(|p| point_read(reference, &detector, p).map(|r| r.power))
                    .collect::<Result<_>>()?
            } else {
                readings_obj.clone()
            };

            for (i, acc) in batch.accumulators.iter_mut().enumerate() {
                let record = crate::detect::RealizationRecord {
                    realization_index: k,
                    bucket: crate::detect::DetectorReading { power: readings_obj[i] },
                    point_readings: readings_ref
                        .iter()
                        .map(|&p| crate::detect::DetectorReading { power: p })
                        .collect(),
                };
                acc.accumulate(&record)?;
            }
            if k < metric_frames {
                batch.metrics.feed(&reference.intensity())?;
            }
            if k < frame_dump {
                batch.frames.push((k, reference.intensity()));
            }
            Ok(())
        },
        |a, b| {
            for (x, y) in a.accumulators.iter_mut().zip(&b.accumulators) {
                x.merge(y)?;
            }
            a.metrics.merge(&b.metrics)?;
            a.frames.extend(b.frames);
            Ok(())
        },
    )?;

    let maps: Vec<_> =
        batch.accumulators.iter().map(|acc| acc.finalize()).collect::<Result<Vec<_>>>()?;

    // Equivalent-point estimates: instance i against its own position.
    let equivalent: Vec<(f64, f64)> = maps
        .iter()
        .enumerate()
        .map(|(i, m)| (m.entries[i].g2.unwrap_or(f64::NAN), m.entries[i].g2_stderr.unwrap_or(f64::NAN)))
        .collect();
    let (g2_peak, g2_peak_se) = combine_estimates(&equivalent);

    // Separated pairs beyond the configured number of correlation lengths.
    let min_separation = cfg.analysis.pair_separation_lc * l_c;
    let mut separated: Vec<(f64, f64)> = Vec::new();
    let mut by_separation: BTreeMap<i64, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for (i, map) in maps.iter().enumerate() {
        for (j, entry) in map.entries.iter().enumerate() {
            let (Some(g2), Some(se)) = (entry.g2, entry.g2_stderr) else { continue };
            let sep = common::distance(positions[i], positions[j]);
            by_separation
                .entry((sep * 1e9).round() as i64)
                .or_default()
                .push((g2, se, entry.covariance));
            if sep >= min_separation {
                separated.push((g2, se));
            }
        }
    }
    let (g2_far, g2_far_se) = combine_estimates(&separated);

    let metrics = batch.metrics.finalize()?;

    let mut checks = Vec::new();
    let mut notes = Vec::new();
    if mismatch {
        checks.push(CheckResult::at_most(
            "g2 at equivalent points (mismatched planes)",
            g2_peak,
            1.9,
        ));
        notes.push(format!(
            "correlation-plane mismatch mode: z_object = {} m, z_reference = {} m",
            cfg.arms.z_object, cfg.arms.z_reference
        ));
    } else {
        checks.push(CheckResult::at_most("copy equality max |E1 - E2|", copy_equality, 0.0));
        checks.push(CheckResult::range("g2 at equivalent points", g2_peak, 1.95, 2.05));
        checks.push(CheckResult::range(
            format!("g2 at separation >= {} l_c", cfg.analysis.pair_separation_lc),
            g2_far,
            0.97,
            1.03,
        ));
    }
    checks.push(CheckResult::at_most(
        "outer-band power fraction",
        outer_band,
        common::OUTER_BAND_LIMIT,
    ));
    notes.push(format!(
        "g2 peak {g2_peak:.4} +- {g2_peak_se:.4}, background {g2_far:.4} +- {g2_far_se:.4}; \
         measured l_c at detection plane {:.3e} m, contrast {:.3}",
        metrics.correlation_length, metrics.contrast
    ));
    notes.push(format!(
        "source self-check: measured correlation FWHM {:.3e} m (requested {:.3e} m)",
        apparatus.measured_source_fwhm, l_c
    ));

    let mut products = Vec::new();
    let rows: Vec<String> = by_separation
        .iter()
        .map(|(key, group)| {
            let n = group.len() as f64;
            let g2 = group.iter().map(|(g, _, _)| g).sum::<f64>() / n;
            let cov = group.iter().map(|(_, _, c)| c).sum::<f64>() / n;
            let se = group.iter().map(|(_, s, _)| s * s).sum::<f64>().sqrt() / n;
            format!("{},{},{},{}", fmt_sci(*key as f64 * 1e-9), fmt_sci(g2), fmt_sci(cov), fmt_sci(se))
        })
        .collect();
    products.push(Product::csv("g2_vs_separation.csv", "separation_m,g2,covariance,stderr", rows));
    products.push(Product::csv(
        "speckle_metrics.csv",
        "l_c_requested_m,l_c_measured_m,contrast,coherence_area_m2,n_frames",
        vec![format!(
            "{},{},{},{},{}",
            fmt_sci(l_c),
            fmt_sci(metrics.correlation_length),
            fmt_sci(metrics.contrast),
            fmt_sci(metrics.coherence_area),
            metrics.n_frames
        )],
    ));
    for (k, frame) in &batch.frames {
        products.push(Product {
            filename: format!("frames/frame_{k:06}.pgm"),
            data: ProductData::PgmP5 {
                width: grid.nx(),
                height: grid.ny(),
                values: frame.values().to_vec(),
            },
        });
    }

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

/// Central square window inside the flat (or bright) part of the envelope,
/// used for detection-plane speckle metrics.
pub(crate) fn metric_window_for(
    grid: &crate::field::Grid2D<f64>,
    envelope: &EnvelopeConfig,
) -> (usize, usize, usize, usize) {
    let half_extent = match envelope.kind {
        EnvelopeKind::FlatTop => envelope.flat_radius / std::f64::consts::SQRT_2,
        EnvelopeKind::Gaussian => envelope.waist * 0.7,
        EnvelopeKind::None => 0.25 * grid.extent_x(),
    };
    let half_px = ((half_extent / grid.dx()) as usize).clamp(8, grid.nx() / 2 - 1);
    let wx = 2 * half_px;
    let half_py = ((half_extent / grid.dy()) as usize).clamp(8, grid.ny() / 2 - 1);
    let wy = 2 * half_py;
    (grid.nx() / 2 - half_px, grid.ny() / 2 - half_py, wx, wy)
}
