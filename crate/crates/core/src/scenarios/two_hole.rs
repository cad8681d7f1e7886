//! Two-hole ghost image: a binary screen with two small holes sits in the
//! object arm in front of the bucket detector; the reference arm propagates
//! the same distance to the scanning detector. The correlation image must
//! show exactly two peaks at the hole positions, and with the detector
//! matched to the hole area the signal-to-background ratio follows the
//! bucket-contrast law at A/a = 2, i.e. 3:2.
//!
//! Data products: `ghost_image.csv` (`x_m,g2,covariance,stderr`),
//! `ghost_image.pgm` (P2), `contrast.csv`, `speckle_metrics.csv`.

use std::time::Instant;

use crate::config::{EnvelopeKind, ScenarioConfig};
use crate::detect::{bucket_read, point_read, DetectorReading, PointDetectorSpec, RealizationRecord};
use crate::error::{Error, Result};
use crate::field::IntensityMap;
use crate::optics::{apply_mask, beam_splitter, make_two_hole_mask, ArmChain, ArmSpec};
use crate::output::{fmt_sci, Product, ProductData};
use crate::scenarios::common::{
    self, build_apparatus, check_windowing_at, normalized_runtime, run_batched,
};
use crate::scenarios::{CheckResult, ScenarioOutcome, ScenarioVerdict};
use crate::stats::{ghost_image, measured_contrast, CorrelationAccumulator, SpeckleMetricsAccumulator};

pub const NAME: &str = "two_hole_ghost";

pub fn default_config() -> ScenarioConfig {
    let mut cfg = super::equal_plane::default_config();
    cfg.object.y1 = -0.5e-3;
    cfg.object.y2 = 0.5e-3;
    cfg.object.hole_side = 10e-6;
    cfg.detector.side = 10e-6;
    cfg.detector.scan_half_span = 1.0e-3;
    cfg.detector.scan_step = 10e-6;
    cfg
}

/// Hole geometry against the source statistics: each hole must be small
/// compared to the correlation length and the holes far apart compared
/// to it.
fn validate_object(cfg: &ScenarioConfig) -> Result<()> {
    let l_c = cfg.source.correlation_length;
    if cfg.object.hole_side >= l_c {
        return Err(Error::invalid(
            "hole_side",
            format!(
                "hole side {:.3e} m must be small compared to the correlation length {:.3e} m",
                cfg.object.hole_side, l_c
            ),
        ));
    }
    if (cfg.object.y1 - cfg.object.y2).abs() <= l_c {
        return Err(Error::invalid(
            "y2",
            format!(
                "hole separation {:.3e} m must exceed the correlation length {:.3e} m",
                (cfg.object.y1 - cfg.object.y2).abs(),
                l_c
            ),
        ));
    }
    if matches!(cfg.envelope.kind, EnvelopeKind::FlatTop) {
        let reach = cfg.object.y1.abs().max(cfg.object.y2.abs()) + 0.5 * cfg.object.hole_side;
        if reach > cfg.envelope.flat_radius {
            return Err(Error::Windowing(format!(
                "holes reach {:.3e} m but the flat illumination ends at {:.3e} m",
                reach, cfg.envelope.flat_radius
            )));
        }
    }
    Ok(())
}

struct Batch {
    accumulator: CorrelationAccumulator<f64>,
    metrics: SpeckleMetricsAccumulator<f64>,
    frames: Vec<(u64, IntensityMap<f64>)>,
}

pub fn run(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let t0 = Instant::now();
    if (cfg.arms.z_object - cfg.arms.z_reference).abs() > 1e-12 {
        return Err(Error::invalid(
            "z_reference",
            "two-hole ghost imaging requires equal-distance arms".to_string(),
        ));
    }
    validate_object(cfg)?;
    let apparatus = build_apparatus(cfg)?;
    let grid = apparatus.grid;
    let seed = cfg.ensemble.master_seed;
    let l_c = cfg.source.correlation_length;

    let mask = make_two_hole_mask(grid, cfg.object.y1, cfg.object.y2, cfg.object.hole_side)?;
    let scan = common::scan_line(cfg.detector.scan_half_span, cfg.detector.scan_step);
    let detector = PointDetectorSpec::new(grid, cfg.detector.side, scan)?;
    let positions = detector.snapped_positions();

    // Signal: the scan positions on the holes. Background: inside the flat
    // illumination, at least `background_margin_lc` correlation lengths from
    // either hole.
    let signal: Vec<usize> = [cfg.object.y1, cfg.object.y2]
        .iter()
        .map(|&y| {
            positions
                .iter()
                .enumerate()
                .min_by(|a, b| {
                    (a.1 .0 - y).abs().partial_cmp(&(b.1 .0 - y).abs()).expect("finite")
                })
                .map(|(i, _)| i)
                .expect("non-empty scan")
        })
        .collect();
    let margin = cfg.analysis.background_margin_lc * l_c;
    let beam_limit = match cfg.envelope.kind {
        EnvelopeKind::FlatTop => cfg.envelope.flat_radius,
        EnvelopeKind::Gaussian => cfg.envelope.waist,
        EnvelopeKind::None => 0.5 * grid.extent_x(),
    };
    let background: Vec<usize> = positions
        .iter()
        .enumerate()
        .filter(|(_, &(x, _))| {
            x.abs() <= beam_limit
                && (x - cfg.object.y1).abs() > margin
                && (x - cfg.object.y2).abs() > margin
        })
        .map(|(i, _)| i)
        .collect();
    if background.is_empty() {
        return Err(Error::invalid(
            "background_margin_lc",
            "no scan positions qualify as background inside the illuminated beam".to_string(),
        ));
    }

    let chain = ArmChain::compile(ArmSpec::free_space(cfg.arms.z_object), grid)?;

    // Realization 0: verify the split copies stay identical through the arm
    // and that the propagated beam respects the windowing guard.
    let mut ws0 = chain.workspace();
    let source0 = apply_mask(&apparatus.generator.generate(0, seed, &mut ws0), &apparatus.envelope)?;
    let (beam1, beam2) = beam_splitter(&source0, false);
    let copy_equality = chain
        .evaluate(&beam1, &mut ws0)?
        .max_abs_diff(&chain.evaluate(&beam2, &mut ws0)?);
    let outer_band = check_windowing_at(&chain.evaluate(&source0, &mut ws0)?, "two-hole detection plane")?;

    let (mx0, my0, mwx, mwy) = super::equal_plane::metric_window_for(&grid, &cfg.envelope);
    let metric_frames = cfg.analysis.metric_frames as u64;
    let frame_dump = cfg.output.frame_dump as u64;

    let batch = run_batched(
        cfg.ensemble.n_realizations,
        || {
            Ok(Batch {
                accumulator: CorrelationAccumulator::new(positions.clone()),
                metrics: SpeckleMetricsAccumulator::new(grid, mx0, my0, mwx, mwy)?,
                frames: Vec::new(),
            })
        },
        |k, batch| {
            let mut ws = chain.workspace();
            let source =
                apply_mask(&apparatus.generator.generate(k, seed, &mut ws), &apparatus.envelope)?;
            // Equal arms: one evaluation serves both beams (bit-identical
            // copies through a deterministic chain).
            let field = chain.evaluate(&source, &mut ws)?;
            let bucket = bucket_read(&apply_mask(&field, &mask)?);
            let point_readings: Vec<DetectorReading<f64>> = (0..detector.len())
                .map(|p| point_read(&field, &detector, p))
                .collect::<Result<_>>()?;
            batch.accumulator.accumulate(&RealizationRecord {
                realization_index: k,
                bucket,
                point_readings,
            })?;
            if k < metric_frames {
                batch.metrics.feed(&field.intensity())?;
            }
            if k < frame_dump {
                batch.frames.push((k, field.intensity()));
            }
            Ok(())
        },
        |a, b| {
            a.accumulator.merge(&b.accumulator)?;
            a.metrics.merge(&b.metrics)?;
            a.frames.extend(b.frames);
            Ok(())
        },
    )?;

    let map = batch.accumulator.finalize()?;
    let image = ghost_image(&map);
    let xs: Vec<f64> = positions.iter().map(|p| p.0).collect();
    let peaks = common::half_max_peaks(&image);
    let refined: Vec<f64> = peaks.iter().map(|&i| common::refine_peak(&xs, &image, i)).collect();

    // Match refined peaks to holes by order (both sorted along x).
    let mut holes = [cfg.object.y1, cfg.object.y2];
    holes.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let mut sorted_peaks = refined.clone();
    sorted_peaks.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let offsets_cells: Vec<f64> = if sorted_peaks.len() == 2 {
        holes
            .iter()
            .zip(&sorted_peaks)
            .map(|(h, p)| (h - p).abs() / grid.dx())
            .collect()
    } else {
        vec![f64::INFINITY, f64::INFINITY]
    };

    let contrast = measured_contrast(
        &map,
        &signal,
        &background,
        mask.open_area(),
        detector.effective_area(),
    )?;
    let metrics = batch.metrics.finalize()?;

    let mut checks = vec![
        CheckResult::at_most("copy equality max |E1 - E2|", copy_equality, 0.0),
        CheckResult::range("ghost-image peaks above half maximum", peaks.len() as f64, 2.0, 2.0),
        CheckResult::at_most("peak 1 offset from y1 (grid cells)", offsets_cells[0], 1.0),
        CheckResult::at_most("peak 2 offset from y2 (grid cells)", offsets_cells[1], 1.0),
        CheckResult::range("signal-to-background ratio S", contrast.s_measured, 1.4, 1.6),
        CheckResult::at_most("outer-band power fraction", outer_band, common::OUTER_BAND_LIMIT),
    ];
    let mut notes = vec![
        format!(
            "S = {:.4} +- {:.4} (closed form {:.4} at A/a = {:.3})",
            contrast.s_measured,
            contrast.s_stderr,
            contrast.s_predicted,
            contrast.object_area / contrast.detector_area
        ),
        format!(
            "detection-plane l_c {:.3e} m, contrast {:.3}, background positions {}",
            metrics.correlation_length,
            metrics.contrast,
            background.len()
        ),
    ];
    if sorted_peaks.len() == 2 {
        notes.push(format!(
            "peaks at {:.6e} m and {:.6e} m (holes at {:.6e}, {:.6e})",
            sorted_peaks[0], sorted_peaks[1], holes[0], holes[1]
        ));
    } else {
        checks.push(CheckResult::flag("two peaks found", false));
    }

    let mut products = vec![
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
            "contrast.csv",
            "s_measured,s_stderr,s_predicted,object_area_m2,detector_area_m2",
            vec![format!(
                "{},{},{},{},{}",
                fmt_sci(contrast.s_measured),
                fmt_sci(contrast.s_stderr),
                fmt_sci(contrast.s_predicted),
                fmt_sci(contrast.object_area),
                fmt_sci(contrast.detector_area)
            )],
        ),
        Product::csv(
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
        ),
    ];
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

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn smoke_config() -> ScenarioConfig {
        let mut cfg = default_config();
        cfg.grid.nx = 256;
        cfg.grid.ny = 256;
        cfg.source.correlation_length = 60e-6;
        cfg.envelope.flat_radius = 0.55e-3;
        cfg.envelope.edge_width = 0.08e-3;
        cfg.arms.z_object = 0.05;
        cfg.arms.z_reference = 0.05;
        cfg.object.y1 = -0.3e-3;
        cfg.object.y2 = 0.3e-3;
        cfg.detector.scan_half_span = 0.5e-3;
        cfg.ensemble.n_realizations = 2500;
        cfg.analysis.metric_frames = 150;
        cfg
    }

    #[test]
    fn finds_two_peaks_at_the_holes_with_three_to_two_contrast() {
        let outcome = run(&smoke_config()).unwrap();
        let v = &outcome.verdict;
        assert_eq!(v.observed("ghost-image peaks above half maximum"), Some(2.0));
        assert!(v.observed("peak 1 offset from y1 (grid cells)").unwrap() <= 1.0);
        assert!(v.observed("peak 2 offset from y2 (grid cells)").unwrap() <= 1.0);
        let s = v.observed("signal-to-background ratio S").unwrap();
        assert!((1.3..=1.65).contains(&s), "smoke-level S = {s}");
        assert_eq!(v.observed("copy equality max |E1 - E2|"), Some(0.0));
    }

    #[test]
    fn swapping_hole_labels_changes_nothing() {
        let outcome = run(&smoke_config()).unwrap();
        let mut swapped = smoke_config();
        std::mem::swap(&mut swapped.object.y1, &mut swapped.object.y2);
        let outcome_swapped = run(&swapped).unwrap();
        let s1 = outcome.verdict.observed("signal-to-background ratio S").unwrap();
        let s2 = outcome_swapped.verdict.observed("signal-to-background ratio S").unwrap();
        assert_eq!(s1.to_bits(), s2.to_bits());
    }

    #[test]
    fn oversized_holes_are_rejected() {
        let mut cfg = smoke_config();
        cfg.object.hole_side = 2.0 * cfg.source.correlation_length;
        let err = run(&cfg).unwrap_err();
        assert!(err.to_string().contains("small compared"), "{err}");
    }
}
