//! Resolution-contrast tradeoff: two holes separated by a few speckle sizes
//! are imaged with scanning detectors of growing side. A small detector
//! resolves the pair; once the window grows past the hole separation the
//! peaks merge. Meanwhile the measured signal-to-background ratio decreases
//! monotonically, following the bucket-contrast law with the effective
//! detector area.
//!
//! Data products: `resolution.csv` and one `ghost_side_<i>.csv` correlation
//! map per detector side.

use std::time::Instant;

use crate::config::{EnvelopeKind, ScenarioConfig};
use crate::detect::{bucket_read, point_read, DetectorReading, PointDetectorSpec, RealizationRecord};
use crate::error::{Error, Result};
use crate::optics::{apply_mask, make_two_hole_mask, ArmChain, ArmSpec};
use crate::output::{fmt_sci, Product};
use crate::scenarios::common::{
    self, build_apparatus, check_windowing_at, normalized_runtime, run_batched,
};
use crate::scenarios::{CheckResult, ScenarioOutcome, ScenarioVerdict};
use crate::stats::{ghost_image, measured_contrast, CorrelationAccumulator, SpeckleMetricsAccumulator};

pub const NAME: &str = "resolution_tradeoff";

pub fn default_config() -> ScenarioConfig {
    let mut cfg = super::equal_plane::default_config();
    cfg.object.y1 = -100e-6; // 2.5 l_c apart
    cfg.object.y2 = 100e-6;
    cfg.object.hole_side = 10e-6;
    cfg.detector.scan_half_span = 0.75e-3;
    cfg.detector.scan_step = 10e-6;
    cfg.ensemble.n_realizations = 12_000;
    cfg
}

struct SideSetup {
    detector: PointDetectorSpec<f64>,
    signal: Vec<usize>,
    background: Vec<usize>,
}

struct Batch {
    accumulators: Vec<CorrelationAccumulator<f64>>,
    metrics: SpeckleMetricsAccumulator<f64>,
}

pub fn run(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let t0 = Instant::now();
    if (cfg.arms.z_object - cfg.arms.z_reference).abs() > 1e-12 {
        return Err(Error::invalid(
            "z_reference",
            "the resolution sweep requires equal-distance arms".to_string(),
        ));
    }
    if cfg.sweep.sides_over_lc.len() < 2 {
        return Err(Error::invalid("sides_over_lc", "need at least two detector sides".to_string()));
    }
    let l_c = cfg.source.correlation_length;
    let separation = (cfg.object.y2 - cfg.object.y1).abs();
    if separation <= l_c {
        return Err(Error::invalid("y2", "hole separation must exceed the correlation length".to_string()));
    }
    if cfg.object.hole_side >= l_c {
        return Err(Error::invalid(
            "hole_side",
            "holes must be small compared to the correlation length".to_string(),
        ));
    }
    let apparatus = build_apparatus(cfg)?;
    let grid = apparatus.grid;
    let seed = cfg.ensemble.master_seed;

    let mut sides = cfg.sweep.sides_over_lc.clone();
    sides.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let scan = common::scan_line(cfg.detector.scan_half_span, cfg.detector.scan_step);
    let margin = cfg.analysis.background_margin_lc * l_c;
    let beam_limit = match cfg.envelope.kind {
        EnvelopeKind::FlatTop => cfg.envelope.flat_radius,
        EnvelopeKind::Gaussian => cfg.envelope.waist,
        EnvelopeKind::None => 0.5 * grid.extent_x(),
    };

    let setups: Vec<SideSetup> = sides
        .iter()
        .map(|&f| {
            let detector = PointDetectorSpec::new(grid, f * l_c, scan.clone())?;
            let positions = detector.snapped_positions();
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
            // Background positions by center distance, per the background
            // definition; wide windows may still graze the correlated
            // support, which only pulls S toward 1.
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
                    format!("no background positions for detector side {} l_c", f),
                ));
            }
            Ok(SideSetup { detector, signal, background })
        })
        .collect::<Result<Vec<_>>>()?;

    let mask = make_two_hole_mask(grid, cfg.object.y1, cfg.object.y2, cfg.object.hole_side)?;
    let chain = ArmChain::compile(ArmSpec::free_space(cfg.arms.z_object), grid)?;

    let mut ws0 = chain.workspace();
    let source0 = apply_mask(&apparatus.generator.generate(0, seed, &mut ws0), &apparatus.envelope)?;
    let outer_band =
        check_windowing_at(&chain.evaluate(&source0, &mut ws0)?, "resolution detection plane")?;

    let (mx0, my0, mwx, mwy) = super::equal_plane::metric_window_for(&grid, &cfg.envelope);
    let metric_frames = cfg.analysis.metric_frames as u64;

    let batch = run_batched(
        cfg.ensemble.n_realizations,
        || {
            Ok(Batch {
                accumulators: setups
                    .iter()
                    .map(|s| CorrelationAccumulator::new(s.detector.snapped_positions()))
                    .collect(),
                metrics: SpeckleMetricsAccumulator::new(grid, mx0, my0, mwx, mwy)?,
            })
        },
        |k, batch| {
            let mut ws = chain.workspace();
            let source =
                apply_mask(&apparatus.generator.generate(k, seed, &mut ws), &apparatus.envelope)?;
            let field = chain.evaluate(&source, &mut ws)?;
            let bucket = bucket_read(&apply_mask(&field, &mask)?);
            for (setup, acc) in setups.iter().zip(batch.accumulators.iter_mut()) {
                let point_readings: Vec<DetectorReading<f64>> = (0..setup.detector.len())
                    .map(|p| point_read(&field, &setup.detector, p))
                    .collect::<Result<_>>()?;
                acc.accumulate(&RealizationRecord {
                    realization_index: k,
                    bucket,
                    point_readings,
                })?;
            }
            if k < metric_frames {
                batch.metrics.feed(&field.intensity())?;
            }
            Ok(())
        },
        |a, b| {
            for (x, y) in a.accumulators.iter_mut().zip(&b.accumulators) {
                x.merge(y)?;
            }
            a.metrics.merge(&b.metrics)?;
            Ok(())
        },
    )?;

    let metrics = batch.metrics.finalize()?;
    let coherence_area = metrics.coherence_area;

    struct SideResult {
        side_m: f64,
        s: f64,
        s_se: f64,
        eq2: f64,
        ratio_eff: f64,
        dip: f64,
        resolved: bool,
    }
    let mut results = Vec::new();
    let mut products = Vec::new();

    for (i, (setup, acc)) in setups.iter().zip(&batch.accumulators).enumerate() {
        let map = acc.finalize()?;
        let image = ghost_image(&map);
        let positions = setup.detector.snapped_positions();
        let xs: Vec<f64> = positions.iter().map(|p| p.0).collect();
        let peaks = common::half_max_peaks(&image);
        let (dip, resolved) = if peaks.len() == 2 {
            let valley = image[peaks[0]..=peaks[1]]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            let peak_mean = 0.5 * (image[peaks[0]] + image[peaks[1]]);
            let dip = 1.0 - valley / peak_mean;
            (dip, dip >= 0.2)
        } else {
            (0.0, false)
        };
        let report = measured_contrast(
            &map,
            &setup.signal,
            &setup.background,
            mask.open_area(),
            setup.detector.effective_area(),
        )?;
        // Effective cells: the window integrates n_cov correlated holes out
        // of the 2 in the bucket, each worth one coherence area.
        let window_side = setup.detector.window_px().0 as f64 * grid.dx();
        let n_cov = [cfg.object.y1, cfg.object.y2]
            .iter()
            .filter(|&&y| (y - cfg.object.y1).abs() <= 0.5 * window_side)
            .count()
            .max(1) as f64;
        let ratio_eff = 2.0 * window_side * window_side / (n_cov * coherence_area);
        let eq2 = (1.0 + ratio_eff) / ratio_eff;
        products.push(Product::csv(
            format!("ghost_side_{i}.csv"),
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
        ));
        results.push(SideResult {
            side_m: window_side,
            s: report.s_measured,
            s_se: report.s_stderr,
            eq2,
            ratio_eff,
            dip,
            resolved,
        });
    }

    let mut checks = vec![
        CheckResult::flag(
            format!("two holes resolved at detector side = {} l_c", sides[0]),
            results[0].resolved,
        ),
        CheckResult::flag(
            format!("holes unresolved at detector side = {} l_c", sides[sides.len() - 1]),
            !results[results.len() - 1].resolved,
        ),
    ];
    let mut ordered = true;
    for w in results.windows(2) {
        let slack = 3.0 * (w[0].s_se.powi(2) + w[1].s_se.powi(2)).sqrt();
        if w[1].s > w[0].s + slack {
            ordered = false;
        }
    }
    checks.push(CheckResult::flag(
        "measured S non-increasing as the effective A/a grows",
        ordered,
    ));
    checks.push(CheckResult::at_most(
        "outer-band power fraction",
        outer_band,
        common::OUTER_BAND_LIMIT,
    ));

    let mut notes = vec![format!(
        "hole separation {:.3e} m = {:.2} l_c; coherence area {:.3e} m^2",
        separation,
        separation / l_c,
        coherence_area
    )];
    for (f, r) in sides.iter().zip(&results) {
        notes.push(format!(
            "side {f} l_c ({:.2e} m): S = {:.4} +- {:.4} (Eq-2 form at A/a_eff = {:.1}: {:.4}), \
             dip {:.2}, resolved: {}",
            r.side_m, r.s, r.s_se, r.ratio_eff, r.eq2, r.dip, r.resolved
        ));
    }
    if let Some(first_unresolved) =
        sides.iter().zip(&results).find(|(_, r)| !r.resolved).map(|(f, _)| *f)
    {
        notes.push(format!(
            "resolvability lost at side = {first_unresolved} l_c (window {:.2e} m vs hole \
             separation {:.2e} m)",
            first_unresolved * l_c, separation
        ));
    }

    products.insert(
        0,
        Product::csv(
            "resolution.csv",
            "side_m,a_eff_m2,ratio_eff,s_measured,s_stderr,s_eq2,dip_fraction,resolved",
            results
                .iter()
                .map(|r| {
                    format!(
                        "{},{},{},{},{},{},{},{}",
                        fmt_sci(r.side_m),
                        fmt_sci(r.side_m * r.side_m),
                        fmt_sci(r.ratio_eff),
                        fmt_sci(r.s),
                        fmt_sci(r.s_se),
                        fmt_sci(r.eq2),
                        fmt_sci(r.dip),
                        u8::from(r.resolved)
                    )
                })
                .collect(),
        ),
    );

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
