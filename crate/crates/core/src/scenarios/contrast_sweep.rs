//! Bucket-contrast law sweep: the object is an array of identical small
//! holes, each much smaller than the speckle size, so every hole behaves as
//! one independent speckle cell. With the detector matched to a hole, a
//! ratio A/a = N is realized by collecting N holes into one bucket. The
//! measured signal-to-background ratio is compared against the closed form
//! S = (1 + A/a)/(A/a) and cross-validated by the independent cell-model
//! Monte Carlo oracle.
//!
//! To keep the estimator variance flat across ratios, the hole sites are
//! partitioned into `n_sites / N` disjoint replicas of the N-hole
//! experiment, all evaluated on the same realizations.
//!
//! Data products: `contrast_sweep.csv`
//! (`ratio,s_measured,s_predicted,stderr`) and `cell_model.csv`.

use std::time::Instant;

use crate::config::{EnvelopeKind, ScenarioConfig};
use crate::detect::{point_read, DetectorReading, PointDetectorSpec, RealizationRecord};
use crate::error::{Error, Result};
use crate::optics::{apply_mask, make_hole_array_mask, ArmChain, ArmSpec};
use crate::output::{fmt_sci, Product};
use crate::scenarios::common::{
    self, build_apparatus, cell_model_contrast, check_windowing_at, normalized_runtime,
    run_batched,
};
use crate::scenarios::{CheckResult, ScenarioOutcome, ScenarioVerdict};
use crate::stats::{measured_contrast, CorrelationAccumulator, SpeckleMetricsAccumulator};
use crate::util::ksum;

pub const NAME: &str = "contrast_sweep";

pub fn default_config() -> ScenarioConfig {
    let mut cfg = super::equal_plane::default_config();
    cfg.envelope.flat_radius = 1.05e-3;
    cfg.envelope.edge_width = 0.2e-3;
    cfg.ensemble.n_realizations = 10_000;
    cfg.object.hole_side = 10e-6;
    cfg.detector.side = 10e-6;
    cfg
}

struct Replica {
    site_reading_indices: Vec<usize>,
    pixels: Vec<usize>,
    open_area: f64,
    positions: Vec<(f64, f64)>,
}

struct Entry {
    ratio: usize,
    replicas: Vec<Replica>,
}

struct Batch {
    accumulators: Vec<Vec<CorrelationAccumulator<f64>>>,
    metrics: SpeckleMetricsAccumulator<f64>,
}

pub fn run(cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    let t0 = Instant::now();
    if (cfg.arms.z_object - cfg.arms.z_reference).abs() > 1e-12 {
        return Err(Error::invalid(
            "z_reference",
            "the contrast sweep requires equal-distance arms".to_string(),
        ));
    }
    if cfg.sweep.ratios.is_empty() {
        return Err(Error::invalid("ratios", "at least one ratio".to_string()));
    }
    let l_c = cfg.source.correlation_length;
    if cfg.object.hole_side >= l_c {
        return Err(Error::invalid(
            "hole_side",
            "holes must be small compared to the correlation length".to_string(),
        ));
    }
    let apparatus = build_apparatus(cfg)?;
    let grid = apparatus.grid;
    let seed = cfg.ensemble.master_seed;

    // One site per speckle cell: a centered lattice of hole positions, far
    // apart compared to l_c.
    let n_sites = *cfg.sweep.ratios.iter().max().expect("non-empty");
    let per_axis = (n_sites as f64).sqrt().ceil() as usize;
    let sites: Vec<(f64, f64)> =
        common::point_lattice(per_axis, cfg.sweep.site_spacing).into_iter().take(n_sites).collect();
    if cfg.sweep.site_spacing <= 2.0 * l_c {
        return Err(Error::invalid(
            "site_spacing",
            "speckle-cell sites must be separated by more than two correlation lengths".to_string(),
        ));
    }
    for &ratio in &cfg.sweep.ratios {
        if ratio == 0 || n_sites % ratio != 0 {
            return Err(Error::invalid(
                "ratios",
                format!(
                    "ratio {ratio} is not realizable as an integer number of the {n_sites} \
                     speckle-cell sites"
                ),
            ));
        }
    }
    if matches!(cfg.envelope.kind, EnvelopeKind::FlatTop) {
        let reach = sites
            .iter()
            .map(|&(x, y)| (x * x + y * y).sqrt())
            .fold(0.0f64, f64::max)
            + 0.5 * cfg.object.hole_side;
        if reach > cfg.envelope.flat_radius || cfg.sweep.background_radius > cfg.envelope.flat_radius
        {
            return Err(Error::Windowing(
                "hole sites or background ring leave the flat illumination".to_string(),
            ));
        }
    }

    // Background ring, keeping only points far from every site.
    let margin = cfg.analysis.background_margin_lc * l_c;
    let background: Vec<(f64, f64)> = (0..cfg.sweep.background_count)
        .map(|t| {
            let angle = 2.0 * std::f64::consts::PI * t as f64 / cfg.sweep.background_count as f64;
            (cfg.sweep.background_radius * angle.cos(), cfg.sweep.background_radius * angle.sin())
        })
        .filter(|&p| sites.iter().all(|&s| common::distance(p, s) > margin))
        .collect();
    if background.len() < 3 {
        return Err(Error::invalid(
            "background_radius",
            format!(
                "only {} background positions stay {margin:.1e} m away from every hole site",
                background.len()
            ),
        ));
    }

    let mut all_positions = sites.clone();
    all_positions.extend(background.iter().copied());
    let detector = PointDetectorSpec::new(grid, cfg.detector.side, all_positions)?;
    let snapped = detector.snapped_positions();
    let bg_range: Vec<usize> = (sites.len()..sites.len() + background.len()).collect();

    // Validate the full site layout once (non-overlap, quantization).
    make_hole_array_mask(grid, &sites, cfg.object.hole_side)?;

    let entries: Vec<Entry> = cfg
        .sweep
        .ratios
        .iter()
        .map(|&ratio| {
            let replicas = (0..n_sites / ratio)
                .map(|m| {
                    let site_reading_indices: Vec<usize> =
                        (m * ratio..(m + 1) * ratio).collect();
                    let centers: Vec<(f64, f64)> =
                        site_reading_indices.iter().map(|&i| sites[i]).collect();
                    let mask = make_hole_array_mask(grid, &centers, cfg.object.hole_side)?;
                    let mut positions: Vec<(f64, f64)> =
                        site_reading_indices.iter().map(|&i| snapped[i]).collect();
                    positions.extend(bg_range.iter().map(|&i| snapped[i]));
                    Ok(Replica {
                        pixels: mask.open_indices().collect(),
                        open_area: mask.open_area(),
                        site_reading_indices,
                        positions,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Entry { ratio, replicas })
        })
        .collect::<Result<Vec<_>>>()?;

    let chain = ArmChain::compile(ArmSpec::free_space(cfg.arms.z_object), grid)?;
    let mut ws0 = chain.workspace();
    let source0 = apply_mask(&apparatus.generator.generate(0, seed, &mut ws0), &apparatus.envelope)?;
    let outer_band =
        check_windowing_at(&chain.evaluate(&source0, &mut ws0)?, "contrast-sweep detection plane")?;

    let (mx0, my0, mwx, mwy) = super::equal_plane::metric_window_for(&grid, &cfg.envelope);
    let metric_frames = cfg.analysis.metric_frames as u64;
    let pixel_area = grid.pixel_area();

    let batch = run_batched(
        cfg.ensemble.n_realizations,
        || {
            Ok(Batch {
                accumulators: entries
                    .iter()
                    .map(|e| {
                        e.replicas
                            .iter()
                            .map(|r| CorrelationAccumulator::new(r.positions.clone()))
                            .collect()
                    })
                    .collect(),
                metrics: SpeckleMetricsAccumulator::new(grid, mx0, my0, mwx, mwy)?,
            })
        },
        |k, batch| {
            let mut ws = chain.workspace();
            let source =
                apply_mask(&apparatus.generator.generate(k, seed, &mut ws), &apparatus.envelope)?;
            let field = chain.evaluate(&source, &mut ws)?;
            let readings: Vec<f64> = (0..detector.len())
                .map(|p| point_read(&field, &detector, p).map(|r| r.power))
                .collect::<Result<_>>()?;
            let intensity = field.intensity();

            for (entry, accs) in entries.iter().zip(batch.accumulators.iter_mut()) {
                for (replica, acc) in entry.replicas.iter().zip(accs.iter_mut()) {
                    // Identical to bucket_read over the replica-masked field:
                    // zero pixels do not change the compensated sum.
                    let bucket =
                        ksum(replica.pixels.iter().map(|&i| intensity.values()[i])) * pixel_area;
                    let mut point_readings: Vec<DetectorReading<f64>> = replica
                        .site_reading_indices
                        .iter()
                        .map(|&i| DetectorReading { power: readings[i] })
                        .collect();
                    point_readings
                        .extend(bg_range.iter().map(|&i| DetectorReading { power: readings[i] }));
                    acc.accumulate(&RealizationRecord {
                        realization_index: k,
                        bucket: DetectorReading { power: bucket },
                        point_readings,
                    })?;
                }
            }
            if k < metric_frames {
                batch.metrics.feed(&intensity)?;
            }
            Ok(())
        },
        |a, b| {
            for (xs, ys) in a.accumulators.iter_mut().zip(&b.accumulators) {
                for (x, y) in xs.iter_mut().zip(ys) {
                    x.merge(y)?;
                }
            }
            a.metrics.merge(&b.metrics)?;
            Ok(())
        },
    )?;

    let metrics = batch.metrics.finalize()?;
    let mut checks = vec![CheckResult::at_most(
        "outer-band power fraction",
        outer_band,
        common::OUTER_BAND_LIMIT,
    )];
    let mut notes = Vec::new();
    let mut sweep_rows = Vec::new();
    let mut cell_rows = Vec::new();

    for (entry, accs) in entries.iter().zip(&batch.accumulators) {
        let ratio = entry.ratio;
        let per_replica: Vec<(f64, f64)> = entry
            .replicas
            .iter()
            .zip(accs)
            .map(|(replica, acc)| {
                let map = acc.finalize()?;
                let signal: Vec<usize> = (0..ratio).collect();
                let bg: Vec<usize> = (ratio..ratio + background.len()).collect();
                let report = measured_contrast(
                    &map,
                    &signal,
                    &bg,
                    replica.open_area,
                    detector.effective_area(),
                )?;
                Ok((report.s_measured, report.s_stderr))
            })
            .collect::<Result<Vec<_>>>()?;
        let (s_measured, s_stderr) = common::combine_estimates(&per_replica);
        let s_predicted = (1.0 + ratio as f64) / ratio as f64;
        let (s_cell, s_cell_se) = cell_model_contrast(ratio, 200_000, seed);

        checks.push(CheckResult::range(
            format!("S at A/a = {ratio} (within 5% of closed form)"),
            s_measured,
            0.95 * s_predicted,
            1.05 * s_predicted,
        ));
        let joint = 3.0 * (s_stderr.powi(2) + s_cell_se.powi(2)).sqrt();
        checks.push(CheckResult::at_most(
            format!("|S - cell model| at A/a = {ratio}"),
            (s_measured - s_cell).abs(),
            joint,
        ));
        notes.push(format!(
            "A/a = {ratio}: S = {s_measured:.4} +- {s_stderr:.4}, closed form {s_predicted:.4}, \
             cell model {s_cell:.4} +- {s_cell_se:.4} ({} replicas)",
            entry.replicas.len()
        ));
        sweep_rows.push(format!(
            "{ratio},{},{},{}",
            fmt_sci(s_measured),
            fmt_sci(s_predicted),
            fmt_sci(s_stderr)
        ));
        cell_rows.push(format!("{ratio},{},{}", fmt_sci(s_cell), fmt_sci(s_cell_se)));
    }
    notes.push(format!(
        "measured speckle area {:.3e} m^2 (coherence cell); detector cell {:.3e} m^2",
        metrics.coherence_area,
        detector.effective_area()
    ));

    let products = vec![
        Product::csv("contrast_sweep.csv", "ratio,s_measured,s_predicted,stderr", sweep_rows),
        Product::csv("cell_model.csv", "ratio,s_cell,stderr", cell_rows),
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

    fn smoke_config() -> ScenarioConfig {
        let mut cfg = default_config();
        cfg.grid.nx = 256;
        cfg.grid.ny = 256;
        cfg.source.correlation_length = 60e-6;
        cfg.envelope.flat_radius = 0.58e-3;
        cfg.envelope.edge_width = 0.06e-3;
        cfg.analysis.guard_fraction = 1.0;
        cfg.arms.z_object = 0.04;
        cfg.arms.z_reference = 0.04;
        cfg.sweep.ratios = vec![1, 2, 4];
        cfg.sweep.site_spacing = 0.24e-3;
        cfg.sweep.background_radius = 0.55e-3;
        cfg.ensemble.n_realizations = 3000;
        cfg.analysis.metric_frames = 150;
        cfg
    }

    #[test]
    fn sweep_tracks_the_closed_form() {
        let outcome = run(&smoke_config()).unwrap();
        for (ratio, expected) in [(1usize, 2.0), (2, 1.5), (4, 1.25)] {
            let s = outcome
                .verdict
                .observed(&format!("S at A/a = {ratio} (within 5% of closed form)"))
                .unwrap();
            assert!(
                (s - expected).abs() < 0.08 * expected,
                "A/a = {ratio}: S = {s}, expected ~{expected}"
            );
        }
    }

    #[test]
    fn duplicate_ratios_give_identical_rows() {
        let mut cfg = smoke_config();
        cfg.sweep.ratios = vec![2, 2];
        cfg.ensemble.n_realizations = 600;
        let outcome = run(&cfg).unwrap();
        let csv = outcome
            .products
            .iter()
            .find(|p| p.filename == "contrast_sweep.csv")
            .unwrap();
        if let crate::output::ProductData::Csv { rows, .. } = &csv.data {
            assert_eq!(rows[0], rows[1]);
        } else {
            panic!("expected CSV");
        }
    }

    #[test]
    fn unrealizable_ratio_is_rejected() {
        let mut cfg = smoke_config();
        cfg.sweep.ratios = vec![3, 4];
        let err = run(&cfg).unwrap_err();
        assert!(err.to_string().contains("not realizable"), "{err}");
    }
}
