//! Detectors: an ideal bucket integrating the whole grid and a square point
//! detector scanned across configured positions.
//!
//! The physical experiment scans one detector across many source
//! realizations; the simulator instead computes every scan position from the
//! single stored reference field of each realization, which yields identical
//! ensemble statistics for a stationary source at a fraction of the cost.

use crate::error::{Error, Result};
use crate::fft::FftWorkspace;
use crate::field::{ComplexField, Grid2D};
use crate::optics::{apply_mask, beam_splitter, ApertureMask, ArmChain};
use crate::util::ksum;
use crate::Real;

/// Square scanning detector: side length and ordered scan positions.
///
/// Geometry snaps to the pixel lattice at construction: scan centers snap to
/// the nearest grid point and the side to the nearest odd pixel count
/// (capped at the grid size), which keeps integrated powers free of
/// sub-pixel interpolation bias. Snapped geometry is what `point_read`
/// integrates and what [`Self::effective_area`] reports.
#[derive(Clone, Debug)]
pub struct PointDetectorSpec<T: Real> {
    grid: Grid2D<T>,
    side: T,
    scan_positions: Vec<(T, T)>,
    half_x: usize,
    half_y: usize,
    n_px: (usize, usize),
    centers: Vec<(usize, usize)>,
}

fn nearest_odd(ratio: f64, cap: usize) -> usize {
    let n = (2.0 * ((ratio - 1.0) / 2.0).round() + 1.0).max(1.0) as usize;
    n.min(cap)
}

impl<T: Real> PointDetectorSpec<T> {
    pub fn new(grid: Grid2D<T>, side: T, scan_positions: Vec<(T, T)>) -> Result<Self> {
        if side < grid.dx() || side < grid.dy() {
            return Err(Error::invalid(
                "side",
                format!(
                    "detector side {:.3e} m is smaller than one pixel ({:.3e} m)",
                    side.as_f64(),
                    grid.dx().max(grid.dy()).as_f64()
                ),
            ));
        }
        if scan_positions.is_empty() {
            return Err(Error::invalid("scan_positions", "at least one position".to_string()));
        }
        let nx_px = nearest_odd((side / grid.dx()).as_f64(), grid.nx());
        let ny_px = nearest_odd((side / grid.dy()).as_f64(), grid.ny());
        let (half_x, half_y) = (nx_px / 2, ny_px / 2);
        let mut centers = Vec::with_capacity(scan_positions.len());
        for (idx, &(x, y)) in scan_positions.iter().enumerate() {
            let (i, j) = grid.nearest_index(x, y).ok_or_else(|| {
                Error::invalid(
                    "scan_positions",
                    format!(
                        "position {idx} at ({:.3e}, {:.3e}) m is outside the grid",
                        x.as_f64(),
                        y.as_f64()
                    ),
                )
            })?;
            let fits_x = i >= half_x && i + nx_px - half_x <= grid.nx();
            let fits_y = j >= half_y && j + ny_px - half_y <= grid.ny();
            if !fits_x || !fits_y {
                return Err(Error::invalid(
                    "scan_positions",
                    format!("window of position {idx} extends beyond the grid"),
                ));
            }
            centers.push((i, j));
        }
        Ok(Self { grid, side, scan_positions, half_x, half_y, n_px: (nx_px, ny_px), centers })
    }

    pub fn grid(&self) -> &Grid2D<T> {
        &self.grid
    }

    pub fn requested_side(&self) -> T {
        self.side
    }

    /// Snapped window size in pixels per axis.
    pub fn window_px(&self) -> (usize, usize) {
        self.n_px
    }

    /// Area of the snapped integration window.
    pub fn effective_area(&self) -> T {
        T::of_usize(self.n_px.0) * self.grid.dx() * T::of_usize(self.n_px.1) * self.grid.dy()
    }

    pub fn scan_positions(&self) -> &[(T, T)] {
        &self.scan_positions
    }

    /// Scan positions after snapping to pixel centers.
    pub fn snapped_positions(&self) -> Vec<(T, T)> {
        self.centers
            .iter()
            .map(|&(i, j)| (self.grid.x_coord(i), self.grid.y_coord(j)))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    fn window(&self, position_index: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (i, j) = self.centers[position_index];
        (
            i - self.half_x..i - self.half_x + self.n_px.0,
            j - self.half_y..j - self.half_y + self.n_px.1,
        )
    }
}

/// Integrated power seen by a detector in one realization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectorReading<T: Real> {
    pub power: T,
}

/// All detector outputs of one source realization: one bucket power and one
/// point power per scan position, all computed from the same pair of fields.
#[derive(Clone, Debug)]
pub struct RealizationRecord<T: Real> {
    pub realization_index: u64,
    pub bucket: DetectorReading<T>,
    pub point_readings: Vec<DetectorReading<T>>,
}

/// Ideal 100%-collection bucket: total power over the whole grid.
pub fn bucket_read<T: Real>(field_after_object: &ComplexField<T>) -> DetectorReading<T> {
    DetectorReading { power: field_after_object.total_power() }
}

/// Power integrated over the snapped window at one scan position.
pub fn point_read<T: Real>(
    field: &ComplexField<T>,
    spec: &PointDetectorSpec<T>,
    position_index: usize,
) -> Result<DetectorReading<T>> {
    if field.grid() != spec.grid() {
        return Err(Error::GridMismatch("field grid differs from detector grid".to_string()));
    }
    if position_index >= spec.len() {
        return Err(Error::invalid(
            "position_index",
            format!("{position_index} out of range ({} positions)", spec.len()),
        ));
    }
    let (xs, ys) = spec.window(position_index);
    let samples = field.samples();
    let nx = field.grid().nx();
    let power = ksum(ys.flat_map(|j| {
        let row = j * nx;
        xs.clone().map(move |i| samples[row + i].norm_sqr())
    })) * field.grid().pixel_area();
    Ok(DetectorReading { power })
}

/// Runs one full realization through the apparatus: split the source, send
/// one copy through the object arm, the mask, and the bucket, send the other
/// through the reference arm to the scanning detector.
///
/// All scan positions are read from the single stored reference field. When
/// both arm descriptions are identical the chain is evaluated once and the
/// result reused for both beams; a deterministic chain maps the identical
/// split copies to bit-identical fields, so the readings are unchanged.
pub fn measure_realization<T: Real>(
    realization_index: u64,
    source: &ComplexField<T>,
    object_arm: &ArmChain<T>,
    reference_arm: &ArmChain<T>,
    mask: &ApertureMask<T>,
    point_spec: &PointDetectorSpec<T>,
    ws: &mut FftWorkspace<T>,
) -> Result<RealizationRecord<T>> {
    let (object_field, reference_field);
    if object_arm.spec() == reference_arm.spec() {
        object_field = object_arm.evaluate(source, ws)?;
        reference_field = None;
    } else {
        let (beam1, beam2) = beam_splitter(source, false);
        object_field = object_arm.evaluate(&beam1, ws)?;
        reference_field = Some(reference_arm.evaluate(&beam2, ws)?);
    }
    let reference = reference_field.as_ref().unwrap_or(&object_field);

    let masked = apply_mask(&object_field, mask)?;
    let bucket = bucket_read(&masked);
    let point_readings = (0..point_spec.len())
        .map(|p| point_read(reference, point_spec, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(RealizationRecord { realization_index, bucket, point_readings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{generate_speckle, SpeckleMethod, SpeckleSpec};
    use crate::optics::{make_two_hole_mask, ArmSpec};
    use num_complex::Complex;

    fn grid(n: usize, pitch: f64) -> Grid2D<f64> {
        Grid2D::new(n, n, pitch, pitch, 532e-9).unwrap()
    }

    fn unit_field(g: Grid2D<f64>) -> ComplexField<f64> {
        ComplexField::from_fn(g, |_, _| Complex::new(1.0, 0.0))
    }

    fn speckle(g: Grid2D<f64>, l_c: f64, index: u64) -> ComplexField<f64> {
        let spec = SpeckleSpec::new(l_c, 1.0, 1e-3, SpeckleMethod::SpectralSynthesis).unwrap();
        generate_speckle(g, &spec, index, 11).unwrap()
    }

    #[test]
    fn zero_field_reads_zero() {
        let g = grid(32, 10e-6);
        let zero = ComplexField::zero(g);
        assert_eq!(bucket_read(&zero).power, 0.0);
        let spec = PointDetectorSpec::new(g, 30e-6, vec![(0.0, 0.0)]).unwrap();
        assert_eq!(point_read(&zero, &spec, 0).unwrap().power, 0.0);
    }

    #[test]
    fn bucket_equals_open_area_for_unit_field() {
        let g = grid(128, 10e-6);
        let mask = make_two_hole_mask(g, -0.3e-3, 0.3e-3, 40e-6).unwrap();
        let masked = apply_mask(&unit_field(g), &mask).unwrap();
        let p = bucket_read(&masked).power;
        assert!(((p - mask.open_area()) / mask.open_area()).abs() < 1e-12);
    }

    #[test]
    fn three_pixel_window_on_unit_field() {
        let g = grid(32, 10e-6);
        let spec = PointDetectorSpec::new(g, 30e-6, vec![(0.0, 0.0)]).unwrap();
        assert_eq!(spec.window_px(), (3, 3));
        let p = point_read(&unit_field(g), &spec, 0).unwrap().power;
        let expected = 9.0 * g.pixel_area();
        assert!(((p - expected) / expected).abs() < 1e-12);
    }

    #[test]
    fn full_grid_window_equals_bucket() {
        let g = grid(32, 10e-6);
        let f = speckle(g, 40e-6, 0);
        let spec = PointDetectorSpec::new(g, g.extent_x(), vec![(0.0, 0.0)]).unwrap();
        assert_eq!(spec.window_px(), (32, 32));
        let p = point_read(&f, &spec, 0).unwrap().power;
        let b = bucket_read(&f).power;
        assert!(((p - b) / b).abs() < 1e-12);
    }

    #[test]
    fn disjoint_single_pixel_windows_tile_to_bucket() {
        let g = grid(16, 10e-6);
        let f = speckle(g, 40e-6, 1);
        let positions: Vec<(f64, f64)> = (0..16)
            .flat_map(|j| (0..16).map(move |i| (i, j)))
            .map(|(i, j)| (g.x_coord(i), g.y_coord(j)))
            .collect();
        let spec = PointDetectorSpec::new(g, 10e-6, positions).unwrap();
        let total: f64 = (0..spec.len()).map(|p| point_read(&f, &spec, p).unwrap().power).sum();
        let b = bucket_read(&f).power;
        assert!(((total - b) / b).abs() < 1e-9);
    }

    #[test]
    fn larger_windows_never_read_less() {
        let g = grid(64, 10e-6);
        let f = speckle(g, 40e-6, 2);
        let mut previous = 0.0;
        for side in [10e-6, 30e-6, 90e-6, 250e-6] {
            let spec = PointDetectorSpec::new(g, side, vec![(0.0, 0.0)]).unwrap();
            let p = point_read(&f, &spec, 0).unwrap().power;
            assert!(p >= previous, "side {side}: {p} < {previous}");
            previous = p;
        }
    }

    #[test]
    fn mean_bucket_power_matches_open_area_times_intensity() {
        let g = grid(128, 10e-6);
        let spec = SpeckleSpec::new(40e-6, 1.0, 1e-3, SpeckleMethod::SpectralSynthesis).unwrap();
        let mask = make_two_hole_mask(g, -0.3e-3, 0.3e-3, 30e-6).unwrap();
        let n = 200;
        let powers: Vec<f64> = (0..n)
            .map(|k| {
                let f = generate_speckle(g, &spec, k, 77).unwrap();
                bucket_read(&apply_mask(&f, &mask).unwrap()).power
            })
            .collect();
        let mean = powers.iter().sum::<f64>() / n as f64;
        let var = powers.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        let expected = mask.open_area(); // I0 = 1
        assert!(
            (mean - expected).abs() < 3.0 * se,
            "mean bucket {mean:.4e} vs expected {expected:.4e} (SE {se:.2e})"
        );
    }

    #[test]
    fn geometry_violations_are_rejected() {
        let g = grid(32, 10e-6);
        assert!(PointDetectorSpec::new(g, 5e-6, vec![(0.0, 0.0)]).is_err(), "side < pixel");
        assert!(
            PointDetectorSpec::new(g, 30e-6, vec![(1.0, 0.0)]).is_err(),
            "position outside grid"
        );
        assert!(
            PointDetectorSpec::new(g, 90e-6, vec![(g.x_coord(0), 0.0)]).is_err(),
            "window clipped at the edge"
        );
    }

    #[test]
    fn identity_arms_with_open_mask_make_bucket_equal_point() {
        let g = grid(32, 10e-6);
        let f = speckle(g, 40e-6, 3);
        let chain = ArmChain::compile(ArmSpec::identity(), g).unwrap();
        let mask = ApertureMask::uniform(g, Complex::new(1.0, 0.0)).unwrap();
        let spec = PointDetectorSpec::new(g, g.extent_x(), vec![(0.0, 0.0)]).unwrap();
        let mut ws = chain.workspace();
        let record = measure_realization(3, &f, &chain, &chain, &mask, &spec, &mut ws).unwrap();
        assert!(
            ((record.bucket.power - record.point_readings[0].power) / record.bucket.power).abs()
                < 1e-12
        );
    }

    #[test]
    fn equal_arm_fast_path_matches_explicit_double_evaluation() {
        let g = grid(64, 10e-6);
        let f = speckle(g, 40e-6, 4);
        let mask = make_two_hole_mask(g, -0.2e-3, 0.2e-3, 30e-6).unwrap();
        let spec =
            PointDetectorSpec::new(g, 30e-6, vec![(-0.2e-3, 0.0), (0.2e-3, 0.0)]).unwrap();

        // Same physical arm, structurally equal (fast path) vs structurally
        // different but mathematically identical (z then z = 0).
        let fast = ArmChain::compile(ArmSpec::free_space(0.05), g).unwrap();
        let slow = ArmChain::compile(
            ArmSpec {
                elements: vec![
                    crate::optics::ArmElement::Propagate { distance: 0.05 },
                    crate::optics::ArmElement::Propagate { distance: 0.0 },
                ],
            },
            g,
        )
        .unwrap();
        let mut ws = fast.workspace();
        let a = measure_realization(4, &f, &fast, &fast, &mask, &spec, &mut ws).unwrap();
        let b = measure_realization(4, &f, &fast, &slow, &mask, &spec, &mut ws).unwrap();
        assert_eq!(a.bucket.power, b.bucket.power);
        for (x, y) in a.point_readings.iter().zip(&b.point_readings) {
            assert_eq!(x.power, y.power);
        }
    }

    #[test]
    fn equal_distance_arms_give_reference_equal_to_premask_object_field() {
        let g = grid(64, 10e-6);
        let f = speckle(g, 40e-6, 5);
        let chain = ArmChain::compile(ArmSpec::free_space(0.05), g).unwrap();
        let mut ws = chain.workspace();
        let (b1, b2) = beam_splitter(&f, false);
        let obj = chain.evaluate(&b1, &mut ws).unwrap();
        let reference = chain.evaluate(&b2, &mut ws).unwrap();
        assert_eq!(obj.max_abs_diff(&reference), 0.0);
    }

    #[test]
    fn mismatched_arms_decorrelate_the_fields() {
        let g = grid(64, 10e-6);
        let f = speckle(g, 40e-6, 6);
        let a = ArmChain::compile(ArmSpec::free_space(0.05), g).unwrap();
        let b = ArmChain::compile(ArmSpec::free_space(0.075), g).unwrap();
        let mut ws = a.workspace();
        let fa = a.evaluate(&f, &mut ws).unwrap();
        let fb = b.evaluate(&f, &mut ws).unwrap();
        assert!(fa.max_abs_diff(&fb) > 1e-3);
    }
}
