//! Scalar wave optics: free-space propagation, beam splitter, aperture
//! masks, thin lenses, and composed imaging systems.
//!
//! Propagation uses the exact angular-spectrum transfer function (not the
//! paraxial Fresnel kernel), so it is valid from near field to far field;
//! evanescent components are truncated to zero. All operations are pure
//! functions of immutable inputs and safe to call concurrently; FFT plans
//! are shared and each caller owns its workspace.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft::{angular_frequencies, Fft2d, FftWorkspace};
use crate::field::{ComplexField, Grid2D};
use crate::util::ksum;
use crate::Real;

/// Policy for spatial frequencies beyond the propagating band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EvanescentPolicy {
    /// Evanescent components are zeroed.
    #[default]
    Truncate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagationSpec<T: Real> {
    pub distance: T,
    pub evanescent_policy: EvanescentPolicy,
}

impl<T: Real> PropagationSpec<T> {
    pub fn new(distance: T) -> Result<Self> {
        if !(distance >= T::zero()) || !distance.is_finite() {
            return Err(Error::invalid(
                "distance",
                format!("propagation distance must be >= 0, got {}", distance.as_f64()),
            ));
        }
        Ok(Self { distance, evanescent_policy: EvanescentPolicy::Truncate })
    }
}

/// Free-space transfer function exp(i z sqrt(k^2 - kx^2 - ky^2)) on the
/// grid's FFT frequency layout, zero on the evanescent band.
pub(crate) fn angular_spectrum_transfer<T: Real>(grid: &Grid2D<T>, distance: T) -> Vec<Complex<T>> {
    let k = grid.wavenumber();
    let k_sq = k * k;
    let kx = angular_frequencies(grid.nx(), grid.dx());
    let ky = angular_frequencies(grid.ny(), grid.dy());
    let mut transfer = Vec::with_capacity(grid.len());
    for &ky_v in &ky {
        for &kx_v in &kx {
            let kz_sq = k_sq - kx_v * kx_v - ky_v * ky_v;
            if kz_sq > T::zero() {
                let phase = distance * kz_sq.sqrt();
                transfer.push(Complex::new(phase.cos(), phase.sin()));
            } else {
                transfer.push(Complex::new(T::zero(), T::zero()));
            }
        }
    }
    transfer
}

/// Planned angular-spectrum propagator for one (grid, distance) pair.
pub struct Propagator<T: Real> {
    grid: Grid2D<T>,
    spec: PropagationSpec<T>,
    fft: Fft2d<T>,
    transfer: Vec<Complex<T>>,
}

impl<T: Real> Propagator<T> {
    pub fn new(grid: Grid2D<T>, spec: PropagationSpec<T>) -> Result<Self> {
        let half_wavelength = grid.wavelength() / T::of_f64(2.0);
        if grid.dx() > half_wavelength || grid.dy() > half_wavelength {
            // Fine for paraxial speckle, whose spectrum sits far below k.
            log::warn!(
                "grid pitch ({:.3e}, {:.3e}) m exceeds lambda/2 = {:.3e} m; \
                 propagation is exact only for band-limited fields",
                grid.dx().as_f64(),
                grid.dy().as_f64(),
                half_wavelength.as_f64()
            );
        }
        let transfer = angular_spectrum_transfer(&grid, spec.distance);
        Ok(Self { fft: Fft2d::new(grid.nx(), grid.ny()), grid, spec, transfer })
    }

    pub fn grid(&self) -> &Grid2D<T> {
        &self.grid
    }

    pub fn distance(&self) -> T {
        self.spec.distance
    }

    pub fn workspace(&self) -> FftWorkspace<T> {
        self.fft.workspace()
    }

    pub fn apply(&self, field: &ComplexField<T>, ws: &mut FftWorkspace<T>) -> Result<ComplexField<T>> {
        if *field.grid() != self.grid {
            return Err(Error::GridMismatch("field grid differs from propagator grid".to_string()));
        }
        if self.spec.distance == T::zero() {
            return Ok(field.clone());
        }
        let mut buf = field.samples().to_vec();
        self.fft.forward(&mut buf, ws);
        for (v, h) in buf.iter_mut().zip(&self.transfer) {
            *v = *v * *h;
        }
        self.fft.inverse(&mut buf, ws);
        Ok(ComplexField::from_samples_unchecked(self.grid, buf))
    }
}

/// One-shot angular-spectrum propagation.
pub fn propagate<T: Real>(field: &ComplexField<T>, spec: PropagationSpec<T>) -> Result<ComplexField<T>> {
    let propagator = Propagator::new(*field.grid(), spec)?;
    let mut ws = propagator.workspace();
    propagator.apply(field, &mut ws)
}

/// Ideal noiseless beam splitter: two identical copies of the input.
///
/// By default neither output is rescaled (intensity-correlation statistics
/// are invariant under common scaling); with `halve_power` each copy carries
/// half the input power for energy bookkeeping.
pub fn beam_splitter<T: Real>(
    field: &ComplexField<T>,
    halve_power: bool,
) -> (ComplexField<T>, ComplexField<T>) {
    let out = if halve_power {
        let s = T::of_f64(std::f64::consts::FRAC_1_SQRT_2);
        let samples = field.samples().iter().map(|v| v.scale(s)).collect();
        ComplexField::from_samples_unchecked(*field.grid(), samples)
    } else {
        field.clone()
    };
    (out.clone(), out)
}

/// Complex transmission function of an object plane.
#[derive(Clone, Debug)]
pub struct ApertureMask<T: Real> {
    grid: Grid2D<T>,
    transmission: Vec<Complex<T>>,
    open_area: T,
}

impl<T: Real> ApertureMask<T> {
    pub fn new(grid: Grid2D<T>, transmission: Vec<Complex<T>>) -> Result<Self> {
        if transmission.len() != grid.len() {
            return Err(Error::invalid(
                "transmission",
                format!("expected {} samples, got {}", grid.len(), transmission.len()),
            ));
        }
        let limit = T::one() + T::of_f64(1e-12);
        for t in &transmission {
            if !t.re.is_finite() || !t.im.is_finite() || t.norm() > limit {
                return Err(Error::invalid(
                    "transmission",
                    "|t| must be <= 1 and finite at every sample".to_string(),
                ));
            }
        }
        let open_area = ksum(transmission.iter().map(|t| t.norm_sqr())) * grid.pixel_area();
        Ok(Self { grid, transmission, open_area })
    }

    pub fn uniform(grid: Grid2D<T>, t: Complex<T>) -> Result<Self> {
        Self::new(grid, vec![t; grid.len()])
    }

    pub fn grid(&self) -> &Grid2D<T> {
        &self.grid
    }

    pub fn transmission(&self) -> &[Complex<T>] {
        &self.transmission
    }

    /// Open area A = sum |t|^2 dx dy.
    pub fn open_area(&self) -> T {
        self.open_area
    }

    /// Indices of samples with non-zero transmission.
    pub fn open_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.transmission
            .iter()
            .enumerate()
            .filter(|(_, t)| t.norm_sqr() > T::zero())
            .map(|(i, _)| i)
    }
}

/// Pointwise product E * t. Power never increases.
pub fn apply_mask<T: Real>(field: &ComplexField<T>, mask: &ApertureMask<T>) -> Result<ComplexField<T>> {
    if field.grid() != mask.grid() {
        return Err(Error::GridMismatch("field and mask grids differ".to_string()));
    }
    let samples = field
        .samples()
        .iter()
        .zip(&mask.transmission)
        .map(|(e, t)| e * t)
        .collect();
    Ok(ComplexField::from_samples_unchecked(*field.grid(), samples))
}

/// Pixel span of a square hole of side `side` centered at `center` along one
/// axis: the rectangle snaps to the pixel lattice so the quantized area is
/// exact whenever `side` is close to an integer number of pitches.
fn hole_span<T: Real>(center: T, side: T, pitch: T, n: usize, axis: &'static str) -> Result<(usize, usize)> {
    let n_px_real = (side / pitch).as_f64();
    let n_px = n_px_real.round().max(1.0) as usize;
    // First covered pixel center, in index space.
    let center_px = (center / pitch).as_f64() + (n / 2) as f64;
    let start = (center_px - 0.5 * (n_px as f64 - 1.0)).round();
    if start < 0.0 || start + n_px as f64 - 1.0 >= n as f64 {
        return Err(Error::invalid(
            axis,
            format!("hole at {:.3e} m with side {:.3e} m leaves the grid", center.as_f64(), side.as_f64()),
        ));
    }
    Ok((start as usize, start as usize + n_px - 1))
}

/// Binary mask of identical square holes centered at the given transverse
/// positions, 1 inside each hole and 0 elsewhere.
///
/// Holes snap to the pixel lattice and must not overlap; geometry whose
/// quantized open area differs from `n side^2` by more than one pixel area
/// per hole is rejected.
pub fn make_hole_array_mask<T: Real>(
    grid: Grid2D<T>,
    centers: &[(T, T)],
    side: T,
) -> Result<ApertureMask<T>> {
    if centers.is_empty() {
        return Err(Error::invalid("centers", "at least one hole".to_string()));
    }
    if !(side > T::zero()) {
        return Err(Error::invalid("hole_side", "empty hole: side must be positive".to_string()));
    }
    let mut transmission = vec![Complex::new(T::zero(), T::zero()); grid.len()];
    let mut filled = 0usize;
    let mut per_hole = 0usize;
    for &(cx, cy) in centers {
        let span_x = hole_span(cx, side, grid.dx(), grid.nx(), "hole center x")?;
        let span_y = hole_span(cy, side, grid.dy(), grid.ny(), "hole center y")?;
        per_hole = (span_x.1 - span_x.0 + 1) * (span_y.1 - span_y.0 + 1);
        for j in span_y.0..=span_y.1 {
            for i in span_x.0..=span_x.1 {
                transmission[grid.index_of(i, j)] = Complex::new(T::one(), T::zero());
                filled += 1;
            }
        }
    }
    let distinct = transmission.iter().filter(|t| t.re > T::zero()).count();
    if distinct != filled {
        return Err(Error::invalid(
            "centers",
            format!("holes overlap: {} pixels covered twice", filled - distinct),
        ));
    }
    let mask = ApertureMask::new(grid, transmission)?;
    let nominal = T::of_usize(centers.len()) * side * side;
    let quantization = (mask.open_area() - nominal).abs();
    let budget =
        T::of_usize(centers.len()) * grid.pixel_area() * (T::one() + T::of_f64(1e-9));
    if quantization > budget {
        return Err(Error::invalid(
            "hole_side",
            format!(
                "side {:.3e} m does not align with the {:.3e} m pitch: open area {:.3e} differs \
                 from {} side^2 = {:.3e} by more than one pixel area per hole \
                 ({per_hole} px per hole)",
                side.as_f64(),
                grid.dx().as_f64(),
                mask.open_area().as_f64(),
                centers.len(),
                nominal.as_f64()
            ),
        ));
    }
    Ok(mask)
}

/// Binary two-hole mask: 1 inside each `side` x `side` hole centered at
/// transverse positions `y1` and `y2` on the x axis, 0 elsewhere.
pub fn make_two_hole_mask<T: Real>(
    grid: Grid2D<T>,
    y1: T,
    y2: T,
    side: T,
) -> Result<ApertureMask<T>> {
    make_hole_array_mask(grid, &[(y1, T::zero()), (y2, T::zero())], side)
}

/// Ideal thin lens.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LensSpec<T: Real> {
    pub focal_length: T,
    pub aperture_diameter: Option<T>,
}

impl<T: Real> LensSpec<T> {
    pub fn new(focal_length: T, aperture_diameter: Option<T>) -> Result<Self> {
        if focal_length == T::zero() || !focal_length.is_finite() {
            return Err(Error::invalid("focal_length", "must be non-zero and finite".to_string()));
        }
        if let Some(d) = aperture_diameter {
            if !(d > T::zero()) {
                return Err(Error::invalid("aperture_diameter", "must be positive".to_string()));
            }
        }
        Ok(Self { focal_length, aperture_diameter })
    }
}

/// Precomputed quadratic-phase multiplier of a thin lens on a grid.
pub struct Lens<T: Real> {
    grid: Grid2D<T>,
    multiplier: Vec<Complex<T>>,
}

impl<T: Real> Lens<T> {
    pub fn new(grid: Grid2D<T>, spec: LensSpec<T>) -> Result<Self> {
        LensSpec::new(spec.focal_length, spec.aperture_diameter)?;
        let k = grid.wavenumber();
        let two_f = T::of_f64(2.0) * spec.focal_length;
        let r_max_sq = spec.aperture_diameter.map(|d| d * d / T::of_f64(4.0));
        let mut multiplier = Vec::with_capacity(grid.len());
        for j in 0..grid.ny() {
            let y = grid.y_coord(j);
            for i in 0..grid.nx() {
                let x = grid.x_coord(i);
                let r_sq = x * x + y * y;
                let clipped = r_max_sq.map_or(false, |m| r_sq > m);
                if clipped {
                    multiplier.push(Complex::new(T::zero(), T::zero()));
                } else {
                    let phase = -k * r_sq / two_f;
                    multiplier.push(Complex::new(phase.cos(), phase.sin()));
                }
            }
        }
        Ok(Self { grid, multiplier })
    }

    pub fn apply(&self, field: &ComplexField<T>) -> Result<ComplexField<T>> {
        if *field.grid() != self.grid {
            return Err(Error::GridMismatch("field grid differs from lens grid".to_string()));
        }
        let samples = field
            .samples()
            .iter()
            .zip(&self.multiplier)
            .map(|(e, m)| e * m)
            .collect();
        Ok(ComplexField::from_samples_unchecked(self.grid, samples))
    }
}

/// Multiplies the field by the thin-lens phase exp(-i k r^2 / 2f), apodized
/// by the lens aperture when one is configured.
pub fn thin_lens<T: Real>(field: &ComplexField<T>, spec: LensSpec<T>) -> Result<ComplexField<T>> {
    Lens::new(*field.grid(), spec)?.apply(field)
}

/// Transverse magnification of the two-distance imaging system.
pub fn magnification<T: Real>(z1: T, z2: T) -> T {
    -(z2 / z1)
}

const IMAGING_CONDITION_TOLERANCE: f64 = 1e-3;

fn check_imaging_condition<T: Real>(z1: T, z2: T, focal_length: T) -> Result<()> {
    if !(z1 > T::zero()) {
        return Err(Error::invalid("z1", "must be positive".to_string()));
    }
    if !(z2 > T::zero()) {
        return Err(Error::invalid("z2", "must be positive".to_string()));
    }
    let lhs = (T::one() / z1 + T::one() / z2) * focal_length;
    if (lhs - T::one()).abs() > T::of_f64(IMAGING_CONDITION_TOLERANCE) {
        let inv_required = T::one() / focal_length - T::one() / z1;
        let hint = if inv_required > T::zero() {
            format!("required z2 = {:.6e} m", (T::one() / inv_required).as_f64())
        } else {
            "no positive z2 satisfies the imaging condition for this z1".to_string()
        };
        return Err(Error::invalid(
            "z2",
            format!(
                "imaging condition 1/z1 + 1/z2 = 1/f violated by {:.2e} (relative); {hint}",
                (lhs - T::one()).abs().as_f64()
            ),
        ));
    }
    Ok(())
}

/// Two-distance imaging system: propagate z1, thin lens, propagate z2.
///
/// Requires 1/z1 + 1/z2 = 1/f within 0.1%. The output intensity is the
/// input-plane intensity magnified by m = -z2/z1, up to diffraction blur
/// from a finite lens aperture.
pub fn image_system<T: Real>(
    field: &ComplexField<T>,
    z1: T,
    lens: LensSpec<T>,
    z2: T,
) -> Result<ComplexField<T>> {
    check_imaging_condition(z1, z2, lens.focal_length)?;
    let at_lens = propagate(field, PropagationSpec::new(z1)?)?;
    let after_lens = thin_lens(&at_lens, lens)?;
    propagate(&after_lens, PropagationSpec::new(z2)?)
}

/// Declarative description of everything in one interferometer arm between
/// the beam splitter and the detection plane.
#[derive(Clone, Debug, PartialEq)]
pub enum ArmElement<T: Real> {
    Propagate { distance: T },
    Lens { lens: LensSpec<T> },
    /// Imaging relay: propagate z1, lens, propagate z2 (condition checked at
    /// compile time).
    ImageRelay { z1: T, lens: LensSpec<T>, z2: T },
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ArmSpec<T: Real> {
    pub elements: Vec<ArmElement<T>>,
}

impl<T: Real> ArmSpec<T> {
    pub fn free_space(distance: T) -> Self {
        Self { elements: vec![ArmElement::Propagate { distance }] }
    }

    pub fn identity() -> Self {
        Self { elements: Vec::new() }
    }
}

enum ChainOp<T: Real> {
    Prop(Propagator<T>),
    Lens(Lens<T>),
}

/// Compiled arm: planned propagators and lens multipliers, reusable across
/// realizations and threads.
pub struct ArmChain<T: Real> {
    spec: ArmSpec<T>,
    grid: Grid2D<T>,
    ops: Vec<ChainOp<T>>,
}

impl<T: Real> ArmChain<T> {
    pub fn compile(spec: ArmSpec<T>, grid: Grid2D<T>) -> Result<Self> {
        let mut ops = Vec::new();
        for element in &spec.elements {
            match *element {
                ArmElement::Propagate { distance } => {
                    ops.push(ChainOp::Prop(Propagator::new(grid, PropagationSpec::new(distance)?)?));
                }
                ArmElement::Lens { lens } => ops.push(ChainOp::Lens(Lens::new(grid, lens)?)),
                ArmElement::ImageRelay { z1, lens, z2 } => {
                    check_imaging_condition(z1, z2, lens.focal_length)?;
                    ops.push(ChainOp::Prop(Propagator::new(grid, PropagationSpec::new(z1)?)?));
                    ops.push(ChainOp::Lens(Lens::new(grid, lens)?));
                    ops.push(ChainOp::Prop(Propagator::new(grid, PropagationSpec::new(z2)?)?));
                }
            }
        }
        Ok(Self { spec, grid, ops })
    }

    pub fn spec(&self) -> &ArmSpec<T> {
        &self.spec
    }

    pub fn grid(&self) -> &Grid2D<T> {
        &self.grid
    }

    pub fn workspace(&self) -> FftWorkspace<T> {
        Fft2d::new(self.grid.nx(), self.grid.ny()).workspace()
    }

    pub fn evaluate(&self, field: &ComplexField<T>, ws: &mut FftWorkspace<T>) -> Result<ComplexField<T>> {
        let mut current = field.clone();
        for op in &self.ops {
            current = match op {
                ChainOp::Prop(p) => p.apply(&current, ws)?,
                ChainOp::Lens(l) => l.apply(&current)?,
            };
        }
        Ok(current)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{generate_speckle, SpeckleMethod, SpeckleSpec};

    fn grid(n: usize, pitch: f64) -> Grid2D<f64> {
        Grid2D::new(n, n, pitch, pitch, 532e-9).unwrap()
    }

    fn speckle_field(g: Grid2D<f64>, l_c: f64, seed: u64) -> ComplexField<f64> {
        let spec =
            SpeckleSpec::new(l_c, 1.0, 1e-3, SpeckleMethod::SpectralSynthesis).unwrap();
        generate_speckle(g, &spec, 0, seed).unwrap()
    }

    #[test]
    fn zero_distance_returns_input_exactly() {
        let g = grid(64, 10e-6);
        let f = speckle_field(g, 40e-6, 1);
        let out = propagate(&f, PropagationSpec::new(0.0).unwrap()).unwrap();
        assert_eq!(f.samples(), out.samples());
    }

    #[test]
    fn negative_distance_is_rejected() {
        assert!(PropagationSpec::new(-1e-3).unwrap_err().to_string().contains("distance"));
    }

    #[test]
    fn propagation_conserves_power_of_band_limited_fields() {
        let g = grid(128, 10e-6);
        let f = speckle_field(g, 60e-6, 2);
        let p0 = f.total_power();
        let out = propagate(&f, PropagationSpec::new(0.05).unwrap()).unwrap();
        let rel = ((out.total_power() - p0) / p0).abs();
        assert!(rel < 1e-9, "relative power change {rel}");
    }

    #[test]
    fn propagation_is_a_semigroup() {
        let g = grid(128, 10e-6);
        let f = speckle_field(g, 60e-6, 3);
        let two_step = propagate(
            &propagate(&f, PropagationSpec::new(0.02).unwrap()).unwrap(),
            PropagationSpec::new(0.03).unwrap(),
        )
        .unwrap();
        let one_step = propagate(&f, PropagationSpec::new(0.05).unwrap()).unwrap();
        let num: f64 = two_step
            .samples()
            .iter()
            .zip(one_step.samples())
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        let den: f64 = one_step.samples().iter().map(|v| v.norm_sqr()).sum();
        assert!((num / den).sqrt() < 1e-9, "relative L2 difference {}", (num / den).sqrt());
    }

    #[test]
    fn gaussian_beam_widens_by_sqrt_two_at_rayleigh_range() {
        let g = grid(256, 20e-6);
        let w0 = 200e-6;
        let f = ComplexField::from_fn(g, |x, y| {
            Complex::new((-(x * x + y * y) / (w0 * w0)).exp(), 0.0)
        });
        let z_r = std::f64::consts::PI * w0 * w0 / 532e-9;
        let out = propagate(&f, PropagationSpec::new(z_r).unwrap()).unwrap();
        // 1/e^2 radius from the intensity second moment: w = 2 sigma_x.
        let intensity = out.intensity();
        let (mut sum, mut sum_x2) = (0.0, 0.0);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let v = intensity.values()[g.index_of(i, j)];
                sum += v;
                sum_x2 += v * g.x_coord(i).powi(2);
            }
        }
        let w_measured = 2.0 * (sum_x2 / sum).sqrt();
        let expected = w0 * 2.0f64.sqrt();
        let rel = (w_measured - expected).abs() / expected;
        assert!(rel < 0.01, "w(z_R) = {w_measured:.4e}, expected {expected:.4e}, rel {rel:.4}");
    }

    #[test]
    fn beam_splitter_copies_are_identical_after_equal_propagation() {
        let g = grid(128, 10e-6);
        let f = speckle_field(g, 60e-6, 4);
        let (a, b) = beam_splitter(&f, false);
        let spec = PropagationSpec::new(0.1).unwrap();
        let propagator = Propagator::new(g, spec).unwrap();
        let mut ws = propagator.workspace();
        let pa = propagator.apply(&a, &mut ws).unwrap();
        let pb = propagator.apply(&b, &mut ws).unwrap();
        assert_eq!(pa.max_abs_diff(&pb), 0.0);
    }

    #[test]
    fn beam_splitter_zero_and_halved_power() {
        let g = grid(32, 10e-6);
        let zero = ComplexField::zero(g);
        let (a, b) = beam_splitter(&zero, false);
        assert!(a.total_power() == 0.0 && b.total_power() == 0.0);

        let f = speckle_field(g, 40e-6, 5);
        let p = f.total_power();
        let (a, b) = beam_splitter(&f, true);
        for out in [a, b] {
            assert!(((out.total_power() - 0.5 * p) / p).abs() < 1e-12);
        }
    }

    #[test]
    fn masks_transmit_as_specified() {
        let g = grid(64, 10e-6);
        let f = speckle_field(g, 40e-6, 6);
        let ones = ApertureMask::uniform(g, Complex::new(1.0, 0.0)).unwrap();
        assert_eq!(apply_mask(&f, &ones).unwrap().samples(), f.samples());

        let zeros = ApertureMask::uniform(g, Complex::new(0.0, 0.0)).unwrap();
        assert!(apply_mask(&f, &zeros).unwrap().total_power() == 0.0);

        let unit = ComplexField::from_fn(g, |_, _| Complex::new(1.0, 0.0));
        let mask = make_two_hole_mask(g, -200e-6, 200e-6, 40e-6).unwrap();
        let transmitted = apply_mask(&unit, &mask).unwrap().total_power();
        assert!(((transmitted - mask.open_area()) / mask.open_area()).abs() < 1e-12);
    }

    #[test]
    fn transmission_above_unity_is_rejected() {
        let g = grid(8, 10e-6);
        let mut t = vec![Complex::new(0.5, 0.0); g.len()];
        t[3] = Complex::new(1.1, 0.0);
        assert!(ApertureMask::new(g, t).is_err());
    }

    #[test]
    fn two_hole_mask_geometry() {
        let g = grid(256, 10e-6);
        let mask = make_two_hole_mask(g, -0.5e-3, 0.5e-3, 40e-6).unwrap();
        let nominal = 2.0 * 40e-6f64.powi(2);
        assert!((mask.open_area() - nominal).abs() <= 2.0 * g.pixel_area() + 1e-18);

        assert!(make_two_hole_mask(g, 0.3e-3, 0.3e-3, 40e-6).is_err(), "overlap");
        assert!(make_two_hole_mask(g, -0.5e-3, 0.5e-3, 0.0).is_err(), "empty hole");
        assert!(make_two_hole_mask(g, -5e-3, 0.5e-3, 40e-6).is_err(), "out of bounds");
    }

    #[test]
    fn long_focal_length_lens_is_identity() {
        // f -> infinity limit: the residual phase k r^2 / 2f on this grid is
        // ~5e-8 rad, far below the 1e-6 relative tolerance.
        let g = grid(128, 10e-6);
        let f = speckle_field(g, 60e-6, 7);
        let out = thin_lens(&f, LensSpec::new(1e8, None).unwrap()).unwrap();
        let max_amp = f.samples().iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(out.max_abs_diff(&f) / max_amp < 1e-6);
    }

    #[test]
    fn lens_focuses_plane_wave_and_conserves_power() {
        let g = grid(256, 20e-6);
        let wave = ComplexField::from_fn(g, |_, _| Complex::new(1.0, 0.0));
        let lens = LensSpec::new(0.2, None).unwrap();
        let after = thin_lens(&wave, lens).unwrap();
        assert!(((after.total_power() - wave.total_power()) / wave.total_power()).abs() < 1e-12);
        let focus = propagate(&after, PropagationSpec::new(0.2).unwrap()).unwrap();
        let intensity = focus.intensity();
        let peak = intensity
            .values()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak, g.index_of(g.nx() / 2, g.ny() / 2));
    }

    #[test]
    fn zero_focal_length_is_rejected() {
        assert!(LensSpec::<f64>::new(0.0, None).is_err());
    }

    fn centroid_near(intensity: &crate::field::IntensityMap<f64>, x0: f64, window: f64) -> f64 {
        let g = *intensity.grid();
        let (mut wsum, mut xsum) = (0.0, 0.0);
        for j in 0..g.ny() {
            for i in 0..g.nx() {
                let x = g.x_coord(i);
                if (x - x0).abs() < window && g.y_coord(j).abs() < window {
                    let v = intensity.values()[g.index_of(i, j)];
                    wsum += v;
                    xsum += v * x;
                }
            }
        }
        xsum / wsum
    }

    #[test]
    fn unit_magnification_imaging_mirrors_two_holes() {
        let g = grid(512, 10e-6);
        let unit = ComplexField::from_fn(g, |_, _| Complex::new(1.0, 0.0));
        let mask = make_two_hole_mask(g, -0.5e-3, 0.5e-3, 200e-6).unwrap();
        let object = apply_mask(&unit, &mask).unwrap();
        let lens = LensSpec::new(0.2, None).unwrap();
        let image = image_system(&object, 0.4, lens, 0.4).unwrap();
        let intensity = image.intensity();
        // m = -1: holes at -+0.5 mm map to +-0.5 mm.
        let c1 = centroid_near(&intensity, 0.5e-3, 0.3e-3);
        let c2 = centroid_near(&intensity, -0.5e-3, 0.3e-3);
        assert!((c1 - 0.5e-3).abs() < g.dx(), "peak at {c1:.4e}");
        assert!((c2 + 0.5e-3).abs() < g.dx(), "peak at {c2:.4e}");
    }

    #[test]
    fn double_magnification_doubles_separation() {
        let g = grid(512, 10e-6);
        let unit = ComplexField::from_fn(g, |_, _| Complex::new(1.0, 0.0));
        let mask = make_two_hole_mask(g, -0.4e-3, 0.4e-3, 200e-6).unwrap();
        let object = apply_mask(&unit, &mask).unwrap();
        let lens = LensSpec::new(0.2, None).unwrap();
        // z1 = 1.5 f, z2 = 3 f: m = -2.
        let image = image_system(&object, 0.3, lens, 0.6).unwrap();
        let intensity = image.intensity();
        let c1 = centroid_near(&intensity, 0.8e-3, 0.35e-3);
        let c2 = centroid_near(&intensity, -0.8e-3, 0.35e-3);
        let separation = c1 - c2;
        assert!(
            (separation - 1.6e-3).abs() / 1.6e-3 < 0.02,
            "separation {separation:.4e}, expected 1.6e-3"
        );
    }

    #[test]
    fn violated_imaging_condition_names_required_distance() {
        let g = grid(64, 10e-6);
        let f = ComplexField::zero(g);
        let lens = LensSpec::new(0.2, None).unwrap();
        let err = image_system(&f, 0.4, lens, 0.44).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("required z2"), "{msg}");
        assert!(msg.contains("4.0000"), "{msg}");
    }

    #[test]
    fn arm_chain_matches_manual_composition() {
        let g = grid(128, 10e-6);
        let f = speckle_field(g, 60e-6, 8);
        let lens = LensSpec::new(0.2, None).unwrap();
        let spec = ArmSpec {
            elements: vec![ArmElement::ImageRelay { z1: 0.4, lens, z2: 0.4 }],
        };
        let chain = ArmChain::compile(spec, g).unwrap();
        let mut ws = chain.workspace();
        let via_chain = chain.evaluate(&f, &mut ws).unwrap();
        let manual = image_system(&f, 0.4, lens, 0.4).unwrap();
        assert_eq!(via_chain.max_abs_diff(&manual), 0.0);
    }
}
