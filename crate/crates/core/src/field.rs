//! Sampled complex optical fields and pseudo-thermal speckle synthesis.
//!
//! A speckle realization is a circular complex Gaussian field: real and
//! imaginary parts are jointly Gaussian with zero mean, the phase is uniform,
//! and the intensity follows the negative-exponential law, which is what
//! gives thermal light its factor-two intensity correlation. The transverse
//! correlation length (speckle size) is prescribed through a Gaussian
//! spectral envelope calibrated analytically from the Gaussian transform
//! pair, so the modulus of the field autocorrelation has a full width at
//! half maximum equal to the requested length.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::fft::{angular_frequencies, Fft2d, FftWorkspace};
use crate::rng::realization_rng;
use crate::util::{fwhm_from_profile, ksum, Kahan};
use crate::Real;

/// Uniform sampling grid with physical pitch and the design wavelength.
///
/// Sample `(i, j)` sits at physical coordinate
/// `((i - nx/2) * dx, (j - ny/2) * dy)` (integer division), so index
/// `nx/2` is exactly on the optical axis. Samples are stored row-major,
/// `j * nx + i`. Every module in the crate uses this convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid2D<T: Real> {
    nx: usize,
    ny: usize,
    dx: T,
    dy: T,
    wavelength: T,
}

impl<T: Real> Grid2D<T> {
    pub fn new(nx: usize, ny: usize, dx: T, dy: T, wavelength: T) -> Result<Self> {
        if nx < 1 {
            return Err(Error::invalid("nx", format!("sample count must be >= 1, got {nx}")));
        }
        if ny < 1 {
            return Err(Error::invalid("ny", format!("sample count must be >= 1, got {ny}")));
        }
        for (name, v) in [("dx", dx), ("dy", dy), ("wavelength", wavelength)] {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::invalid(
                    name,
                    format!("must be positive and finite, got {}", v.as_f64()),
                ));
            }
        }
        Ok(Self { nx, ny, dx, dy, wavelength })
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn dx(&self) -> T {
        self.dx
    }

    pub fn dy(&self) -> T {
        self.dy
    }

    pub fn wavelength(&self) -> T {
        self.wavelength
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Vacuum wavenumber 2*pi/lambda.
    pub fn wavenumber(&self) -> T {
        T::of_f64(2.0) * T::PI() / self.wavelength
    }

    pub fn pixel_area(&self) -> T {
        self.dx * self.dy
    }

    pub fn extent_x(&self) -> T {
        T::of_usize(self.nx) * self.dx
    }

    pub fn extent_y(&self) -> T {
        T::of_usize(self.ny) * self.dy
    }

    pub fn x_coord(&self, i: usize) -> T {
        T::of_f64(i as f64 - (self.nx / 2) as f64) * self.dx
    }

    pub fn y_coord(&self, j: usize) -> T {
        T::of_f64(j as f64 - (self.ny / 2) as f64) * self.dy
    }

    pub fn index_of(&self, i: usize, j: usize) -> usize {
        debug_assert!(i < self.nx && j < self.ny);
        j * self.nx + i
    }

    /// Grid indices of the sample nearest to physical `(x, y)`, if inside.
    pub fn nearest_index(&self, x: T, y: T) -> Option<(usize, usize)> {
        let i = (x / self.dx).as_f64().round() + (self.nx / 2) as f64;
        let j = (y / self.dy).as_f64().round() + (self.ny / 2) as f64;
        if i < 0.0 || j < 0.0 || i >= self.nx as f64 || j >= self.ny as f64 {
            return None;
        }
        Some((i as usize, j as usize))
    }
}

/// Complex amplitude sampled on a [`Grid2D`], stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField<T: Real> {
    grid: Grid2D<T>,
    samples: Vec<Complex<T>>,
}

impl<T: Real> ComplexField<T> {
    /// Validating constructor: sample count must match the grid and every
    /// sample must be finite.
    pub fn new(grid: Grid2D<T>, samples: Vec<Complex<T>>) -> Result<Self> {
        if samples.len() != grid.len() {
            return Err(Error::invalid(
                "samples",
                format!("expected {} samples for grid, got {}", grid.len(), samples.len()),
            ));
        }
        if samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::invalid("samples", "non-finite sample".to_string()));
        }
        Ok(Self { grid, samples })
    }

    pub(crate) fn from_samples_unchecked(grid: Grid2D<T>, samples: Vec<Complex<T>>) -> Self {
        debug_assert_eq!(samples.len(), grid.len());
        Self { grid, samples }
    }

    pub fn zero(grid: Grid2D<T>) -> Self {
        Self { samples: vec![Complex::new(T::zero(), T::zero()); grid.len()], grid }
    }

    /// Builds a field by evaluating `f` at each sample's physical coordinate.
    pub fn from_fn(grid: Grid2D<T>, mut f: impl FnMut(T, T) -> Complex<T>) -> Self {
        let mut samples = Vec::with_capacity(grid.len());
        for j in 0..grid.ny() {
            let y = grid.y_coord(j);
            for i in 0..grid.nx() {
                samples.push(f(grid.x_coord(i), y));
            }
        }
        Self { grid, samples }
    }

    pub fn grid(&self) -> &Grid2D<T> {
        &self.grid
    }

    pub fn samples(&self) -> &[Complex<T>] {
        &self.samples
    }

    pub(crate) fn samples_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.samples
    }

    pub(crate) fn into_samples(self) -> Vec<Complex<T>> {
        self.samples
    }

    /// Pointwise |E|^2 on the same grid.
    pub fn intensity(&self) -> IntensityMap<T> {
        IntensityMap {
            grid: self.grid,
            values: self.samples.iter().map(|s| s.norm_sqr()).collect(),
        }
    }

    /// Total power: sum of |E|^2 times the pixel area (compensated sum).
    pub fn total_power(&self) -> T {
        ksum(self.samples.iter().map(|s| s.norm_sqr())) * self.grid.pixel_area()
    }

    /// Largest pointwise amplitude difference against `other`.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        debug_assert_eq!(self.grid, other.grid);
        self.samples
            .iter()
            .zip(&other.samples)
            .map(|(a, b)| (a - b).norm())
            .fold(T::zero(), T::max)
    }

    /// Keeps every `stride`-th sample per axis, producing a coarser field.
    /// Useful for building ensembles of effectively independent samples.
    pub fn subsample(&self, stride_x: usize, stride_y: usize) -> Result<Self> {
        if stride_x < 1 || stride_y < 1 {
            return Err(Error::invalid("stride", "must be >= 1".to_string()));
        }
        let nx = self.grid.nx().div_ceil(stride_x);
        let ny = self.grid.ny().div_ceil(stride_y);
        let grid = Grid2D::new(
            nx,
            ny,
            self.grid.dx() * T::of_usize(stride_x),
            self.grid.dy() * T::of_usize(stride_y),
            self.grid.wavelength(),
        )?;
        let mut samples = Vec::with_capacity(nx * ny);
        for j in (0..self.grid.ny()).step_by(stride_y) {
            for i in (0..self.grid.nx()).step_by(stride_x) {
                samples.push(self.samples[self.grid.index_of(i, j)]);
            }
        }
        Ok(Self { grid, samples })
    }
}

/// Real non-negative intensity samples on a grid.
#[derive(Clone, Debug)]
pub struct IntensityMap<T: Real> {
    grid: Grid2D<T>,
    values: Vec<T>,
}

impl<T: Real> IntensityMap<T> {
    pub fn grid(&self) -> &Grid2D<T> {
        &self.grid
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn mean(&self) -> T {
        ksum(self.values.iter().copied()) / T::of_usize(self.values.len())
    }
}

/// How a speckle realization is synthesized.
#[derive(Clone, Debug, PartialEq)]
pub enum SpeckleMethod<T: Real> {
    /// White circular-Gaussian noise shaped by a Gaussian spectral envelope.
    /// Exact stationary statistics, correlation length prescribed.
    SpectralSynthesis,
    /// Unit plane wave through a deep random phase screen, then free
    /// propagation. The speckle size emerges from the screen statistics and
    /// the propagation distance instead of being prescribed.
    PhaseScreenDiffuser { screen_correlation_length: T, distance: T },
}

/// Statistical description of the pseudo-thermal source.
#[derive(Clone, Debug, PartialEq)]
pub struct SpeckleSpec<T: Real> {
    /// Transverse correlation length: FWHM of |field autocorrelation|.
    pub correlation_length: T,
    /// Ensemble-mean intensity (power per unit area).
    pub mean_intensity: T,
    /// Source correlation time. Recorded metadata: realizations model
    /// snapshots separated by much more than this, so it never enters the
    /// synthesis itself.
    pub correlation_time: T,
    pub method: SpeckleMethod<T>,
}

impl<T: Real> SpeckleSpec<T> {
    pub fn new(
        correlation_length: T,
        mean_intensity: T,
        correlation_time: T,
        method: SpeckleMethod<T>,
    ) -> Result<Self> {
        if !(correlation_length > T::zero()) {
            return Err(Error::invalid("correlation_length", "must be positive".to_string()));
        }
        if !(mean_intensity > T::zero()) {
            return Err(Error::invalid("mean_intensity", "must be positive".to_string()));
        }
        if correlation_time < T::zero() {
            return Err(Error::invalid("correlation_time", "must be non-negative".to_string()));
        }
        if let SpeckleMethod::PhaseScreenDiffuser { screen_correlation_length, distance } = method
        {
            if !(screen_correlation_length > T::zero()) {
                return Err(Error::invalid(
                    "screen_correlation_length",
                    "must be positive".to_string(),
                ));
            }
            if !(distance > T::zero()) {
                return Err(Error::invalid("distance", "must be positive".to_string()));
            }
        }
        Ok(Self { correlation_length, mean_intensity, correlation_time, method })
    }

    /// Sampling requirement: the correlation length (and the screen
    /// correlation length in diffuser mode) must span at least two pitches.
    pub fn validate_on(&self, grid: &Grid2D<T>) -> Result<()> {
        let min_len = T::of_f64(2.0) * grid.dx().max(grid.dy());
        if self.correlation_length < min_len {
            return Err(Error::Sampling(format!(
                "correlation length {:.3e} m under-sampled: grid pitch requires at least {:.3e} m",
                self.correlation_length.as_f64(),
                min_len.as_f64()
            )));
        }
        if let SpeckleMethod::PhaseScreenDiffuser { screen_correlation_length, .. } = self.method {
            if screen_correlation_length < min_len {
                return Err(Error::Sampling(format!(
                    "screen correlation length {:.3e} m under-sampled: need at least {:.3e} m",
                    screen_correlation_length.as_f64(),
                    min_len.as_f64()
                )));
            }
        }
        Ok(())
    }
}

/// Ensemble size and seeding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnsembleSpec {
    pub n_realizations: usize,
    pub master_seed: u64,
}

impl EnsembleSpec {
    pub fn new(n_realizations: usize, master_seed: u64) -> Result<Self> {
        if n_realizations < 1 {
            return Err(Error::invalid("n_realizations", "must be >= 1".to_string()));
        }
        Ok(Self { n_realizations, master_seed })
    }
}

/// Converts the FWHM of |field autocorrelation| to the Gaussian sigma of the
/// correlation: l_c = 2*sqrt(2 ln 2) * sigma_r.
pub(crate) fn correlation_sigma<T: Real>(correlation_length: T) -> T {
    correlation_length / (T::of_f64(2.0) * (T::of_f64(2.0) * T::of_f64(2.0f64.ln())).sqrt())
}

/// Reusable speckle synthesizer for one (grid, spec) pair.
///
/// Generation is a pure function of `(grid, spec, realization_index,
/// master_seed)`: fields are bit-reproducible no matter how many worker
/// threads run the ensemble. Construction plans the FFTs and calibrates the
/// spectral envelope; reuse it across realizations.
pub struct SpeckleGenerator<T: Real> {
    grid: Grid2D<T>,
    spec: SpeckleSpec<T>,
    fft: Fft2d<T>,
    /// Spectral amplitude per mode, scaled so the ensemble mean intensity is
    /// exactly `mean_intensity` (spectral synthesis), or the phase-screen
    /// spectral amplitude for unit-variance screen noise (diffuser mode).
    amplitude: Vec<T>,
    /// Free-space transfer function for the diffuser propagation leg.
    diffuser_transfer: Option<Vec<Complex<T>>>,
}

impl<T: Real> SpeckleGenerator<T> {
    pub fn new(grid: Grid2D<T>, spec: SpeckleSpec<T>) -> Result<Self> {
        spec.validate_on(&grid)?;
        match spec.method {
            SpeckleMethod::SpectralSynthesis => {
                let amplitude =
                    gaussian_spectral_amplitude(&grid, spec.correlation_length, spec.mean_intensity);
                Ok(Self {
                    fft: Fft2d::new(grid.nx(), grid.ny()),
                    grid,
                    spec,
                    amplitude,
                    diffuser_transfer: None,
                })
            }
            SpeckleMethod::PhaseScreenDiffuser { screen_correlation_length, distance } => {
                // Unit-variance screen noise: mean "intensity" 1.
                let amplitude =
                    gaussian_spectral_amplitude(&grid, screen_correlation_length, T::one());
                let transfer = crate::optics::angular_spectrum_transfer(&grid, distance);
                Ok(Self {
                    fft: Fft2d::new(grid.nx(), grid.ny()),
                    grid,
                    spec,
                    amplitude,
                    diffuser_transfer: Some(transfer),
                })
            }
        }
    }

    pub fn grid(&self) -> &Grid2D<T> {
        &self.grid
    }

    pub fn spec(&self) -> &SpeckleSpec<T> {
        &self.spec
    }

    pub fn workspace(&self) -> FftWorkspace<T> {
        self.fft.workspace()
    }

    /// Synthesizes realization `realization_index` of the stream keyed by
    /// `master_seed`.
    pub fn generate(
        &self,
        realization_index: u64,
        master_seed: u64,
        ws: &mut FftWorkspace<T>,
    ) -> ComplexField<T> {
        match self.spec.method {
            SpeckleMethod::SpectralSynthesis => self.generate_spectral(realization_index, master_seed, ws),
            SpeckleMethod::PhaseScreenDiffuser { .. } => {
                self.generate_diffuser(realization_index, master_seed, ws)
            }
        }
    }

    fn draw_shaped_spectrum(
        &self,
        realization_index: u64,
        master_seed: u64,
    ) -> Vec<Complex<T>> {
        let mut rng = realization_rng(master_seed, realization_index);
        let inv_sqrt2 = T::of_f64(std::f64::consts::FRAC_1_SQRT_2);
        self.amplitude
            .iter()
            .map(|&a| {
                // Draw both components for every mode, including fully
                // suppressed ones, so the stream layout is independent of the
                // envelope.
                let re = T::standard_normal(&mut rng);
                let im = T::standard_normal(&mut rng);
                Complex::new(re * inv_sqrt2 * a, im * inv_sqrt2 * a)
            })
            .collect()
    }

    fn generate_spectral(
        &self,
        realization_index: u64,
        master_seed: u64,
        ws: &mut FftWorkspace<T>,
    ) -> ComplexField<T> {
        let mut buf = self.draw_shaped_spectrum(realization_index, master_seed);
        self.fft.inverse(&mut buf, ws);
        ComplexField::from_samples_unchecked(self.grid, buf)
    }

    fn generate_diffuser(
        &self,
        realization_index: u64,
        master_seed: u64,
        ws: &mut FftWorkspace<T>,
    ) -> ComplexField<T> {
        // Real unit-variance Gaussian screen from the complex synthesis:
        // sqrt(2) * Re(E) has variance 1 and the same normalized correlation.
        let mut buf = self.draw_shaped_spectrum(realization_index, master_seed);
        self.fft.inverse(&mut buf, ws);
        let depth = T::of_f64(PHASE_SCREEN_DEPTH_RAD * std::f64::consts::SQRT_2);
        let amp = self.spec.mean_intensity.sqrt();
        for v in buf.iter_mut() {
            let phase = depth * v.re;
            *v = Complex::new(amp * phase.cos(), amp * phase.sin());
        }
        let transfer = self.diffuser_transfer.as_ref().expect("diffuser transfer present");
        self.fft.forward(&mut buf, ws);
        for (v, h) in buf.iter_mut().zip(transfer) {
            *v = *v * *h;
        }
        self.fft.inverse(&mut buf, ws);
        ComplexField::from_samples_unchecked(self.grid, buf)
    }

    /// Measured FWHM of |field autocorrelation|, ensemble-averaged over
    /// `n_realizations` fields. This is the startup self-check for the
    /// analytic envelope calibration; in diffuser mode it reports the
    /// emergent speckle size.
    pub fn measured_correlation_fwhm(
        &self,
        master_seed: u64,
        n_realizations: usize,
    ) -> Result<T> {
        if n_realizations < 10 {
            return Err(Error::InsufficientData(
                "correlation self-check needs at least 10 realizations".to_string(),
            ));
        }
        let mut ws = self.workspace();
        let mut power: Vec<Kahan<T>> = vec![Kahan::new(); self.grid.len()];
        for k in 0..n_realizations {
            let field = self.generate(k as u64, master_seed, &mut ws);
            let mut buf = field.into_samples();
            self.fft.forward(&mut buf, &mut ws);
            for (acc, v) in power.iter_mut().zip(&buf) {
                acc.add(v.norm_sqr());
            }
        }
        // Wiener-Khinchin: ensemble autocorrelation is the inverse transform
        // of the averaged mode power.
        let mut corr: Vec<Complex<T>> =
            power.iter().map(|a| Complex::new(a.value(), T::zero())).collect();
        self.fft.inverse(&mut corr, &mut ws);
        let peak = corr[0].norm();
        if !(peak > T::zero()) {
            return Err(Error::InsufficientData("degenerate autocorrelation".to_string()));
        }
        let half = self.grid.nx() / 2;
        let profile: Vec<T> = (0..=half).map(|i| corr[i].norm() / peak).collect();
        fwhm_from_profile(&profile, self.grid.dx())
            .ok_or_else(|| Error::Sampling("autocorrelation wider than the grid".to_string()))
    }
}

/// Fixed phase depth of the diffuser screen, deep enough that the
/// transmitted field decorrelates within one screen correlation length and
/// speckle is fully developed after propagation.
const PHASE_SCREEN_DEPTH_RAD: f64 = 6.0;

/// Gaussian spectral amplitude whose inverse transform has a field
/// autocorrelation of FWHM `correlation_length`, scaled so the synthesized
/// ensemble mean intensity equals `mean_intensity` exactly.
fn gaussian_spectral_amplitude<T: Real>(
    grid: &Grid2D<T>,
    correlation_length: T,
    mean_intensity: T,
) -> Vec<T> {
    let sigma_r = correlation_sigma(correlation_length);
    let sigma_k = T::one() / sigma_r;
    let four = T::of_f64(4.0);
    let kx = angular_frequencies(grid.nx(), grid.dx());
    let ky = angular_frequencies(grid.ny(), grid.dy());
    let mut amp = Vec::with_capacity(grid.len());
    for &ky_v in &ky {
        for &kx_v in &kx {
            let k_sq = kx_v * kx_v + ky_v * ky_v;
            amp.push((-k_sq / (four * sigma_k * sigma_k)).exp());
        }
    }
    // <|E|^2> = sum(amp^2) / N^2 for a unit-variance white draw; rescale so
    // it equals mean_intensity.
    let n = T::of_usize(grid.len());
    let sum_sq = ksum(amp.iter().map(|a| *a * *a));
    let scale = (mean_intensity * n * n / sum_sq).sqrt();
    for a in &mut amp {
        *a = *a * scale;
    }
    amp
}

/// One-shot convenience wrapper around [`SpeckleGenerator`].
pub fn generate_speckle<T: Real>(
    grid: Grid2D<T>,
    spec: &SpeckleSpec<T>,
    realization_index: u64,
    master_seed: u64,
) -> Result<ComplexField<T>> {
    let generator = SpeckleGenerator::new(grid, spec.clone())?;
    let mut ws = generator.workspace();
    Ok(generator.generate(realization_index, master_seed, &mut ws))
}

/// Goodness-of-fit report of an intensity ensemble against the
/// negative-exponential law of fully developed speckle.
#[derive(Clone, Debug)]
pub struct IntensityHistogram<T: Real> {
    pub n_samples: usize,
    pub mean: T,
    /// Normalized second moment <I^2>/<I>^2; 2 for the exponential law.
    pub second_moment_ratio: T,
    /// Max |empirical CDF - exponential CDF with the sample mean|.
    pub cdf_max_deviation: T,
    /// Threshold the deviation is judged against; see
    /// [`exponential_cdf_threshold`].
    pub threshold: T,
    pub passes: bool,
    pub bin_edges: Vec<T>,
    pub counts: Vec<u64>,
}

/// Coefficient of the CDF-deviation threshold `KS_COEFF / sqrt(n)`.
///
/// Calibrated against the direct exponential sampler: for iid exponential
/// data the deviation statistic (with the mean estimated from the sample)
/// concentrates below `1.1/sqrt(n)` even at the 1% tail, while clearly
/// non-exponential ensembles (e.g. constant intensity) sit near 0.63
/// independent of `n`. The margin keeps the check insensitive to the mild
/// residual correlation of decimated speckle samples.
pub const KS_COEFF: f64 = 1.25;

pub fn exponential_cdf_threshold<T: Real>(n_samples: usize) -> T {
    T::of_f64(KS_COEFF / (n_samples as f64).sqrt())
}

const HISTOGRAM_BINS: usize = 64;

/// Pools every intensity sample of the ensemble and tests the exponential
/// law. Samples should be effectively independent for the threshold to be
/// meaningful; decimate speckle fields to a stride of a couple of
/// correlation lengths first (see [`ComplexField::subsample`]).
pub fn intensity_histogram_test<T: Real>(
    fields: &[ComplexField<T>],
) -> Result<IntensityHistogram<T>> {
    if fields.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "intensity histogram test needs at least 100 fields, got {}",
            fields.len()
        )));
    }
    let mut samples: Vec<T> = Vec::with_capacity(fields.len() * fields[0].samples().len());
    for f in fields {
        samples.extend(f.samples().iter().map(|s| s.norm_sqr()));
    }
    let n = samples.len();
    let mean = ksum(samples.iter().copied()) / T::of_usize(n);
    if !(mean > T::zero()) {
        return Err(Error::invalid("fields", "ensemble has zero mean intensity".to_string()));
    }
    let second = ksum(samples.iter().map(|&x| x * x)) / T::of_usize(n);
    let ratio = second / (mean * mean);

    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    let mut deviation = T::zero();
    for (i, &x) in samples.iter().enumerate() {
        let model = T::one() - (-x / mean).exp();
        let hi = T::of_usize(i + 1) / T::of_usize(n) - model;
        let lo = model - T::of_usize(i) / T::of_usize(n);
        deviation = deviation.max(hi.max(lo));
    }

    let edge_max = mean * T::of_f64(8.0);
    let mut bin_edges = Vec::with_capacity(HISTOGRAM_BINS + 1);
    for b in 0..=HISTOGRAM_BINS {
        bin_edges.push(edge_max * T::of_usize(b) / T::of_usize(HISTOGRAM_BINS));
    }
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    for &x in &samples {
        let bin = ((x / edge_max).as_f64() * HISTOGRAM_BINS as f64) as usize;
        counts[bin.min(HISTOGRAM_BINS - 1)] += 1;
    }

    let threshold = exponential_cdf_threshold(n);
    Ok(IntensityHistogram {
        n_samples: n,
        mean,
        second_moment_ratio: ratio,
        cdf_max_deviation: deviation,
        threshold,
        passes: deviation < threshold,
        bin_edges,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid_um<T: Real>(nx: usize, ny: usize, pitch_um: f64) -> Grid2D<T> {
        Grid2D::new(
            nx,
            ny,
            T::of_f64(pitch_um * 1e-6),
            T::of_f64(pitch_um * 1e-6),
            T::of_f64(532e-9),
        )
        .unwrap()
    }

    fn spectral_spec<T: Real>(l_c_um: f64) -> SpeckleSpec<T> {
        SpeckleSpec::new(
            T::of_f64(l_c_um * 1e-6),
            T::one(),
            T::of_f64(1e-3),
            SpeckleMethod::SpectralSynthesis,
        )
        .unwrap()
    }

    #[test]
    fn grid_span_matches_arithmetic() {
        let g = Grid2D::<f64>::new(256, 256, 10e-6, 10e-6, 532e-9).unwrap();
        assert!((g.extent_x() - 2.56e-3).abs() < 1e-12);
        assert!((g.extent_y() - 2.56e-3).abs() < 1e-12);
    }

    #[test]
    fn quasi_1d_grid_is_valid() {
        assert!(Grid2D::<f64>::new(256, 1, 10e-6, 10e-6, 532e-9).is_ok());
    }

    #[test]
    fn zero_sample_count_is_rejected_naming_field() {
        let err = Grid2D::<f64>::new(0, 256, 10e-6, 10e-6, 532e-9).unwrap_err();
        assert!(err.to_string().contains("nx"), "{err}");
        let err = Grid2D::<f64>::new(256, 256, -1.0, 10e-6, 532e-9).unwrap_err();
        assert!(err.to_string().contains("dx"), "{err}");
    }

    #[test]
    fn coordinate_convention_centers_on_axis() {
        let g = grid_um::<f64>(8, 8, 10.0);
        assert_eq!(g.x_coord(4), 0.0);
        assert_eq!(g.y_coord(4), 0.0);
        assert!((g.x_coord(0) + 4.0 * 10e-6).abs() < 1e-18);
        assert_eq!(g.nearest_index(0.0, 0.0), Some((4, 4)));
        assert_eq!(g.nearest_index(1.0, 0.0), None);
    }

    #[test]
    fn intensity_of_zero_and_plane_wave() {
        let g = grid_um::<f64>(16, 16, 10.0);
        let zero = ComplexField::zero(g);
        assert!(zero.intensity().values().iter().all(|&v| v == 0.0));
        let phase = 0.7f64;
        let wave = ComplexField::from_fn(g, |_, _| Complex::from_polar(1.0, phase));
        assert!(wave.intensity().values().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn speckle_mean_intensity_matches_spec() {
        let g = grid_um::<f64>(64, 64, 10.0);
        let spec = spectral_spec::<f64>(40.0);
        let generator = SpeckleGenerator::new(g, spec).unwrap();
        let mut ws = generator.workspace();
        let n = 150;
        let means: Vec<f64> =
            (0..n).map(|k| generator.generate(k, 99, &mut ws).intensity().mean()).collect();
        let mean = means.iter().sum::<f64>() / n as f64;
        let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (mean - 1.0).abs() < 3.0 * se + 1e-3,
            "mean {mean} differs from 1.0 beyond 3 SE {se}"
        );
    }

    #[test]
    fn generation_is_deterministic_and_index_dependent() {
        let g = grid_um::<f64>(32, 32, 10.0);
        let spec = spectral_spec::<f64>(40.0);
        let a = generate_speckle(g, &spec, 5, 1234).unwrap();
        let b = generate_speckle(g, &spec, 5, 1234).unwrap();
        assert_eq!(a.samples(), b.samples());
        let c = generate_speckle(g, &spec, 6, 1234).unwrap();
        assert!(a.max_abs_diff(&c) > 0.0);
        let d = generate_speckle(g, &spec, 5, 1235).unwrap();
        assert!(a.max_abs_diff(&d) > 0.0);
    }

    /// Brute-force spatial-lag autocorrelation, independent of the FFT path.
    fn brute_force_fwhm(
        generator: &SpeckleGenerator<f64>,
        seed: u64,
        n_realizations: usize,
        max_lag: usize,
    ) -> f64 {
        let g = *generator.grid();
        let mut ws = generator.workspace();
        let mut corr = vec![0.0f64; max_lag + 1];
        let rows: Vec<usize> = (0..g.ny()).step_by(8).collect();
        for k in 0..n_realizations {
            let f = generator.generate(k as u64, seed, &mut ws);
            let s = f.samples();
            for &j in &rows {
                for lag in 0..=max_lag {
                    let mut acc = Complex::new(0.0, 0.0);
                    for i in 0..(g.nx() - max_lag) {
                        acc += s[g.index_of(i, j)] * s[g.index_of(i + lag, j)].conj();
                    }
                    corr[lag] += acc.norm();
                }
            }
        }
        let peak = corr[0];
        let profile: Vec<f64> = corr.iter().map(|c| c / peak).collect();
        fwhm_from_profile(&profile, g.dx()).expect("profile crosses half max")
    }

    #[test]
    fn autocorrelation_fwhm_matches_requested_l_c() {
        let g = grid_um::<f64>(256, 256, 10.0);
        let spec = spectral_spec::<f64>(80.0);
        let generator = SpeckleGenerator::new(g, spec).unwrap();
        let fwhm = brute_force_fwhm(&generator, 2024, 2000, 24);
        let rel = (fwhm - 80e-6).abs() / 80e-6;
        assert!(rel < 0.10, "FWHM {fwhm:.3e} deviates {rel:.3} from 80 um");
    }

    #[test]
    fn fwhm_control_is_monotone_across_factor_four() {
        let g = grid_um::<f64>(256, 256, 10.0);
        let mut measured = Vec::new();
        for l_c_um in [40.0, 80.0, 160.0] {
            let generator = SpeckleGenerator::new(g, spectral_spec::<f64>(l_c_um)).unwrap();
            let fwhm = generator.measured_correlation_fwhm(7, 400).unwrap();
            let rel = (fwhm - l_c_um * 1e-6).abs() / (l_c_um * 1e-6);
            assert!(rel < 0.10, "l_c {l_c_um} um: measured {fwhm:.3e}, rel {rel:.3}");
            measured.push(fwhm);
        }
        assert!(measured[0] < measured[1] && measured[1] < measured[2]);
    }

    #[test]
    fn single_point_statistics_are_thermal() {
        let g = grid_um::<f64>(64, 64, 10.0);
        let spec = spectral_spec::<f64>(40.0);
        let generator = SpeckleGenerator::new(g, spec).unwrap();
        let mut ws = generator.workspace();
        let n = 10_000;
        let idx = g.index_of(32, 32);
        let series: Vec<f64> = (0..n)
            .map(|k| generator.generate(k, 31, &mut ws).samples()[idx].norm_sqr())
            .collect();

        let mean = series.iter().sum::<f64>() / n as f64;
        let second = series.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let ratio = second / (mean * mean);
        assert!((1.95..=2.05).contains(&ratio), "<I^2>/<I>^2 = {ratio}");

        // Scalar circular-Gaussian oracle: same estimator on direct draws.
        let mut rng = ChaCha8Rng::seed_from_u64(505);
        let oracle: Vec<f64> = (0..n)
            .map(|_| {
                let re: f64 = rng.sample(rand_distr::StandardNormal);
                let im: f64 = rng.sample(rand_distr::StandardNormal);
                0.5 * (re * re + im * im)
            })
            .collect();
        let omean = oracle.iter().sum::<f64>() / n as f64;
        let osecond = oracle.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let oratio = osecond / (omean * omean);
        assert!((1.95..=2.05).contains(&oratio), "oracle ratio {oratio}");

        // Independence across realizations: normalized lag-1 covariance.
        let mut cov = 0.0;
        for k in 0..n as usize - 1 {
            cov += (series[k] - mean) * (series[k + 1] - mean);
        }
        cov /= (n as f64 - 1.0) * mean * mean;
        assert!(cov.abs() < 0.02, "lag-1 intensity correlation {cov}");
    }

    #[test]
    fn undersampled_correlation_length_is_rejected() {
        let g = grid_um::<f64>(64, 64, 10.0);
        let spec = spectral_spec::<f64>(15.0); // < 2 * 10 um
        assert!(matches!(SpeckleGenerator::new(g, spec), Err(Error::Sampling(_))));
    }

    #[test]
    fn histogram_test_accepts_direct_exponential_draws() {
        let g = grid_um::<f64>(16, 16, 10.0);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let fields: Vec<ComplexField<f64>> = (0..120)
            .map(|_| {
                let samples: Vec<Complex<f64>> = (0..g.len())
                    .map(|_| {
                        let u: f64 = rng.random();
                        Complex::from_polar((-u.ln()).sqrt(), 0.0)
                    })
                    .collect();
                ComplexField::new(g, samples).unwrap()
            })
            .collect();
        let report = intensity_histogram_test(&fields).unwrap();
        assert!(report.passes, "deviation {} vs threshold {}", report.cdf_max_deviation, report.threshold);
        assert!((report.second_moment_ratio - 2.0).abs() < 0.1);
    }

    #[test]
    fn histogram_test_rejects_constant_intensity() {
        let g = grid_um::<f64>(16, 16, 10.0);
        let fields: Vec<ComplexField<f64>> = (0..120)
            .map(|_| ComplexField::from_fn(g, |_, _| Complex::new(1.0, 0.0)))
            .collect();
        let report = intensity_histogram_test(&fields).unwrap();
        assert!(!report.passes);
        assert!(report.cdf_max_deviation > 0.5);
    }

    #[test]
    fn histogram_test_accepts_decimated_speckle() {
        let g = grid_um::<f64>(128, 128, 10.0);
        let spec = spectral_spec::<f64>(40.0); // 4 px speckle
        let generator = SpeckleGenerator::new(g, spec).unwrap();
        let mut ws = generator.workspace();
        let fields: Vec<ComplexField<f64>> = (0..250)
            .map(|k| generator.generate(k, 404, &mut ws).subsample(16, 16).unwrap())
            .collect();
        let report = intensity_histogram_test(&fields).unwrap();
        assert!(report.passes, "deviation {} vs threshold {}", report.cdf_max_deviation, report.threshold);
        assert!((1.95..=2.05).contains(&report.second_moment_ratio.as_f64()));
    }

    #[test]
    fn histogram_test_requires_ensemble() {
        let g = grid_um::<f64>(16, 16, 10.0);
        let fields = vec![ComplexField::zero(g); 10];
        assert!(matches!(intensity_histogram_test(&fields), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn phase_screen_produces_developed_speckle() {
        let g = grid_um::<f64>(128, 128, 10.0);
        let spec = SpeckleSpec::new(
            50e-6,
            1.0,
            1e-3,
            SpeckleMethod::PhaseScreenDiffuser {
                screen_correlation_length: 50e-6,
                distance: 0.03,
            },
        )
        .unwrap();
        let generator = SpeckleGenerator::new(g, spec.clone()).unwrap();
        let mut ws = generator.workspace();

        let a = generator.generate(3, 77, &mut ws);
        let b = generator.generate(3, 77, &mut ws);
        assert_eq!(a.samples(), b.samples(), "diffuser mode is deterministic");

        let idx = g.index_of(64, 64);
        let n = 2500;
        let series: Vec<f64> =
            (0..n).map(|k| generator.generate(k, 77, &mut ws).samples()[idx].norm_sqr()).collect();
        let mean = series.iter().sum::<f64>() / n as f64;
        let second = series.iter().map(|x| x * x).sum::<f64>() / n as f64;
        let ratio = second / (mean * mean);
        assert!((1.8..=2.2).contains(&ratio), "diffuser <I^2>/<I>^2 = {ratio}");
        let var = second - mean * mean;
        let contrast = var.sqrt() / mean;
        assert!((0.85..=1.15).contains(&contrast), "diffuser contrast = {contrast}");

        // Speckle size emerges rather than being prescribed.
        let fwhm = generator.measured_correlation_fwhm(77, 200).unwrap();
        assert!(fwhm > g.dx(), "emergent speckle size {fwhm:.3e}");
    }

    #[test]
    fn subsample_decimates_grid_and_samples() {
        let g = grid_um::<f64>(8, 8, 10.0);
        let f = ComplexField::from_fn(g, |x, y| Complex::new(x * 1e6, y * 1e6));
        let s = f.subsample(4, 2).unwrap();
        assert_eq!(s.grid().nx(), 2);
        assert_eq!(s.grid().ny(), 4);
        assert_eq!(s.samples()[0], f.samples()[0]);
        assert!((s.grid().dx() - 40e-6).abs() < 1e-18);
    }

    #[test]
    fn f32_core_generates_sane_speckle() {
        let g = grid_um::<f32>(64, 64, 10.0);
        let spec = spectral_spec::<f32>(40.0);
        let f = generate_speckle(g, &spec, 0, 42).unwrap();
        let mean = f.intensity().mean();
        assert!(mean > 0.2 && mean < 5.0, "f32 mean intensity {mean}");
    }
}
