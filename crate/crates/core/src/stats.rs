//! Streaming, mergeable estimation of second-order intensity correlations,
//! ghost-image reconstruction, and contrast analytics.
//!
//! Accumulators are single-writer; parallel ensembles shard records across
//! accumulators and merge. All sums are compensated, so merge order changes
//! finalized results by no more than ~1e-12 relative, and merging two
//! accumulators equals accumulating the concatenated record streams.

use num_complex::Complex;

use crate::detect::RealizationRecord;
use crate::error::{Error, Result};
use crate::fft::Fft2d;
use crate::field::{Grid2D, IntensityMap};
use crate::util::{fwhm_from_profile, Kahan};
use crate::Real;

#[derive(Clone, Debug)]
struct PositionSums<T: Real> {
    p: Kahan<T>,
    p_sq: Kahan<T>,
    pb: Kahan<T>,
    pb_sq: Kahan<T>,
    p_sq_b: Kahan<T>,
    p_b_sq: Kahan<T>,
}

impl<T: Real> PositionSums<T> {
    fn new() -> Self {
        Self {
            p: Kahan::new(),
            p_sq: Kahan::new(),
            pb: Kahan::new(),
            pb_sq: Kahan::new(),
            p_sq_b: Kahan::new(),
            p_b_sq: Kahan::new(),
        }
    }

    fn add(&mut self, p: T, b: T) {
        let pb = p * b;
        self.p.add(p);
        self.p_sq.add(p * p);
        self.pb.add(pb);
        self.pb_sq.add(pb * pb);
        self.p_sq_b.add(pb * p);
        self.p_b_sq.add(pb * b);
    }

    fn combine(&mut self, other: &Self) {
        self.p.combine(&other.p);
        self.p_sq.combine(&other.p_sq);
        self.pb.combine(&other.pb);
        self.pb_sq.combine(&other.pb_sq);
        self.p_sq_b.combine(&other.p_sq_b);
        self.p_b_sq.combine(&other.p_b_sq);
    }
}

/// Mergeable running sums of point-detector and bucket powers over
/// realizations.
///
/// Per scan position the accumulator keeps the moments of the point reading
/// and of its product with the bucket reading that [`Self::finalize`] needs
/// for g2, covariance, and the delta-method standard error; globally it
/// keeps the bucket moments and the realization count.
#[derive(Clone, Debug)]
pub struct CorrelationAccumulator<T: Real> {
    scan_positions: Vec<(T, T)>,
    per_position: Vec<PositionSums<T>>,
    bucket: Kahan<T>,
    bucket_sq: Kahan<T>,
    n: u64,
}

impl<T: Real> CorrelationAccumulator<T> {
    /// Empty accumulator for the given scan-position layout. The empty
    /// accumulator is the identity element of [`Self::merge`].
    pub fn new(scan_positions: Vec<(T, T)>) -> Self {
        let per_position = scan_positions.iter().map(|_| PositionSums::new()).collect();
        Self { scan_positions, per_position, bucket: Kahan::new(), bucket_sq: Kahan::new(), n: 0 }
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn scan_positions(&self) -> &[(T, T)] {
        &self.scan_positions
    }

    /// Folds one realization record into the sums.
    pub fn accumulate(&mut self, record: &RealizationRecord<T>) -> Result<()> {
        if record.point_readings.len() != self.per_position.len() {
            return Err(Error::LayoutMismatch(format!(
                "record has {} point readings, accumulator expects {}",
                record.point_readings.len(),
                self.per_position.len()
            )));
        }
        let b = record.bucket.power;
        for (sums, reading) in self.per_position.iter_mut().zip(&record.point_readings) {
            sums.add(reading.power, b);
        }
        self.bucket.add(b);
        self.bucket_sq.add(b * b);
        self.n += 1;
        Ok(())
    }

    /// Field-wise addition of another accumulator over the same layout.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.scan_positions != other.scan_positions {
            return Err(Error::LayoutMismatch(
                "accumulators have different scan-position layouts".to_string(),
            ));
        }
        for (a, b) in self.per_position.iter_mut().zip(&other.per_position) {
            a.combine(b);
        }
        self.bucket.combine(&other.bucket);
        self.bucket_sq.combine(&other.bucket_sq);
        self.n += other.n;
        Ok(())
    }

    /// Closes the sums into per-position g2, covariance, and standard error.
    ///
    /// The standard error comes from the delta method applied to the ratio
    /// g2 = <pb>/(<p><b>), using the accumulated second moments of
    /// (pb, p, b).
    pub fn finalize(&self) -> Result<CorrelationMap<T>> {
        if self.n < 2 {
            return Err(Error::InsufficientData(format!(
                "need at least 2 realizations to finalize, got {}",
                self.n
            )));
        }
        let n = T::of_f64(self.n as f64);
        let mean_b = self.bucket.value() / n;
        let var_b = (self.bucket_sq.value() / n - mean_b * mean_b).max(T::zero());
        let mut entries = Vec::with_capacity(self.per_position.len());
        for sums in &self.per_position {
            let mean_p = sums.p.value() / n;
            let mean_pb = sums.pb.value() / n;
            let covariance = mean_pb - mean_p * mean_b;
            if !(mean_p > T::zero()) || !(mean_b > T::zero()) {
                entries.push(MapEntry { g2: None, covariance, g2_stderr: None, mean_point: mean_p });
                continue;
            }
            let g2 = mean_pb / (mean_p * mean_b);

            let var_p = (sums.p_sq.value() / n - mean_p * mean_p).max(T::zero());
            let var_pb = (sums.pb_sq.value() / n - mean_pb * mean_pb).max(T::zero());
            let cov_pb_p = sums.p_sq_b.value() / n - mean_pb * mean_p;
            let cov_pb_b = sums.p_b_sq.value() / n - mean_pb * mean_b;
            let cov_p_b = covariance;

            let ga = T::one() / (mean_p * mean_b);
            let gb = -g2 / mean_p;
            let gc = -g2 / mean_b;
            let variance = ga * ga * var_pb
                + gb * gb * var_p
                + gc * gc * var_b
                + T::of_f64(2.0)
                    * (ga * gb * cov_pb_p + ga * gc * cov_pb_b + gb * gc * cov_p_b);
            // Sample covariance -> variance of the mean; guard tiny negative
            // round-off.
            let se = (variance.max(T::zero()) / (n - T::one())).sqrt();
            entries.push(MapEntry { g2: Some(g2), covariance, g2_stderr: Some(se), mean_point: mean_p });
        }
        Ok(CorrelationMap {
            scan_positions: self.scan_positions.clone(),
            entries,
            n_realizations: self.n,
            mean_bucket: mean_b,
        })
    }
}

/// Finalized per-position correlation statistics.
#[derive(Clone, Debug)]
pub struct MapEntry<T: Real> {
    /// g2 = <I_p I_b> / (<I_p><I_b>); `None` where a mean intensity is zero.
    pub g2: Option<T>,
    /// Covariance C = <I_p I_b> - <I_p><I_b>.
    pub covariance: T,
    pub g2_stderr: Option<T>,
    pub mean_point: T,
}

/// Finalized correlation map over the scan positions.
#[derive(Clone, Debug)]
pub struct CorrelationMap<T: Real> {
    pub scan_positions: Vec<(T, T)>,
    pub entries: Vec<MapEntry<T>>,
    pub n_realizations: u64,
    pub mean_bucket: T,
}

impl<T: Real> CorrelationMap<T> {
    pub fn g2_at(&self, index: usize) -> Option<T> {
        self.entries[index].g2
    }
}

/// Background-subtracted ghost image: the covariance C(x) per scan position.
/// The raw g2(x) stays available on the map itself.
pub fn ghost_image<T: Real>(map: &CorrelationMap<T>) -> Vec<T> {
    map.entries.iter().map(|e| e.covariance).collect()
}

/// Signal-to-background ratio predicted for an object of open area `A`
/// resolved by a detector of area `a`: S = (1 + A/a) / (A/a).
pub fn predicted_contrast<T: Real>(object_area: T, detector_area: T) -> Result<T> {
    if !(detector_area > T::zero()) {
        return Err(Error::invalid("detector_area", "must be positive".to_string()));
    }
    if object_area < detector_area {
        return Err(Error::invalid(
            "object_area",
            format!(
                "must be at least the detector area ({:.3e} < {:.3e})",
                object_area.as_f64(),
                detector_area.as_f64()
            ),
        ));
    }
    let ratio = object_area / detector_area;
    Ok((T::one() + ratio) / ratio)
}

/// Measured vs predicted signal-to-background ratio.
#[derive(Clone, Debug)]
pub struct ContrastReport<T: Real> {
    pub s_measured: T,
    pub s_stderr: T,
    pub s_predicted: T,
    pub object_area: T,
    pub detector_area: T,
    pub signal_region: Vec<usize>,
    pub background_region: Vec<usize>,
}

/// S_measured = mean g2 over the signal region / mean g2 over the background
/// region. The background must lie inside the illuminated beam but outside
/// the object's correlated support; enforcing that distance is the caller's
/// job (the scenario layer keeps background positions at least three
/// correlation lengths away from every open object point).
pub fn measured_contrast<T: Real>(
    map: &CorrelationMap<T>,
    signal_region: &[usize],
    background_region: &[usize],
    object_area: T,
    detector_area: T,
) -> Result<ContrastReport<T>> {
    if signal_region.is_empty() || background_region.is_empty() {
        return Err(Error::invalid("regions", "signal and background must be non-empty".to_string()));
    }
    for &i in signal_region.iter().chain(background_region) {
        if i >= map.entries.len() {
            return Err(Error::invalid("regions", format!("position index {i} out of range")));
        }
    }
    if signal_region.iter().any(|i| background_region.contains(i)) {
        return Err(Error::invalid("regions", "signal and background overlap".to_string()));
    }
    let region_mean = |region: &[usize]| -> Result<(T, T)> {
        let mut acc = Kahan::new();
        let mut var = Kahan::new();
        for &i in region {
            let e = &map.entries[i];
            let g2 = e
                .g2
                .ok_or_else(|| Error::invalid("regions", format!("g2 undefined at position {i}")))?;
            acc.add(g2);
            let se = e.g2_stderr.unwrap_or(T::zero());
            var.add(se * se);
        }
        let m = T::of_usize(region.len());
        Ok((acc.value() / m, var.value().sqrt() / m))
    };
    let (sig, sig_se) = region_mean(signal_region)?;
    let (bg, bg_se) = region_mean(background_region)?;
    if !(bg > T::zero()) {
        return Err(Error::invalid("regions", "background g2 mean is not positive".to_string()));
    }
    let s = sig / bg;
    let rel = ((sig_se / sig) * (sig_se / sig) + (bg_se / bg) * (bg_se / bg)).sqrt();
    Ok(ContrastReport {
        s_measured: s,
        s_stderr: s * rel,
        s_predicted: predicted_contrast(object_area, detector_area)?,
        object_area,
        detector_area,
        signal_region: signal_region.to_vec(),
        background_region: background_region.to_vec(),
    })
}

/// Speckle statistics of a reference-plane intensity ensemble.
#[derive(Clone, Debug)]
pub struct SpeckleMetrics<T: Real> {
    /// FWHM of |mu|, the modulus of the normalized field correlation,
    /// recovered as the square root of the normalized intensity
    /// autocovariance (Gaussian-statistics identity |mu|^2 = normalized
    /// covariance). Matches the synthesis convention for the speckle size.
    pub correlation_length: T,
    /// Fluctuation contrast sqrt(<dI^2>)/<I>; 1 for fully developed speckle.
    pub contrast: T,
    /// Integral of |mu|^2 over the window: the coherence (speckle) area.
    pub coherence_area: T,
    pub n_frames: u64,
    /// Normalized |mu|(delta) profile along the x axis, starting at lag 0.
    pub mu_profile: Vec<T>,
    pub profile_pitch: T,
}

/// Streaming estimator behind [`speckle_metrics`]: accumulates the per-pixel
/// mean profile and the circular spectral power of intensity frames over a
/// rectangular window, mergeable across shards.
pub struct SpeckleMetricsAccumulator<T: Real> {
    grid: Grid2D<T>,
    x0: usize,
    y0: usize,
    wx: usize,
    wy: usize,
    fft: Fft2d<T>,
    ws: crate::fft::FftWorkspace<T>,
    buf: Vec<Complex<T>>,
    mean: Vec<Kahan<T>>,
    power: Vec<Kahan<T>>,
    n: u64,
}

impl<T: Real> SpeckleMetricsAccumulator<T> {
    /// Window is the index rectangle `[x0, x0+wx) x [y0, y0+wy)`.
    pub fn new(grid: Grid2D<T>, x0: usize, y0: usize, wx: usize, wy: usize) -> Result<Self> {
        if wx < 2 || x0 + wx > grid.nx() || wy < 1 || y0 + wy > grid.ny() {
            return Err(Error::invalid("window", "metric window must fit inside the grid".to_string()));
        }
        let fft = Fft2d::new(wx, wy);
        let ws = fft.workspace();
        Ok(Self {
            grid,
            x0,
            y0,
            wx,
            wy,
            ws,
            buf: vec![Complex::new(T::zero(), T::zero()); wx * wy],
            fft,
            mean: vec![Kahan::new(); wx * wy],
            power: vec![Kahan::new(); wx * wy],
            n: 0,
        })
    }

    pub fn full_grid(grid: Grid2D<T>) -> Result<Self> {
        Self::new(grid, 0, 0, grid.nx(), grid.ny())
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn feed(&mut self, frame: &IntensityMap<T>) -> Result<()> {
        if frame.grid() != &self.grid {
            return Err(Error::GridMismatch("frame grid differs from metric grid".to_string()));
        }
        let values = frame.values();
        for wj in 0..self.wy {
            let src_row = (self.y0 + wj) * self.grid.nx() + self.x0;
            let dst_row = wj * self.wx;
            for wi in 0..self.wx {
                let v = values[src_row + wi];
                self.mean[dst_row + wi].add(v);
                self.buf[dst_row + wi] = Complex::new(v, T::zero());
            }
        }
        self.fft.forward(&mut self.buf, &mut self.ws);
        for (acc, v) in self.power.iter_mut().zip(&self.buf) {
            acc.add(v.norm_sqr());
        }
        self.n += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if self.grid != other.grid
            || (self.x0, self.y0, self.wx, self.wy) != (other.x0, other.y0, other.wx, other.wy)
        {
            return Err(Error::LayoutMismatch("metric windows differ".to_string()));
        }
        for (a, b) in self.mean.iter_mut().zip(&other.mean) {
            a.combine(b);
        }
        for (a, b) in self.power.iter_mut().zip(&other.power) {
            a.combine(b);
        }
        self.n += other.n;
        Ok(())
    }

    pub fn finalize(&self) -> Result<SpeckleMetrics<T>> {
        if self.n < 100 {
            return Err(Error::InsufficientData(format!(
                "speckle metrics need at least 100 frames, got {}",
                self.n
            )));
        }
        let n = T::of_f64(self.n as f64);
        let npx = self.wx * self.wy;

        // Circular autocorrelation of the ensemble: Wiener-Khinchin on the
        // averaged frame power.
        let mut ws = self.fft.workspace();
        let mut corr: Vec<Complex<T>> =
            self.power.iter().map(|a| Complex::new(a.value() / n, T::zero())).collect();
        self.fft.inverse(&mut corr, &mut ws);

        // Circular autocorrelation of the mean profile, removing the
        // envelope contribution: C(d) = <corr(I)> - corr(<I>).
        let mut mean_corr: Vec<Complex<T>> =
            self.mean.iter().map(|a| Complex::new(a.value() / n, T::zero())).collect();
        let mean_profile: Vec<T> = mean_corr.iter().map(|c| c.re).collect();
        self.fft.forward(&mut mean_corr, &mut ws);
        for v in mean_corr.iter_mut() {
            *v = Complex::new(v.norm_sqr(), T::zero());
        }
        self.fft.inverse(&mut mean_corr, &mut ws);

        let grand_mean = mean_profile.iter().fold(T::zero(), |s, &v| s + v) / T::of_usize(npx);
        if !(grand_mean > T::zero()) {
            // A dark ensemble has no fluctuations to normalize; report a
            // degenerate result rather than dividing by zero.
            return Ok(SpeckleMetrics {
                correlation_length: T::zero(),
                contrast: T::zero(),
                coherence_area: T::zero(),
                n_frames: self.n,
                mu_profile: vec![T::one()],
                profile_pitch: self.grid.dx(),
            });
        }

        let c0 = corr[0].re - mean_corr[0].re;
        let m0 = mean_corr[0].re;
        let contrast = (c0.max(T::zero()) / m0).sqrt();

        // Normalized |mu|^2 along both axes; x profile is the reported one.
        // `nu_raw` keeps the (noisy) sign so that sums over many lags stay
        // unbiased; the clamped `nu` is for profile values near the peak.
        let half_x = self.wx / 2;
        let nu_raw = |idx: usize| -> T {
            let m = mean_corr[idx].re;
            if m > T::zero() {
                (corr[idx].re - m) / m
            } else {
                T::zero()
            }
        };
        let nu = |idx: usize| -> T { nu_raw(idx).max(T::zero()) };
        let nu0 = nu(0);
        if !(nu0 > T::zero()) {
            return Ok(SpeckleMetrics {
                correlation_length: T::zero(),
                contrast,
                coherence_area: T::zero(),
                n_frames: self.n,
                mu_profile: vec![T::one()],
                profile_pitch: self.grid.dx(),
            });
        }
        let mu_profile: Vec<T> = (0..=half_x).map(|i| (nu(i) / nu0).max(T::zero()).sqrt()).collect();
        let fwhm_x = fwhm_from_profile(&mu_profile, self.grid.dx());
        let correlation_length = match (fwhm_x, self.wy > 2) {
            (Some(fx), true) => {
                let half_y = self.wy / 2;
                let prof_y: Vec<T> =
                    (0..=half_y).map(|j| (nu(j * self.wx) / nu0).max(T::zero()).sqrt()).collect();
                match fwhm_from_profile(&prof_y, self.grid.dy()) {
                    Some(fy) => (fx + fy) / T::of_f64(2.0),
                    None => fx,
                }
            }
            (Some(fx), false) => fx,
            (None, _) => {
                return Err(Error::Sampling(
                    "intensity autocovariance wider than the metric window".to_string(),
                ))
            }
        };

        // Coherence area: integral of |mu|^2 over lags within a few measured
        // correlation widths. Summing all lags instead would reduce to the
        // DC-mode power estimator, whose relative noise is sqrt(2/n).
        let support = T::of_f64(3.0) * correlation_length;
        let mut coh = Kahan::new();
        for j in 0..self.wy {
            let lag_y = if j <= self.wy / 2 { j as f64 } else { j as f64 - self.wy as f64 };
            let dy = T::of_f64(lag_y) * self.grid.dy();
            for i in 0..self.wx {
                let lag_x = if i <= self.wx / 2 { i as f64 } else { i as f64 - self.wx as f64 };
                let dx = T::of_f64(lag_x) * self.grid.dx();
                if (dx * dx + dy * dy).sqrt() <= support {
                    coh.add(nu_raw(j * self.wx + i) / nu0);
                }
            }
        }
        let coherence_area = coh.value() * self.grid.pixel_area();

        Ok(SpeckleMetrics {
            correlation_length,
            contrast,
            coherence_area,
            n_frames: self.n,
            mu_profile,
            profile_pitch: self.grid.dx(),
        })
    }
}

/// Measures the speckle size and fluctuation contrast of a reference-plane
/// intensity ensemble (at least 100 frames).
pub fn speckle_metrics<T: Real>(frames: &[IntensityMap<T>]) -> Result<SpeckleMetrics<T>> {
    let first = frames
        .first()
        .ok_or_else(|| Error::InsufficientData("empty intensity ensemble".to_string()))?;
    let mut acc = SpeckleMetricsAccumulator::full_grid(*first.grid())?;
    for f in frames {
        acc.feed(f)?;
    }
    acc.finalize()
}
