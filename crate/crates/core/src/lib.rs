//! Classical simulation of ghost imaging with pseudo-thermal (speckle) light.
//!
//! The crate models the textbook tabletop experiment: a spatially random
//! source field is split into two identical copies, one copy illuminates an
//! object and is collected by a bucket detector, the other propagates freely
//! to a small scanning detector, and the image is recovered from the
//! second-order intensity correlation between the two detectors.
//!
//! Modules follow the signal path:
//!
//! - [`field`] — sampled complex fields and pseudo-thermal speckle synthesis
//! - [`optics`] — angular-spectrum propagation, beam splitter, masks, lenses
//! - [`detect`] — bucket and scanning point detectors, per-realization records
//! - [`stats`] — streaming mergeable correlation accumulators, g², contrast
//! - [`scenarios`] — end-to-end experiment drivers with pass/fail verdicts
//! - [`cli`] — command-line front end, config files, CSV/PGM writers
//!
//! The numeric core is generic over the scalar type through [`Real`]
//! (`f32` or `f64`); the scenario and CLI layers run in `f64`, and the
//! `*64` aliases below are the types most callers want.

pub mod cli;
pub mod config;
pub mod detect;
pub mod error;
pub mod field;
pub mod optics;
pub mod output;
pub mod scenarios;
pub mod stats;

mod fft;
mod rng;
mod util;

pub use error::{Error, Result};
pub use fft::FftWorkspace;

use num_traits::{Float, FloatConst};
use rand::Rng;
use rustfft::FftNum;

/// Scalar type of the numeric core: `f32` or `f64`.
pub trait Real: FftNum + Float + FloatConst {
    /// Draws one standard-normal variate.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Converts from `f64`, panicking on values the type cannot represent.
    fn of_f64(x: f64) -> Self {
        num_traits::NumCast::from(x).expect("f64 value representable in scalar type")
    }

    /// Widens to `f64`.
    fn as_f64(self) -> f64 {
        num_traits::NumCast::from(self).expect("scalar widens to f64")
    }

    /// Converts from `usize`, panicking on overflow.
    fn of_usize(n: usize) -> Self {
        num_traits::NumCast::from(n).expect("usize value representable in scalar type")
    }
}

impl Real for f32 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
}

impl Real for f64 {
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
}

pub type Grid32 = field::Grid2D<f32>;
pub type Grid64 = field::Grid2D<f64>;
pub type Field32 = field::ComplexField<f32>;
pub type Field64 = field::ComplexField<f64>;
pub type Intensity64 = field::IntensityMap<f64>;
pub type Mask64 = optics::ApertureMask<f64>;
pub type Accumulator64 = stats::CorrelationAccumulator<f64>;
pub type Map64 = stats::CorrelationMap<f64>;
