//! Turn-key experiment drivers. Each scenario builds the full apparatus from
//! a [`ScenarioConfig`](crate::config::ScenarioConfig), runs the realization
//! ensemble in parallel, and reduces the records into a
//! [`ScenarioVerdict`] (quantities, expected ranges, pass flags) plus data
//! products for the output directory.
//!
//! Every scenario is a pure function of its configuration, master seed
//! included: re-running yields bit-identical verdict numbers regardless of
//! worker count.

pub mod common;
pub mod contrast_sweep;
pub mod equal_plane;
pub mod lens_ghost;
pub mod near_to_far;
pub mod resolution;
pub mod two_hole;

use std::fmt;

use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::output::Product;

/// One quantitative check of a verdict: observed value against an inclusive
/// expected interval.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub label: String,
    pub observed: f64,
    pub lo: f64,
    pub hi: f64,
    pub pass: bool,
}

impl CheckResult {
    pub fn range(label: impl Into<String>, observed: f64, lo: f64, hi: f64) -> Self {
        Self { label: label.into(), observed, lo, hi, pass: observed >= lo && observed <= hi }
    }

    pub fn at_most(label: impl Into<String>, observed: f64, hi: f64) -> Self {
        Self { label: label.into(), observed, lo: f64::NEG_INFINITY, hi, pass: observed <= hi }
    }

    pub fn flag(label: impl Into<String>, ok: bool) -> Self {
        Self { label: label.into(), observed: if ok { 1.0 } else { 0.0 }, lo: 1.0, hi: 1.0, pass: ok }
    }
}

/// Outcome of one scenario run: named checks, their conjunction, and runtime.
#[derive(Clone, Debug)]
pub struct ScenarioVerdict {
    pub scenario: String,
    pub seed: u64,
    pub n_realizations: usize,
    pub checks: Vec<CheckResult>,
    pub notes: Vec<String>,
    pub pass: bool,
    pub runtime_seconds: f64,
    /// Runtime scaled to the 8-core reference machine (see
    /// [`common::normalized_runtime`]).
    pub normalized_runtime_seconds: f64,
}

impl ScenarioVerdict {
    pub fn observed(&self, label: &str) -> Option<f64> {
        self.checks.iter().find(|c| c.label == label).map(|c| c.observed)
    }
}

impl fmt::Display for ScenarioVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "scenario {}  seed {}  realizations {}",
            self.scenario, self.seed, self.n_realizations
        )?;
        for c in &self.checks {
            let status = if c.pass { "PASS" } else { "FAIL" };
            if c.lo == c.hi {
                writeln!(f, "  [{status}] {}: {:.6}", c.label, c.observed)?;
            } else if c.lo.is_finite() {
                writeln!(
                    f,
                    "  [{status}] {}: {:.6} (expected [{:.6}, {:.6}])",
                    c.label, c.observed, c.lo, c.hi
                )?;
            } else {
                writeln!(f, "  [{status}] {}: {:.6} (expected <= {:.6})", c.label, c.observed, c.hi)?;
            }
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        writeln!(
            f,
            "  runtime {:.1} s ({:.1} s normalized to 8 cores)",
            self.runtime_seconds, self.normalized_runtime_seconds
        )?;
        writeln!(f, "  verdict: {}", if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Verdict plus the data products the scenario wants written.
pub struct ScenarioOutcome {
    pub verdict: ScenarioVerdict,
    pub products: Vec<Product>,
}

pub const REGISTERED: [&str; 6] = [
    "equal_plane",
    "two_hole_ghost",
    "contrast_sweep",
    "lens_ghost",
    "near_to_far",
    "resolution_tradeoff",
];

pub fn default_config_for(name: &str) -> Result<ScenarioConfig> {
    match name {
        "equal_plane" => Ok(equal_plane::default_config()),
        "two_hole_ghost" => Ok(two_hole::default_config()),
        "contrast_sweep" => Ok(contrast_sweep::default_config()),
        "lens_ghost" => Ok(lens_ghost::default_config()),
        "near_to_far" => Ok(near_to_far::default_config()),
        "resolution_tradeoff" => Ok(resolution::default_config()),
        _ => Err(Error::UnknownScenario { name: name.to_string(), registered: REGISTERED.join(", ") }),
    }
}

pub fn run_scenario(name: &str, cfg: &ScenarioConfig) -> Result<ScenarioOutcome> {
    match name {
        "equal_plane" => equal_plane::run(cfg),
        "two_hole_ghost" => two_hole::run(cfg),
        "contrast_sweep" => contrast_sweep::run(cfg),
        "lens_ghost" => lens_ghost::run(cfg),
        "near_to_far" => near_to_far::run(cfg),
        "resolution_tradeoff" => resolution::run(cfg),
        _ => Err(Error::UnknownScenario { name: name.to_string(), registered: REGISTERED.join(", ") }),
    }
}
