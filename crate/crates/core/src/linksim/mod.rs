//! Black-box physical layer for QKD links.
//!
//! Loss budgets and secret key rates are evaluated generically over
//! [`Scalar`]; the simulation itself runs on the `f64` instantiation.

// Negated comparisons are deliberate here: NaN must fail every check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod keygen;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{FiberSpec, LinkId};
use crate::scalar::Scalar;

pub use keygen::{generate_key_blocks, keystream, BlockState, KeyBlock, LinkGenerator};

/// Standard single-mode fiber attenuation in the C-band.
pub const FIBER_ATTENUATION_DB_PER_KM: f64 = 0.2;

/// Loss cutoff beyond which no useful key is produced.
pub const DEFAULT_MAX_LOSS_DB: f64 = 30.0;

/// Default key block size in bits.
pub const DEFAULT_BLOCK_BITS: u32 = 256;

/// CV-QKD operating points of the Madrid links: (loss dB, key rate bit/s).
pub const MADRID_ANCHORS: [(f64, f64); 2] = [(6.0, 70_000.0), (11.0, 20_000.0)];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkSimError {
    #[error("loss must be a non-negative number, got {0} dB")]
    NegativeLoss(f64),
    #[error("invalid rate profile: {0}")]
    InvalidProfile(String),
    #[error("invalid scheduler config: {0}")]
    InvalidScheduler(String),
    #[error("transmitter `{0}` has no links to schedule")]
    EmptyTransmitterGroup(String),
    #[error("link `{0}` is not physical")]
    NotPhysical(LinkId),
    #[error("link `{0}` is not active")]
    Inactive(LinkId),
    #[error("duty {0} outside [0, 1]")]
    InvalidDuty(f64),
    #[error("invalid duration {0} s")]
    InvalidDuration(f64),
    #[error("block size must be a positive multiple of 8 bits, got {0}")]
    InvalidBlockSize(u32),
}

impl LinkSimError {
    pub fn code(&self) -> &'static str {
        match self {
            LinkSimError::NegativeLoss(_) => "domain_error",
            LinkSimError::InvalidProfile(_) => "invalid_profile",
            LinkSimError::InvalidScheduler(_) => "invalid_scheduler",
            LinkSimError::EmptyTransmitterGroup(_) => "empty_transmitter_group",
            LinkSimError::NotPhysical(_) => "wrong_kind",
            LinkSimError::Inactive(_) => "link_inactive",
            LinkSimError::InvalidDuty(_) => "invalid_duty",
            LinkSimError::InvalidDuration(_) => "invalid_duration",
            LinkSimError::InvalidBlockSize(_) => "invalid_block_size",
        }
    }
}

/// Total attenuation of a fiber span: 0.2 dB/km plus every passive element.
pub fn compute_loss<T: Scalar>(fiber: &FiberSpec<T>) -> T {
    let span = T::lit(FIBER_ATTENUATION_DB_PER_KM) * fiber.length_km;
    fiber
        .component_losses_db
        .iter()
        .fold(span, |acc, c| acc + *c)
}

/// Secret key rate as a function of channel loss.
///
/// `rate(loss) = r0_bps * 10^(-slope_per_db * loss)` up to `max_loss_db`,
/// zero beyond it. `classical_penalty_db` is added to the loss once per
/// co-propagating classical channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct RateProfile<T = f64> {
    pub r0_bps: T,
    pub slope_per_db: T,
    pub max_loss_db: T,
    #[serde(default)]
    pub classical_penalty_db: T,
}

impl<T: Scalar> RateProfile<T> {
    /// Exponential-in-dB curve through two (loss, rate) operating points.
    pub fn through_anchors(a: (T, T), b: (T, T), max_loss_db: T) -> Result<Self, LinkSimError> {
        let ((loss_a, rate_a), (loss_b, rate_b)) = (a, b);
        if !(loss_b > loss_a) || !(rate_a > rate_b) || !(rate_b > T::zero()) {
            return Err(LinkSimError::InvalidProfile(format!(
                "anchors must have increasing loss and decreasing positive rate: ({loss_a}, {rate_a}), ({loss_b}, {rate_b})"
            )));
        }
        let ten = T::lit(10.0);
        let slope = (rate_a / rate_b).log10() / (loss_b - loss_a);
        let r0 = rate_a * ten.powf(slope * loss_a);
        let profile = Self {
            r0_bps: r0,
            slope_per_db: slope,
            max_loss_db,
            classical_penalty_db: T::zero(),
        };
        profile.validate()?;
        Ok(profile)
    }

    /// Fit through the two Madrid CV-QKD operating points, 30 dB cutoff.
    pub fn madrid_cv() -> Self {
        let [(la, ra), (lb, rb)] = MADRID_ANCHORS;
        Self::through_anchors(
            (T::lit(la), T::lit(ra)),
            (T::lit(lb), T::lit(rb)),
            T::lit(DEFAULT_MAX_LOSS_DB),
        )
        .expect("madrid anchors are well formed")
    }

    /// Top-performance direct link: 1 Mbit/s at 40 km (8 dB), same slope as
    /// the Madrid fit.
    pub fn high_rate_preset() -> Self {
        let base = Self::madrid_cv();
        let loss_40km = T::lit(FIBER_ATTENUATION_DB_PER_KM * 40.0);
        Self {
            r0_bps: T::lit(1.0e6) * T::lit(10.0).powf(base.slope_per_db * loss_40km),
            ..base
        }
    }

    pub fn with_classical_penalty(mut self, db_per_channel: T) -> Self {
        self.classical_penalty_db = db_per_channel;
        self
    }

    pub fn validate(&self) -> Result<(), LinkSimError> {
        let positive = |v: T| v > T::zero() && v.is_finite();
        if !positive(self.r0_bps) {
            return Err(LinkSimError::InvalidProfile(format!("r0_bps must be > 0, got {}", self.r0_bps)));
        }
        if !positive(self.slope_per_db) {
            return Err(LinkSimError::InvalidProfile(format!(
                "slope_per_db must be > 0, got {}",
                self.slope_per_db
            )));
        }
        if !positive(self.max_loss_db) {
            return Err(LinkSimError::InvalidProfile(format!(
                "max_loss_db must be > 0, got {}",
                self.max_loss_db
            )));
        }
        if !(self.classical_penalty_db >= T::zero()) {
            return Err(LinkSimError::InvalidProfile(format!(
                "classical_penalty_db must be >= 0, got {}",
                self.classical_penalty_db
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Default for RateProfile<T> {
    fn default() -> Self {
        Self::madrid_cv()
    }
}

/// Secret key rate in bit/s at the given loss.
pub fn key_rate<T: Scalar>(loss_db: T, profile: &RateProfile<T>) -> Result<T, LinkSimError> {
    if !(loss_db >= T::zero()) {
        return Err(LinkSimError::NegativeLoss(loss_db.as_f64()));
    }
    if loss_db > profile.max_loss_db {
        return Ok(T::zero());
    }
    Ok(profile.r0_bps * T::lit(10.0).powf(-profile.slope_per_db * loss_db))
}

/// Time sharing of one transmitter between several receivers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig<T = f64> {
    /// Fraction of wall time each receiver spends calibrating.
    pub calibration_fraction: T,
    pub slot_seconds: T,
}

impl<T: Scalar> Default for SchedulerConfig<T> {
    fn default() -> Self {
        Self {
            calibration_fraction: T::lit(0.5),
            slot_seconds: T::lit(0.1),
        }
    }
}

impl<T: Scalar> SchedulerConfig<T> {
    pub fn validate(&self) -> Result<(), LinkSimError> {
        let c = self.calibration_fraction;
        if !(c >= T::zero() && c <= T::one()) {
            return Err(LinkSimError::InvalidScheduler(format!(
                "calibration_fraction must lie in [0, 1], got {c}"
            )));
        }
        if !(self.slot_seconds > T::zero() && self.slot_seconds.is_finite()) {
            return Err(LinkSimError::InvalidScheduler(format!(
                "slot_seconds must be > 0, got {}",
                self.slot_seconds
            )));
        }
        Ok(())
    }
}

/// Splits a transmitter's time among the links it serves.
///
/// While the transmitter serves one receiver the others calibrate, so when
/// `n * (1 - calibration)` fits in the unit interval every link gets the same
/// duty a dedicated transmitter would (`1 - calibration`). Otherwise the
/// transmitter is the bottleneck and the links get equal shares `1/n`.
pub fn schedule_transmitter<T: Scalar>(
    tx_node: &str,
    links: &[LinkId],
    cfg: &SchedulerConfig<T>,
) -> Result<BTreeMap<LinkId, T>, LinkSimError> {
    cfg.validate()?;
    if links.is_empty() {
        return Err(LinkSimError::EmptyTransmitterGroup(tx_node.to_string()));
    }
    let n = T::from_usize(links.len()).expect("link count fits the scalar");
    let dedicated = T::one() - cfg.calibration_fraction;
    let duty = if n * dedicated <= T::one() {
        dedicated
    } else {
        T::one() / n
    };
    Ok(links.iter().map(|l| (l.clone(), duty)).collect())
}
