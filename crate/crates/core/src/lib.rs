//! VBR video smoothing simulator and fluid-queue analytics.
//!
//! The crate has two halves that share parameter conventions:
//!
//! * A discrete-event simulator of a two-threshold transmission-rate
//!   smoother ([`smoother`]) over frame-size traces ([`trace`]), optionally
//!   capped by radio channel feedback ([`channel`]), evaluated by
//!   [`metrics`].
//! * An analytic model of the same buffer as a finite fluid queue fed by
//!   ON-OFF sources with three threshold-dependent service rates
//!   ([`fluid`]), solved spectrally and cross-checked by an exact Monte
//!   Carlo oracle.

pub mod channel;
pub mod error;
pub mod fluid;
pub mod metrics;
pub mod smoother;
pub mod trace;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
