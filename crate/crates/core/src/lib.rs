//! Lumped-model simulation and analysis for piezo-optomechanical
//! microwave-to-optical transducers.
//!
//! All rates and frequencies cross the public API as ordinary frequencies in
//! hertz (the `ω/2π` convention). Factors of `2π` only appear inside the
//! functions that need angular quantities.
//!
//! The crate is organised by task:
//!
//! * [`model`] holds the device records and the closed-form efficiency chain.
//! * [`spectrum`] synthesises thermal and driven mechanical spectra and the
//!   multi-mode microwave-to-optical scattering spectrum.
//! * [`fit`] extracts device parameters from traces.
//! * [`link`] simulates classical bit transmission through the mechanical mode.
//! * [`swap`] evaluates qubit-to-mechanics swap feasibility.
//! * [`io`] covers device files, trace CSV files and parameter sweeps.

// `!(x > 0.0)` also rejects NaN, which is the point.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constants;
pub mod error;
pub mod fit;
pub mod io;
pub mod link;
pub mod lsq;
pub mod model;
pub mod spectrum;
pub mod swap;
pub mod trace;

pub use error::{Error, Result};
pub use model::{DeviceParams, DeviceValues, PumpState, Sideband};
pub use spectrum::MechanicalMode;
pub use trace::{Trace, XUnit, YUnit};

/// Book chapters compiled as doctests so the guide stays in sync with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/efficiency.md")]
    mod efficiency {}
    #[doc = include_str!("../../../book/src/spectra.md")]
    mod spectra {}
    #[doc = include_str!("../../../book/src/fitting.md")]
    mod fitting {}
    #[doc = include_str!("../../../book/src/link.md")]
    mod link {}
    #[doc = include_str!("../../../book/src/swap.md")]
    mod swap {}
    #[doc = include_str!("../../../book/src/files.md")]
    mod files {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
