//! Aircraft localization from crowdsourced time-of-arrival measurements.

// `!(x > 0.0)` style guards are used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod atmosphere;
pub mod clocksync;
pub mod dataio;
pub mod exec;
pub mod geo;
pub mod mlat;
pub mod optim;
pub mod pipeline;
pub mod robust;
pub mod scoring;
pub mod spline;
pub mod synth;
pub mod trajectory;
