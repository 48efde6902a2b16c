pub mod butterworth;
pub mod error;
pub mod signal;
pub mod spectral;
pub mod ot;
pub mod synth;
pub mod deconv;
pub mod metrics;
pub mod nmcse;
pub mod preprocess;
pub mod io;
pub mod experiment;
