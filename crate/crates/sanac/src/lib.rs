//! Source-aware neural audio codec: joint separation and coding of noisy
//! speech with independently controlled per-source bitrates.

pub mod bitstream;
pub mod dsp;
pub mod manifest;
pub mod model;
pub mod nn;
pub mod quantizer;
pub mod training;
pub mod wav;
