//! Fourier ptychographic microscopy workbench: forward simulation, a
//! model-based reconstructor for ground truth, and a conditional GAN that
//! maps low-resolution intensity stacks to high-resolution phase.

pub mod autodiff;
pub mod fft;
pub mod network;
pub mod objective;
pub mod optics;
pub mod oracle;
pub mod pipeline;
pub mod raster;
pub mod report;
pub mod scene;
pub mod stackio;
pub mod synth;
pub mod trainer;
