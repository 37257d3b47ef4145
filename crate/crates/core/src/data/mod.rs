//! Synthetic chip generation, manifests and class balancing.

pub mod balance;
pub mod manifest;
pub mod pgm;
pub mod synth;

pub use balance::{balance_resample, Draw};
pub use manifest::{Images, Manifest, ManifestEntry, Split};
pub use synth::{generate_synthetic, BrightnessProfile, ShipGeometry, SyntheticClassSpec};

#[cfg(test)]
mod tests;
