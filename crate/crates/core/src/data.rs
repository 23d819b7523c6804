//! Labeled examples and the synthetic data source.
//!
//! The synthetic generator draws one Gaussian cluster per class in the flat
//! input space, with controllable mean separation and noise. An optional
//! global affine transform models a domain shift between the distribution a
//! backbone was pre-trained on and the distribution the incremental stream is
//! drawn from.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::named_rng;

/// Dense input tensor: `[D]` for flat vectors, `[C, H, W]` for images.
pub type Tensor = ArrayD<f64>;

/// One training or testing instance.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub input: Tensor,
    /// Global 0-based class id.
    pub label: usize,
}

/// A global affine transform `x -> A x + b` applied to every example of a
/// dataset. `A = I + strength/sqrt(D) * G` with `G` standard normal, and
/// `b = offset * g`; both are drawn once from the generator seed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub strength: f64,
    pub offset: f64,
}

/// Parameters of the per-class Gaussian generator.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Input shape, e.g. `[3, 16, 16]` or `[64]`.
    pub shape: Vec<usize>,
    /// Standard deviation of the class means around the origin.
    #[serde(default = "default_separation")]
    pub mean_separation: f64,
    /// Standard deviation of examples around their class mean.
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    #[serde(default)]
    pub shift: Option<DomainShift>,
}

fn default_separation() -> f64 {
    1.0
}

fn default_noise() -> f64 {
    0.3
}

impl SyntheticConfig {
    pub fn dim(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::config("synthetic: classes must be positive"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::config("synthetic: per-class counts must be positive"));
        }
        if self.shape.is_empty() || self.dim() == 0 {
            return Err(Error::config("synthetic: shape must be non-empty"));
        }
        Ok(())
    }
}

/// Generate a train/test split. Examples are ordered class by class, split by
/// split, so the layout is deterministic for a fixed seed.
pub fn generate_synthetic(cfg: &SyntheticConfig, seed: u64) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    cfg.validate()?;
    let d = cfg.dim();
    let mut rng = named_rng(seed, "synthetic/means");
    let means: Vec<Array1<f64>> = (0..cfg.classes)
        .map(|_| Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal) * cfg.mean_separation))
        .collect();

    let shift = cfg.shift.map(|s| sample_shift(&s, d, seed));

    let draw = |tag: &str, per_class: usize| -> Vec<LabeledExample> {
        let mut rng = named_rng(seed, tag);
        let mut out = Vec::with_capacity(cfg.classes * per_class);
        for (label, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                let mut x = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal) * cfg.noise_std);
                x += mean;
                if let Some((a, b)) = &shift {
                    x = a.dot(&x) + b;
                }
                let input = x.into_shape(IxDyn(&cfg.shape)).expect("shape product");
                out.push(LabeledExample { input, label });
            }
        }
        out
    };

    Ok((draw("synthetic/train", cfg.train_per_class), draw("synthetic/test", cfg.test_per_class)))
}

fn sample_shift(shift: &DomainShift, d: usize, seed: u64) -> (Array2<f64>, Array1<f64>) {
    let mut rng = named_rng(seed, "synthetic/shift");
    let scale = shift.strength / (d as f64).sqrt();
    let mut a = Array2::from_shape_fn((d, d), |_| rng.sample::<f64, _>(StandardNormal) * scale);
    for i in 0..d {
        a[[i, i]] += 1.0;
    }
    let b = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal) * shift.offset);
    (a, b)
}

/// Check that every label lies in `[0, total_classes)`.
pub fn validate_labels(examples: &[LabeledExample], total_classes: usize) -> Result<()> {
    for (i, ex) in examples.iter().enumerate() {
        if ex.label >= total_classes {
            return Err(Error::data(format!(
                "example {i} has label {} outside [0, {total_classes})",
                ex.label
            )));
        }
    }
    Ok(())
}
