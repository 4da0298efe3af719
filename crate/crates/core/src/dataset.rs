//! Seeded quadrant-blob classification task.
//!
//! Every image is low uniform noise plus one bright Gaussian blob; the label
//! is the image quadrant holding the blob center. Sample `i` is a pure
//! function of `(seed, i)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BACKGROUND_MAX: f32 = 0.2;
pub const BLOB_PEAK: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticLocalityDataset {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    /// Standard deviation of the blob, in pixels.
    pub blob_radius: f32,
    pub samples_per_epoch: usize,
}

impl Default for SyntheticLocalityDataset {
    fn default() -> Self {
        Self { seed: 0, height: 8, width: 8, channels: 1, num_classes: 4, blob_radius: 1.5, samples_per_epoch: 8192 }
    }
}

/// Quadrant of a continuous point: 0 top-left, 1 top-right, 2 bottom-left,
/// 3 bottom-right. Points on the midline belong to the lower/right half.
pub fn quadrant(center_y: f32, center_x: f32, height: usize, width: usize) -> usize {
    let bottom = center_y >= height as f32 / 2.0;
    let right = center_x >= width as f32 / 2.0;
    2 * bottom as usize + right as usize
}

impl SyntheticLocalityDataset {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes != 4 {
            return Err(Error::Config(format!(
                "the quadrant task has 4 classes, got num_classes = {}",
                self.num_classes
            )));
        }
        if self.height < 2 || self.width < 2 || self.channels == 0 || self.samples_per_epoch == 0 {
            return Err(Error::Config(
                "dataset dimensions and samples_per_epoch must be positive (image at least 2x2)".into(),
            ));
        }
        if self.blob_radius.is_nan() || self.blob_radius <= 0.0 {
            return Err(Error::Config(format!("blob_radius must be positive, got {}", self.blob_radius)));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    fn rng(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    /// `(image, label)` for sample `index`.
    pub fn sample(&self, index: u64) -> (Tensor, usize) {
        let mut rng = self.rng(index);
        let label = rng.random_range(0..4usize);
        let (half_h, half_w) = (self.height as f32 / 2.0, self.width as f32 / 2.0);
        let cy = (label / 2) as f32 * half_h + rng.random::<f32>() * half_h;
        let cx = (label % 2) as f32 * half_w + rng.random::<f32>() * half_w;
        let cy = cy.min(self.height as f32 - f32::EPSILON * self.height as f32);
        let cx = cx.min(self.width as f32 - f32::EPSILON * self.width as f32);
        let image = self.render(&mut rng, cy, cx);
        (image, quadrant(cy, cx, self.height, self.width))
    }

    /// Noise from `rng` plus a blob centered at `(center_y, center_x)` in
    /// pixel units; pixel `(r, c)` sits at `(r + 0.5, c + 0.5)`.
    pub fn render(&self, rng: &mut impl Rng, center_y: f32, center_x: f32) -> Tensor {
        let two_r2 = 2.0 * self.blob_radius * self.blob_radius;
        let mut data = Vec::with_capacity(self.height * self.width * self.channels);
        for r in 0..self.height {
            for c in 0..self.width {
                let (dy, dx) = (r as f32 + 0.5 - center_y, c as f32 + 0.5 - center_x);
                let blob = BLOB_PEAK * (-(dy * dy + dx * dx) / two_r2).exp();
                for _ in 0..self.channels {
                    data.push(rng.random::<f32>() * BACKGROUND_MAX + blob);
                }
            }
        }
        Tensor::new(&self.image_shape(), data).expect("valid image shape")
    }

    /// Sample with a caller-chosen blob center, background noise drawn from
    /// `index`'s stream.
    pub fn sample_at(&self, index: u64, center_y: f32, center_x: f32) -> (Tensor, usize) {
        let mut rng = self.rng(index);
        let image = self.render(&mut rng, center_y, center_x);
        (image, quadrant(center_y, center_x, self.height, self.width))
    }

    /// Same task with an independent sample stream, for held-out evaluation.
    pub fn held_out(&self) -> Self {
        Self { seed: self.seed ^ 0x9e37_79b9_7f4a_7c15, ..self.clone() }
    }
}
