//! Per-epoch class balancing by sampling with replacement.

use rand::Rng;

use super::manifest::Images;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Largest translation applied by augmentation, in pixels.
pub const MAX_SHIFT: i64 = 4;

/// One drawn sample: an index into the training images plus its transform.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub index: usize,
    pub label: usize,
    pub flip: bool,
    pub shift: (i64, i64),
}

/// Draws exactly `target_per_class` samples of every class, uniformly with
/// replacement. With `augment`, each draw also gets a random horizontal flip
/// and a translation of up to `MAX_SHIFT` pixels.
pub fn balance_resample(
    labels: &[usize],
    class_names: &[String],
    target_per_class: usize,
    seed: u64,
    epoch: u64,
    augment: bool,
) -> Result<Vec<Draw>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_names.len()];
    for (i, &l) in labels.iter().enumerate() {
        by_class
            .get_mut(l)
            .ok_or_else(|| Error::Data(format!("label {l} outside {} classes", class_names.len())))?
            .push(i);
    }
    if let Some(k) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::Data(format!("class `{}` has no training samples", class_names[k])));
    }
    let mut rng = rng::stream(seed, rng::BALANCE, epoch);
    let mut out = Vec::with_capacity(target_per_class * by_class.len());
    for (label, members) in by_class.iter().enumerate() {
        for _ in 0..target_per_class {
            let index = members[rng.random_range(0..members.len())];
            let (flip, shift) = if augment {
                (
                    rng.random_bool(0.5),
                    (rng.random_range(-MAX_SHIFT..=MAX_SHIFT), rng.random_range(-MAX_SHIFT..=MAX_SHIFT)),
                )
            } else {
                (false, (0, 0))
            };
            out.push(Draw { index, label, flip, shift });
        }
    }
    Ok(out)
}

/// Applies a draw's flip and shift to a `[1, h, w]` chip; vacated pixels are 0.
pub fn augment<T: Real>(img: &Tensor<T>, draw: &Draw) -> Tensor<T> {
    if !draw.flip && draw.shift == (0, 0) {
        return img.clone();
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let src = img.data();
    let (dx, dy) = draw.shift;
    Tensor::from_fn(img.shape(), |i| {
        let (y, x) = ((i / w) as i64 - dy, (i % w) as i64 - dx);
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            return T::ZERO;
        }
        let x = if draw.flip { w as i64 - 1 - x } else { x };
        src[y as usize * w + x as usize]
    })
}

/// Materializes the drawn samples.
pub fn gather<T: Real>(images: &Images<T>, draws: &[Draw]) -> Vec<Tensor<T>> {
    draws.iter().map(|d| augment(&images.images[d.index], d)).collect()
}
