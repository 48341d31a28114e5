//! Image augmentation: random horizontal flip and random erasing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::RgbImage;
use crate::error::{Error, Result};

/// Area-fraction range of the erased rectangle.
const ERASE_AREA: (f64, f64) = (0.02, 0.4);
/// Aspect-ratio (height/width) range of the erased rectangle.
const ERASE_ASPECT: (f64, f64) = (0.3, 3.33);

/// Mirrors the image left-right.
pub fn horizontal_flip(img: &RgbImage) -> RgbImage {
    let mut out = img.clone();
    for ch in 0..3 {
        for row in 0..img.height {
            for col in 0..img.width {
                out.set_pixel(ch, row, col, img.pixel(ch, row, img.width - 1 - col));
            }
        }
    }
    out
}

/// Draws erase-rectangle geometry: `(row, col, height, width)` with the area
/// fraction inside `ERASE_AREA` and aspect inside `ERASE_ASPECT`. Retries a
/// few times when rounding pushes the rectangle out of bounds or out of the
/// area range; `None` when the image is too small to fit one.
pub(crate) fn erase_geometry(
    rng: &mut ChaCha8Rng,
    height: usize,
    width: usize,
) -> Option<(usize, usize, usize, usize)> {
    let image_area = (height * width) as f64;
    for _ in 0..20 {
        let target = image_area * rng.random_range(ERASE_AREA.0..ERASE_AREA.1);
        let aspect = rng.random_range(ERASE_ASPECT.0..ERASE_ASPECT.1);
        let eh = ((target * aspect).sqrt().round() as usize).max(1);
        let ew = ((target / aspect).sqrt().round() as usize).max(1);
        if eh > height || ew > width {
            continue;
        }
        let frac = (eh * ew) as f64 / image_area;
        if !(ERASE_AREA.0..=ERASE_AREA.1).contains(&frac) {
            continue;
        }
        let row = rng.random_range(0..=height - eh);
        let col = rng.random_range(0..=width - ew);
        return Some((row, col, eh, ew));
    }
    None
}

/// Applies random horizontal flip then random erasing, each with its own
/// probability. Erased pixels are replaced by uniform random values.
/// Deterministic given the rng state.
pub fn augment(
    img: &RgbImage,
    flip_probability: f64,
    erase_probability: f64,
    rng: &mut ChaCha8Rng,
) -> Result<RgbImage> {
    for p in [flip_probability, erase_probability] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!(
                "augmentation probability must lie in [0, 1], got {p}"
            )));
        }
    }
    let mut out = if flip_probability > 0.0 && rng.random::<f64>() < flip_probability {
        horizontal_flip(img)
    } else {
        img.clone()
    };
    if erase_probability > 0.0 && rng.random::<f64>() < erase_probability {
        if let Some((row, col, eh, ew)) = erase_geometry(rng, img.height, img.width) {
            for r in row..row + eh {
                for c in col..col + ew {
                    for ch in 0..3 {
                        out.set_pixel(ch, r, c, rng.random_range(0.0..1.0));
                    }
                }
            }
        }
    }
    Ok(out)
}
