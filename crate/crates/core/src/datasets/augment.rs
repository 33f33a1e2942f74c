use rand::Rng;
use serde::{Deserialize, Serialize};

use super::DecodedImage;

/// Stage-Two training augmentation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    pub pad: usize,
    pub erase_prob: f64,
    pub erase_area_min: f64,
    pub erase_area_max: f64,
    pub erase_aspect_min: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            pad: 10,
            erase_prob: 0.5,
            erase_area_min: 0.02,
            erase_area_max: 0.4,
            erase_aspect_min: 0.3,
        }
    }
}

impl AugmentConfig {
    /// A configuration that leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            pad: 0,
            erase_prob: 0.0,
            ..Self::default()
        }
    }
}

#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Horizontal flip, reflect-pad, random crop back to size, random erasing.
///
/// The output always has the input's shape. Erased pixels are set to zero,
/// i.e. the channel mean after normalization.
pub fn augment<R: Rng + ?Sized>(
    image: &DecodedImage,
    config: &AugmentConfig,
    rng: &mut R,
) -> DecodedImage {
    let (h, w) = (image.height, image.width);
    let flip = rng.random::<f64>() < config.flip_prob;
    let pad = config.pad as isize;
    let (dy, dx) = if pad > 0 {
        (
            rng.random_range(0..=2 * pad as i64) as isize,
            rng.random_range(0..=2 * pad as i64) as isize,
        )
    } else {
        (0, 0)
    };

    let mut out = DecodedImage::zeros(h, w);
    for c in 0..DecodedImage::CHANNELS {
        for y in 0..h {
            let sy = reflect(y as isize + dy - pad, h);
            for x in 0..w {
                // position in the (flipped) padded canvas
                let px = reflect(x as isize + dx - pad, w);
                let sx = if flip { w - 1 - px } else { px };
                out.set(c, y, x, image.get(c, sy, sx));
            }
        }
    }

    if rng.random::<f64>() < config.erase_prob {
        erase(&mut out, config, rng);
    }
    out
}

fn erase<R: Rng + ?Sized>(image: &mut DecodedImage, config: &AugmentConfig, rng: &mut R) {
    let (h, w) = (image.height, image.width);
    let area = (h * w) as f64;
    let aspect_max = 1.0 / config.erase_aspect_min;
    for _ in 0..100 {
        let target = rng.random_range(config.erase_area_min..=config.erase_area_max) * area;
        let aspect = rng.random_range(config.erase_aspect_min..=aspect_max);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let y0 = rng.random_range(0..=h - eh);
        let x0 = rng.random_range(0..=w - ew);
        for c in 0..DecodedImage::CHANNELS {
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    image.set(c, y, x, 0.0);
                }
            }
        }
        return;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pattern(h: usize, w: usize) -> DecodedImage {
        let data = (0..3 * h * w).map(|i| (i % 97) as f32 * 0.1 - 3.0).collect();
        DecodedImage::from_chw(h, w, data).unwrap()
    }

    #[test]
    fn identity_config_is_noop() {
        let img = pattern(12, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&img, &AugmentConfig::identity(), &mut rng), img);
    }

    #[test]
    fn forced_flip_mirrors_columns() {
        let img = pattern(6, 7);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&img, &cfg, &mut rng);
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..7 {
                    assert_eq!(out.get(c, y, x), img.get(c, y, 6 - x));
                }
            }
        }
    }

    #[test]
    fn padded_crop_is_a_shifted_reflection() {
        let img = pattern(16, 16);
        let cfg = AugmentConfig {
            flip_prob: 0.0,
            erase_prob: 0.0,
            pad: 3,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let out = augment(&img, &cfg, &mut rng);
        assert_eq!((out.height, out.width), (16, 16));
        // every output value comes from the source image
        for v in &out.data {
            assert!(img.data.contains(v));
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let img = pattern(20, 20);
        let cfg = AugmentConfig::default();
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
    }

    #[test]
    fn erasing_zeroes_a_rectangle() {
        let img = DecodedImage::from_chw(32, 32, vec![1.0; 3 * 32 * 32]).unwrap();
        let cfg = AugmentConfig {
            erase_prob: 1.0,
            ..AugmentConfig::identity()
        };
        let out = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(2));
        let zeros = out.data.iter().filter(|v| **v == 0.0).count() / 3;
        let frac = zeros as f64 / (32.0 * 32.0);
        assert!(frac > 0.0 && frac <= 0.45, "erased fraction {frac}");
    }

    #[test]
    fn reflect_indexing() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(2, 5), 2);
    }
}
