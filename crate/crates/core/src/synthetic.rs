//! Synthetic re-identification fixture.
//!
//! Every identity is a striped ellipse with its own body colour, stripe
//! colour, stripe period and stripe direction. Position, size, background
//! tint and background noise vary per image. Backgrounds are desaturated so
//! that only bodies carry strong hues.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::Split;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub identities: usize,
    pub train_per_identity: usize,
    pub gallery_per_identity: usize,
    pub query_per_identity: usize,
    /// Side length of the written PNGs.
    pub image_size: u32,
    pub seed: u64,
}

impl FixtureSpec {
    /// 5 identities × 6 images.
    pub fn small() -> Self {
        Self {
            identities: 5,
            train_per_identity: 4,
            gallery_per_identity: 1,
            query_per_identity: 1,
            image_size: 64,
            seed: 7,
        }
    }

    /// 8 identities × 12 images: 8 train, 2 gallery, 2 query each.
    pub fn standard() -> Self {
        Self {
            identities: 8,
            train_per_identity: 8,
            gallery_per_identity: 2,
            query_per_identity: 2,
            image_size: 64,
            seed: 7,
        }
    }

    pub fn images_per_identity(&self) -> usize {
        self.train_per_identity + self.gallery_per_identity + self.query_per_identity
    }
}

/// Ground truth of a generated fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureReport {
    pub root: PathBuf,
    pub train_identities: usize,
    pub test_identities: usize,
    pub train_images: usize,
    pub gallery_images: usize,
    pub query_images: usize,
}

#[derive(Debug, Clone, Copy)]
struct Look {
    body: [f64; 3],
    stripe: [f64; 3],
    period: f64,
    angle: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) * 255.0, (g + m) * 255.0, (b + m) * 255.0]
}

fn look(identity: usize, n: usize) -> Look {
    let hue = 360.0 * identity as f64 / n as f64;
    Look {
        body: hsv(hue, 0.9, 0.95),
        stripe: hsv(hue + 150.0, 0.8, 0.35),
        period: 4.0 + (identity % 4) as f64 * 2.0,
        angle: std::f64::consts::PI * (identity % 3) as f64 / 3.0,
    }
}

fn draw(look: Look, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let s = size as f64;
    let bg = hsv(rng.random_range(0.0..360.0), rng.random_range(0.0..0.25), rng.random_range(0.2..0.9));
    let cx = s * rng.random_range(0.4..0.6);
    let cy = s * rng.random_range(0.4..0.6);
    let rx = s * rng.random_range(0.30..0.40);
    let ry = s * rng.random_range(0.22..0.30);
    let (sin, cos) = look.angle.sin_cos();
    let phase = rng.random_range(0.0..look.period);
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let dx = (fx - cx) / rx;
            let dy = (fy - cy) / ry;
            let base = if dx * dx + dy * dy <= 1.0 {
                let t = (fx * cos + fy * sin + phase) / look.period;
                if t.fract() < 0.5 {
                    look.body
                } else {
                    look.stripe
                }
            } else {
                bg
            };
            let noise_amp = if dx * dx + dy * dy <= 1.0 { 12.0 } else { 30.0 };
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = base[c] + rng.random_range(-noise_amp..noise_amp);
                px[c] = v.clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

/// Writes `root/{train,gallery,query}/id_XX/NN.png`.
pub fn generate(root: &Path, spec: &FixtureSpec) -> Result<FixtureReport> {
    if spec.identities < 2 || spec.train_per_identity == 0 {
        return Err(Error::invalid("fixture needs >= 2 identities and >= 1 train image each"));
    }
    let mut counts = [0usize; 3];
    for id in 0..spec.identities {
        let lk = look(id, spec.identities);
        let splits = [
            (Split::Train, spec.train_per_identity),
            (Split::Gallery, spec.gallery_per_identity),
            (Split::Query, spec.query_per_identity),
        ];
        let mut index = 0usize;
        for (si, (split, count)) in splits.into_iter().enumerate() {
            let dir = root.join(split.dir_name()).join(format!("id_{id:02}"));
            if count > 0 {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            for _ in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    spec.seed ^ ((id as u64) << 32) ^ (index as u64).wrapping_mul(0x9e37_79b9),
                );
                let img = draw(lk, spec.image_size, &mut rng);
                let path = dir.join(format!("{index:02}.png"));
                img.save(&path).map_err(|e| Error::Image {
                    path: path.clone(),
                    source: e,
                })?;
                index += 1;
                counts[si] += 1;
            }
        }
    }
    // every split directory exists even when empty
    for split in Split::ALL {
        let d = root.join(split.dir_name());
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let has_test = spec.gallery_per_identity > 0 || spec.query_per_identity > 0;
    Ok(FixtureReport {
        root: root.to_path_buf(),
        train_identities: spec.identities,
        test_identities: if has_test { spec.identities } else { 0 },
        train_images: counts[0],
        gallery_images: counts[1],
        query_images: counts[2],
    })
}
