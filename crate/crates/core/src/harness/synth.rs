//! Procedural RGB test images: smooth gradients, filled shapes, periodic
//! texture and mild noise. Deterministic for a given seed.

use image::RgbImage;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::layout::message_rng;

fn rand_color<R: Rng>(rng: &mut R) -> [f32; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// One `size x size` image drawn from the generator seeded with `seed`.
pub fn synthetic_image(size: usize, seed: u64) -> RgbImage {
    let mut rng = message_rng(seed);
    let n = size as f32;
    let (c0, c1) = (rand_color(&mut rng), rand_color(&mut rng));
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut px = vec![[0f32; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f32 / n - 0.5) * dx + (y as f32 / n - 0.5) * dy + 0.5).clamp(0.0, 1.0);
            for c in 0..3 {
                px[y * size + x][c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }
    let shapes = rng.random_range(2..7);
    for _ in 0..shapes {
        let color = rand_color(&mut rng);
        let (cx, cy) = (rng.random_range(0.0..n), rng.random_range(0.0..n));
        let (rx, ry) = (rng.random_range(n * 0.06..n * 0.35), rng.random_range(n * 0.06..n * 0.35));
        let alpha: f32 = rng.random_range(0.5..1.0);
        let ellipse = rng.random_bool(0.5);
        for y in 0..size {
            for x in 0..size {
                let (u, v) = ((x as f32 - cx) / rx, (y as f32 - cy) / ry);
                let inside = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    let p = &mut px[y * size + x];
                    for c in 0..3 {
                        p[c] = p[c] * (1.0 - alpha) + color[c] * alpha;
                    }
                }
            }
        }
    }
    let freq: f32 = rng.random_range(0.1..0.8);
    let amp: f32 = rng.random_range(0.0..0.12);
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let noise = Normal::new(0.0f32, rng.random_range(0.0..0.03)).expect("valid std");
    let mut img = RgbImage::new(size as u32, size as u32);
    for y in 0..size {
        for x in 0..size {
            let tex = amp * (freq * x as f32 + phase).sin() * (freq * 0.7 * y as f32).cos();
            let mut out = [0u8; 3];
            for c in 0..3 {
                let v = px[y * size + x][c] + tex + noise.sample(&mut rng);
                out[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(out));
        }
    }
    img
}

/// Writes `count` images named `img_00000.png`, ... into `dir`.
pub fn write_synthetic_dataset(dir: &std::path::Path, count: usize, size: usize, seed: u64) -> crate::Result<()> {
    std::fs::create_dir_all(dir)?;
    for i in 0..count {
        let img = synthetic_image(size, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        img.save(dir.join(format!("img_{i:05}.png")))
            .map_err(|e| crate::StegoError::Image(format!("writing synthetic image {i}: {e}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_varied() {
        assert_eq!(synthetic_image(32, 4), synthetic_image(32, 4));
        assert_ne!(synthetic_image(32, 4), synthetic_image(32, 5));
    }
}
