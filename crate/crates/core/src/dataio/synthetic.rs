//! Deterministic CIFAR-10-format data for offline runs and tests.
//!
//! Each class has its own palette and preferred shape; images combine a
//! two-tone gradient background, a few shapes and mild per-pixel noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cifar::{RECORDS_PER_FILE, RECORD_LEN};
use crate::error::{Error, Result};

const SIDE: usize = 32;

fn palette(class: u8) -> [f64; 3] {
    let h = class as f64 / 10.0 * std::f64::consts::TAU;
    [
        0.5 + 0.4 * h.cos(),
        0.5 + 0.4 * (h + 2.1).cos(),
        0.5 + 0.4 * (h + 4.2).cos(),
    ]
}

#[allow(clippy::needless_range_loop)]
fn record(rng: &mut ChaCha8Rng, label: u8) -> [u8; RECORD_LEN] {
    let base = palette(label);
    let mut top = [0.0; 3];
    let mut bottom = [0.0; 3];
    for c in 0..3 {
        top[c] = (base[c] + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0);
        bottom[c] = (1.0 - base[c] + rng.random_range(-0.25..0.25)).clamp(0.0, 1.0);
    }
    let mut img = [[[0.0f64; SIDE]; SIDE]; 3];
    for (c, plane) in img.iter_mut().enumerate() {
        for (y, row) in plane.iter_mut().enumerate() {
            let t = y as f64 / (SIDE - 1) as f64;
            row.iter_mut()
                .for_each(|p| *p = (1.0 - t) * top[c] + t * bottom[c]);
        }
    }
    let shapes = rng.random_range(1..=3);
    for k in 0..shapes {
        let color: [f64; 3] = if k == 0 {
            [1.0 - top[0], 1.0 - top[1], 1.0 - top[2]]
        } else {
            [rng.random(), rng.random(), rng.random()]
        };
        let cx = rng.random_range(4.0..28.0);
        let cy = rng.random_range(4.0..28.0);
        let r = rng.random_range(3.0..10.0);
        let disc = label.is_multiple_of(2) ^ (k > 0);
        for y in 0..SIDE {
            for x in 0..SIDE {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let inside = if disc {
                    dx * dx + dy * dy <= r * r
                } else {
                    dx.abs() <= r && dy.abs() <= r * 0.6
                };
                if inside {
                    for c in 0..3 {
                        img[c][y][x] = color[c];
                    }
                }
            }
        }
    }
    let mut out = [0u8; RECORD_LEN];
    out[0] = label;
    let mut i = 1;
    for plane in &img {
        for row in plane {
            for &p in row {
                let v = p + rng.random_range(-0.03..0.03);
                out[i] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                i += 1;
            }
        }
    }
    out
}

/// `count` synthetic records as raw CIFAR-10 bytes.
pub fn synthetic_batch(seed: u64, count: usize) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bytes = Vec::with_capacity(count * RECORD_LEN);
    for _ in 0..count {
        let label = rng.random_range(0..10u8);
        bytes.extend_from_slice(&record(&mut rng, label));
    }
    bytes
}

/// Writes `data_batch_1.bin` and `test_batch.bin` of full size into `dir`.
pub fn write_synthetic_cifar(dir: &Path, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, s) in [
        ("data_batch_1.bin", seed),
        ("test_batch.bin", seed ^ 0x7e57),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, synthetic_batch(s, RECORDS_PER_FILE))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
