//! Synthetic lesion images standing in for unavailable clinical data.
//!
//! Each case is a dark textured background, one bright elliptical lesion with a
//! soft edge and a few dimmer distractor blobs. The ground truth is the ellipse
//! interior and the click is the ellipse centre.

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::imaging::{Mask, Point, WORKING_SIZE};
use crate::rng_from_seed;

#[derive(Clone, Debug)]
pub struct SynthCase {
    pub image: RgbImage,
    pub mask: Mask,
    pub click: Point,
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    /// Normalised radius: < 1 inside, 1 on the boundary.
    fn radius(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let (s, c) = self.angle.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        ((u / self.a).powi(2) + (v / self.b).powi(2)).sqrt()
    }
}

/// Smooth noise field from bilinear interpolation of a coarse random grid.
fn smooth_field<R: Rng>(rng: &mut R, size: usize, cells: usize, amplitude: f64) -> Vec<f64> {
    let grid: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-amplitude..amplitude)).collect();
    let cell = size as f64 / cells as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (gx, gy) = (x as f64 / cell, y as f64 / cell);
            let (i, j) = ((gx as usize).min(cells - 1), (gy as usize).min(cells - 1));
            let (fx, fy) = (gx - i as f64, gy - j as f64);
            let g = |i: usize, j: usize| grid[j * (cells + 1) + i];
            let top = g(i, j) * (1.0 - fx) + g(i + 1, j) * fx;
            let bottom = g(i, j + 1) * (1.0 - fx) + g(i + 1, j + 1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Generate case `index` of the dataset drawn with `seed`.
pub fn generate_case(seed: u64, index: usize) -> SynthCase {
    let mut rng = rng_from_seed(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let size = WORKING_SIZE as usize;
    let lesion = Ellipse {
        cx: rng.gen_range(70.0..170.0),
        cy: rng.gen_range(70.0..170.0),
        a: rng.gen_range(22.0..42.0),
        b: rng.gen_range(22.0..42.0),
        angle: rng.gen_range(0.0..std::f64::consts::PI),
    };
    let lesion_level: f64 = rng.gen_range(195.0..235.0);
    let background = smooth_field(&mut rng, size, 6, 18.0);
    let base_level: f64 = rng.gen_range(30.0..50.0);

    let blob_count = rng.gen_range(1..=3);
    let mut blobs = Vec::new();
    while blobs.len() < blob_count {
        let r: f64 = rng.gen_range(8.0..18.0);
        let (x, y): (f64, f64) = (rng.gen_range(25.0..215.0), rng.gen_range(25.0..215.0));
        let clear = ((x - lesion.cx).powi(2) + (y - lesion.cy).powi(2)).sqrt() > lesion.a.max(lesion.b) + 2.5 * r + 10.0;
        if clear {
            blobs.push((x, y, r, rng.gen_range(95.0..140.0)));
        }
    }

    let noise = Normal::new(0.0, 3.0).expect("valid sigma");
    let mut image = RgbImage::new(size as u32, size as u32);
    let mut mask = Mask::empty(size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = base_level + background[y * size + x];
            for &(bx, by, r, level) in &blobs {
                let d2 = (fx - bx).powi(2) + (fy - by).powi(2);
                let w = (-d2 / (2.0 * r * r)).exp();
                v = v * (1.0 - w) + level * w;
            }
            let rad = lesion.radius(fx, fy);
            // soft edge about 1.5 px wide at the shorter axis
            let signed = (rad - 1.0) * lesion.a.min(lesion.b);
            let w = 1.0 / (1.0 + (signed / 0.75).exp());
            v = v * (1.0 - w) + lesion_level * w;
            v += noise.sample(&mut rng);
            let g = v.round().clamp(0.0, 255.0) as u8;
            image.put_pixel(x as u32, y as u32, Rgb([g, g, g]));
            if rad <= 1.0 {
                mask.set(x, y, true);
            }
        }
    }
    let click = Point::new(lesion.cx as usize, lesion.cy as usize);
    debug_assert!(mask.contains(click));
    SynthCase { image, mask, click }
}
