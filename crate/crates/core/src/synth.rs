//! Synthetic ridge patterns and smoothly warped copies with exact ground
//! truth, for tests, toy training and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Image;
use crate::error::Result;
use crate::fine_refine::{Correspondence, CorrespondenceSet};
use crate::warpfield::{tps_evaluate, tps_fit, warp_image, warp_mask, Mask, TpsModel};

/// Nominal ridge period in pixels.
pub const RIDGE_PERIOD: f64 = 8.0;

/// A whorl-like ridge pattern on an elliptical foreground; background is 0.
pub fn ridge_image(height: usize, width: usize, seed: u64) -> (Image, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let cx = w * rng.random_range(0.3..0.7);
    let cy = h * rng.random_range(0.3..0.7);
    let ecc = rng.random_range(0.6..1.6);
    let tilt: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let period = RIDGE_PERIOD * rng.random_range(0.85..1.15);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(1.0..4.0),
                rng.random_range(0.01..0.05),
                rng.random_range(0.01..0.05),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let (mx, my) = (w * rng.random_range(0.42..0.48), h * rng.random_range(0.42..0.48));
    let (ca, sa) = (tilt.cos(), tilt.sin());

    let mut img = Image::filled(height, width, 0.0);
    let mut mask = Mask::empty(height, width);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let inside = ((xf - w / 2.0) / mx).powi(2) + ((yf - h / 2.0) / my).powi(2) <= 1.0;
            if !inside {
                continue;
            }
            let (dx, dy) = (xf - cx, yf - cy);
            let (u, v) = (ca * dx + sa * dy, -sa * dx + ca * dy);
            let mut r = (u * u + ecc * v * v).sqrt();
            for &(amp, fx, fy, ph) in &waves {
                r += amp * (fx * xf + fy * yf + ph).sin();
            }
            let val = 0.5 + 0.45 * (std::f64::consts::TAU * r / period + phase).cos();
            img.set(x, y, val);
            mask.set(x, y, true);
        }
    }
    (img, mask)
}

/// Random smooth TPS on an `h × w` frame: a 3 × 3 grid of control points
/// displaced by at most `max_disp` pixels per axis.
pub fn random_tps(height: usize, width: usize, max_disp: f64, seed: u64) -> Result<TpsModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for gy in 0..3 {
        for gx in 0..3 {
            let x = (width as f64 - 1.0) * (0.1 + 0.4 * gx as f64);
            let y = (height as f64 - 1.0) * (0.1 + 0.4 * gy as f64);
            src.push((x, y));
            dst.push((x + rng.random_range(-max_disp..=max_disp), y + rng.random_range(-max_disp..=max_disp)));
        }
    }
    tps_fit(&src, &dst, 0.0)
}

/// Solves `model(q) = p` for `q` by Newton iteration from `p`.
pub fn invert_point(model: &TpsModel, p: (f64, f64)) -> Option<(f64, f64)> {
    let mut q = p;
    let h = 1e-4;
    for _ in 0..50 {
        let f = model.eval(q.0, q.1);
        let r = (f.0 - p.0, f.1 - p.1);
        if r.0.abs() < 1e-10 && r.1.abs() < 1e-10 {
            return Some(q);
        }
        let fx = model.eval(q.0 + h, q.1);
        let fy = model.eval(q.0, q.1 + h);
        let (a, b) = ((fx.0 - f.0) / h, (fy.0 - f.0) / h);
        let (c, d) = ((fx.1 - f.1) / h, (fy.1 - f.1) / h);
        let det = a * d - b * c;
        if det.abs() < 1e-12 {
            return None;
        }
        q = (q.0 - (d * r.0 - b * r.1) / det, q.1 - (-c * r.0 + a * r.1) / det);
    }
    let f = model.eval(q.0, q.1);
    ((f.0 - p.0).abs() < 1e-6 && (f.1 - p.1).abs() < 1e-6).then_some(q)
}

/// An image, its warped copy, and correspondences from a stride grid on A.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub a: Image,
    pub b: Image,
    pub mask_a: Mask,
    pub mask_b: Mask,
    /// Maps B pixels to the A pixels they were sampled from.
    pub backward: TpsModel,
    pub corr: CorrespondenceSet,
}

/// `B(q) = A(g(q))` for a random smooth `g`; correspondences are A's
/// stride-`stride` cell centres inside both masks, paired with `g⁻¹`.
pub fn warped_pair(height: usize, width: usize, max_disp: f64, stride: usize, seed: u64) -> Result<SynthPair> {
    let (a, mask_a) = ridge_image(height, width, seed);
    let g = random_tps(height, width, max_disp, seed.wrapping_mul(0x9E37_79B9).wrapping_add(1))?;
    let field = tps_evaluate(&g, height, width);
    let b = warp_image(&a, &field)?;
    let mask_b = warp_mask(&mask_a, &field)?;
    let off = (stride as f64 - 1.0) / 2.0;
    let mut pairs = Vec::new();
    for gy in 0..height / stride {
        for gx in 0..width / stride {
            let p = ((gx * stride) as f64 + off, (gy * stride) as f64 + off);
            if !mask_a.contains(p.0, p.1) {
                continue;
            }
            if let Some(q) = invert_point(&g, p) {
                if mask_b.contains(q.0, q.1) {
                    pairs.push(Correspondence::new(p.0, p.1, q.0, q.1));
                }
            }
        }
    }
    Ok(SynthPair { a, b, mask_a, mask_b, backward: g, corr: CorrespondenceSet::new(pairs) })
}
