//! End-to-end registration of one image pair, foreground segmentation, and
//! ridge overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::backbone::{extract_features, pad_to_multiple, Image, PAD_MULTIPLE};
use crate::coarse_gla::coarse_interact;
use crate::error::{Error, Result};
use crate::fine_refine::{lift_to_fine, refine, CorrespondenceSet, FineConfig};
use crate::match_layer::{match_coarse, MatchConfig};
use crate::scorer::ncc;
use crate::warpfield::{tps_evaluate, tps_fit, warp_image, warp_mask, DeformationField, Mask, TpsModel};
use crate::weights::WeightArchive;

/// Fewest correspondences a TPS fit is attempted with.
pub const MIN_MATCHES: usize = 3;

#[derive(Debug, Clone)]
pub struct Registration {
    /// Matches in original pixels.
    pub corr: CorrespondenceSet,
    /// Spline taking B pixels to the A pixels they align with.
    pub model: TpsModel,
    /// Backward field on B's grid: A is sampled at `q + field(q)`.
    pub field: DeformationField,
    /// A resampled into B's frame.
    pub warped: Image,
    pub warped_mask: Mask,
    /// Foreground of B, given or segmented.
    pub mask_b: Mask,
    pub ncc_before: f64,
    pub ncc_after: f64,
}

fn check_mask(img: &Image, m: &Mask) -> Result<()> {
    if (img.height, img.width) != (m.height, m.width) {
        return Err(Error::Dimension("mask and image dimensions differ".into()));
    }
    Ok(())
}

/// Matches A against B with the archive's θ, window and λ, fits the
/// spline and warps A into B's frame. Masks default to [`auto_mask`].
pub fn register(
    a: &Image,
    b: &Image,
    mask_a: Option<&Mask>,
    mask_b: Option<&Mask>,
    weights: &WeightArchive,
) -> Result<Registration> {
    let m = weights.manifest();
    let mask_a = mask_a.cloned().unwrap_or_else(|| auto_mask(a));
    let mask_b = mask_b.cloned().unwrap_or_else(|| auto_mask(b));
    check_mask(a, &mask_a)?;
    check_mask(b, &mask_b)?;

    let (pa, _) = pad_to_multiple(a, PAD_MULTIPLE)?;
    let (pb, _) = pad_to_multiple(b, PAD_MULTIPLE)?;
    let (ca, fa) = extract_features(&pa, weights)?;
    let (cb, fb) = extract_features(&pb, weights)?;
    let inter = coarse_interact(&ca, &cb, weights)?;
    let tau = weights.get("match.tau")?.data()[0];
    let (_, matches) = match_coarse(&inter.fa, &inter.fb, &MatchConfig { tau, theta: m.theta })?;
    log::debug!("{} coarse matches", matches.len());
    let lifted = lift_to_fine(&matches);
    let refined = refine(&fa, &fb, &lifted, &FineConfig::from(m), weights)?;
    let inside = |x: f64, y: f64, img: &Image| x >= 0.0 && y >= 0.0 && x <= img.width as f64 - 1.0 && y <= img.height as f64 - 1.0;
    let corr = CorrespondenceSet::new(
        refined.pairs.into_iter().filter(|c| inside(c.xa, c.ya, a) && inside(c.xb, c.yb, b)).collect(),
    );
    if corr.len() < MIN_MATCHES {
        return Err(Error::InsufficientMatches(corr.len()));
    }
    let model = tps_fit(&corr.points_b(), &corr.points_a(), m.lambda)?;
    let field = tps_evaluate(&model, b.height, b.width);
    let a_canvas = a.resized_canvas(b.height, b.width, 0.0);
    let ma_canvas = mask_a.resized_canvas(b.height, b.width);
    let warped = warp_image(&a_canvas, &field)?;
    let warped_mask = warp_mask(&ma_canvas, &field)?;
    let ncc_before = ncc(&a_canvas, b, &ma_canvas.and(&mask_b)?)?;
    let ncc_after = ncc(&warped, b, &warped_mask.and(&mask_b)?)?;
    Ok(Registration { corr, model, field, warped, warped_mask, mask_b, ncc_before, ncc_after })
}

pub const SEG_RADIUS: usize = 8;
pub const SEG_VARIANCE_RATIO: f64 = 0.1;
/// Global variance below which an image counts as blank.
pub const FLAT_VARIANCE: f64 = 1e-12;

/// Summed-area table with a zero first row and column.
fn integral(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
    let mut t = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            t[(y + 1) * (w + 1) + x + 1] = f(x, y) + t[y * (w + 1) + x + 1] + t[(y + 1) * (w + 1) + x] - t[y * (w + 1) + x];
        }
    }
    t
}

/// Sum and pixel count of the clipped `(2r+1)²` box around `(x, y)`.
fn box_sum(t: &[f64], h: usize, w: usize, x: usize, y: usize, r: usize) -> (f64, f64) {
    let (x0, y0) = (x.saturating_sub(r), y.saturating_sub(r));
    let (x1, y1) = ((x + r + 1).min(w), (y + r + 1).min(h));
    let s = t[y1 * (w + 1) + x1] - t[y0 * (w + 1) + x1] - t[y1 * (w + 1) + x0] + t[y0 * (w + 1) + x0];
    (s, ((x1 - x0) * (y1 - y0)) as f64)
}

/// Foreground pixels are those whose `17 × 17` neighbourhood variance
/// exceeds a tenth of the global variance.
pub fn auto_mask(img: &Image) -> Mask {
    let (h, w) = (img.height, img.width);
    let mut m = Mask::empty(h, w);
    let n = img.pixels.len() as f64;
    if n == 0.0 {
        return m;
    }
    let mean = img.pixels.iter().sum::<f64>() / n;
    let global = img.pixels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if global <= FLAT_VARIANCE {
        return m;
    }
    let s1 = integral(h, w, |x, y| img.at(x, y));
    let s2 = integral(h, w, |x, y| img.at(x, y).powi(2));
    for y in 0..h {
        for x in 0..w {
            let (a, k) = box_sum(&s1, h, w, x, y, SEG_RADIUS);
            let (b, _) = box_sum(&s2, h, w, x, y, SEG_RADIUS);
            let var = b / k - (a / k).powi(2);
            m.set(x, y, var > SEG_VARIANCE_RATIO * global);
        }
    }
    m
}

/// Ridge pixels: darker than the mean of their `(2r+1)²` neighbourhood.
pub fn binarize_ridges(img: &Image, mask: &Mask, radius: usize) -> Mask {
    let (h, w) = (img.height, img.width);
    let t = integral(h, w, |x, y| img.at(x, y));
    let mut out = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            if mask.get(x, y) {
                let (s, k) = box_sum(&t, h, w, x, y, radius);
                out.set(x, y, img.at(x, y) < s / k);
            }
        }
    }
    out
}

pub const OVERLAP: [u8; 3] = [0, 170, 0];
pub const ONLY_A: [u8; 3] = [128, 128, 128];
pub const ONLY_B: [u8; 3] = [210, 30, 30];

/// Green where both ridges overlap, gray for ridges of A only, red for
/// ridges of B only, white elsewhere.
pub fn overlay(a: &Image, mask_a: &Mask, b: &Image, mask_b: &Mask) -> Result<RgbImage> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(Error::Dimension("overlay images differ in size".into()));
    }
    check_mask(a, mask_a)?;
    check_mask(b, mask_b)?;
    let ra = binarize_ridges(a, mask_a, 4);
    let rb = binarize_ridges(b, mask_b, 4);
    let mut out = RgbImage::new(a.width as u32, a.height as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        let (xu, yu) = (x as usize, y as usize);
        *px = Rgb(match (ra.get(xu, yu), rb.get(xu, yu)) {
            (true, true) => OVERLAP,
            (true, false) => ONLY_A,
            (false, true) => ONLY_B,
            (false, false) => [255, 255, 255],
        });
    }
    Ok(out)
}

pub fn save_overlay(img: &RgbImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::ridge_image;

    #[test]
    fn auto_mask_finds_the_textured_region() {
        let (small, truth) = ridge_image(64, 64, 4);
        let img = small.resized_canvas(160, 160, 0.0);
        let truth = truth.resized_canvas(160, 160);
        let m = auto_mask(&img);
        let both = m.and(&truth).unwrap().count() as f64;
        assert!(both > 0.95 * truth.count() as f64, "recall {both}");
        let r = SEG_RADIUS as isize;
        for y in 0..160isize {
            for x in 0..160isize {
                if m.get(x as usize, y as usize) {
                    let near = (-r..=r).any(|dy| {
                        (-r..=r).any(|dx| {
                            let (u, v) = (x + dx, y + dy);
                            (0..160).contains(&u) && (0..160).contains(&v) && truth.get(u as usize, v as usize)
                        })
                    });
                    assert!(near, "({x},{y}) is far from the foreground");
                }
            }
        }
        assert!(!m.get(150, 150));
        assert_eq!(auto_mask(&Image::filled(32, 32, 0.3)).count(), 0);
    }

    #[test]
    fn overlay_colours() {
        let (img, m) = ridge_image(64, 64, 2);
        let o = overlay(&img, &m, &img, &m).unwrap();
        assert!(o.pixels().all(|p| p.0 != ONLY_A && p.0 != ONLY_B));
        assert!(o.pixels().any(|p| p.0 == OVERLAP));
        let blank = Image::filled(64, 64, 0.0);
        let o = overlay(&img, &m, &blank, &Mask::empty(64, 64)).unwrap();
        assert!(o.pixels().all(|p| p.0 != OVERLAP && p.0 != ONLY_B));
    }

    #[test]
    fn blank_images_fail_to_register() {
        let w = WeightArchive::random(crate::weights::Manifest::toy(), 1).unwrap();
        let blank = Image::filled(64, 64, 0.0);
        let full = Mask::full(64, 64);
        match register(&blank, &blank, Some(&full), Some(&full), &w) {
            Err(Error::InsufficientMatches(_)) => {}
            other => panic!("expected insufficient matches, got {other:?}"),
        }
    }
}
