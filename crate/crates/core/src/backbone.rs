//! Convolutional feature extractor with a top-down pyramid merge.
//!
//! Stem (3×3, stride 2) → three residual stages at strides 2/4/8 with
//! `C_fine`, `2·C_fine`, `C_coarse` channels → 1×1 laterals and bilinear
//! upsampling back to stride 2. The coarse map comes from the stride-8 stage,
//! the fine map from the stride-2 end of the pyramid.

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers;
use crate::numkit::Tensor;
use crate::warpfield::Mask;
use crate::weights::{Params, WeightArchive};

pub const PAD_MULTIPLE: usize = 32;
pub const COARSE_STRIDE: usize = 8;
pub const FINE_STRIDE: usize = 2;

/// Grayscale raster, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} image needs {} pixels, got {}",
                height * width,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self { height, width, pixels: vec![v; height * width] }
    }

    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = v;
    }

    pub fn as_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width, 1], self.pixels.clone()).expect("image tensor")
    }

    /// Copies into a `height × width` canvas anchored at the top-left,
    /// filling new area with `fill` and cropping any excess.
    pub fn resized_canvas(&self, height: usize, width: usize, fill: f64) -> Image {
        let mut out = Image::filled(height, width, fill);
        for y in 0..height.min(self.height) {
            for x in 0..width.min(self.width) {
                out.set(x, y, self.at(x, y));
            }
        }
        out
    }
}

/// A spatial feature grid: `data` is `[height, width, channels]` and one
/// cell covers `stride × stride` padded-image pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub stride: usize,
    pub data: Tensor,
}

impl FeatureMap {
    pub fn new(stride: usize, data: Tensor) -> Result<Self> {
        match *data.shape() {
            [h, w, c] => Ok(Self { height: h, width: w, channels: c, stride, data }),
            ref s => Err(Error::Dimension(format!("feature map must be [H, W, C], got {s:?}"))),
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    /// Feature vector of cell `(x, y)`.
    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        self.data.row(y * self.width + x)
    }
}

/// Pads bottom/right with background (0) to the next multiple of `m`; the
/// mask marks the original extent.
pub fn pad_to_multiple(img: &Image, m: usize) -> Result<(Image, Mask)> {
    if img.height == 0 || img.width == 0 {
        return Err(Error::Dimension("cannot pad an empty image".into()));
    }
    if m == 0 {
        return Err(Error::Config("padding multiple must be positive".into()));
    }
    let h = img.height.div_ceil(m) * m;
    let w = img.width.div_ceil(m) * m;
    let padded = img.resized_canvas(h, w, 0.0);
    let mut mask = Mask::empty(h, w);
    for y in 0..img.height {
        for x in 0..img.width {
            mask.set(x, y, true);
        }
    }
    Ok((padded, mask))
}

fn conv(g: &mut Graph, p: &Params, name: &str, x: NodeId, stride: usize) -> NodeId {
    let k = p.get(&format!("{name}.w"));
    let ks = g.value(k).shape()[0];
    let y = g.conv2d(x, k, stride, ks / 2);
    g.add_row_bias(y, p.get(&format!("{name}.b")))
}

fn norm_act(g: &mut Graph, p: &Params, name: &str, x: NodeId) -> NodeId {
    let n = g.layer_norm(x, p.get(&format!("{name}.g")), p.get(&format!("{name}.b")));
    g.silu(n)
}

fn stage(g: &mut Graph, p: &Params, s: usize, x: NodeId) -> NodeId {
    let x = if s > 1 {
        let d = conv(g, p, &format!("bb.s{s}.down"), x, 2);
        norm_act(g, p, &format!("bb.s{s}.down_norm"), d)
    } else {
        x
    };
    let h = conv(g, p, &format!("bb.s{s}.res1"), x, 1);
    let h = norm_act(g, p, &format!("bb.s{s}.res_norm"), h);
    let h = conv(g, p, &format!("bb.s{s}.res2"), h, 1);
    g.add(x, h)
}

fn upsample_hwc(g: &mut Graph, x: NodeId) -> NodeId {
    let s = g.value(x).shape().to_vec();
    let flat = g.reshape(x, &[s[0] * s[1], s[2]]);
    let up = layers::upsample(g, flat, s[0], s[1], 1);
    g.reshape(up, &[2 * s[0], 2 * s[1], s[2]])
}

/// Output of the backbone on a graph: flattened `[cells, C]` nodes plus
/// their grid sizes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BackboneNodes {
    pub coarse: NodeId,
    pub coarse_hw: (usize, usize),
    pub fine: NodeId,
    pub fine_hw: (usize, usize),
}

pub(crate) fn backbone_graph(g: &mut Graph, p: &Params, img: &Image) -> BackboneNodes {
    let x = g.constant(img.as_tensor());
    let x = conv(g, p, "bb.stem", x, 2);
    let x = norm_act(g, p, "bb.stem_norm", x);
    let s1 = stage(g, p, 1, x);
    let s2 = stage(g, p, 2, s1);
    let s3 = stage(g, p, 3, s2);

    let c3 = conv(g, p, "bb.fpn.lat3", s3, 1);
    let l2 = conv(g, p, "bb.fpn.lat2", s2, 1);
    let u3 = upsample_hwc(g, c3);
    let p2 = g.add(l2, u3);
    let p2 = conv(g, p, "bb.fpn.smooth2", p2, 1);
    let l1 = conv(g, p, "bb.fpn.lat1", s1, 1);
    let u2 = upsample_hwc(g, p2);
    let p1 = g.add(l1, u2);
    let fine = conv(g, p, "bb.fpn.smooth1", p1, 1);

    let cs = g.value(c3).shape().to_vec();
    let fs = g.value(fine).shape().to_vec();
    let coarse = g.reshape(c3, &[cs[0] * cs[1], cs[2]]);
    let fine = g.reshape(fine, &[fs[0] * fs[1], fs[2]]);
    BackboneNodes { coarse, coarse_hw: (cs[0], cs[1]), fine, fine_hw: (fs[0], fs[1]) }
}

pub(crate) fn check_padded(img: &Image) -> Result<()> {
    if img.height == 0
        || img.width == 0
        || img.height % PAD_MULTIPLE != 0
        || img.width % PAD_MULTIPLE != 0
    {
        return Err(Error::Dimension(format!(
            "image {}x{} is not padded to a multiple of {PAD_MULTIPLE}",
            img.height, img.width
        )));
    }
    Ok(())
}

/// Coarse (stride 8) and fine (stride 2) features of a padded image.
pub fn extract_features(img: &Image, weights: &WeightArchive) -> Result<(FeatureMap, FeatureMap)> {
    check_padded(img)?;
    weights.validate()?;
    let mut g = Graph::new();
    let p = Params::bind(&mut g, weights, false);
    let out = backbone_graph(&mut g, &p, img);
    let (ch, cw) = out.coarse_hw;
    let (fh, fw) = out.fine_hw;
    let coarse = g.value(out.coarse).clone().reshape(&[ch, cw, weights.manifest().c_coarse])?;
    let fine = g.value(out.fine).clone().reshape(&[fh, fw, weights.manifest().c_fine])?;
    Ok((FeatureMap::new(COARSE_STRIDE, coarse)?, FeatureMap::new(FINE_STRIDE, fine)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::weights::Manifest;

    fn textured(h: usize, w: usize, phase: f64) -> Image {
        let px = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                0.5 + 0.5 * (0.7 * x + phase).sin() * (0.45 * y + 0.3 * x).cos()
            })
            .collect();
        Image::new(h, w, px).unwrap()
    }

    #[test]
    fn padding_examples() {
        let (p, m) = pad_to_multiple(&Image::filled(480, 640, 0.5), 32).unwrap();
        assert_eq!((p.height, p.width), (480, 640));
        assert_eq!(m.count(), 480 * 640);

        // 650 rows, 480 columns.
        let (p, m) = pad_to_multiple(&Image::filled(650, 480, 0.5), 32).unwrap();
        assert_eq!((p.height, p.width), (672, 480));
        assert!(m.get(0, 649) && !m.get(0, 650));
        assert_eq!(p.at(3, 660), 0.0);
        assert_eq!(m.count(), 650 * 480);

        let (p, m) = pad_to_multiple(&Image::filled(1, 1, 1.0), 32).unwrap();
        assert_eq!((p.height, p.width, m.count()), (32, 32, 1));
    }

    #[test]
    fn zero_image_with_zero_biases_gives_zero_features() {
        let mut w = WeightArchive::random(Manifest::toy(), 5).unwrap();
        w.zero_where(|n| n.ends_with(".b"));
        let (c, f) = extract_features(&Image::filled(32, 32, 0.0), &w).unwrap();
        assert!(c.data.data().iter().all(|&v| v == 0.0));
        assert!(f.data.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_contract() {
        let m = Manifest { c_coarse: 64, c_fine: 16, n_coarse: 0, ..Manifest::default() };
        let w = WeightArchive::random(m, 5).unwrap();
        let (c, f) = extract_features(&textured(64, 64, 0.0), &w).unwrap();
        assert_eq!(c.data.shape(), &[8, 8, 64]);
        assert_eq!(f.data.shape(), &[32, 32, 16]);
        assert_eq!((c.stride, f.stride), (8, 2));
        assert!(c.data.all_finite() && f.data.all_finite());

        let (c, f) = extract_features(&textured(32, 96, 0.3), &w).unwrap();
        assert_eq!(c.data.shape(), &[4, 12, 64]);
        assert_eq!(f.data.shape(), &[16, 48, 16]);
    }

    #[test]
    fn unpadded_input_is_rejected() {
        let w = WeightArchive::random(Manifest::toy(), 5).unwrap();
        assert!(extract_features(&Image::filled(40, 32, 0.0), &w).is_err());
    }

    #[test]
    fn deterministic() {
        let w = WeightArchive::random(Manifest::toy(), 9).unwrap();
        let img = textured(32, 64, 1.0);
        assert_eq!(extract_features(&img, &w).unwrap(), extract_features(&img, &w).unwrap());
    }

    #[test]
    fn coarse_features_translate_with_the_input() {
        let mut w = WeightArchive::random(Manifest::toy(), 21).unwrap();
        w.zero_where(|n| n.ends_with(".b") && !n.contains("norm"));
        let n = 160;
        let base = textured(n, n, 0.4);
        let shift = 16;
        let mut moved = Image::filled(n, n, 0.0);
        for y in 0..n {
            for x in shift..n {
                moved.set(x, y, base.at(x - shift, y));
            }
        }
        let (ca, _) = extract_features(&base, &w).unwrap();
        let (cb, _) = extract_features(&moved, &w).unwrap();
        let dc = shift / 8;
        // Cells far from the zero-padded borders see identical receptive fields.
        for y in 5..15 {
            for x in 5 + dc..15 {
                let a = ca.cell(x - dc, y);
                let b = cb.cell(x, y);
                for (u, v) in a.iter().zip(b) {
                    assert!((u - v).abs() < 1e-9, "cell ({x},{y}) differs: {u} vs {v}");
                }
            }
        }
    }
}
