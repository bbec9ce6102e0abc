//! Thin-plate splines, dense deformation fields, warping, ground-truth
//! construction and training-pair augmentation.
//!
//! Displacements map A's frame onto B: a pixel `p` of A corresponds to
//! `p + D(p)` in B.

use std::io::{Read, Write};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::fine_refine::{Correspondence, CorrespondenceSet};
use crate::numkit::{bilinear_taps, Dot2};

pub const DFL_MAGIC: &[u8; 4] = b"DFL1";

/// Binary foreground raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![false; height * width] }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![true; height * width] }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::Dimension(format!("{height}x{width} mask needs {} bits", height * width)));
        }
        Ok(Self { height, width, bits })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Nearest-pixel lookup; anything outside the raster is background.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (xr, yr) = (x.round(), y.round());
        if !(xr >= 0.0 && yr >= 0.0 && xr < self.width as f64 && yr < self.height as f64) {
            return false;
        }
        self.get(xr as usize, yr as usize)
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        same_dims((self.height, self.width), (other.height, other.width))?;
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| *a && *b).collect();
        Ok(Mask { height: self.height, width: self.width, bits })
    }

    /// Foreground where the image is above `threshold`.
    pub fn from_image(img: &Image, threshold: f64) -> Mask {
        let bits = img.pixels.iter().map(|&v| v > threshold).collect();
        Mask { height: img.height, width: img.width, bits }
    }

    pub fn to_image(&self) -> Image {
        let px = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Image::new(self.height, self.width, px).expect("mask dims")
    }

    /// Crops or extends with background to `height × width`.
    pub fn resized_canvas(&self, height: usize, width: usize) -> Mask {
        let mut out = Mask::empty(height, width);
        for y in 0..height.min(self.height) {
            for x in 0..width.min(self.width) {
                out.set(x, y, self.get(x, y));
            }
        }
        out
    }
}

fn same_dims(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::Dimension(format!("dimension mismatch: {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Per-pixel displacement `(dx, dy)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub height: usize,
    pub width: usize,
    pub disp: Vec<[f64; 2]>,
}

impl DeformationField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Self { height, width, disp: vec![[dx, dy]; height * width] }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> [f64; 2]) -> Self {
        let disp = (0..height * width).map(|i| f(i % width, i / width)).collect();
        Self { height, width, disp }
    }

    pub fn at(&self, x: usize, y: usize) -> [f64; 2] {
        self.disp[y * self.width + x]
    }

    /// Bilinear lookup with border clamping.
    pub fn sample(&self, x: f64, y: f64) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (idx, w) in bilinear_taps(self.height, self.width, x, y) {
            out[0] += w * self.disp[idx][0];
            out[1] += w * self.disp[idx][1];
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.disp.iter().all(|d| d[0].is_finite() && d[1].is_finite())
    }

    /// `DFL1` layout: magic, u32 LE height and width, then `(dx, dy)` f32 LE
    /// pairs in row-major order.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let h = u32::try_from(self.height).map_err(|_| Error::Format("field too tall".into()))?;
        let wd = u32::try_from(self.width).map_err(|_| Error::Format("field too wide".into()))?;
        let mut buf = Vec::with_capacity(12 + 8 * self.disp.len());
        buf.extend_from_slice(DFL_MAGIC);
        buf.extend_from_slice(&h.to_le_bytes());
        buf.extend_from_slice(&wd.to_le_bytes());
        for d in &self.disp {
            buf.extend_from_slice(&(d[0] as f32).to_le_bytes());
            buf.extend_from_slice(&(d[1] as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 12 || &bytes[..4] != DFL_MAGIC {
            return Err(Error::Format("not a DFL1 deformation field".into()));
        }
        let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes"));
        let (h, w) = (word(4) as usize, word(8) as usize);
        let expected = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format("field dimensions overflow".into()))?;
        if bytes.len() - 12 != expected {
            return Err(Error::Format(format!(
                "DFL1 payload is {} bytes, expected {expected}",
                bytes.len() - 12
            )));
        }
        let f = |k: usize| f32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as f64;
        let disp = (0..h * w).map(|i| [f(12 + 8 * i), f(16 + 8 * i)]).collect();
        Ok(Self { height: h, width: w, disp })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// `U(r) = r² log r²` with `U(0) = 0`, taking the squared distance.
/// `r² ln(r²/s²)`. Under the side conditions `Σw = 0` and `Σw·p = 0` the
/// `s` term only adds a constant, so every `s` spans the same splines as
/// `r² ln r²`; a scale near the point spread keeps the values small.
fn tps_kernel(r2: f64, ln_s2: f64) -> f64 {
    if r2 > 0.0 {
        r2 * (r2.ln() - ln_s2)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TpsModel {
    pub ctrl: Vec<(f64, f64)>,
    /// Kernel coefficients, one `(wx, wy)` per control point.
    pub weights: Vec<[f64; 2]>,
    /// Affine part: rows for `1`, `x`, `y`; columns for the two outputs.
    pub affine: [[f64; 2]; 3],
    pub lambda: f64,
    /// `ln s²` of the kernel normalisation.
    pub ln_s2: f64,
}

impl TpsModel {
    pub fn eval(&self, x: f64, y: f64) -> (f64, f64) {
        // Nearby control points carry large opposing weights, so the
        // kernel sum is accumulated in extended precision.
        let a = &self.affine;
        let (mut fx, mut fy) = (Dot2::default(), Dot2::default());
        for (k, v) in [1.0, x, y].into_iter().enumerate() {
            fx.add(a[k][0], v);
            fy.add(a[k][1], v);
        }
        for (&(cx, cy), w) in self.ctrl.iter().zip(&self.weights) {
            let u = tps_kernel((x - cx) * (x - cx) + (y - cy) * (y - cy), self.ln_s2);
            fx.add(w[0], u);
            fy.add(w[1], u);
        }
        (fx.value(), fy.value())
    }
}

/// Rejects point sets without a well-defined affine part.
fn check_spread(pts: &[(f64, f64)]) -> Result<()> {
    let n = pts.len() as f64;
    let (mx, my) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pts {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let trace = sxx + syy;
    if !(trace > 0.0) || sxx * syy - sxy * sxy <= 1e-12 * trace * trace {
        return Err(Error::Singular("control points are collinear or coincident".into()));
    }
    Ok(())
}

/// Most iterative-refinement passes after the LU solve.
const REFINE_STEPS: usize = 3;

/// Regularised thin-plate spline through `src → dst`: solves
/// `[[K + λI, P], [Pᵀ, 0]]` for both output axes with one LU factorisation
/// and up to a few steps of iterative refinement.

pub fn tps_fit(src: &[(f64, f64)], dst: &[(f64, f64)], lambda: f64) -> Result<TpsModel> {
    if src.len() != dst.len() {
        return Err(Error::Dimension(format!("{} source vs {} target points", src.len(), dst.len())));
    }
    if src.len() < 3 {
        return Err(Error::Singular(format!("need at least 3 control points, got {}", src.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    if src.iter().chain(dst).any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(Error::Dimension("control points must be finite".into()));
    }
    check_spread(src)?;
    let n = src.len();
    // The affine block is built from centred, scaled coordinates and the
    // targets are centred; both are exact reparametrisations that keep the
    // system well scaled. The kernel is translation invariant.
    let mean = |p: &[(f64, f64)]| p.iter().fold((0.0, 0.0), |(a, b), q| (a + q.0 / n as f64, b + q.1 / n as f64));
    let (cs, ct) = (mean(src), mean(dst));
    let scale = (src.iter().map(|p| (p.0 - cs.0).powi(2) + (p.1 - cs.1).powi(2)).sum::<f64>() / n as f64).sqrt();
    let ln_s2 = (2.0 * scale * scale).ln();
    let mut a = DMatrix::<f64>::zeros(n + 3, n + 3);
    for i in 0..n {
        for j in 0..n {
            let (dx, dy) = (src[i].0 - src[j].0, src[i].1 - src[j].1);
            a[(i, j)] = tps_kernel(dx * dx + dy * dy, ln_s2);
        }
        a[(i, i)] += lambda;
        let row = [1.0, (src[i].0 - cs.0) / scale, (src[i].1 - cs.1) / scale];
        for (k, v) in row.into_iter().enumerate() {
            a[(i, n + k)] = v;
            a[(n + k, i)] = v;
        }
    }
    let mut b = DMatrix::<f64>::zeros(n + 3, 2);
    for (i, d) in dst.iter().enumerate() {
        b[(i, 0)] = d.0 - ct.0;
        b[(i, 1)] = d.1 - ct.1;
    }
    let lu = a.clone().lu();
    let mut x = lu
        .solve(&b)
        .ok_or_else(|| Error::Singular("TPS system is singular".into()))?;
    // Refinement against an extended-precision residual; the best iterate
    // is kept since ill-conditioned systems may stagnate or drift.
    let residual = |x: &DMatrix<f64>| {
        DMatrix::from_fn(n + 3, 2, |i, c| {
            let mut d = Dot2::default();
            d.add(b[(i, c)], 1.0);
            for k in 0..n + 3 {
                d.add(-a[(i, k)], x[(k, c)]);
            }
            d.value()
        })
    };
    let mut r = residual(&x);
    let mut best = (r.amax(), x.clone());
    for _ in 0..REFINE_STEPS {
        let Some(dx) = lu.solve(&r) else { break };
        x += dx;
        r = residual(&x);
        let err = r.amax();
        if !(err < best.0) {
            break;
        }
        best = (err, x.clone());
    }
    let x = best.1;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("TPS solution is not finite".into()));
    }
    let weights = (0..n).map(|i| [x[(i, 0)], x[(i, 1)]]).collect();
    // Back to `c + Ax·x + Ay·y` in pixel units.
    let (ax, ay) = ([x[(n + 1, 0)] / scale, x[(n + 1, 1)] / scale], [x[(n + 2, 0)] / scale, x[(n + 2, 1)] / scale]);
    let c0 = [
        x[(n, 0)] + ct.0 - ax[0] * cs.0 - ay[0] * cs.1,
        x[(n, 1)] + ct.1 - ax[1] * cs.0 - ay[1] * cs.1,
    ];
    let affine = [c0, ax, ay];
    Ok(TpsModel { ctrl: src.to_vec(), weights, affine, lambda, ln_s2 })
}

/// Dense displacement `f(p) − p` on an `h × w` pixel grid.
pub fn tps_evaluate(model: &TpsModel, height: usize, width: usize) -> DeformationField {
    DeformationField::from_fn(height, width, |x, y| {
        let (fx, fy) = model.eval(x as f64, y as f64);
        [fx - x as f64, fy - y as f64]
    })
}

/// `D(p) = D_c(p + D_f(p)) + D_f(p)` with clamped bilinear lookup of `D_c`.
pub fn compose(dc: &DeformationField, df: &DeformationField) -> Result<DeformationField> {
    same_dims((dc.height, dc.width), (df.height, df.width))?;
    Ok(DeformationField::from_fn(dc.height, dc.width, |x, y| {
        let f = df.at(x, y);
        let c = dc.sample(x as f64 + f[0], y as f64 + f[1]);
        [c[0] + f[0], c[1] + f[1]]
    }))
}

/// Backward warp: `out(p) = img(p + d(p))`, bilinear with border clamping.
pub fn warp_image(img: &Image, d: &DeformationField) -> Result<Image> {
    same_dims((img.height, img.width), (d.height, d.width))?;
    let mut out = Image::filled(img.height, img.width, 0.0);
    for y in 0..img.height {
        for x in 0..img.width {
            let [dx, dy] = d.at(x, y);
            let v = bilinear_taps(img.height, img.width, x as f64 + dx, y as f64 + dy)
                .iter()
                .map(|&(i, w)| w * img.pixels[i])
                .sum();
            out.set(x, y, v);
        }
    }
    Ok(out)
}

/// Nearest-neighbour backward warp of a mask; lookups outside the raster
/// are background.
pub fn warp_mask(mask: &Mask, d: &DeformationField) -> Result<Mask> {
    same_dims((mask.height, mask.width), (d.height, d.width))?;
    let mut out = Mask::empty(mask.height, mask.width);
    for y in 0..mask.height {
        for x in 0..mask.width {
            let [dx, dy] = d.at(x, y);
            let v = if mask.contains(x as f64 + dx, y as f64 + dy) { 1.0 } else { 0.0 };
            out.set(x, y, v >= 0.5);
        }
    }
    Ok(out)
}

/// Grid-point correspondences `(p, p + D(p))` kept where `p` is in `mA`
/// and its image lies in `warp_mask(mA, d) ∧ mB`. Grid points sit at the
/// centres of `stride × stride` cells.
pub fn build_gt(d: &DeformationField, ma: &Mask, mb: &Mask, stride: usize) -> Result<CorrespondenceSet> {
    same_dims((d.height, d.width), (ma.height, ma.width))?;
    same_dims((d.height, d.width), (mb.height, mb.width))?;
    if stride == 0 {
        return Err(Error::Config("grid stride must be positive".into()));
    }
    let m = warp_mask(ma, d)?.and(mb)?;
    let off = (stride as f64 - 1.0) / 2.0;
    let mut pairs = Vec::new();
    for gy in 0..d.height / stride {
        for gx in 0..d.width / stride {
            let (px, py) = (stride as f64 * gx as f64 + off, stride as f64 * gy as f64 + off);
            if !ma.contains(px, py) {
                continue;
            }
            let [dx, dy] = d.sample(px, py);
            let (qx, qy) = (px + dx, py + dy);
            if m.contains(qx, qy) {
                pairs.push(Correspondence::new(px, py, qx, qy));
            }
        }
    }
    if pairs.is_empty() {
        log::warn!("ground-truth construction found no overlap");
    }
    Ok(CorrespondenceSet::new(pairs))
}

/// Two images with masks and their ground-truth correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub a: Image,
    pub b: Image,
    pub mask_a: Mask,
    pub mask_b: Mask,
    pub gt: CorrespondenceSet,
}

pub const MAX_ROTATION_DEG: f64 = 30.0;
pub const MAX_TRANSLATION: f64 = 32.0;

/// Random rigid motion of B: rotation in ±30° about the image centre and a
/// translation of at most 32 px per axis.
pub fn augment_rigid(pair: &TrainingPair, seed: u64) -> TrainingPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG).to_radians();
    let tx = rng.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION);
    let ty = rng.random_range(-MAX_TRANSLATION..=MAX_TRANSLATION);
    rigid_with(pair, angle, tx, ty)
}

/// Applies `q ↦ R(angle)(q − c) + c + t` to B and its GT endpoints; pairs
/// whose moved endpoint leaves the image are dropped.
pub fn rigid_with(pair: &TrainingPair, angle: f64, tx: f64, ty: f64) -> TrainingPair {
    let (h, w) = (pair.b.height, pair.b.width);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    // Written as `q + (R − I)(q − c) + t` so the zero motion is exact.
    let forward = |x: f64, y: f64| {
        let (u, v) = (x - cx, y - cy);
        (x + (c - 1.0) * u - s * v + tx, y + s * u + (c - 1.0) * v + ty)
    };
    let inverse = |x: f64, y: f64| {
        let (qx, qy) = (x - tx, y - ty);
        let (u, v) = (qx - cx, qy - cy);
        (qx + (c - 1.0) * u + s * v, qy - s * u + (c - 1.0) * v)
    };
    let mut b = Image::filled(h, w, 0.0);
    let mut mask_b = Mask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = inverse(x as f64, y as f64);
            let inside = sx > -0.5 && sy > -0.5 && sx < w as f64 - 0.5 && sy < h as f64 - 0.5;
            if inside {
                let v = bilinear_taps(h, w, sx, sy).iter().map(|&(i, wt)| wt * pair.b.pixels[i]).sum();
                b.set(x, y, v);
                mask_b.set(x, y, pair.mask_b.contains(sx, sy));
            }
        }
    }
    let pairs = pair
        .gt
        .pairs
        .iter()
        .filter_map(|p| {
            let (xb, yb) = forward(p.xb, p.yb);
            let inside = xb >= 0.0 && yb >= 0.0 && xb <= w as f64 - 1.0 && yb <= h as f64 - 1.0;
            inside.then_some(Correspondence { xb, yb, ..*p })
        })
        .collect();
    TrainingPair { b, mask_b, gt: CorrespondenceSet::new(pairs), ..pair.clone() }
}

/// Exchanges the roles of A and B.
pub fn augment_swap(pair: &TrainingPair) -> TrainingPair {
    let pairs = pair
        .gt
        .pairs
        .iter()
        .map(|p| Correspondence { xa: p.xb, ya: p.yb, xb: p.xa, yb: p.ya, ..*p })
        .collect();
    TrainingPair {
        a: pair.b.clone(),
        b: pair.a.clone(),
        mask_a: pair.mask_b.clone(),
        mask_b: pair.mask_a.clone(),
        gt: CorrespondenceSet::new(pairs),
    }
}

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (xr, yr) = (x.round(), y.round());
        xr >= self.x0 as f64 && xr < self.x1 as f64 && yr >= self.y0 as f64 && yr < self.y1 as f64
    }
}

/// One to three rectangles, each covering at most a fifth of the image.
pub fn draw_occlusions(height: usize, width: usize, seed: u64) -> Vec<Rect> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let max_area = (height * width) as f64 * 0.2;
    (0..n)
        .map(|_| {
            let rw = rng.random_range(1..=width.max(1));
            let max_h = ((max_area / rw as f64).floor() as usize).clamp(1, height.max(1));
            let rh = rng.random_range(1..=max_h);
            let x0 = rng.random_range(0..=width - rw);
            let y0 = rng.random_range(0..=height - rh);
            Rect { x0, y0, x1: x0 + rw, y1: y0 + rh }
        })
        .collect()
}

/// Zeroes the rectangles in B (image and mask) and drops GT pairs whose
/// B endpoint falls inside one.
pub fn occlude_with(pair: &TrainingPair, rects: &[Rect]) -> TrainingPair {
    let mut out = pair.clone();
    for r in rects {
        for y in r.y0..r.y1.min(out.b.height) {
            for x in r.x0..r.x1.min(out.b.width) {
                out.b.set(x, y, 0.0);
                out.mask_b.set(x, y, false);
            }
        }
    }
    out.gt.pairs.retain(|p| !rects.iter().any(|r| r.contains(p.xb, p.yb)));
    out
}

pub fn augment_occlude(pair: &TrainingPair, seed: u64) -> TrainingPair {
    occlude_with(pair, &draw_occlusions(pair.b.height, pair.b.width, seed))
}

fn to_gray8(img: &Image) -> GrayImage {
    let px = img.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    ImageBuffer::<Luma<u8>, Vec<u8>>::from_raw(img.width as u32, img.height as u32, px)
        .expect("buffer size")
}

/// Reads any grayscale-convertible raster (PGM, PNG) into `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let dynimg = image::ImageReader::open(path)?.with_guessed_format()?.decode()?;
    let g = dynimg.to_luma16();
    let (w, h) = (g.width() as usize, g.height() as usize);
    let px = g.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
    Image::new(h, w, px)
}

/// Writes an 8-bit binary PGM (P5).
pub fn write_pgm(img: &Image, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", img.width, img.height)?;
    f.write_all(to_gray8(img).as_raw())?;
    f.flush()?;
    Ok(())
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    Ok(Mask::from_image(&read_image(path)?, 0.5))
}

pub fn write_mask(mask: &Mask, path: &Path) -> Result<()> {
    write_pgm(&mask.to_image(), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<(f64, f64)> {
        (0..n).map(|_| (rng.random_range(0.0..extent), rng.random_range(0.0..extent))).collect()
    }

    #[test]
    fn identity_and_translation_fits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = random_points(&mut rng, 10, 100.0);
        for lambda in [0.0, 0.2, 3.0] {
            let m = tps_fit(&src, &src, lambda).unwrap();
            assert!(m.weights.iter().all(|w| w[0].abs() < 1e-9 && w[1].abs() < 1e-9));
            let f = tps_evaluate(&m, 16, 16);
            assert!(f.disp.iter().all(|d| d[0].abs() < 1e-9 && d[1].abs() < 1e-9));
        }
        let dst: Vec<_> = src.iter().map(|&(x, y)| (x + 5.0, y - 2.0)).collect();
        let m = tps_fit(&src, &dst, 0.0).unwrap();
        assert!(m.weights.iter().all(|w| w[0].abs() < 1e-9 && w[1].abs() < 1e-9));
        let f = tps_evaluate(&m, 8, 8);
        assert!(f.disp.iter().all(|d| (d[0] - 5.0).abs() < 1e-9 && (d[1] + 2.0).abs() < 1e-9));
    }

    #[test]
    fn exact_interpolation_without_regularisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let src = random_points(&mut rng, 8, 64.0);
        let dst: Vec<_> = src
            .iter()
            .map(|&(x, y)| (x + rng.random_range(-5.0..5.0), y + rng.random_range(-5.0..5.0)))
            .collect();
        let m = tps_fit(&src, &dst, 0.0).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (fx, fy) = m.eval(s.0, s.1);
            assert!((fx - d.0).abs() <= 1e-9 && (fy - d.1).abs() <= 1e-9);
        }
        let int_src: Vec<_> = (0..4).map(|i| ((i * 7 % 5) as f64 * 9.0, (i * 3) as f64 * 4.0)).collect();
        let int_dst: Vec<_> = int_src.iter().map(|&(x, y)| (x + 1.0, y + 0.5 * x)).collect();
        let m = tps_fit(&int_src, &int_dst, 0.0).unwrap();
        let f = tps_evaluate(&m, 40, 40);
        for (s, d) in int_src.iter().zip(&int_dst) {
            let v = f.at(s.0 as usize, s.1 as usize);
            assert!((v[0] - (d.0 - s.0)).abs() < 1e-9 && (v[1] - (d.1 - s.1)).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        let line: Vec<_> = (0..5).map(|i| (i as f64, 2.0 * i as f64)).collect();
        assert!(matches!(tps_fit(&line, &line, 0.0), Err(Error::Singular(_))));
        let same = vec![(1.0, 1.0); 4];
        assert!(matches!(tps_fit(&same, &same, 0.0), Err(Error::Singular(_))));
        let tri = [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)];
        assert!(matches!(tps_fit(&tri, &tri[..2], 0.0), Err(Error::Dimension(_))));
        assert!(matches!(tps_fit(&tri[..2], &tri[..2], 0.0), Err(Error::Singular(_))));
    }

    #[test]
    fn compose_identities() {
        let dc = DeformationField::from_fn(9, 7, |x, y| [(x as f64 * 0.3).sin(), (y as f64 * 0.2).cos()]);
        let z = DeformationField::zeros(9, 7);
        assert_eq!(compose(&dc, &z).unwrap(), dc);
        let df = DeformationField::from_fn(9, 7, |x, y| [0.1 * y as f64, -0.2 * x as f64]);
        assert_eq!(compose(&z, &df).unwrap(), df);
        let c = compose(&DeformationField::constant(5, 5, 1.5, -2.0), &DeformationField::constant(5, 5, 0.25, 3.0))
            .unwrap();
        assert!(c.disp.iter().all(|d| *d == [1.75, 1.0]));
        assert!(compose(&dc, &DeformationField::zeros(3, 3)).is_err());
    }

    #[test]
    fn warping_examples() {
        let mut img = Image::filled(6, 6, 0.0);
        for y in 0..6 {
            for x in 3..6 {
                img.set(x, y, 1.0);
            }
        }
        assert_eq!(warp_image(&img, &DeformationField::zeros(6, 6)).unwrap(), img);
        let shifted = warp_image(&img, &DeformationField::constant(6, 6, 1.0, 0.0)).unwrap();
        for y in 0..6 {
            assert_eq!(shifted.at(1, y), 0.0);
            assert_eq!(shifted.at(2, y), 1.0);
        }
        let mut m = Mask::empty(6, 6);
        m.set(2, 2, true);
        let wm = warp_mask(&m, &DeformationField::constant(6, 6, 0.4, -1.0)).unwrap();
        assert!(wm.get(2, 3));
        assert_eq!(wm.count(), 1);
    }

    #[test]
    fn build_gt_examples() {
        let d = DeformationField::zeros(32, 32);
        let full = Mask::full(32, 32);
        let gt = build_gt(&d, &full, &full, 8).unwrap();
        assert_eq!(gt.len(), 16);
        assert!(gt.pairs.iter().all(|p| p.xa == p.xb && p.ya == p.yb));
        assert_eq!((gt.pairs[0].xa, gt.pairs[0].ya), (3.5, 3.5));

        let mut left = Mask::empty(32, 32);
        let mut right = Mask::empty(32, 32);
        for y in 0..32 {
            for x in 0..16 {
                left.set(x, y, true);
                right.set(x + 16, y, true);
            }
        }
        assert!(build_gt(&d, &left, &right, 8).unwrap().is_empty());
    }

    fn sample_pair() -> TrainingPair {
        let a = Image::new(40, 48, (0..40 * 48).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap();
        let b = Image::new(40, 48, (0..40 * 48).map(|i| ((i * 11) % 97) as f64 / 96.0).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pairs = (0..30)
            .map(|_| {
                Correspondence::new(
                    rng.random_range(0.0..47.0),
                    rng.random_range(0.0..39.0),
                    rng.random_range(0.0..47.0),
                    rng.random_range(0.0..39.0),
                )
            })
            .collect();
        TrainingPair {
            a,
            b,
            mask_a: Mask::full(40, 48),
            mask_b: Mask::full(40, 48),
            gt: CorrespondenceSet::new(pairs),
        }
    }

    #[test]
    fn augmentation_contracts() {
        let p = sample_pair();
        assert_eq!(augment_swap(&augment_swap(&p)), p);
        assert_eq!(rigid_with(&p, 0.0, 0.0, 0.0), p);

        let moved = augment_rigid(&p, 9);
        assert_eq!(moved.a, p.a);
        assert!(moved.gt.len() <= p.gt.len());

        let rects = draw_occlusions(40, 48, 5);
        assert!((1..=3).contains(&rects.len()));
        assert!(rects.iter().all(|r| (r.x1 - r.x0) * (r.y1 - r.y0) * 5 <= 40 * 48));
        let occ = occlude_with(&p, &rects);
        let expected: Vec<_> =
            p.gt.pairs.iter().filter(|c| !rects.iter().any(|r| r.contains(c.xb, c.yb))).copied().collect();
        assert_eq!(occ.gt.pairs, expected);
        for r in &rects {
            assert_eq!(occ.b.at(r.x0, r.y0), 0.0);
        }
        assert_eq!(augment_occlude(&p, 5), occ);
    }

    #[test]
    fn rigid_motion_maps_gt_onto_moved_image() {
        let mut p = sample_pair();
        p.gt = CorrespondenceSet::new(vec![Correspondence::new(10.0, 10.0, 20.0, 15.0)]);
        let q = rigid_with(&p, 0.0, 3.0, -2.0);
        let c = q.gt.pairs[0];
        assert_eq!((c.xb, c.yb), (23.0, 13.0));
        assert_eq!(q.b.at(23, 13), p.b.at(20, 15));
        let r = rigid_with(&p, 0.3, 1.5, 2.0);
        let c = r.gt.pairs[0];
        let (s, co) = 0.3f64.sin_cos();
        let (u, v) = (20.0 - 23.5, 15.0 - 19.5);
        assert!((c.xb - (co * u - s * v + 23.5 + 1.5)).abs() < 1e-12);
        assert!((c.yb - (s * u + co * v + 19.5 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn dfl_round_trip_is_bit_exact() {
        let d = DeformationField::from_fn(5, 7, |x, y| [x as f64 * 0.1 - 0.3, (y as f64).sqrt()]);
        let mut first = Vec::new();
        d.write_to(&mut first).unwrap();
        assert_eq!(&first[..4], b"DFL1");
        assert_eq!(first.len(), 12 + 5 * 7 * 8);
        let back = DeformationField::read_from(&mut first.as_slice()).unwrap();
        let mut second = Vec::new();
        back.write_to(&mut second).unwrap();
        assert_eq!(first, second);
        assert!(DeformationField::read_from(&mut &first[..20]).is_err());
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let img = Image::new(3, 4, (0..12).map(|i| i as f64 / 11.0).collect()).unwrap();
        write_pgm(&img, &path).unwrap();
        let back = read_image(&path).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let mut m = Mask::empty(3, 4);
        m.set(1, 2, true);
        write_mask(&m, &path).unwrap();
        assert_eq!(read_mask(&path).unwrap(), m);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn affine_reproduction(seed in 0u64..10_000, lambda in prop_oneof![Just(0.0), Just(0.2), Just(5.0)]) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(4..20);
            let src = random_points(&mut rng, n, 200.0);
            let (a, b, c, d) = (1.0 + rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2),
                                rng.random_range(-0.2..0.2), 1.0 + rng.random_range(-0.2..0.2));
            let dst: Vec<_> = src.iter().map(|&(x, y)| (a * x + b * y + 4.0, c * x + d * y - 1.0)).collect();
            let m = tps_fit(&src, &dst, lambda).unwrap();
            prop_assert!(m.weights.iter().all(|w| w[0].abs() <= 1e-8 && w[1].abs() <= 1e-8));
            for _ in 0..10 {
                let (x, y) = (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0));
                let (fx, fy) = m.eval(x, y);
                prop_assert!((fx - (a * x + b * y + 4.0)).abs() < 1e-8);
                prop_assert!((fy - (c * x + d * y - 1.0)).abs() < 1e-8);
            }
        }

        #[test]
        fn residual_grows_with_lambda(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(4..25);
            let src = random_points(&mut rng, n, 128.0);
            let dst: Vec<_> = src.iter()
                .map(|&(x, y)| (x + rng.random_range(-8.0..8.0), y + rng.random_range(-8.0..8.0)))
                .collect();
            let mut last = -1.0;
            for lambda in [0.0, 0.05, 0.2, 1.0, 10.0] {
                let m = tps_fit(&src, &dst, lambda).unwrap();
                let r: f64 = src.iter().zip(&dst).map(|(s, d)| {
                    let (fx, fy) = m.eval(s.0, s.1);
                    (fx - d.0).powi(2) + (fy - d.1).powi(2)
                }).sum();
                prop_assert!(r >= last - 1e-9);
                last = r;
            }
        }

        #[test]
        fn warp_mask_stays_binary(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Mask::from_bits(6, 5, (0..30).map(|_| rng.random_bool(0.5)).collect()).unwrap();
            let d = DeformationField::from_fn(6, 5, |_, _| [rng_free(seed, 0), rng_free(seed, 1)]);
            let w = warp_mask(&m, &d).unwrap();
            prop_assert_eq!(w.bits().len(), 30);
            prop_assert!(w.count() <= 30);
        }
    }

    fn rng_free(seed: u64, k: u64) -> f64 {
        ((seed * 31 + k * 17) % 7) as f64 - 3.0
    }
}
