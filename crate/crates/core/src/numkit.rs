//! Dense tensor kernels shared by every stage of the pipeline.
//!
//! Everything here is a pure function over row-major `f64` buffers. Spatial
//! tensors use `[H, W, C]` layout; the matrix kernels treat the trailing axis
//! as columns. Summation order is fixed (left to right over the reduced axis)
//! so results are bitwise reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![v; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for r in rows {
            assert_eq!(r.len(), n, "ragged rows");
            data.extend_from_slice(r);
        }
        Self { shape: vec![m, n], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the trailing axis (the "channel" or column count).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when the tensor is viewed as `[len / cols, cols]`.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose2(&self) -> Result<Self> {
        let (m, n) = dims2(self)?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self { shape: vec![n, m], data: out })
    }
}

fn dims2(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => Err(Error::Dimension(format!("expected a matrix, got shape {s:?}"))),
    }
}

fn dims3(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::Dimension(format!("expected [H, W, C], got shape {s:?}"))),
    }
}

/// Dot product accumulated in twice the working precision (error-free
/// product via FMA plus compensated summation).
#[derive(Debug, Clone, Copy, Default)]
pub struct Dot2 {
    hi: f64,
    lo: f64,
}

impl Dot2 {
    pub fn add(&mut self, a: f64, b: f64) {
        let p = a * b;
        let pe = a.mul_add(b, -p);
        let s = self.hi + p;
        let z = s - self.hi;
        let se = (self.hi - (s - z)) + (p - z);
        self.hi = s;
        self.lo += pe + se;
    }

    pub fn value(self) -> f64 {
        self.hi + self.lo
    }
}

/// Standard matrix product with a fixed left-to-right accumulation over `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a)?;
    let (k2, n) = dims2(b)?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {m}x{k} · {k2}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a)?;
    let (n, k2) = dims2(b)?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt inner dimensions disagree: {m}x{k} · ({n}x{k2})ᵀ"
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

pub(crate) fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax over the trailing axis, stabilised by max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let n = x.cols();
    let mut out = vec![0.0; x.len()];
    if n > 0 {
        for (src, dst) in x.data.chunks(n).zip(out.chunks_mut(n)) {
            softmax_slice(src, dst);
        }
    }
    Tensor { shape: x.shape.clone(), data: out }
}

/// Bilinear interpolation weights for a point on an `h × w` grid with
/// border clamping. Returns `[(flat index, weight); 4]`.
pub(crate) fn bilinear_taps(h: usize, w: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    [
        (y0 * w + x0, (1.0 - fx) * (1.0 - fy)),
        (y0 * w + x1, fx * (1.0 - fy)),
        (y1 * w + x0, (1.0 - fx) * fy),
        (y1 * w + x1, fx * fy),
    ]
}

/// Samples `src` (`[H, W, C]`) at real `(x, y)` coordinates. Integer
/// coordinates reproduce source values exactly; outside points clamp.
pub fn bilinear_sample(src: &Tensor, pts: &[(f64, f64)]) -> Result<Tensor> {
    let (h, w, c) = dims3(src)?;
    if h == 0 || w == 0 {
        return Err(Error::Dimension("cannot sample an empty grid".into()));
    }
    let mut out = vec![0.0; pts.len() * c];
    for (n, &(x, y)) in pts.iter().enumerate() {
        let dst = &mut out[n * c..(n + 1) * c];
        for (idx, wgt) in bilinear_taps(h, w, x, y) {
            if wgt == 0.0 {
                continue;
            }
            let s = &src.data[idx * c..(idx + 1) * c];
            for (d, &v) in dst.iter_mut().zip(s) {
                *d += wgt * v;
            }
        }
    }
    Ok(Tensor { shape: vec![pts.len(), c], data: out })
}

/// 2-D convolution (cross-correlation) on `[H, W, Cin]` with a
/// `[kh, kw, Cin, Cout]` kernel, zero padding, and a common stride.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (h, w, cin) = dims3(x)?;
    let (kh, kw, kcin, cout) = match kernel.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => return Err(Error::Dimension(format!("conv kernel must be 4-D, got {s:?}"))),
    };
    if kcin != cin {
        return Err(Error::Dimension(format!(
            "conv expects {kcin} input channels, got {cin}"
        )));
    }
    if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Dimension("conv window larger than padded input".into()));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = &x.data[(iy as usize * w + ix as usize) * cin..][..cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, &v) in src.iter().enumerate() {
                        let krow = &kernel.data[kbase + ci * cout..kbase + (ci + 1) * cout];
                        for (d, &k) in dst.iter_mut().zip(krow) {
                            *d += v * k;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor { shape: vec![oh, ow, cout], data: out })
}

/// Non-overlapping `k × k` mean pooling. Dimensions must divide by `k`.
pub fn avgpool2d(x: &Tensor, k: usize) -> Result<Tensor> {
    let (h, w, c) = dims3(x)?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Dimension(format!("{h}x{w} map is not divisible by pool size {k}")));
    }
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; oh * ow * c];
    let norm = 1.0 / (k * k) as f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            for dy in 0..k {
                for dx in 0..k {
                    let idx = (oy * k + dy) * w + ox * k + dx;
                    for (d, &v) in dst.iter_mut().zip(&x.data[idx * c..(idx + 1) * c]) {
                        *d += v;
                    }
                }
            }
            for d in dst.iter_mut() {
                *d *= norm;
            }
        }
    }
    Ok(Tensor { shape: vec![oh, ow, c], data: out })
}

/// Source coordinate for output index `i` of a 2× upsample (half-pixel
/// centres, so output pixel centres land between source pixel centres).
pub(crate) fn upsample_src_coord(i: usize) -> f64 {
    (i as f64 + 0.5) / 2.0 - 0.5
}

/// Bilinear 2× upsampling with half-pixel centres and border clamping.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (h, w, c) = dims3(x)?;
    let mut pts = Vec::with_capacity(4 * h * w);
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            pts.push((upsample_src_coord(ox), upsample_src_coord(oy)));
        }
    }
    bilinear_sample(x, &pts)?.reshape(&[2 * h, 2 * w, c])
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Normalises every row (cell) over the trailing channel axis, then applies
/// per-channel gain and bias.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> Result<Tensor> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(Error::Dimension(format!(
            "layer_norm over {c} channels got gain {} / bias {}",
            gain.len(),
            bias.len()
        )));
    }
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data.chunks(c).zip(out.chunks_mut(c)) {
        let mean = src.iter().sum::<f64>() / c as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        for i in 0..c {
            dst[i] = (src[i] - mean) * rstd * gain[i] + bias[i];
        }
    }
    Ok(Tensor { shape: x.shape.clone(), data: out })
}
