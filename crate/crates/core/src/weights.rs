//! Learned parameters and architecture hyperparameters.
//!
//! On disk an archive is `RWA1`:
//!
//! ```text
//! "RWA1" | u32 LE manifest length | UTF-8 JSON manifest | f32 LE payloads
//! ```
//!
//! The JSON manifest holds the hyperparameters and an ordered list of
//! `{name, shape}` descriptors; payloads follow in descriptor order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::numkit::Tensor;

pub const MAGIC: &[u8; 4] = b"RWA1";

/// Architecture and matching hyperparameters stored alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub c_coarse: usize,
    pub c_fine: usize,
    /// Number of global-local attention blocks.
    pub n_coarse: usize,
    /// Self/cross attention rounds in the fine stage.
    pub n_fine: usize,
    /// Query block side (cells).
    pub block_side: usize,
    /// Sampled key/value block side (cells).
    pub sample_side: usize,
    /// Sampling span in units of the predicted standard deviation.
    pub span: f64,
    pub heads: usize,
    pub theta: f64,
    /// Fine window side (fine cells, odd).
    pub window: usize,
    pub tau_init: f64,
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            c_coarse: 64,
            c_fine: 32,
            n_coarse: 4,
            n_fine: 1,
            block_side: 4,
            sample_side: 8,
            span: 3.0,
            heads: 4,
            theta: 0.2,
            window: 25,
            tau_init: 1.0 / 8.0,
            alpha: 0.25,
            lambda: 0.2,
        }
    }
}

impl Manifest {
    /// The small configuration used for gradient checks and toy training.
    pub fn toy() -> Self {
        Self {
            c_coarse: 8,
            c_fine: 8,
            n_coarse: 2,
            n_fine: 1,
            heads: 2,
            window: 5,
            tau_init: 1.0 / (8f64).sqrt(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.c_coarse == 0 || self.c_fine == 0 {
            return fail("channel counts must be positive".into());
        }
        if self.c_coarse % 2 != 0 {
            return fail(format!("coarse channels must be even, got {}", self.c_coarse));
        }
        if self.heads == 0 || self.c_coarse % self.heads != 0 {
            return fail(format!("{} heads do not divide {} channels", self.heads, self.c_coarse));
        }
        if 4 * self.heads > self.c_coarse {
            return fail("flow head needs 4·heads ≤ coarse channels".into());
        }
        if self.block_side == 0 || self.sample_side == 0 {
            return fail("block sides must be positive".into());
        }
        if !(self.span > 0.0) {
            return fail(format!("span must be positive, got {}", self.span));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return fail(format!("theta must lie in (0, 1), got {}", self.theta));
        }
        if self.window < 3 || self.window % 2 == 0 {
            return fail(format!("window must be odd and ≥ 3, got {}", self.window));
        }
        if !(self.tau_init > 0.0) {
            return fail("tau must be positive".into());
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        Ok(())
    }
}

pub const CONV_BIAS_STD: f64 = 0.5;
pub const HEAD_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]

enum Init {
    /// Normal with std `1/sqrt(fan_in)`.
    Fan(usize),
    /// Fan-in normal scaled by [`HEAD_GAIN`], so a fresh flow head starts
    /// near the identity flow with unit σ.
    Head(usize),
    Zeros,
    /// Normal with std [`CONV_BIAS_STD`]; keeps per-pixel channel variance
    /// away from zero on flat input so normalisation stays well conditioned.
    Bias,
    Ones,
    Tau,
}

fn attn(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: usize) {
    for p in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.{p}.w"), vec![c, c], Init::Fan(c)));
        // A key bias shifts every logit of a query equally, so softmax
        // cancels it.
        if p != "k" {
            out.push((format!("{prefix}.{p}.b"), vec![c], Init::Zeros));
        }
    }
}

fn conv(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, k: usize, cin: usize, cout: usize) {
    out.push((format!("{name}.w"), vec![k, k, cin, cout], Init::Fan(k * k * cin)));
    out.push((format!("{name}.b"), vec![cout], Init::Bias));
}

fn norm(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, c: usize) {
    out.push((format!("{name}.g"), vec![c], Init::Ones));
    out.push((format!("{name}.b"), vec![c], Init::Zeros));
}

fn catalogue_with_init(m: &Manifest) -> Vec<(String, Vec<usize>, Init)> {
    let (cc, cf) = (m.c_coarse, m.c_fine);
    let mut out = Vec::new();
    conv(&mut out, "bb.stem", 3, 1, cf);
    norm(&mut out, "bb.stem_norm", cf);
    let stage_ch = [(cf, cf), (cf, 2 * cf), (2 * cf, cc)];
    for (s, &(cin, cout)) in stage_ch.iter().enumerate() {
        let s = s + 1;
        if s > 1 {
            conv(&mut out, &format!("bb.s{s}.down"), 3, cin, cout);
            norm(&mut out, &format!("bb.s{s}.down_norm"), cout);
        }
        conv(&mut out, &format!("bb.s{s}.res1"), 3, cout, cout);
        norm(&mut out, &format!("bb.s{s}.res_norm"), cout);
        conv(&mut out, &format!("bb.s{s}.res2"), 3, cout, cout);
    }
    conv(&mut out, "bb.fpn.lat3", 1, cc, cc);
    conv(&mut out, "bb.fpn.lat2", 1, 2 * cf, cc);
    conv(&mut out, "bb.fpn.smooth2", 3, cc, cf);
    conv(&mut out, "bb.fpn.lat1", 1, cf, cf);
    conv(&mut out, "bb.fpn.smooth1", 3, cf, cf);

    attn(&mut out, "init.attn", cc);
    for i in 0..m.n_coarse {
        let p = format!("gla{i}");
        out.push((format!("{p}.flow.w"), vec![4 * m.heads, 4], Init::Head(4 * m.heads)));
        out.push((format!("{p}.flow.b"), vec![4], Init::Zeros));
        for branch in ["global", "local16", "local8"] {
            attn(&mut out, &format!("{p}.{branch}"), cc);
        }
        norm(&mut out, &format!("{p}.ffn.norm"), 4 * cc);
        out.push((format!("{p}.ffn.fc1.w"), vec![4 * cc, 2 * cc], Init::Fan(4 * cc)));
        out.push((format!("{p}.ffn.fc1.b"), vec![2 * cc], Init::Zeros));
        out.push((format!("{p}.ffn.fc2.w"), vec![2 * cc, cc], Init::Fan(2 * cc)));
        out.push((format!("{p}.ffn.fc2.b"), vec![cc], Init::Zeros));
    }
    out.push(("match.tau".into(), vec![1], Init::Tau));
    for i in 0..m.n_fine {
        for kind in ["self", "cross"] {
            let p = format!("fine{i}.{kind}");
            norm(&mut out, &format!("{p}.norm"), cf);
            attn(&mut out, &p, cf);
        }
    }
    out
}

/// Every tensor the configured architecture needs, in archive order.
pub fn catalogue(m: &Manifest) -> Vec<(String, Vec<usize>)> {
    catalogue_with_init(m).into_iter().map(|(n, s, _)| (n, s)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightArchive {
    manifest: Manifest,
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyper: Manifest,
    tensors: Vec<Descriptor>,
}

impl WeightArchive {
    pub fn from_tensors(manifest: Manifest, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let index = tensors.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        let a = Self { manifest, tensors, index };
        a.validate()?;
        Ok(a)
    }

    /// Fresh weights: scaled normal for projections, identity norms,
    /// zero biases, and `tau_init` for the correlation temperature.
    pub fn random(manifest: Manifest, seed: u64) -> Result<Self> {
        manifest.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        let tensors = catalogue_with_init(&manifest)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Fan(fan) => {
                        let s = 1.0 / (fan as f64).sqrt();
                        (0..n).map(|_| std_normal.sample(&mut rng) * s).collect()
                    }
                    Init::Head(fan) => {
                        let s = HEAD_GAIN / (fan as f64).sqrt();
                        (0..n).map(|_| std_normal.sample(&mut rng) * s).collect()
                    }
                    Init::Zeros => vec![0.0; n],
                    Init::Bias => (0..n).map(|_| std_normal.sample(&mut rng) * CONV_BIAS_STD).collect(),
                    Init::Ones => vec![1.0; n],
                    Init::Tau => vec![manifest.tau_init; n],
                };
                (name, Tensor::new(shape, data).expect("catalogue shape"))
            })
            .collect();
        Self::from_tensors(manifest, tensors)
    }

    /// Checks that every required tensor exists with its expected shape.
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        for (name, shape) in catalogue(&self.manifest) {
            let t = self.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Archive(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        Ok(())
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Replaces hyperparameters that do not affect tensor shapes.
    pub fn set_runtime(&mut self, theta: f64, window: usize, lambda: f64) -> Result<()> {
        let mut m = self.manifest.clone();
        m.theta = theta;
        m.window = window;
        m.lambda = lambda;
        m.validate()?;
        self.manifest = m;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i].1)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.tensors[i].1),
            None => Err(Error::MissingTensor(name.to_string())),
        }
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    /// Zeroes every tensor whose name ends with one of `suffixes`.
    pub fn zero_where(&mut self, pred: impl Fn(&str) -> bool) {
        for (name, t) in &mut self.tensors {
            if pred(name) {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            hyper: self.manifest.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| Descriptor { name: n.clone(), shape: t.shape().to_vec() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u32).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &self.tensors {
            let mut buf = Vec::with_capacity(4 * t.len());
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Archive("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(Error::Archive(format!("bad magic {magic:?}")));
        }
        let mut len = [0u8; 4];
        r.read_exact(&mut len).map_err(|_| Error::Archive("truncated header".into()))?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut json).map_err(|_| Error::Archive("truncated manifest".into()))?;
        let header: Header = serde_json::from_slice(&json)
            .map_err(|e| Error::Archive(format!("manifest is not valid JSON: {e}")))?;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for d in header.tensors {
            let n: usize = d.shape.iter().product();
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)
                .map_err(|_| Error::Archive(format!("truncated payload for `{}`", d.name)))?;
            let data = buf
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            tensors.push((d.name, Tensor::new(d.shape, data)?));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(Error::Archive(format!("{} trailing bytes after payload", rest.len())));
        }
        Self::from_tensors(header.hyper, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Rounds every value to `f32`, matching what a save/load cycle yields.
    pub fn quantize_f32(&mut self) {
        for (_, t) in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Archive tensors bound to graph leaves.
#[derive(Debug, Clone)]
pub struct Params {
    ids: HashMap<String, NodeId>,
}

impl Params {
    /// Binds every archive tensor; `trainable` decides whether the leaves
    /// receive gradients.
    pub fn bind(g: &mut Graph, archive: &WeightArchive, trainable: bool) -> Self {
        let ids = archive
            .tensors()
            .iter()
            .map(|(n, t)| {
                let id = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), id)
            })
            .collect();
        Self { ids }
    }

    /// Binds only the tensors whose names satisfy `keep`.
    pub fn bind_filtered(
        g: &mut Graph,
        archive: &WeightArchive,
        trainable: bool,
        keep: impl Fn(&str) -> bool,
    ) -> Self {
        let ids = archive
            .tensors()
            .iter()
            .filter(|(n, _)| keep(n))
            .map(|(n, t)| {
                let id = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (n.clone(), id)
            })
            .collect();
        Self { ids }
    }

    /// Panics on unknown names; archives are validated before binding.
    pub fn get(&self, name: &str) -> NodeId {
        *self.ids.get(name).unwrap_or_else(|| panic!("unbound tensor `{name}`"))
    }

    pub fn id(&self, name: &str) -> Option<NodeId> {
        self.ids.get(name).copied()
    }
}
