//! Coarse feature interaction with global-local attention.
//!
//! The interaction is cross-attention only. An initializer attends at 1/32
//! resolution and adds the result back onto positionally encoded stride-8
//! features. Each following block predicts a Gaussian flow per cell from
//! its own features and runs three cross-attention branches:
//!
//! * global: full attention between the 1/32 pooled maps,
//! * local at 1/16 and 1/8: the query map is cut into `S1 × S1` blocks, and
//!   each block attends to an `S2 × S2` grid of keys sampled from the other
//!   map inside a window centred on the block's mean flow and `r·σ` wide.
//!
//! The messages and the input are fused by a residual feed-forward layer.
//! Both directions share one set of weights; the second direction is the
//! first with the inputs swapped.
//!
//! Flow coordinates are in cell units of the map they live on: a zero flow
//! head maps every cell onto its own index with unit standard deviation.

use std::sync::Arc;

use crate::autograd::{Graph, NodeId, RowMap};
use crate::backbone::{FeatureMap, COARSE_STRIDE};
use crate::error::{Error, Result};
use crate::layers::{self, key_proj, linear};
use crate::numkit::Tensor;
use crate::weights::{Manifest, Params, WeightArchive};

/// Per-cell Gaussian flow `(u_x, u_y, σ_x, σ_y)` at stride 8, in cell units.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowMap {
    pub height: usize,
    pub width: usize,
    pub cells: Vec<[f64; 4]>,
}

impl FlowMap {
    pub fn at(&self, x: usize, y: usize) -> [f64; 4] {
        self.cells[y * self.width + x]
    }

    /// Rebuilds a flow map from a graph node holding `(u_x, u_y, ln σ_x, ln σ_y)`.
    pub(crate) fn from_log_node(t: &Tensor, height: usize, width: usize) -> Self {
        let bound = 4.0 * height.max(width) as f64;
        let cells = (0..t.rows())
            .map(|i| {
                let r = t.row(i);
                [r[0].clamp(-bound, bound), r[1].clamp(-bound, bound), r[2].exp(), r[3].exp()]
            })
            .collect();
        Self { height, width, cells }
    }

    pub(crate) fn to_tensor(&self) -> Tensor {
        let data = self.cells.iter().flat_map(|c| c.iter().copied()).collect();
        Tensor::new(vec![self.cells.len(), 4], data).expect("flow tensor")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlaConfig {
    pub n_blocks: usize,
    pub block_side: usize,
    pub sample_side: usize,
    pub span: f64,
    pub heads: usize,
}

impl From<&Manifest> for GlaConfig {
    fn from(m: &Manifest) -> Self {
        Self {
            n_blocks: m.n_coarse,
            block_side: m.block_side,
            sample_side: m.sample_side,
            span: m.span,
            heads: m.heads,
        }
    }
}

impl GlaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_side == 0 || self.sample_side == 0 || self.heads == 0 {
            return Err(Error::Config("block sides and head count must be positive".into()));
        }
        if !(self.span > 0.0) {
            return Err(Error::Config(format!("span must be positive, got {}", self.span)));
        }
        Ok(())
    }

    /// Largest block side not above `S1` that tiles an `h × w` map.
    pub fn effective_block(&self, h: usize, w: usize) -> usize {
        (1..=self.block_side.min(h).min(w)).rev().find(|s| h % s == 0 && w % s == 0).unwrap_or(1)
    }
}

/// Fixed 2-D sinusoidal encoding on an `h × w` grid.
///
/// Channel pairs alternate between the x and y axes; pair `k` carries
/// `(sin, cos)` of the coordinate at frequency `10000^(-m / n)` with
/// `m = k / 2`. Coordinates are absolute cell positions (times `scale` for
/// pooled grids, measured at cell centres) and are never normalised by the
/// map size.
pub fn positional_encoding(h: usize, w: usize, c: usize, scale: usize) -> Result<Tensor> {
    if c % 2 != 0 {
        return Err(Error::Config(format!("positional encoding needs even channels, got {c}")));
    }
    let pairs = c / 2;
    let nfreq = pairs.div_ceil(2).max(1);
    let centre = (scale as f64 - 1.0) / 2.0;
    let mut data = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let px = (x * scale) as f64 + centre;
            let py = (y * scale) as f64 + centre;
            let cell = &mut data[(y * w + x) * c..(y * w + x + 1) * c];
            for k in 0..pairs {
                let m = k / 2;
                let freq = (-(10000f64.ln()) * m as f64 / nfreq as f64).exp();
                let pos = if k % 2 == 0 { px } else { py };
                cell[2 * k] = (pos * freq).sin();
                cell[2 * k + 1] = (pos * freq).cos();
            }
        }
    }
    Tensor::new(vec![h * w, c], data)
}

/// Adds the fixed encoding to a feature map.
pub fn positional_encode(f: &FeatureMap) -> Result<FeatureMap> {
    let enc = positional_encoding(f.height, f.width, f.channels, 1)?;
    let data = f.data.data().iter().zip(enc.data()).map(|(a, b)| a + b).collect();
    FeatureMap::new(f.stride, Tensor::new(f.data.shape().to_vec(), data)?)
}

fn add_encoding(g: &mut Graph, x: NodeId, h: usize, w: usize, scale: usize) -> NodeId {
    let c = g.value(x).cols();
    let enc = g.constant(positional_encoding(h, w, c, scale).expect("validated channels"));
    g.add(x, enc)
}

/// A flattened `[h·w, C]` map on a graph.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GridNode {
    pub id: NodeId,
    pub h: usize,
    pub w: usize,
}

pub(crate) fn initializer_graph(
    g: &mut Graph,
    p: &Params,
    fa: GridNode,
    fb: GridNode,
    heads: usize,
) -> (GridNode, GridNode) {
    let pool = |g: &mut Graph, f: GridNode| {
        let pooled = layers::avgpool(g, f.id, f.h, f.w, 4);
        add_encoding(g, pooled, f.h / 4, f.w / 4, 4)
    };
    let pa = pool(g, fa);
    let pb = pool(g, fb);
    let one = |g: &mut Graph, f: GridNode, q: NodeId, kv: NodeId| {
        let msg = layers::cross_message(g, p, "init.attn", q, kv, heads);
        let up = layers::upsample(g, msg, f.h / 4, f.w / 4, 2);
        let enc = add_encoding(g, f.id, f.h, f.w, 1);
        GridNode { id: g.add(enc, up), ..f }
    };
    let oa = one(g, fa, pa, pb);
    let ob = one(g, fb, pb, pa);
    (oa, ob)
}

/// Flow head: a linear map of the first `4·heads` channels, offset so a
/// zero head yields identity flow. Output columns are
/// `(u_x, u_y, ln σ_x, ln σ_y)`.
pub(crate) fn flow_head_graph(
    g: &mut Graph,
    p: &Params,
    prefix: &str,
    f: GridNode,
    heads: usize,
) -> NodeId {
    let part = g.slice_cols(f.id, 0, 4 * heads);
    let raw = linear(g, p, prefix, part);
    let mut own = Vec::with_capacity(f.h * f.w * 4);
    for y in 0..f.h {
        for x in 0..f.w {
            own.extend_from_slice(&[x as f64, y as f64, 0.0, 0.0]);
        }
    }
    let own = g.constant(Tensor::new(vec![f.h * f.w, 4], own).expect("own coords"));
    g.add(raw, own)
}

/// Converts `(u, ln σ)` flow columns to `(u, σ)`.
fn flow_with_sigma(g: &mut Graph, flow: NodeId) -> NodeId {
    let u = g.slice_cols(flow, 0, 2);
    let ls = g.slice_cols(flow, 2, 4);
    let s = g.exp(ls);
    g.concat_cols(&[u, s])
}

/// Flow-guided block attention. `flow` holds `(u, σ)` per query cell in the
/// cell units of `kv`. Returns the projected message in raster order.
pub(crate) fn local_attention_graph(
    g: &mut Graph,
    p: &Params,
    prefix: &str,
    q: GridNode,
    kv: GridNode,
    flow: NodeId,
    cfg: &GlaConfig,
) -> NodeId {
    let s1 = cfg.effective_block(q.h, q.w);
    let s2 = cfg.sample_side;
    let (bh, bw) = (q.h / s1, q.w / s1);
    let nb = bh * bw;
    let per = s2 * s2;

    let block_mean = g.row_map(flow, Arc::new(RowMap::avgpool(q.h, q.w, s1)));
    let rep_idx: Vec<usize> = (0..nb).flat_map(|b| std::iter::repeat_n(b, per)).collect();
    let rep = g.gather_rows(block_mean, rep_idx);
    let centre = g.slice_cols(rep, 0, 2);
    let sigma = g.slice_cols(rep, 2, 4);
    let step = |a: usize| if s2 == 1 { 0.0 } else { cfg.span * (a as f64 / (s2 - 1) as f64 - 0.5) };
    let mut offs = Vec::with_capacity(nb * per * 2);
    for _ in 0..nb {
        for a in 0..s2 {
            for b in 0..s2 {
                offs.push(step(b));
                offs.push(step(a));
            }
        }
    }
    let offs = g.constant(Tensor::new(vec![nb * per, 2], offs).expect("offsets"));
    let spread = g.mul(sigma, offs);
    let pts = g.add(centre, spread);

    let c = g.value(kv.id).cols();
    let kv_img = g.reshape(kv.id, &[kv.h, kv.w, c]);
    let sampled = g.bilinear(kv_img, pts);

    let qp = linear(g, p, &format!("{prefix}.q"), q.id);
    let kp = key_proj(g, p, prefix, sampled);
    let vp = linear(g, p, &format!("{prefix}.v"), sampled);

    let mut msgs = Vec::with_capacity(nb);
    let mut order = Vec::with_capacity(q.h * q.w);
    for by in 0..bh {
        for bx in 0..bw {
            let b = by * bw + bx;
            let cells: Vec<usize> = (0..s1)
                .flat_map(|dy| (0..s1).map(move |dx| (by * s1 + dy) * q.w + bx * s1 + dx))
                .collect();
            order.extend_from_slice(&cells);
            let qb = g.gather_rows(qp, cells);
            let rows: Vec<usize> = (b * per..(b + 1) * per).collect();
            let kb = g.gather_rows(kp, rows.clone());
            let vb = g.gather_rows(vp, rows);
            msgs.push(layers::multi_head(g, qb, kb, vb, cfg.heads));
        }
    }
    let stacked = if msgs.len() == 1 { msgs[0] } else { g.concat_rows(&msgs) };
    let mut inverse = vec![0; order.len()];
    for (pos, &cell) in order.iter().enumerate() {
        inverse[cell] = pos;
    }
    let raster = g.gather_rows(stacked, inverse);
    linear(g, p, &format!("{prefix}.o"), raster)
}

/// One direction of a block: updated `x` and its `(u, ln σ)` flow.
fn gla_direction(
    g: &mut Graph,
    p: &Params,
    idx: usize,
    x: GridNode,
    y: GridNode,
    cfg: &GlaConfig,
) -> (NodeId, NodeId) {
    let pre = format!("gla{idx}");
    let flow = flow_head_graph(g, p, &format!("{pre}.flow"), x, cfg.heads);
    let flow_s = flow_with_sigma(g, flow);

    let xg = layers::avgpool(g, x.id, x.h, x.w, 4);
    let yg = layers::avgpool(g, y.id, y.h, y.w, 4);
    let mg = layers::cross_message(g, p, &format!("{pre}.global"), xg, yg, cfg.heads);
    let mg = layers::upsample(g, mg, x.h / 4, x.w / 4, 2);

    let x16 = GridNode { id: layers::avgpool(g, x.id, x.h, x.w, 2), h: x.h / 2, w: x.w / 2 };
    let y16 = GridNode { id: layers::avgpool(g, y.id, y.h, y.w, 2), h: y.h / 2, w: y.w / 2 };
    let f16 = layers::avgpool(g, flow_s, x.h, x.w, 2);
    let f16 = g.scale(f16, 0.5);
    let shift = Tensor::new(
        vec![x16.h * x16.w, 4],
        std::iter::repeat_n([-0.25, -0.25, 0.0, 0.0], x16.h * x16.w).flatten().collect(),
    )
    .expect("shift");
    let shift = g.constant(shift);
    let f16 = g.add(f16, shift);
    let m16 = local_attention_graph(g, p, &format!("{pre}.local16"), x16, y16, f16, cfg);
    let m16 = layers::upsample(g, m16, x16.h, x16.w, 1);

    let m8 = local_attention_graph(g, p, &format!("{pre}.local8"), x, y, flow_s, cfg);

    let cat = g.concat_cols(&[x.id, mg, m16, m8]);
    let n = g.layer_norm(cat, p.get(&format!("{pre}.ffn.norm.g")), p.get(&format!("{pre}.ffn.norm.b")));
    let h = linear(g, p, &format!("{pre}.ffn.fc1"), n);
    let h = g.silu(h);
    let out = linear(g, p, &format!("{pre}.ffn.fc2"), h);
    (g.add(x.id, out), flow)
}

pub(crate) struct BlockOut {
    pub fa: GridNode,
    pub fb: GridNode,
    pub flow_a: NodeId,
    pub flow_b: NodeId,
}

pub(crate) fn gla_block_graph(
    g: &mut Graph,
    p: &Params,
    idx: usize,
    fa: GridNode,
    fb: GridNode,
    cfg: &GlaConfig,
) -> BlockOut {
    let (a, flow_a) = gla_direction(g, p, idx, fa, fb, cfg);
    let (b, flow_b) = gla_direction(g, p, idx, fb, fa, cfg);
    BlockOut { fa: GridNode { id: a, ..fa }, fb: GridNode { id: b, ..fb }, flow_a, flow_b }
}

pub(crate) struct InteractNodes {
    pub fa: GridNode,
    pub fb: GridNode,
    pub flows_a: Vec<NodeId>,
    pub flows_b: Vec<NodeId>,
}

pub(crate) fn coarse_interact_graph(
    g: &mut Graph,
    p: &Params,
    fa: GridNode,
    fb: GridNode,
    cfg: &GlaConfig,
) -> InteractNodes {
    let (mut a, mut b) = initializer_graph(g, p, fa, fb, cfg.heads);
    let mut flows_a = Vec::with_capacity(cfg.n_blocks);
    let mut flows_b = Vec::with_capacity(cfg.n_blocks);
    for i in 0..cfg.n_blocks {
        let out = gla_block_graph(g, p, i, a, b, cfg);
        a = out.fa;
        b = out.fb;
        flows_a.push(out.flow_a);
        flows_b.push(out.flow_b);
    }
    InteractNodes { fa: a, fb: b, flows_a, flows_b }
}

fn check_coarse(f: &FeatureMap, c: usize) -> Result<()> {
    if f.channels != c {
        return Err(Error::Dimension(format!("expected {c} channels, got {}", f.channels)));
    }
    if f.height == 0 || f.width == 0 || f.height % 4 != 0 || f.width % 4 != 0 {
        return Err(Error::Dimension(format!(
            "coarse map {}x{} must tile by 4 (pad the image to a multiple of 32)",
            f.height, f.width
        )));
    }
    Ok(())
}

fn bind(g: &mut Graph, f: &FeatureMap) -> GridNode {
    let t = f.data.clone().reshape(&[f.cells(), f.channels]).expect("flatten");
    GridNode { id: g.constant(t), h: f.height, w: f.width }
}

fn unbind(g: &Graph, n: GridNode) -> Result<FeatureMap> {
    let c = g.value(n.id).cols();
    FeatureMap::new(COARSE_STRIDE, g.value(n.id).clone().reshape(&[n.h, n.w, c])?)
}

pub fn initializer(
    fa: &FeatureMap,
    fb: &FeatureMap,
    weights: &WeightArchive,
) -> Result<(FeatureMap, FeatureMap)> {
    let m = weights.manifest();
    check_coarse(fa, m.c_coarse)?;
    check_coarse(fb, m.c_coarse)?;
    let mut g = Graph::new();
    let p = Params::bind(&mut g, weights, false);
    let (a, b) = (bind(&mut g, fa), bind(&mut g, fb));
    let (oa, ob) = initializer_graph(&mut g, &p, a, b, m.heads);
    Ok((unbind(&g, oa)?, unbind(&g, ob)?))
}

/// Flow predicted by block `block`'s head on `f`.
pub fn flow_head(f: &FeatureMap, weights: &WeightArchive, block: usize) -> Result<FlowMap> {
    let m = weights.manifest();
    if block >= m.n_coarse {
        return Err(Error::Config(format!("no block {block} in a {}-block model", m.n_coarse)));
    }
    check_coarse(f, m.c_coarse)?;
    let mut g = Graph::new();
    let p = Params::bind(&mut g, weights, false);
    let x = bind(&mut g, f);
    let flow = flow_head_graph(&mut g, &p, &format!("gla{block}.flow"), x, m.heads);
    Ok(FlowMap::from_log_node(g.value(flow), f.height, f.width))
}

/// Flow-guided local cross-attention from `q_map` onto `kv_map` using the
/// projections stored under `prefix` (e.g. `gla0.local8`).
pub fn local_cross_attention(
    q_map: &FeatureMap,
    kv_map: &FeatureMap,
    flow: &FlowMap,
    cfg: &GlaConfig,
    weights: &WeightArchive,
    prefix: &str,
) -> Result<Tensor> {
    cfg.validate()?;
    if q_map.channels != kv_map.channels {
        return Err(Error::Dimension("query and key maps differ in channels".into()));
    }
    if flow.height != q_map.height || flow.width != q_map.width {
        return Err(Error::Dimension("flow grid must match the query map".into()));
    }
    if q_map.channels % cfg.heads != 0 {
        return Err(Error::Config("heads must divide channels".into()));
    }
    weights.get(&format!("{prefix}.q.w"))?;
    let mut g = Graph::new();
    let p = Params::bind(&mut g, weights, false);
    let q = GridNode {
        id: g.constant(q_map.data.clone().reshape(&[q_map.cells(), q_map.channels])?),
        h: q_map.height,
        w: q_map.width,
    };
    let kv = GridNode {
        id: g.constant(kv_map.data.clone().reshape(&[kv_map.cells(), kv_map.channels])?),
        h: kv_map.height,
        w: kv_map.width,
    };
    let fl = g.constant(flow.to_tensor());
    let m = local_attention_graph(&mut g, &p, prefix, q, kv, fl, cfg);
    Ok(g.value(m).clone())
}

#[derive(Debug, Clone)]
pub struct BlockResult {
    pub fa: FeatureMap,
    pub fb: FeatureMap,
    pub flow_a: FlowMap,
    pub flow_b: FlowMap,
}

pub fn gla_block(
    fa: &FeatureMap,
    fb: &FeatureMap,
    weights: &WeightArchive,
    block: usize,
) -> Result<BlockResult> {
    let m = weights.manifest();
    if block >= m.n_coarse {
        return Err(Error::Config(format!("no block {block} in a {}-block model", m.n_coarse)));
    }
    check_coarse(fa, m.c_coarse)?;
    check_coarse(fb, m.c_coarse)?;
    let cfg = GlaConfig::from(m);
    let mut g = Graph::new();
    let p = Params::bind(&mut g, weights, false);
    let (a, b) = (bind(&mut g, fa), bind(&mut g, fb));
    let out = gla_block_graph(&mut g, &p, block, a, b, &cfg);
    Ok(BlockResult {
        fa: unbind(&g, out.fa)?,
        fb: unbind(&g, out.fb)?,
        flow_a: FlowMap::from_log_node(g.value(out.flow_a), fa.height, fa.width),
        flow_b: FlowMap::from_log_node(g.value(out.flow_b), fb.height, fb.width),
    })
}

#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub fa: FeatureMap,
    pub fb: FeatureMap,
    pub flows_a: Vec<FlowMap>,
    pub flows_b: Vec<FlowMap>,
}

/// Initializer followed by every configured block.
pub fn coarse_interact(
    fa0: &FeatureMap,
    fb0: &FeatureMap,
    weights: &WeightArchive,
) -> Result<CoarseOutput> {
    let m = weights.manifest();
    check_coarse(fa0, m.c_coarse)?;
    check_coarse(fb0, m.c_coarse)?;
    let cfg = GlaConfig::from(m);
    let mut g = Graph::new();
    let p = Params::bind(&mut g, weights, false);
    let (a, b) = (bind(&mut g, fa0), bind(&mut g, fb0));
    let out = coarse_interact_graph(&mut g, &p, a, b, &cfg);
    Ok(CoarseOutput {
        fa: unbind(&g, out.fa)?,
        fb: unbind(&g, out.fb)?,
        flows_a: out
            .flows_a
            .iter()
            .map(|&f| FlowMap::from_log_node(g.value(f), fa0.height, fa0.width))
            .collect(),
        flows_b: out
            .flows_b
            .iter()
            .map(|&f| FlowMap::from_log_node(g.value(f), fb0.height, fb0.width))
            .collect(),
    })
}
