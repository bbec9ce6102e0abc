//! Ground-truth quantisation, the coarse / fine / flow training losses, a
//! finite-difference gradient check, and a plain gradient-descent loop.

use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Grads, NodeId};
use crate::backbone::{backbone_graph, check_padded, Image, COARSE_STRIDE};
use crate::coarse_gla::{coarse_interact_graph, FlowMap, GlaConfig, GridNode};
use crate::error::{Error, Result};
use crate::fine_refine::{
    coarse_cell_to_fine, fine_to_pixel, pixel_to_fine, refine_patches, scalar_var, window,
    CorrespondenceSet, FineConfig,
};
use crate::match_layer::dual_softmax_graph;
use crate::numkit::Tensor;
use crate::weights::{Params, WeightArchive};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Pixel coordinate to stride-8 cell units (cell centres are integers).
pub fn pixel_to_cell(v: f64) -> f64 {
    (v + 0.5) / COARSE_STRIDE as f64 - 0.5
}

pub fn cell_centre_pixel(c: usize) -> f64 {
    (COARSE_STRIDE * c) as f64 + (COARSE_STRIDE as f64 - 1.0) / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtPair {
    /// Flat A cell.
    pub i: usize,
    /// Flat B cell.
    pub j: usize,
    /// Unquantised A point, pixels.
    pub a: (f64, f64),
    /// Unquantised B point, pixels.
    pub b: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtMatches {
    pub pairs: Vec<GtPair>,
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
    /// Per A cell: matching B position in B's cell units.
    pub flow_a: Vec<Option<(f64, f64)>>,
    /// Per B cell: matching A position in A's cell units.
    pub flow_b: Vec<Option<(f64, f64)>>,
}

fn containing_cell(p: (f64, f64), grid: (usize, usize)) -> Option<usize> {
    let s = COARSE_STRIDE as f64;
    let (cx, cy) = ((p.0 / s).floor(), (p.1 / s).floor());
    if cx < 0.0 || cy < 0.0 || cx >= grid.1 as f64 || cy >= grid.0 as f64 {
        return None;
    }
    Some(cy as usize * grid.1 + cx as usize)
}

fn dist2_to_centre(p: (f64, f64), cell: usize, grid: (usize, usize)) -> f64 {
    let (cx, cy) = (cell_centre_pixel(cell % grid.1), cell_centre_pixel(cell / grid.1));
    (p.0 - cx).powi(2) + (p.1 - cy).powi(2)
}

/// Snaps both ends of every correspondence to stride-8 cells and makes the
/// result one-to-one. Within an A cell the point nearest the cell centre
/// wins; within a B cell the pair whose B point is nearest the centre wins,
/// ties going to the smaller A index. Points outside either grid are
/// dropped.
pub fn quantize_gt(corr: &CorrespondenceSet, grid_a: (usize, usize), grid_b: (usize, usize)) -> GtMatches {
    let mut by_a: Vec<Option<GtPair>> = vec![None; grid_a.0 * grid_a.1];
    for c in &corr.pairs {
        let (a, b) = ((c.xa, c.ya), (c.xb, c.yb));
        let (Some(i), Some(j)) = (containing_cell(a, grid_a), containing_cell(b, grid_b)) else {
            continue;
        };
        let cand = GtPair { i, j, a, b };
        match by_a[i] {
            Some(old) if dist2_to_centre(old.a, i, grid_a) <= dist2_to_centre(a, i, grid_a) => {}
            _ => by_a[i] = Some(cand),
        }
    }
    let mut by_b: Vec<Option<GtPair>> = vec![None; grid_b.0 * grid_b.1];
    for cand in by_a.into_iter().flatten() {
        let j = cand.j;
        match by_b[j] {
            Some(old) if dist2_to_centre(old.b, j, grid_b) <= dist2_to_centre(cand.b, j, grid_b) => {}
            _ => by_b[j] = Some(cand),
        }
    }
    let mut pairs: Vec<GtPair> = by_b.into_iter().flatten().collect();
    pairs.sort_by_key(|p| p.i);
    let mut flow_a = vec![None; grid_a.0 * grid_a.1];
    let mut flow_b = vec![None; grid_b.0 * grid_b.1];
    for p in &pairs {
        flow_a[p.i] = Some((pixel_to_cell(p.b.0), pixel_to_cell(p.b.1)));
        flow_b[p.j] = Some((pixel_to_cell(p.a.0), pixel_to_cell(p.a.1)));
    }
    GtMatches { pairs, grid_a, grid_b, flow_a, flow_b }
}

/// A loss value plus whether it fell back to zero for lack of terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub empty: bool,
}

impl LossValue {
    fn of(sum: f64, n: usize) -> Self {
        if n == 0 {
            Self { value: 0.0, empty: true }
        } else {
            Self { value: sum / n as f64, empty: false }
        }
    }
}

/// `−mean log P[i, j]` over the GT cells.
pub fn coarse_loss(p: &Tensor, gt: &GtMatches) -> Result<LossValue> {
    let (n, m) = (gt.grid_a.0 * gt.grid_a.1, gt.grid_b.0 * gt.grid_b.1);
    if p.rows() != n || p.cols() != m {
        return Err(Error::Dimension(format!("P is {}x{}, GT grids give {n}x{m}", p.rows(), p.cols())));
    }
    let sum: f64 = gt.pairs.iter().map(|q| -p.get2(q.i, q.j).ln()).sum();
    let out = LossValue::of(sum, gt.pairs.len());
    if out.empty {
        log::warn!("coarse loss has no ground-truth cells");
    }
    Ok(out)
}

/// Whether a target lies inside the `w`-window around a prediction; both
/// in pixels.
pub fn in_window(pred: (f64, f64), target: (f64, f64), w: usize) -> bool {
    let half = (w / 2) as f64 * 2.0;
    (pred.0 - target.0).abs() <= half && (pred.1 - target.1).abs() <= half
}

/// Mean of `‖ĵ' − ĵ'_gt‖ / σ²` in pixels over predictions whose A point
/// falls in a GT cell and whose target lies inside the window. Predictions
/// without a variance use `σ² = 1`.
pub fn fine_loss(pred: &CorrespondenceSet, gt: &GtMatches, w: usize) -> LossValue {
    let mut target = vec![None; gt.grid_a.0 * gt.grid_a.1];
    for p in &gt.pairs {
        target[p.i] = Some(p.b);
    }
    let (mut sum, mut n) = (0.0, 0);
    for p in &pred.pairs {
        let Some(Some(t)) = containing_cell((p.xa, p.ya), gt.grid_a).map(|i| target[i]) else {
            continue;
        };
        if !in_window((p.xb, p.yb), t, w) {
            continue;
        }
        let d = ((p.xb - t.0).powi(2) + (p.yb - t.1).powi(2)).sqrt();
        sum += d / p.var.unwrap_or(1.0);
        n += 1;
    }
    let out = LossValue::of(sum, n);
    if out.empty {
        log::warn!("fine loss: every pair was gated out");
    }
    out
}

/// Expanded Gaussian negative log-likelihood of one cell.
pub fn flow_nll(u: (f64, f64), sigma: (f64, f64), target: (f64, f64)) -> f64 {
    LOG_2PI
        + sigma.0.ln()
        + sigma.1.ln()
        + (target.0 - u.0).powi(2) / (2.0 * sigma.0 * sigma.0)
        + (target.1 - u.1).powi(2) / (2.0 * sigma.1 * sigma.1)
}

/// The same quantity as `−log` of the product of the two axis densities.
pub fn flow_nll_density(u: (f64, f64), sigma: (f64, f64), target: (f64, f64)) -> f64 {
    let dens = |m: f64, s: f64, x: f64| {
        let z = (x - m) / s;
        -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    -(dens(u.0, sigma.0, target.0) + dens(u.1, sigma.1, target.1))
}

fn flow_layer_loss(f: &FlowMap, targets: &[Option<(f64, f64)>]) -> Result<LossValue> {
    if f.cells.len() != targets.len() {
        return Err(Error::Dimension("flow map and GT grid differ".into()));
    }
    let (mut sum, mut n) = (0.0, 0);
    for (c, t) in f.cells.iter().zip(targets) {
        if let Some(t) = t {
            sum += flow_nll((c[0], c[1]), (c[2], c[3]), *t);
            n += 1;
        }
    }
    Ok(LossValue::of(sum, n))
}

/// Sum over layers and both directions of the per-layer mean NLL.
pub fn flow_loss(flows_a: &[FlowMap], flows_b: &[FlowMap], gt: &GtMatches) -> Result<LossValue> {
    let mut total = 0.0;
    let mut any = false;
    for f in flows_a {
        let l = flow_layer_loss(f, &gt.flow_a)?;
        total += l.value;
        any |= !l.empty;
    }
    for f in flows_b {
        let l = flow_layer_loss(f, &gt.flow_b)?;
        total += l.value;
        any |= !l.empty;
    }
    if !any {
        log::warn!("flow loss has no valid cells");
    }
    Ok(LossValue { value: total, empty: !any })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub coarse: f64,
    pub fine: f64,
    pub flow: f64,
    pub total: f64,
    pub alpha: f64,
}

pub fn total_loss(coarse: f64, fine: f64, flow: f64, alpha: f64) -> LossReport {
    LossReport { coarse, fine, flow, total: coarse + fine + alpha * flow, alpha }
}

/// Writes `step,L_c,L_f,L_flow,L_total` rows.
pub fn write_trace(trace: &[LossReport], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["step", "L_c", "L_f", "L_flow", "L_total"])?;
    for (k, r) in trace.iter().enumerate() {
        out.write_record([
            k.to_string(),
            format!("{:.9}", r.coarse),
            format!("{:.9}", r.fine),
            format!("{:.9}", r.flow),
            format!("{:.9}", r.total),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Two padded images and their quantised ground truth.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub a: Image,
    pub b: Image,
    pub gt: GtMatches,
}

impl TrainSample {
    pub fn new(a: Image, b: Image, corr: &CorrespondenceSet) -> Result<Self> {
        check_padded(&a)?;
        check_padded(&b)?;
        let s = COARSE_STRIDE;
        let gt = quantize_gt(corr, (a.height / s, a.width / s), (b.height / s, b.width / s));
        Ok(Self { a, b, gt })
    }
}

/// Values held fixed while differentiating: the `1/σ²` weights and the
/// window gating of each GT pair. Filled on first use.
#[derive(Debug, Clone, Default)]
pub struct LossContext {
    fine: Option<Vec<Option<f64>>>,
}

pub(crate) struct LossNodes {
    pub coarse: NodeId,
    pub fine: NodeId,
    pub flow: NodeId,
    pub total: NodeId,
    pub fine_empty: bool,
}

fn flow_nll_graph(g: &mut Graph, flow: NodeId, targets: &[Option<(f64, f64)>]) -> Option<NodeId> {
    let rows: Vec<usize> = (0..targets.len()).filter(|&k| targets[k].is_some()).collect();
    if rows.is_empty() {
        return None;
    }
    let n = rows.len() as f64;
    let t: Vec<f64> = rows.iter().flat_map(|&k| {
        let (x, y) = targets[k].expect("filtered");
        [x, y]
    }).collect();
    let t = g.constant(Tensor::new(vec![rows.len(), 2], t).expect("targets"));
    let sel = g.gather_rows(flow, rows);
    let u = g.slice_cols(sel, 0, 2);
    let ls = g.slice_cols(sel, 2, 4);
    let d = g.sub(t, u);
    let d2 = g.square(d);
    let inv = g.scale(ls, -2.0);
    let inv = g.exp(inv);
    let quad = g.mul(d2, inv);
    let quad = g.sum(quad);
    let quad = g.scale(quad, 0.5 / n);
    let logs = g.sum(ls);
    let logs = g.scale(logs, 1.0 / n);
    let l = g.add(quad, logs);
    Some(g.offset(l, LOG_2PI))
}

pub(crate) fn loss_graph(
    g: &mut Graph,
    p: &Params,
    weights: &WeightArchive,
    sample: &TrainSample,
    ctx: &mut LossContext,
) -> LossNodes {
    let m = weights.manifest();
    let gla = GlaConfig::from(m);
    let fine_cfg = FineConfig::from(m);
    let ba = backbone_graph(g, p, &sample.a);
    let bb = backbone_graph(g, p, &sample.b);
    let fa = GridNode { id: ba.coarse, h: ba.coarse_hw.0, w: ba.coarse_hw.1 };
    let fb = GridNode { id: bb.coarse, h: bb.coarse_hw.0, w: bb.coarse_hw.1 };
    let inter = coarse_interact_graph(g, p, fa, fb, &gla);

    let c = g.matmul_nt(inter.fa.id, inter.fb.id);
    let c = g.scale_by(c, p.get("match.tau"));
    let prob = dual_softmax_graph(g, c);
    let gt = &sample.gt;
    let ncols = gt.grid_b.0 * gt.grid_b.1;
    let coarse = if gt.pairs.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let idx = gt.pairs.iter().map(|q| q.i * ncols + q.j).collect();
        let pg = g.gather_elems(prob, idx);
        let lg = g.log(pg);
        let mean = g.mean(lg);
        g.scale(mean, -1.0)
    };

    let frozen = ctx.fine.is_some();
    let mut weights_used = Vec::with_capacity(gt.pairs.len());
    let mut terms = Vec::new();
    for (k, q) in gt.pairs.iter().enumerate() {
        let a = coarse_cell_to_fine(q.i % gt.grid_a.1, q.i / gt.grid_a.1);
        let b = coarse_cell_to_fine(q.j % gt.grid_b.1, q.j / gt.grid_b.1);
        let wa = window(ba.fine_hw.0, ba.fine_hw.1, a, fine_cfg.window);
        let wb = window(bb.fine_hw.0, bb.fine_hw.1, b, fine_cfg.window);
        let Some(centre) = wa.centre else {
            weights_used.push(None);
            continue;
        };
        let pa = g.row_map(ba.fine, Arc::new(wa.map));
        let pb = g.row_map(bb.fine, Arc::new(wb.map));
        let out = refine_patches(g, p, pa, centre, pb, &wb.positions, &fine_cfg);
        let e = g.value(out.expect).data().to_vec();
        let weight = if frozen {
            ctx.fine.as_ref().expect("frozen")[k]
        } else {
            let pred = (fine_to_pixel(e[0]), fine_to_pixel(e[1]));
            in_window(pred, q.b, fine_cfg.window).then(|| scalar_var(out.var).max(VAR_FLOOR))
        };
        weights_used.push(weight);
        if let Some(var) = weight {
            let t = g.constant(Tensor::new(vec![1, 2], vec![pixel_to_fine(q.b.0), pixel_to_fine(q.b.1)]).expect("t"));
            let d = g.sub(out.expect, t);
            let d2 = g.square(d);
            let s = g.sum(d2);
            let dist = g.sqrt(s);
            // Fine-grid distance times 2 is the pixel distance.
            terms.push(g.scale(dist, 2.0 / var));
        }
    }
    if !frozen {
        ctx.fine = Some(weights_used);
    }
    let fine_empty = terms.is_empty();
    let fine = if fine_empty {
        g.constant(Tensor::scalar(0.0))
    } else {
        let n = terms.len() as f64;
        let cat = g.concat_rows(&terms);
        let s = g.sum(cat);
        g.scale(s, 1.0 / n)
    };

    let mut flow_terms = Vec::new();
    for &f in &inter.flows_a {
        flow_terms.extend(flow_nll_graph(g, f, &gt.flow_a));
    }
    for &f in &inter.flows_b {
        flow_terms.extend(flow_nll_graph(g, f, &gt.flow_b));
    }
    let flow = if flow_terms.is_empty() {
        g.constant(Tensor::scalar(0.0))
    } else {
        let mut acc = flow_terms[0];
        for &t in &flow_terms[1..] {
            acc = g.add(acc, t);
        }
        acc
    };

    let cf = g.add(coarse, fine);
    let wf = g.scale(flow, m.alpha);
    let total = g.add(cf, wf);
    LossNodes { coarse, fine, flow, total, fine_empty }
}

/// Lower bound on the fine variance weight, fine cells².
pub const VAR_FLOOR: f64 = 1e-2;

fn report(g: &Graph, n: &LossNodes, alpha: f64) -> LossReport {
    LossReport {
        coarse: g.scalar_value(n.coarse),
        fine: g.scalar_value(n.fine),
        flow: g.scalar_value(n.flow),
        total: g.scalar_value(n.total),
        alpha,
    }
}

/// Loss of the whole network on one sample.
pub fn evaluate_loss(weights: &WeightArchive, sample: &TrainSample) -> Result<LossReport> {
    weights.validate()?;
    let mut g = Graph::new();
    let p = Params::bind(&mut g, weights, false);
    let nodes = loss_graph(&mut g, &p, weights, sample, &mut LossContext::default());
    if nodes.fine_empty {
        log::warn!("fine loss: every pair was gated out");
    }
    Ok(report(&g, &nodes, weights.manifest().alpha))
}

/// Mean loss over `samples` and its gradient for every tensor, in archive
/// order.
fn loss_and_grad(
    weights: &WeightArchive,
    samples: &[TrainSample],
    ctxs: &mut [LossContext],
) -> (LossReport, Vec<Tensor>) {
    let alpha = weights.manifest().alpha;
    let mut grads: Vec<Tensor> = weights.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut acc = total_loss(0.0, 0.0, 0.0, alpha);
    let k = samples.len() as f64;
    for (s, ctx) in samples.iter().zip(ctxs.iter_mut()) {
        let mut g = Graph::new();
        let p = Params::bind(&mut g, weights, true);
        let nodes = loss_graph(&mut g, &p, weights, s, ctx);
        let r = report(&g, &nodes, alpha);
        acc = total_loss(acc.coarse + r.coarse / k, acc.fine + r.fine / k, acc.flow + r.flow / k, alpha);
        let gr: Grads = g.backward(nodes.total);
        for ((name, _), dst) in weights.tensors().iter().zip(grads.iter_mut()) {
            if let Some(t) = gr.get(p.get(name)) {
                for (d, v) in dst.data_mut().iter_mut().zip(t.data()) {
                    *d += v / k;
                }
            }
        }
    }
    (acc, grads)
}

fn loss_only(weights: &WeightArchive, samples: &[TrainSample], ctxs: &mut [LossContext]) -> f64 {
    let mut total = 0.0;
    for (s, ctx) in samples.iter().zip(ctxs.iter_mut()) {
        let mut g = Graph::new();
        let p = Params::bind(&mut g, weights, false);
        let nodes = loss_graph(&mut g, &p, weights, s, ctx);
        total += g.scalar_value(nodes.total);
    }
    total / samples.len() as f64
}

/// Gradient of the mean total loss over `samples`.
pub fn loss_gradient(weights: &WeightArchive, samples: &[TrainSample]) -> Result<(LossReport, Vec<(String, Tensor)>)> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    weights.validate()?;
    let mut ctxs = vec![LossContext::default(); samples.len()];
    let (r, g) = loss_and_grad(weights, samples, &mut ctxs);
    Ok((r, weights.tensors().iter().map(|(n, _)| n.clone()).zip(g).collect()))
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub worst: Option<GradCheckEntry>,
    pub tensors_covered: usize,
}

/// Magnitude below which gradients are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central differences on `count` sampled scalars (at least one per
/// tensor) against the analytic gradient of the total loss. The gating
/// and `1/σ²` weights are frozen at the unperturbed parameters.
pub fn grad_check(
    weights: &WeightArchive,
    samples: &[TrainSample],
    count: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if samples.is_empty() {
        return Err(Error::Config("no samples for gradient check".into()));
    }
    weights.validate()?;
    let mut ctxs = vec![LossContext::default(); samples.len()];
    let (_, grads) = loss_and_grad(weights, samples, &mut ctxs);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = weights.tensors().iter().map(|(_, t)| t.len()).collect();
    let mut picks: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(t, &n)| (t, rng.random_range(0..n))).collect();
    let total: usize = sizes.iter().sum();
    let mut all: Vec<(usize, usize)> = Vec::with_capacity(total);
    for (t, &n) in sizes.iter().enumerate() {
        all.extend((0..n).map(|k| (t, k)));
    }
    all.shuffle(&mut rng);
    for cand in all {
        if picks.len() >= count {
            break;
        }
        if !picks.contains(&cand) {
            picks.push(cand);
        }
    }

    let mut work = weights.clone();
    let mut entries = Vec::with_capacity(picks.len());
    for (t, k) in picks {
        let name = weights.tensors()[t].0.clone();
        let base = weights.tensors()[t].1.data()[k];
        work.get_mut(&name)?.data_mut()[k] = base + eps;
        let up = loss_only(&work, samples, &mut ctxs);
        work.get_mut(&name)?.data_mut()[k] = base - eps;
        let down = loss_only(&work, samples, &mut ctxs);
        work.get_mut(&name)?.data_mut()[k] = base;
        let numeric = (up - down) / (2.0 * eps);
        let analytic = grads[t].data()[k];
        entries.push(GradCheckEntry { tensor: name, index: k, analytic, numeric, rel_err: relative_error(analytic, numeric) });
    }
    let worst = entries.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).cloned();
    let mut covered: Vec<&str> = entries.iter().map(|e| e.tensor.as_str()).collect();
    covered.sort_unstable();
    covered.dedup();
    Ok(GradCheckReport {
        max_rel_err: worst.as_ref().map_or(0.0, |w| w.rel_err),
        tensors_covered: covered.len(),
        worst,
        entries,
    })
}

impl GradCheckReport {
    pub fn check(&self, tol: f64) -> Result<()> {
        match &self.worst {
            Some(w) if w.rel_err > tol => Err(Error::GradCheck { tensor: w.tensor.clone(), rel_err: w.rel_err }),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    /// Plain gradient descent.
    Sgd,
    /// Adam with the usual `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`.
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Rescales the gradient when its global norm exceeds this value.
    pub clip: Option<f64>,
    pub optimizer: Optimizer,
}

/// Learning rate of the single-pair toy loop.
pub const TOY_LR: f64 = 2e-3;

/// Full-batch descent on the mean loss over `samples`.
/// Returns the trained weights and the loss before each step.
pub fn train(
    weights: &WeightArchive,
    samples: &[TrainSample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, &LossReport),
) -> Result<(WeightArchive, Vec<LossReport>)> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    if !(cfg.lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", cfg.lr)));
    }
    weights.validate()?;
    let mut w = weights.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    let zeros = || -> Vec<Tensor> { w.tensors().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect() };
    let (mut m1, mut m2) = (zeros(), zeros());
    for step in 0..cfg.steps {
        let mut ctxs = vec![LossContext::default(); samples.len()];
        let (r, grads) = loss_and_grad(&w, samples, &mut ctxs);
        let norm = grads.iter().flat_map(|t| t.data()).map(|v| v * v).sum::<f64>().sqrt();
        if !r.total.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged { step });
        }
        on_step(step, &r);
        trace.push(r);
        let scale = match cfg.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let (b1, b2) = (0.9f64, 0.999f64);
        let (c1, c2) = (1.0 - b1.powi(step as i32 + 1), 1.0 - b2.powi(step as i32 + 1));
        for ((((_, t), gr), a), b) in w.tensors_mut().zip(&grads).zip(&mut m1).zip(&mut m2) {
            let moments = a.data_mut().iter_mut().zip(b.data_mut().iter_mut());
            for ((v, d), (ma, mb)) in t.data_mut().iter_mut().zip(gr.data()).zip(moments) {
                let d = scale * d;
                match cfg.optimizer {
                    Optimizer::Sgd => *v -= cfg.lr * d,
                    Optimizer::Adam => {
                        *ma = b1 * *ma + (1.0 - b1) * d;
                        *mb = b2 * *mb + (1.0 - b2) * d * d;
                        *v -= cfg.lr * (*ma / c1) / ((*mb / c2).sqrt() + 1e-8);
                    }
                }
            }
        }
        let tau = w.get_mut("match.tau")?;
        tau.data_mut()[0] = tau.data()[0].max(1e-3);
    }
    Ok((w, trace))
}

/// Gradient descent on a single pair; the trace holds the loss before each
/// step.
pub fn train_toy(
    weights: &WeightArchive,
    sample: &TrainSample,
    steps: usize,
    lr: f64,
) -> Result<(WeightArchive, Vec<LossReport>)> {
    train(weights, std::slice::from_ref(sample), &TrainConfig { steps, lr, clip: Some(10.0), optimizer: Optimizer::Sgd }, |_, _| {})
}

/// True when no value in any `window`-step span rises above the span's
/// first value by more than `tol · |L₀|`.
pub fn windowed_monotone(trace: &[f64], window: usize, tol: f64) -> bool {
    let Some(&first) = trace.first() else { return true };
    let slack = tol * first.abs();
    (0..trace.len()).all(|s| trace[s..(s + window).min(trace.len())].iter().all(|&v| v <= trace[s] + slack))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fine_refine::Correspondence;
    use proptest::prelude::*;

    fn grid_gt(n: usize) -> GtMatches {
        let pairs: Vec<_> = (0..n * n)
            .map(|k| {
                let p = (cell_centre_pixel(k % n), cell_centre_pixel(k / n));
                Correspondence::new(p.0, p.1, p.0, p.1)
            })
            .collect();
        quantize_gt(&CorrespondenceSet::new(pairs), (n, n), (n, n))
    }

    #[test]
    fn identity_correspondences_quantise_to_identity() {
        let gt = grid_gt(3);
        assert_eq!(gt.pairs.len(), 9);
        assert!(gt.pairs.iter().all(|p| p.i == p.j));
        assert_eq!(gt.flow_a[4], Some((1.0, 1.0)));
        let empty = quantize_gt(&CorrespondenceSet::default(), (2, 2), (2, 2));
        assert!(empty.pairs.is_empty() && empty.flow_a.iter().all(Option::is_none));
    }

    #[test]
    fn collisions_keep_the_pair_nearest_the_b_centre() {
        let set = CorrespondenceSet::new(vec![
            Correspondence::new(3.5, 3.5, 9.0, 9.0),
            Correspondence::new(11.5, 3.5, 11.0, 11.0),
            Correspondence::new(3.5, 11.5, 12.0, 12.0),
        ]);
        let gt = quantize_gt(&set, (2, 2), (2, 2));
        assert_eq!(gt.pairs.len(), 1);
        assert_eq!((gt.pairs[0].i, gt.pairs[0].j), (1, 3));
        let tie = CorrespondenceSet::new(vec![
            Correspondence::new(11.5, 3.5, 11.5, 10.5),
            Correspondence::new(3.5, 3.5, 10.5, 11.5),
        ]);
        let gt = quantize_gt(&tie, (2, 2), (2, 2));
        assert_eq!((gt.pairs[0].i, gt.pairs[0].j), (0, 3));
    }

    #[test]
    fn coarse_loss_examples() {
        let gt = grid_gt(2);
        let mut p = Tensor::zeros(&[4, 4]);
        for k in 0..4 {
            p.data_mut()[k * 5] = 1.0;
        }
        assert_eq!(coarse_loss(&p, &gt).unwrap().value, 0.0);
        let mut p3 = Tensor::full(&[4, 4], 0.01);
        for k in 0..4 {
            p3.data_mut()[k * 5] = (-1.0f64).exp();
        }
        assert!((coarse_loss(&p3, &gt).unwrap().value - 1.0).abs() < 1e-15);
        let one = quantize_gt(&CorrespondenceSet::new(vec![Correspondence::new(3.5, 3.5, 3.5, 3.5)]), (1, 1), (1, 1));
        let half = Tensor::full(&[1, 1], 0.5);
        assert!((coarse_loss(&half, &one).unwrap().value - 2f64.ln()).abs() < 1e-15);
        let none = quantize_gt(&CorrespondenceSet::default(), (1, 1), (1, 1));
        assert_eq!(coarse_loss(&half, &none).unwrap(), LossValue { value: 0.0, empty: true });
    }

    #[test]
    fn fine_loss_examples() {
        let gt = quantize_gt(&CorrespondenceSet::new(vec![Correspondence::new(3.5, 3.5, 20.0, 20.0)]), (4, 4), (4, 4));
        let exact = CorrespondenceSet::new(vec![Correspondence::new(3.5, 3.5, 20.0, 20.0)]);
        assert_eq!(fine_loss(&exact, &gt, 5).value, 0.0);
        let mut off = Correspondence::new(3.5, 3.5, 23.0, 24.0);
        off.var = Some(1.0);
        assert!((fine_loss(&CorrespondenceSet::new(vec![off]), &gt, 5).value - 5.0).abs() < 1e-15);
        off.var = Some(4.0);
        let set = CorrespondenceSet::new(vec![off]);
        assert!((fine_loss(&set, &gt, 5).value - 1.25).abs() < 1e-15);
        // A pair whose target is outside its window changes nothing.
        let mut far = set.clone();
        far.pairs.push(Correspondence { xb: 80.0, ..off });
        assert_eq!(fine_loss(&far, &gt, 5), fine_loss(&set, &gt, 5));
        let gated = CorrespondenceSet::new(vec![Correspondence { xb: 80.0, ..off }]);
        assert!(fine_loss(&gated, &gt, 5).empty);
    }

    #[test]
    fn flow_closed_forms() {
        assert!((flow_nll((2.0, 3.0), (1.0, 1.0), (2.0, 3.0)) - 1.8378770664).abs() < 1e-10);
        let s: f64 = 0.3;
        assert!((flow_nll((0.0, 0.0), (s, s), (0.0, 0.0)) - (LOG_2PI + 2.0 * s.ln())).abs() < 1e-14);
        let v = flow_nll((1.0, 1.0), (0.5, 2.0), (1.5, 3.0));
        assert!((v - (LOG_2PI + 0.5f64.ln() + 2f64.ln() + 1.0)).abs() < 1e-14);
    }

    #[test]
    fn total_loss_combines() {
        let r = total_loss(1.0, 2.0, 4.0, 0.0);
        assert_eq!(r.total, 3.0);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 0.25).total, 0.0);
        assert_eq!(total_loss(1.0, 2.0, 4.0, 0.25).total, 4.0);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        write_trace(&[total_loss(1.0, 2.0, 3.0, 0.5)], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("step,L_c,L_f,L_flow,L_total\n0,1.000000000,2.000000000,3.000000000,4.500000000"));
    }

    #[test]
    fn monotone_window_rule() {
        assert!(windowed_monotone(&[10.0, 9.0, 9.5, 8.0], 3, 0.1));
        assert!(!windowed_monotone(&[10.0, 9.0, 11.5, 8.0], 3, 0.1));
    }

    proptest! {
        #[test]
        fn nll_forms_agree(ux in -5.0f64..5.0, uy in -5.0f64..5.0, sx in 0.05f64..5.0, sy in 0.05f64..5.0,
                           tx in -5.0f64..5.0, ty in -5.0f64..5.0) {
            let a = flow_nll((ux, uy), (sx, sy), (tx, ty));
            let b = flow_nll_density((ux, uy), (sx, sy), (tx, ty));
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn coarse_loss_nonnegative(vals in proptest::collection::vec(1e-9f64..=1.0, 9)) {
            let p = Tensor::new(vec![9, 1], vals).unwrap();
            let pairs: Vec<_> = (0..9).map(|k| {
                let c = (cell_centre_pixel(k % 3), cell_centre_pixel(k / 3));
                Correspondence::new(c.0, c.1, 3.5, 3.5)
            }).collect();
            let gt = quantize_gt(&CorrespondenceSet::new(pairs), (3, 3), (1, 1));
            prop_assert!(coarse_loss(&p, &gt).unwrap().value >= 0.0);
        }
    }
}
