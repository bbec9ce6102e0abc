//! Graph building blocks shared by the coarse and fine stages.

use std::sync::Arc;

use crate::autograd::{Graph, NodeId, RowMap};
use crate::weights::Params;

pub(crate) fn linear(g: &mut Graph, p: &Params, prefix: &str, x: NodeId) -> NodeId {
    let y = g.matmul(x, p.get(&format!("{prefix}.w")));
    g.add_row_bias(y, p.get(&format!("{prefix}.b")))
}

/// Bias-free projection used for attention keys.
pub(crate) fn key_proj(g: &mut Graph, p: &Params, prefix: &str, x: NodeId) -> NodeId {
    g.matmul(x, p.get(&format!("{prefix}.k.w")))
}

/// Scaled dot-product attention split over `heads` equal channel groups.
pub(crate) fn multi_head(g: &mut Graph, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> NodeId {
    let c = g.value(q).cols();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * d, (h + 1) * d);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (g.slice_cols(q, a, b), g.slice_cols(k, a, b), g.slice_cols(v, a, b))
        };
        let s = g.matmul_nt(qh, kh);
        let s = g.scale(s, scale);
        let pr = g.softmax_rows(s);
        outs.push(g.matmul(pr, vh));
    }
    if heads == 1 {
        outs[0]
    } else {
        g.concat_cols(&outs)
    }
}

/// Full cross attention from rows of `x` onto rows of `src`, followed by
/// the output projection. Returns the message only (no residual).
pub(crate) fn cross_message(
    g: &mut Graph,
    p: &Params,
    prefix: &str,
    x: NodeId,
    src: NodeId,
    heads: usize,
) -> NodeId {
    let q = linear(g, p, &format!("{prefix}.q"), x);
    let k = key_proj(g, p, prefix, src);
    let v = linear(g, p, &format!("{prefix}.v"), src);
    let m = multi_head(g, q, k, v, heads);
    linear(g, p, &format!("{prefix}.o"), m)
}

/// Repeated bilinear 2× upsampling of an `[h·w, C]` node, `times` times.
pub(crate) fn upsample(g: &mut Graph, x: NodeId, h: usize, w: usize, times: usize) -> NodeId {
    let (mut x, mut h, mut w) = (x, h, w);
    for _ in 0..times {
        x = g.row_map(x, Arc::new(RowMap::upsample2x(h, w)));
        h *= 2;
        w *= 2;
    }
    x
}

pub(crate) fn avgpool(g: &mut Graph, x: NodeId, h: usize, w: usize, k: usize) -> NodeId {
    if k == 1 {
        return x;
    }
    g.row_map(x, Arc::new(RowMap::avgpool(h, w, k)))
}
