//! Coarse matching: scaled correlation, dual softmax, and mutual nearest
//! neighbours above a confidence threshold.

use crate::autograd::{Graph, NodeId};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::numkit::{matmul_nt, softmax_rows, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoarseMatch {
    /// Flat index into A's coarse grid.
    pub i: usize,
    /// Flat index into B's coarse grid.
    pub j: usize,
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pub pairs: Vec<CoarseMatch>,
    /// `(height, width)` of A's coarse grid.
    pub grid_a: (usize, usize),
    pub grid_b: (usize, usize),
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    pub tau: f64,
    pub theta: f64,
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::Config(format!("theta must lie in (0, 1), got {}", self.theta)));
        }
        Ok(())
    }
}

fn flat(f: &FeatureMap) -> Tensor {
    f.data.clone().reshape(&[f.cells(), f.channels]).expect("flatten feature map")
}

/// `C[i, j] = τ · <fa_i, fb_j>` over row-major flattened cells.
pub fn correlation(fa: &FeatureMap, fb: &FeatureMap, tau: f64) -> Result<Tensor> {
    if fa.channels != fb.channels {
        return Err(Error::Dimension(format!(
            "channel mismatch: {} vs {}",
            fa.channels, fb.channels
        )));
    }
    let c = matmul_nt(&flat(fa), &flat(fb))?;
    let shape = c.shape().to_vec();
    Tensor::new(shape, c.into_data().into_iter().map(|v| v * tau).collect())
}

/// Row softmax times column softmax, elementwise.
pub fn dual_softmax(c: &Tensor) -> Tensor {
    let rows = softmax_rows(c);
    let cols = softmax_rows(&c.transpose2().expect("matrix")).transpose2().expect("matrix");
    let data = rows.data().iter().zip(cols.data()).map(|(a, b)| a * b).collect();
    Tensor::new(c.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn dual_softmax_graph(g: &mut Graph, c: NodeId) -> NodeId {
    let rows = g.softmax_rows(c);
    let t = g.transpose(c);
    let cols = g.softmax_rows(t);
    let cols = g.transpose(cols);
    g.mul(rows, cols)
}

/// First index of the maximum; NaN never wins.
fn argmax(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (k, v) in values.enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((k, v));
        }
    }
    best.map(|(k, _)| k)
}

/// Keeps `(i, j)` when it is the maximum of row `i` and of column `j`
/// (first index wins ties) and `P[i, j] ≥ θ`. Pairs are ordered by `i`.
pub fn mnn_filter(
    p: &Tensor,
    theta: f64,
    grid_a: (usize, usize),
    grid_b: (usize, usize),
) -> Result<MatchSet> {
    let (n, m) = (p.rows(), p.cols());
    if n != grid_a.0 * grid_a.1 || m != grid_b.0 * grid_b.1 {
        return Err(Error::Dimension(format!(
            "probability matrix {n}x{m} does not match grids {grid_a:?} and {grid_b:?}"
        )));
    }
    let col_best: Vec<Option<usize>> =
        (0..m).map(|j| argmax((0..n).map(|i| p.get2(i, j)))).collect();
    let mut pairs = Vec::new();
    for i in 0..n {
        if let Some(j) = argmax(p.row(i).iter().copied()) {
            let conf = p.get2(i, j);
            if col_best[j] == Some(i) && conf >= theta {
                pairs.push(CoarseMatch { i, j, conf });
            }
        }
    }
    Ok(MatchSet { pairs, grid_a, grid_b })
}

/// Correlation, dual softmax and filtering in one call.
pub fn match_coarse(fa: &FeatureMap, fb: &FeatureMap, cfg: &MatchConfig) -> Result<(Tensor, MatchSet)> {
    cfg.validate()?;
    let c = correlation(fa, fb, cfg.tau)?;
    let p = dual_softmax(&c);
    let set = mnn_filter(&p, cfg.theta, (fa.height, fa.width), (fb.height, fb.width))?;
    Ok((p, set))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(rows: &[Vec<f64>]) -> FeatureMap {
        let n = rows.len();
        let c = rows[0].len();
        FeatureMap::new(8, Tensor::from_rows(rows).reshape(&[1, n, c]).unwrap()).unwrap()
    }

    #[test]
    fn correlation_hand_cases() {
        let fa = map(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let fb = map(&[vec![1.0, 1.0], vec![0.0, 1.0]]);
        let c = correlation(&fa, &fb, 3.0).unwrap();
        assert_eq!(c.data(), &[3.0, 0.0, 3.0, 3.0]);
        let c1 = correlation(&fa, &fa, 1.0).unwrap();
        assert_eq!(c1.data(), &[1.0, 0.0, 0.0, 1.0]);
        let c2 = correlation(&fa, &fb, 2.0).unwrap();
        let c1 = correlation(&fa, &fb, 1.0).unwrap();
        assert!(c2.data().iter().zip(c1.data()).all(|(a, b)| *a == 2.0 * b));
        let bad = map(&[vec![1.0, 0.0, 0.0]]);
        assert!(matches!(correlation(&fa, &bad, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn dual_softmax_special_cases() {
        let p = dual_softmax(&Tensor::zeros(&[4, 4]));
        assert!(p.data().iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
        let mut d = Tensor::zeros(&[3, 3]);
        for k in 0..3 {
            d.data_mut()[k * 4] = 200.0;
        }
        let p = dual_softmax(&d);
        for i in 0..3 {
            for j in 0..3 {
                let v = p.get2(i, j);
                if i == j {
                    assert!((v - 1.0).abs() < 1e-12);
                } else {
                    assert!(v < 1e-12);
                }
            }
        }
        let set = mnn_filter(&p, 0.2, (1, 3), (3, 1)).unwrap();
        assert_eq!(set.pairs.iter().map(|m| (m.i, m.j)).collect::<Vec<_>>(), [(0, 0), (1, 1), (2, 2)]);
        let u = dual_softmax(&Tensor::zeros(&[3, 3]));
        assert!(mnn_filter(&u, 0.2, (3, 1), (1, 3)).unwrap().is_empty());
    }

    /// Two-pass scalar dual softmax.
    fn dual_softmax_oracle(c: &Tensor) -> Vec<Vec<f64>> {
        let (n, m) = (c.rows(), c.cols());
        let mut out = vec![vec![0.0; m]; n];
        for i in 0..n {
            for j in 0..m {
                let rmax = (0..m).map(|k| c.get2(i, k)).fold(f64::NEG_INFINITY, f64::max);
                let rs: f64 = (0..m).map(|k| (c.get2(i, k) - rmax).exp()).sum();
                let cmax = (0..n).map(|k| c.get2(k, j)).fold(f64::NEG_INFINITY, f64::max);
                let cs: f64 = (0..n).map(|k| (c.get2(k, j) - cmax).exp()).sum();
                out[i][j] = (c.get2(i, j) - rmax).exp() / rs * ((c.get2(i, j) - cmax).exp() / cs);
            }
        }
        out
    }

    fn mnn_oracle(p: &[Vec<f64>], theta: f64) -> Vec<(usize, usize)> {
        let n = p.len();
        let m = p[0].len();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..m {
                let row_ok = (0..m).all(|k| p[i][k] < p[i][j] || (p[i][k] == p[i][j] && k >= j));
                let col_ok = (0..n).all(|k| p[k][j] < p[i][j] || (p[k][j] == p[i][j] && k >= i));
                if row_ok && col_ok && p[i][j] >= theta {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn random_matrices_match_oracles() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.random_range(1..=7);
            let m = rng.random_range(1..=9);
            let data = (0..n * m).map(|_| rng.random_range(-4.0..4.0)).collect();
            let c = Tensor::new(vec![n, m], data).unwrap();
            let p = dual_softmax(&c);
            let o = dual_softmax_oracle(&c);
            for i in 0..n {
                for j in 0..m {
                    assert!((p.get2(i, j) - o[i][j]).abs() <= 1e-12);
                }
            }
            let set = mnn_filter(&p, 0.1, (n, 1), (1, m)).unwrap();
            let got: Vec<_> = set.pairs.iter().map(|x| (x.i, x.j)).collect();
            assert_eq!(got, mnn_oracle(&o, 0.1));
        }
    }

    #[test]
    fn ties_resolve_to_smallest_index() {
        let p = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let set = mnn_filter(&p, 0.2, (2, 1), (1, 2)).unwrap();
        assert_eq!(set.pairs.len(), 1);
        assert_eq!((set.pairs[0].i, set.pairs[0].j), (0, 0));
    }

    #[test]
    fn graph_dual_softmax_matches_values() {
        let c = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.5, 0.2, -0.7]]);
        let mut g = Graph::new();
        let id = g.constant(c.clone());
        let p = dual_softmax_graph(&mut g, id);
        assert_eq!(g.value(p), &dual_softmax(&c));
    }

    fn matrix() -> impl Strategy<Value = Tensor> {
        (1usize..8, 1usize..8).prop_flat_map(|(n, m)| {
            proptest::collection::vec(-5.0f64..5.0, n * m)
                .prop_map(move |d| Tensor::new(vec![n, m], d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn one_to_one_and_threshold_monotone(c in matrix(), t1 in 0.0f64..0.5, dt in 0.0f64..0.5) {
            let p = dual_softmax(&c);
            let grid_a = (c.rows(), 1);
            let grid_b = (1, c.cols());
            let lo = mnn_filter(&p, t1, grid_a, grid_b).unwrap();
            let hi = mnn_filter(&p, t1 + dt, grid_a, grid_b).unwrap();
            let mut is: Vec<_> = lo.pairs.iter().map(|m| m.i).collect();
            let mut js: Vec<_> = lo.pairs.iter().map(|m| m.j).collect();
            is.dedup();
            js.sort_unstable();
            js.dedup();
            prop_assert_eq!(is.len(), lo.len());
            prop_assert_eq!(js.len(), lo.len());
            prop_assert!(hi.pairs.iter().all(|h| lo.pairs.contains(h)));
            prop_assert!(lo.pairs.iter().all(|m| m.conf >= t1));
        }

        #[test]
        fn dual_softmax_shift_invariant(c in matrix(), k in -50.0f64..50.0) {
            let shifted = Tensor::new(c.shape().to_vec(), c.data().iter().map(|v| v + k).collect()).unwrap();
            let a = dual_softmax(&c);
            let b = dual_softmax(&shifted);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!(*x > 0.0 && *x <= 1.0);
            }
        }
    }
}
