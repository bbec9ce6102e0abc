//! Sub-pixel refinement of coarse matches on the stride-2 feature map.
//!
//! Each coarse match is lifted to fine coordinates, `w × w` windows are
//! cropped around both ends (cells falling outside the map are dropped),
//! and `N_f` rounds of self- then cross-attention run over the two patches.
//! The refined B position is the expectation of the window coordinates under
//! the softmax similarity between A's centre feature and every B cell.

use std::io::{Read, Write};
use std::path::Path;

use crate::autograd::{Graph, NodeId, RowMap};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::layers;
use crate::match_layer::MatchSet;
use crate::numkit::Tensor;
use crate::weights::{Manifest, Params, WeightArchive};

/// Coarse cell side measured in fine cells.
const COARSE_TO_FINE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub xa: f64,
    pub ya: f64,
    pub xb: f64,
    pub yb: f64,
    pub conf: f64,
    /// Positional variance of the refinement distribution, fine cells².
    pub var: Option<f64>,
}

impl Correspondence {
    pub fn new(xa: f64, ya: f64, xb: f64, yb: f64) -> Self {
        Self { xa, ya, xb, yb, conf: 1.0, var: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorrespondenceSet {
    pub pairs: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Self {
        Self { pairs }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn points_a(&self) -> Vec<(f64, f64)> {
        self.pairs.iter().map(|p| (p.xa, p.ya)).collect()
    }

    pub fn points_b(&self) -> Vec<(f64, f64)> {
        self.pairs.iter().map(|p| (p.xb, p.yb)).collect()
    }

    /// CSV with header `xA,yA,xB,yB,conf`, six decimals.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["xA", "yA", "xB", "yB", "conf"])?;
        for p in &self.pairs {
            out.write_record(
                [p.xa, p.ya, p.xb, p.yb, p.conf].iter().map(|v| format!("{v:.6}")),
            )?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let header = rdr.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["xA", "yA", "xB", "yB", "conf"] {
            return Err(Error::Format(format!("unexpected correspondence header {header:?}")));
        }
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("bad correspondence value: {e}")))?;
            if v.len() != 5 || v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("bad correspondence row {rec:?}")));
            }
            pairs.push(Correspondence { xa: v[0], ya: v[1], xb: v[2], yb: v[3], conf: v[4], var: None });
        }
        Ok(Self { pairs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FineConfig {
    pub window: usize,
    pub rounds: usize,
    pub heads: usize,
}

impl From<&Manifest> for FineConfig {
    fn from(m: &Manifest) -> Self {
        Self { window: m.window, rounds: m.n_fine, heads: m.heads }
    }
}

impl FineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window % 2 == 0 {
            return Err(Error::Config(format!("window must be odd and ≥ 3, got {}", self.window)));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be positive".into()));
        }
        Ok(())
    }
}

/// A coarse match expressed in fine-grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiftedMatch {
    pub a: (f64, f64),
    pub b: (f64, f64),
    pub conf: f64,
}

/// Fine-grid coordinate of the centre of coarse cell `(x, y)`.
pub fn coarse_cell_to_fine(x: usize, y: usize) -> (f64, f64) {
    let off = (COARSE_TO_FINE - 1.0) / 2.0;
    (COARSE_TO_FINE * x as f64 + off, COARSE_TO_FINE * y as f64 + off)
}

/// Fine-grid coordinate to original-image pixels.
pub fn fine_to_pixel(v: f64) -> f64 {
    2.0 * v + 0.5
}

pub fn pixel_to_fine(v: f64) -> f64 {
    (v - 0.5) / 2.0
}

pub fn lift_to_fine(matches: &MatchSet) -> Vec<LiftedMatch> {
    let wa = matches.grid_a.1;
    let wb = matches.grid_b.1;
    matches
        .pairs
        .iter()
        .map(|m| LiftedMatch {
            a: coarse_cell_to_fine(m.i % wa, m.i / wa),
            b: coarse_cell_to_fine(m.j % wb, m.j / wb),
            conf: m.conf,
        })
        .collect()
}

/// Crop of a `w × w` window centred at `centre` in an `h × wd` map.
#[derive(Debug, Clone)]
pub(crate) struct Window {
    pub map: RowMap,
    /// Fine coordinates of the kept cells, in window raster order.
    pub positions: Vec<(f64, f64)>,
    /// Row of the window centre, when it lies inside the map.
    pub centre: Option<usize>,
}

pub(crate) fn window(h: usize, wd: usize, centre: (f64, f64), win: usize) -> Window {
    let half = (win / 2) as isize;
    let (xmax, ymax) = ((wd - 1) as f64, (h - 1) as f64);
    let mut positions = Vec::with_capacity(win * win);
    let mut centre_row = None;
    for dy in -half..=half {
        for dx in -half..=half {
            let (x, y) = (centre.0 + dx as f64, centre.1 + dy as f64);
            if (0.0..=xmax).contains(&x) && (0.0..=ymax).contains(&y) {
                if dx == 0 && dy == 0 {
                    centre_row = Some(positions.len());
                }
                positions.push((x, y));
            }
        }
    }
    Window { map: RowMap::bilinear(h, wd, &positions), positions, centre: centre_row }
}

fn self_round(g: &mut Graph, p: &Params, prefix: &str, x: NodeId, heads: usize) -> NodeId {
    let n = g.layer_norm(x, p.get(&format!("{prefix}.norm.g")), p.get(&format!("{prefix}.norm.b")));
    let m = layers::cross_message(g, p, prefix, n, n, heads);
    g.add(x, m)
}

fn cross_round(
    g: &mut Graph,
    p: &Params,
    prefix: &str,
    a: NodeId,
    b: NodeId,
    heads: usize,
) -> (NodeId, NodeId) {
    let (ng, nb) = (p.get(&format!("{prefix}.norm.g")), p.get(&format!("{prefix}.norm.b")));
    let na = g.layer_norm(a, ng, nb);
    let nbb = g.layer_norm(b, ng, nb);
    let ma = layers::cross_message(g, p, prefix, na, nbb, heads);
    let mb = layers::cross_message(g, p, prefix, nbb, na, heads);
    (g.add(a, ma), g.add(b, mb))
}

pub(crate) struct FineNodes {
    /// `[1, 2]` expected fine coordinate in B.
    pub expect: NodeId,
    /// Per-axis variance of the similarity distribution.
    pub var: [f64; 2],
}

/// Attention rounds and expectation on already cropped patches.
pub(crate) fn refine_patches(
    g: &mut Graph,
    p: &Params,
    patch_a: NodeId,
    centre_a: usize,
    patch_b: NodeId,
    positions_b: &[(f64, f64)],
    cfg: &FineConfig,
) -> FineNodes {
    let (mut a, mut b) = (patch_a, patch_b);
    for r in 0..cfg.rounds {
        a = self_round(g, p, &format!("fine{r}.self"), a, cfg.heads);
        b = self_round(g, p, &format!("fine{r}.self"), b, cfg.heads);
        (a, b) = cross_round(g, p, &format!("fine{r}.cross"), a, b, cfg.heads);
    }
    let c = g.value(a).cols();
    let qa = g.gather_rows(a, vec![centre_a]);
    let sim = g.matmul_nt(qa, b);
    let sim = g.scale(sim, 1.0 / (c as f64).sqrt());
    let prob = g.softmax_rows(sim);
    let pos = Tensor::new(
        vec![positions_b.len(), 2],
        positions_b.iter().flat_map(|&(x, y)| [x, y]).collect(),
    )
    .expect("positions");
    let posn = g.constant(pos);
    let expect = g.matmul(prob, posn);
    let (ex, ey) = (g.value(expect).data()[0], g.value(expect).data()[1]);
    let mut var = [0.0; 2];
    for (&pr, &(x, y)) in g.value(prob).data().iter().zip(positions_b) {
        var[0] += pr * (x - ex) * (x - ex);
        var[1] += pr * (y - ey) * (y - ey);
    }
    FineNodes { expect, var }
}

/// Scalar variance reported per pair: mean of the two axis variances.
pub(crate) fn scalar_var(v: [f64; 2]) -> f64 {
    0.5 * (v[0] + v[1])
}

fn flat(f: &FeatureMap) -> Tensor {
    f.data.clone().reshape(&[f.cells(), f.channels]).expect("flatten")
}

/// Refines every lifted match; output order and count follow the input.
pub fn refine(
    fine_a: &FeatureMap,
    fine_b: &FeatureMap,
    lifted: &[LiftedMatch],
    cfg: &FineConfig,
    weights: &WeightArchive,
) -> Result<CorrespondenceSet> {
    cfg.validate()?;
    if fine_a.channels != fine_b.channels || fine_a.channels % cfg.heads != 0 {
        return Err(Error::Dimension(format!(
            "fine maps need equal channel counts divisible by {} heads",
            cfg.heads
        )));
    }
    for r in 0..cfg.rounds {
        weights.get(&format!("fine{r}.cross.o.w"))?;
    }
    let (fa, fb) = (flat(fine_a), flat(fine_b));
    let mut pairs = Vec::with_capacity(lifted.len());
    for m in lifted {
        let wa = window(fine_a.height, fine_a.width, m.a, cfg.window);
        let wb = window(fine_b.height, fine_b.width, m.b, cfg.window);
        let centre = wa.centre.ok_or_else(|| {
            Error::Dimension(format!("A point {:?} lies outside the fine map", m.a))
        })?;
        if wb.positions.is_empty() {
            return Err(Error::Dimension(format!("B point {:?} lies outside the fine map", m.b)));
        }
        let mut g = Graph::new();
        let p = Params::bind_filtered(&mut g, weights, false, |n| n.starts_with("fine"));
        let pa = g.constant(wa.map.apply(&fa));
        let pb = g.constant(wb.map.apply(&fb));
        let out = refine_patches(&mut g, &p, pa, centre, pb, &wb.positions, cfg);
        let e = g.value(out.expect).data();
        pairs.push(Correspondence {
            xa: fine_to_pixel(m.a.0),
            ya: fine_to_pixel(m.a.1),
            xb: fine_to_pixel(e[0]),
            yb: fine_to_pixel(e[1]),
            conf: m.conf,
            var: Some(scalar_var(out.var)),
        });
    }
    Ok(CorrespondenceSet { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::match_layer::CoarseMatch;
    use proptest::prelude::*;

    fn quiet_weights() -> WeightArchive {
        let mut w = WeightArchive::random(Manifest::toy(), 4).unwrap();
        w.zero_where(|n| n.starts_with("fine") && n.contains(".o."));
        w
    }

    fn map_from(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize) -> Vec<f64>) -> FeatureMap {
        let mut data = Vec::with_capacity(h * w * c);
        for y in 0..h {
            for x in 0..w {
                data.extend(f(x, y));
            }
        }
        FeatureMap::new(2, Tensor::new(vec![h, w, c], data).unwrap()).unwrap()
    }

    #[test]
    fn lift_examples() {
        assert_eq!(coarse_cell_to_fine(0, 0), (1.5, 1.5));
        assert_eq!(coarse_cell_to_fine(2, 3), (9.5, 13.5));
        let set = MatchSet {
            pairs: vec![CoarseMatch { i: 5, j: 0, conf: 0.7 }],
            grid_a: (4, 4),
            grid_b: (4, 4),
        };
        let l = lift_to_fine(&set);
        assert_eq!(l, [LiftedMatch { a: (5.5, 5.5), b: (1.5, 1.5), conf: 0.7 }]);
        let empty = MatchSet { pairs: vec![], grid_a: (1, 1), grid_b: (1, 1) };
        assert!(lift_to_fine(&empty).is_empty());
        // Coarse cell centre pixel and fine-lifted centre agree.
        assert_eq!(fine_to_pixel(coarse_cell_to_fine(2, 0).0), 8.0 * 2.0 + 3.5);
    }

    #[test]
    fn window_drops_out_of_bounds_cells() {
        let w = window(10, 10, (0.5, 9.0), 5);
        assert_eq!(w.positions.len(), 3 * 3);
        assert_eq!(w.centre, Some(6));
        assert!(w.positions.iter().all(|&(x, y)| (0.0..=9.0).contains(&x) && (0.0..=9.0).contains(&y)));
    }

    #[test]
    fn delta_similarity_returns_centre() {
        let w = quiet_weights();
        let cfg = FineConfig { window: 5, rounds: 1, heads: 2 };
        let spike = |x: usize, y: usize| {
            if (x, y) == (6, 6) {
                vec![30.0, -30.0, 30.0, -30.0, 30.0, -30.0, 30.0, -30.0]
            } else {
                vec![0.0; 8]
            }
        };
        let fa = map_from(12, 12, 8, spike);
        let fb = map_from(12, 12, 8, spike);
        let lifted = [LiftedMatch { a: (6.0, 6.0), b: (6.0, 6.0), conf: 1.0 }];
        let out = refine(&fa, &fb, &lifted, &cfg, &w).unwrap();
        let p = out.pairs[0];
        assert_eq!((p.xb, p.yb), (fine_to_pixel(6.0), fine_to_pixel(6.0)));
        assert!(p.var.unwrap() < 1e-12);
    }

    #[test]
    fn uniform_similarity_gives_centre_and_uniform_variance() {
        let w = quiet_weights();
        let cfg = FineConfig { window: 3, rounds: 1, heads: 2 };
        let fa = map_from(8, 8, 8, |_, _| vec![0.0; 8]);
        let fb = map_from(8, 8, 8, |_, _| vec![0.0; 8]);
        let lifted = [LiftedMatch { a: (4.0, 4.0), b: (3.5, 4.5), conf: 1.0 }];
        let out = refine(&fa, &fb, &lifted, &cfg, &w).unwrap();
        let p = out.pairs[0];
        assert!((p.xb - fine_to_pixel(3.5)).abs() < 1e-12);
        assert!((p.yb - fine_to_pixel(4.5)).abs() < 1e-12);
        assert!((p.var.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn shifted_pattern_moves_the_expectation_by_one_cell() {
        let w = quiet_weights();
        let cfg = FineConfig { window: 5, rounds: 1, heads: 2 };
        let code = |x: usize, y: usize| {
            let mut v = vec![0.0; 8];
            v[(x * 3 + y * 5) % 8] = 12.0;
            v[(x + 2 * y + 1) % 8] -= 12.0;
            v
        };
        let fa = map_from(16, 16, 8, code);
        let fb = map_from(16, 16, 8, |x, y| if x == 0 { vec![0.0; 8] } else { code(x - 1, y) });
        let lifted = [LiftedMatch { a: (7.0, 8.0), b: (7.0, 8.0), conf: 1.0 }];
        let out = refine(&fa, &fb, &lifted, &cfg, &w).unwrap();
        let p = out.pairs[0];
        assert!((pixel_to_fine(p.xb) - 8.0).abs() < 0.1, "{}", pixel_to_fine(p.xb));
        assert!((pixel_to_fine(p.yb) - 8.0).abs() < 0.1);
    }

    #[test]
    fn csv_round_trip() {
        let set = CorrespondenceSet::new(vec![
            Correspondence { xa: 1.25, ya: 2.0, xb: 3.123456789, yb: -0.5, conf: 0.9, var: None },
            Correspondence::new(100.0, 7.5, 101.0, 8.0000004),
        ]);
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("xA,yA,xB,yB,conf\n1.250000,2.000000,3.123457,"));
        let back = CorrespondenceSet::read_csv(buf.as_slice()).unwrap();
        for (a, b) in set.pairs.iter().zip(&back.pairs) {
            assert!((a.xb - b.xb).abs() <= 1e-6 && (a.yb - b.yb).abs() <= 1e-6);
        }
        assert!(CorrespondenceSet::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn refinement_stays_in_window(seed in 0u64..1000, cx in 0usize..12, cy in 0usize..12) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let w = WeightArchive::random(Manifest::toy(), seed).unwrap();
            let cfg = FineConfig::from(w.manifest());
            let fa = map_from(12, 12, 8, |_, _| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect());
            let fb = map_from(12, 12, 8, |_, _| (0..8).map(|_| rng.random_range(-2.0..2.0)).collect());
            let lifted = vec![
                LiftedMatch { a: (cx as f64, cy as f64), b: (cy as f64, cx as f64), conf: 0.5 },
                LiftedMatch { a: (5.5, 5.5), b: (cx as f64 * 0.9, 3.0), conf: 0.5 },
            ];
            let out = refine(&fa, &fb, &lifted, &cfg, &w).unwrap();
            prop_assert_eq!(out.len(), lifted.len());
            let half = (cfg.window / 2) as f64;
            for (p, m) in out.pairs.iter().zip(&lifted) {
                let (fx, fy) = (pixel_to_fine(p.xb), pixel_to_fine(p.yb));
                prop_assert!((fx - m.b.0).abs() <= half + 1e-9 && (fy - m.b.1).abs() <= half + 1e-9);
                prop_assert!((0.0..=11.0).contains(&fx) && (0.0..=11.0).contains(&fy));
                prop_assert!(p.var.unwrap() >= 0.0);
            }
        }
    }
}
