//! Masked normalised cross-correlation and verification / identification
//! metrics over score sets.

use std::io::Write;

use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::warpfield::Mask;

/// Pearson correlation of the two images over the mask. Returns 0 (with a
/// warning) when either image is constant on the mask.
pub fn ncc(a: &Image, b: &Image, m: &Mask) -> Result<f64> {
    if (a.height, a.width) != (b.height, b.width) || (a.height, a.width) != (m.height, m.width) {
        return Err(Error::Dimension("NCC inputs must share dimensions".into()));
    }
    let idx: Vec<usize> = m.bits().iter().enumerate().filter(|(_, &v)| v).map(|(i, _)| i).collect();
    if idx.len() < 2 {
        return Err(Error::UndefinedScore(format!("mask covers {} pixel(s)", idx.len())));
    }
    let n = idx.len() as f64;
    let ma = idx.iter().map(|&i| a.pixels[i]).sum::<f64>() / n;
    let mb = idx.iter().map(|&i| b.pixels[i]).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let (da, db) = (a.pixels[i] - ma, b.pixels[i] - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if saa == 0.0 || sbb == 0.0 {
        log::warn!("NCC undefined on a constant region; scoring 0");
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub impostor: Vec<f64>,
}

impl ScoreSet {
    fn check(&self) -> Result<()> {
        if self.genuine.is_empty() || self.impostor.is_empty() {
            return Err(Error::Metric(format!(
                "need genuine and impostor scores, got {} and {}",
                self.genuine.len(),
                self.impostor.len()
            )));
        }
        if self.genuine.iter().chain(&self.impostor).any(|s| s.is_nan()) {
            return Err(Error::Metric("scores contain NaN".into()));
        }
        Ok(())
    }

    /// `(threshold, FMR, FNMR)` for −∞, every distinct score, and +∞, in
    /// increasing threshold order.
    fn sweep(&self) -> Vec<(f64, f64, f64)> {
        let mut ts: Vec<f64> = self.genuine.iter().chain(&self.impostor).copied().collect();
        ts.push(f64::NEG_INFINITY);
        ts.push(f64::INFINITY);
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        let (ng, ni) = (self.genuine.len() as f64, self.impostor.len() as f64);
        ts.into_iter()
            .map(|t| {
                let fmr = self.impostor.iter().filter(|&&s| s >= t).count() as f64 / ni;
                let fnmr = self.genuine.iter().filter(|&&s| s < t).count() as f64 / ng;
                (t, fmr, fnmr)
            })
            .collect()
    }
}

/// Equal error rate, linearly interpolated between the sweep points that
/// bracket the FMR/FNMR crossing.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    s.check()?;
    let pts = s.sweep();
    let mut prev = pts[0];
    for &cur in &pts {
        let d = cur.1 - cur.2;
        if d <= 0.0 {
            if d == 0.0 {
                return Ok(cur.1);
            }
            let dp = prev.1 - prev.2;
            let a = dp / (dp - d);
            return Ok(prev.1 + a * (cur.1 - prev.1));
        }
        prev = cur;
    }
    Err(Error::Metric("FMR and FNMR never cross".into()))
}

/// Lowest FNMR among thresholds with no false matches.
pub fn zero_fmr(s: &ScoreSet) -> Result<f64> {
    s.check()?;
    Ok(s.sweep().iter().filter(|p| p.1 == 0.0).map(|p| p.2).fold(f64::INFINITY, f64::min))
}

/// `(FMR, FNMR)` points ordered by increasing FMR.
pub fn det_curve(s: &ScoreSet) -> Result<Vec<(f64, f64)>> {
    s.check()?;
    let mut pts: Vec<(f64, f64)> = s.sweep().into_iter().map(|(_, a, b)| (a, b)).collect();
    pts.reverse();
    Ok(pts)
}

/// Fraction of queries whose genuine entry strictly beats every other
/// entry of its row.
pub fn rank1(scores: &[Vec<f64>], genuine_col: &[usize]) -> Result<f64> {
    if scores.is_empty() || scores.len() != genuine_col.len() {
        return Err(Error::Metric("rank-1 needs one genuine column per query".into()));
    }
    let mut hits = 0;
    for (row, &g) in scores.iter().zip(genuine_col) {
        let Some(&gs) = row.get(g) else {
            return Err(Error::Metric(format!("genuine column {g} outside a row of {}", row.len())));
        };
        if row.iter().enumerate().all(|(k, &s)| k == g || gs > s) {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

/// `metric,value` rows.
pub fn write_metrics(rows: &[(&str, f64)], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["metric", "value"])?;
    for (name, v) in rows {
        out.write_record([name.to_string(), format!("{v:.6}")])?;
    }
    out.flush()?;
    Ok(())
}

/// `fmr,fnmr` rows.
pub fn write_det(points: &[(f64, f64)], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["fmr", "fnmr"])?;
    for (a, b) in points {
        out.write_record([format!("{a:.6}"), format!("{b:.6}")])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, px: &[f64]) -> Image {
        Image::new(h, w, px.to_vec()).unwrap()
    }

    #[test]
    fn ncc_examples() {
        let a = img(2, 3, &[0.1, 0.5, 0.9, 0.3, 0.2, 0.8]);
        let full = Mask::full(2, 3);
        assert!((ncc(&a, &a, &full).unwrap() - 1.0).abs() < 1e-12);
        let inv = img(2, 3, &a.pixels.iter().map(|v| 1.0 - v).collect::<Vec<_>>());
        assert!((ncc(&a, &inv, &full).unwrap() + 1.0).abs() < 1e-12);
        let p = img(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let q = img(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ncc(&p, &q, &Mask::full(2, 2)).unwrap(), 0.0);
        assert!(matches!(ncc(&p, &q, &Mask::empty(2, 2)), Err(Error::UndefinedScore(_))));
        assert_eq!(ncc(&p, &img(2, 2, &[0.5; 4]), &Mask::full(2, 2)).unwrap(), 0.0);
    }

    #[test]
    fn metric_examples() {
        let sep = ScoreSet { genuine: vec![0.9, 0.8], impostor: vec![0.1, 0.2] };
        assert_eq!(eer(&sep).unwrap(), 0.0);
        assert_eq!(zero_fmr(&sep).unwrap(), 0.0);
        let same = ScoreSet { genuine: vec![0.1, 0.4, 0.7], impostor: vec![0.1, 0.4, 0.7] };
        assert_eq!(eer(&same).unwrap(), 0.5);
        let fx = ScoreSet { genuine: vec![0.9, 0.8, 0.3], impostor: vec![0.7, 0.2, 0.1] };
        assert_eq!(zero_fmr(&fx).unwrap(), 1.0 / 3.0);
        assert!(matches!(eer(&ScoreSet::default()), Err(Error::Metric(_))));
    }

    #[test]
    fn rank1_examples() {
        assert_eq!(rank1(&[vec![0.9, 0.1], vec![0.2, 0.8]], &[0, 1]).unwrap(), 1.0);
        assert_eq!(rank1(&[vec![0.0, 0.1], vec![0.9, 0.8]], &[0, 1]).unwrap(), 0.0);
        let rows = [vec![0.9, 0.1, 0.2], vec![0.3, 0.6, 0.1], vec![0.5, 0.5, 0.1]];
        assert_eq!(rank1(&rows, &[0, 1, 1]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn csv_writers() {
        let mut buf = Vec::new();
        write_metrics(&[("eer", 0.25), ("zerofmr", 1.0 / 3.0)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "metric,value\neer,0.250000\nzerofmr,0.333333\n");
        let mut buf = Vec::new();
        write_det(&[(0.0, 1.0)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "fmr,fnmr\n0.000000,1.000000\n");
    }

    fn scores() -> impl Strategy<Value = ScoreSet> {
        (proptest::collection::vec(0u8..20, 1..15), proptest::collection::vec(0u8..20, 1..15)).prop_map(|(g, i)| {
            ScoreSet {
                genuine: g.into_iter().map(|v| v as f64 / 19.0).collect(),
                impostor: i.into_iter().map(|v| v as f64 / 19.0).collect(),
            }
        })
    }

    proptest! {
        #[test]
        fn metric_invariants(s in scores()) {
            let e = eer(&s).unwrap();
            let z = zero_fmr(&s).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));
            prop_assert!(z + 1e-12 >= e);
            let det = det_curve(&s).unwrap();
            for w in det.windows(2) {
                prop_assert!(w[0].0 <= w[1].0);
                prop_assert!(w[0].1 >= w[1].1);
            }
        }

        #[test]
        fn ncc_symmetry_and_gain(px in proptest::collection::vec(0.0f64..1.0, 12),
                                 qx in proptest::collection::vec(0.0f64..1.0, 12),
                                 gain in 0.1f64..10.0, bias in -3.0f64..3.0) {
            let a = img(3, 4, &px);
            let b = img(3, 4, &qx);
            let m = Mask::full(3, 4);
            let ab = ncc(&a, &b, &m).unwrap();
            prop_assert!((ab - ncc(&b, &a, &m).unwrap()).abs() < 1e-12);
            let scaled = img(3, 4, &px.iter().map(|v| gain * v + bias).collect::<Vec<_>>());
            prop_assert!((ab - ncc(&scaled, &b, &m).unwrap()).abs() < 1e-9);
        }
    }
}
