//! Invariant and oracle checks run by `selftest` and by the acceptance
//! suite. Each check is deterministic and returns a one-line detail.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ridgealign::losses::{
    flow_nll, flow_nll_density, grad_check, train_toy, windowed_monotone, TrainSample, LOG_2PI, TOY_LR,
};
use ridgealign::match_layer::{dual_softmax, mnn_filter};
use ridgealign::numkit::Tensor;
use ridgealign::scorer::{eer, ncc, rank1, zero_fmr, ScoreSet};
use ridgealign::synth::warped_pair;
use ridgealign::warpfield::{build_gt, compose, tps_evaluate, tps_fit, warp_mask};
use ridgealign::{Correspondence, CorrespondenceSet, DeformationField, Image, Manifest, Mask, WeightArchive};

pub type CheckResult = std::result::Result<String, String>;

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> CheckResult,
}

/// Every check, in report order.
pub fn all() -> Vec<Check> {
    vec![
        Check { name: "tps_interpolation", run: tps_interpolation },
        Check { name: "tps_affine", run: tps_affine },
        Check { name: "tps_regularisation", run: tps_regularisation },
        Check { name: "compose", run: compose_fields },
        Check { name: "dual_softmax_mnn", run: dual_softmax_mnn },
        Check { name: "gradients", run: gradients },
        Check { name: "flow_nll", run: flow_closed_form },
        Check { name: "gt_reconstruction", run: gt_reconstruction },
        Check { name: "toy_training", run: toy_training },
        Check { name: "metrics", run: metrics },
        Check { name: "formats", run: formats },
    ]
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s(e: ridgealign::Error) -> String {
    e.to_string()
}

fn random_points(rng: &mut ChaCha8Rng, n: usize, side: f64) -> Vec<(f64, f64)> {
    (0..n).map(|_| (rng.random_range(0.0..side), rng.random_range(0.0..side))).collect()
}

/// Largest control-point residual of a spline fitted to `src → dst`.
fn max_residual(src: &[(f64, f64)], dst: &[(f64, f64)], lambda: f64) -> std::result::Result<f64, String> {
    let m = tps_fit(src, dst, lambda).map_err(e2s)?;
    Ok(src
        .iter()
        .zip(dst)
        .map(|(s, d)| {
            let f = m.eval(s.0, s.1);
            (f.0 - d.0).abs().max((f.1 - d.1).abs())
        })
        .fold(0.0, f64::max))
}

/// λ = 0 passes exactly through 100 random control-point sets.
pub fn tps_interpolation() -> CheckResult {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(4..=50);
        let src = random_points(&mut rng, n, 512.0);
        let dst: Vec<_> =
            src.iter().map(|p| (p.0 + rng.random_range(-40.0..=40.0), p.1 + rng.random_range(-40.0..=40.0))).collect();
        worst = worst.max(max_residual(&src, &dst, 0.0)?);
    }
    let secs = t.elapsed().as_secs_f64();
    log::info!("tps_interpolation took {secs:.2} s");
    ensure(worst <= 1e-9, || format!("max residual {worst:.3e} > 1e-9"))?;
    ensure(secs < 5.0, || format!("took {secs:.1} s"))?;
    Ok(format!("max residual {worst:.1e}"))
}

/// Affine targets are reproduced exactly for any λ.
pub fn tps_affine() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (s, c) = 10f64.to_radians().sin_cos();
    let affine = |p: (f64, f64)| (c * p.0 - s * p.1 + 7.0, s * p.0 + c * p.1 - 3.0);
    let src = random_points(&mut rng, 20, 512.0);
    let dst: Vec<_> = src.iter().map(|&p| affine(p)).collect();
    let queries = random_points(&mut rng, 1000, 512.0);
    let mut worst: f64 = 0.0;
    for lambda in [0.0, 0.2] {
        let m = tps_fit(&src, &dst, lambda).map_err(e2s)?;
        for &q in &queries {
            let (f, e) = (m.eval(q.0, q.1), affine(q));
            worst = worst.max((f.0 - e.0).abs().max((f.1 - e.1).abs()));
        }
        let field = tps_evaluate(&m, 64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let e = affine((x as f64, y as f64));
                let d = field.at(x, y);
                worst = worst.max((x as f64 + d[0] - e.0).abs().max((y as f64 + d[1] - e.1).abs()));
            }
        }
    }
    ensure(worst <= 1e-8, || format!("max deviation {worst:.3e} > 1e-8"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

/// A vanishing λ recovers the interpolant; residuals grow with λ.
pub fn tps_regularisation() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(6..=30);
        let src = random_points(&mut rng, n, 512.0);
        let dst: Vec<_> =
            src.iter().map(|p| (p.0 + rng.random_range(-20.0..=20.0), p.1 + rng.random_range(-20.0..=20.0))).collect();
        let exact = tps_fit(&src, &dst, 0.0).map_err(e2s)?;
        let near = tps_fit(&src, &dst, 1e-10).map_err(e2s)?;
        for q in random_points(&mut rng, 200, 512.0) {
            let (a, b) = (exact.eval(q.0, q.1), near.eval(q.0, q.1));
            worst = worst.max((a.0 - b.0).abs().max((a.1 - b.1).abs()));
        }
        let mut prev = -1.0;
        for lambda in [0.0, 0.05, 0.2, 1.0] {
            let m = tps_fit(&src, &dst, lambda).map_err(e2s)?;
            let r = src
                .iter()
                .zip(&dst)
                .map(|(s, d)| {
                    let f = m.eval(s.0, s.1);
                    (f.0 - d.0).powi(2) + (f.1 - d.1).powi(2)
                })
                .sum::<f64>()
                .sqrt();
            ensure(r >= prev, || format!("residual fell from {prev:.3e} to {r:.3e} at λ={lambda}"))?;
            prev = r;
        }
    }
    ensure(worst <= 1e-6, || format!("λ→0 deviation {worst:.3e} > 1e-6"))?;
    Ok(format!("λ→0 deviation {worst:.1e}"))
}

/// Clamped bilinear lookup written independently of the library.
fn oracle_sample(d: &DeformationField, x: f64, y: f64) -> [f64; 2] {
    let cx = x.clamp(0.0, (d.width - 1) as f64);
    let cy = y.clamp(0.0, (d.height - 1) as f64);
    let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(d.width - 1), (y0 + 1).min(d.height - 1));
    let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
    let mut out = [0.0; 2];
    for (k, o) in out.iter_mut().enumerate() {
        let top = d.at(x0, y0)[k] * (1.0 - fx) + d.at(x1, y0)[k] * fx;
        let bot = d.at(x0, y1)[k] * (1.0 - fx) + d.at(x1, y1)[k] * fx;
        *o = top * (1.0 - fy) + bot * fy;
    }
    out
}

/// Constant fields add exactly; smooth fields match a per-pixel oracle.
pub fn compose_fields() -> CheckResult {
    let c = compose(&DeformationField::constant(20, 30, 1.5, -2.25), &DeformationField::constant(20, 30, -0.5, 4.0))
        .map_err(e2s)?;
    ensure(c.disp.iter().all(|v| *v == [1.0, 1.75]), || "constant composition is not exact".into())?;
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let (h, w) = (rng.random_range(8..48), rng.random_range(8..48));
        let coef: Vec<f64> = (0..8).map(|_| rng.random_range(-6.0..6.0)).collect();
        let freq: Vec<f64> = (0..8).map(|_| rng.random_range(0.02..0.3)).collect();
        let smooth = |k: usize| {
            let (a, f) = (coef[k..k + 4].to_vec(), freq[k..k + 4].to_vec());
            DeformationField::from_fn(h, w, move |x, y| {
                let (x, y) = (x as f64, y as f64);
                [a[0] * (f[0] * x + f[1] * y).sin() + a[1], a[2] * (f[2] * y - f[3] * x).cos() + a[3]]
            })
        };
        let (dc, df) = (smooth(0), smooth(4));
        let got = compose(&dc, &df).map_err(e2s)?;
        for y in 0..h {
            for x in 0..w {
                let f = df.at(x, y);
                let s = oracle_sample(&dc, x as f64 + f[0], y as f64 + f[1]);
                let g = got.at(x, y);
                worst = worst.max((g[0] - s[0] - f[0]).abs().max((g[1] - s[1] - f[1]).abs()));
            }
        }
    }
    ensure(worst <= 1e-10, || format!("max oracle deviation {worst:.3e} > 1e-10"))?;
    Ok(format!("max oracle deviation {worst:.1e}"))
}

/// Brute-force dual softmax: every entry from its own row and column sums.
fn oracle_dual_softmax(c: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, m) = (c.len(), c[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let rmax = c[i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let rsum: f64 = (0..m).map(|k| (c[i][k] - rmax).exp()).sum();
            let cmax = (0..n).map(|k| c[k][j]).fold(f64::NEG_INFINITY, f64::max);
            let csum: f64 = (0..n).map(|k| (c[k][j] - cmax).exp()).sum();
            out[i][j] = (c[i][j] - rmax).exp() / rsum * ((c[i][j] - cmax).exp() / csum);
        }
    }
    out
}

fn oracle_mnn(p: &[Vec<f64>], theta: f64) -> Vec<(usize, usize)> {
    let (n, m) = (p.len(), p[0].len());
    let mut out = Vec::new();
    for i in 0..n {
        for j in 0..m {
            let row_best = (0..m).all(|k| p[i][k] < p[i][j] || (p[i][k] == p[i][j] && k >= j));
            let col_best = (0..n).all(|k| p[k][j] < p[i][j] || (p[k][j] == p[i][j] && k >= i));
            if row_best && col_best && p[i][j] >= theta {
                out.push((i, j));
            }
        }
    }
    out
}

/// Vectorised matching equals the double-loop oracle on 1000 matrices.
pub fn dual_softmax_mnn() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst: f64 = 0.0;
    let mut total_pairs = 0;
    for _ in 0..1000 {
        let (n, m) = (rng.random_range(1..=12), rng.random_range(1..=15));
        let scale = rng.random_range(0.1..10.0);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).collect();
        let theta = rng.random_range(0.0..0.5);
        let p = dual_softmax(&Tensor::from_rows(&rows));
        let want = oracle_dual_softmax(&rows);
        for i in 0..n {
            for j in 0..m {
                worst = worst.max((p.get2(i, j) - want[i][j]).abs());
            }
        }
        let got: Vec<(usize, usize)> =
            mnn_filter(&p, theta, (1, n), (1, m)).map_err(e2s)?.pairs.iter().map(|q| (q.i, q.j)).collect();
        let expect = oracle_mnn(&want, theta);
        ensure(got == expect, || format!("pair sets differ on a {n}x{m} matrix: {got:?} vs {expect:?}"))?;
        total_pairs += got.len();
    }
    ensure(worst <= 1e-12, || format!("max probability deviation {worst:.3e} > 1e-12"))?;
    Ok(format!("{total_pairs} pairs identical, max deviation {worst:.1e}"))
}

/// The toy sample used by the gradient and training checks.
pub fn toy_sample(seed: u64) -> std::result::Result<TrainSample, String> {
    let s = warped_pair(32, 32, 2.0, 8, seed).map_err(e2s)?;
    TrainSample::new(s.a, s.b, &s.corr).map_err(e2s)
}

/// Analytic gradients agree with central differences on the toy network.
pub fn gradients() -> CheckResult {
    let t = Instant::now();
    let w = WeightArchive::random(Manifest::toy(), 8).map_err(e2s)?;
    let sample = toy_sample(7)?;
    let r = grad_check(&w, &[sample], 220, 1e-5, 1).map_err(e2s)?;
    let secs = t.elapsed().as_secs_f64();
    log::info!("gradients took {secs:.2} s");
    let n_tensors = w.tensors().len();
    ensure(r.entries.len() >= 200, || format!("only {} parameters sampled", r.entries.len()))?;
    ensure(r.tensors_covered == n_tensors, || format!("{} of {n_tensors} tensors covered", r.tensors_covered))?;
    if let Some(worst) = &r.worst {
        ensure(worst.rel_err <= 1e-5, || {
            format!("`{}`[{}]: analytic {:.6e} vs numeric {:.6e}", worst.tensor, worst.index, worst.analytic, worst.numeric)
        })?;
    }
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("{} parameters over {} tensors, max relative error {:.1e}", r.entries.len(), n_tensors, r.max_rel_err))
}

/// Unit-σ exact flow costs log 2π; both NLL forms agree.
pub fn flow_closed_form() -> CheckResult {
    let v = flow_nll((3.0, -2.0), (1.0, 1.0), (3.0, -2.0));
    ensure((v - LOG_2PI).abs() <= 1e-10, || format!("unit case gave {v}"))?;
    ensure((v - 1.837_877_066_4).abs() <= 1e-10, || format!("unit case gave {v}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let u = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let s = (rng.random_range(0.05..5.0), rng.random_range(0.05..5.0));
        let t = (rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        let (a, b) = (flow_nll(u, s, t), flow_nll_density(u, s, t));
        worst = worst.max((a - b).abs() / a.abs().max(1.0));
    }
    ensure(worst <= 1e-12, || format!("forms differ by {worst:.3e}"))?;
    Ok(format!("forms agree to {worst:.1e}"))
}

/// Ground truth from a smooth field, refitted with λ = 0.2, recovers it.
pub fn gt_reconstruction() -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 128;
    let src = random_points(&mut rng, 6, (n - 1) as f64);
    let dst: Vec<_> =
        src.iter().map(|p| (p.0 + rng.random_range(-10.0..=10.0), p.1 + rng.random_range(-10.0..=10.0))).collect();
    let truth = tps_evaluate(&tps_fit(&src, &dst, 0.0).map_err(e2s)?, n, n);
    let full = Mask::full(n, n);
    let gt = build_gt(&truth, &full, &full, 8).map_err(e2s)?;
    let fit = tps_fit(&gt.points_a(), &gt.points_b(), 0.2).map_err(e2s)?;
    let recon = tps_evaluate(&fit, n, n);
    let m = warp_mask(&full, &truth).map_err(e2s)?.and(&full).map_err(e2s)?;
    let (mut sum, mut max, mut count) = (0.0, 0.0f64, 0usize);
    for y in 0..n {
        for x in 0..n {
            if m.get(x, y) {
                let (a, b) = (truth.at(x, y), recon.at(x, y));
                let e = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
                sum += e;
                max = max.max(e);
                count += 1;
            }
        }
    }
    ensure(count > 0, || "empty overlap".into())?;
    let mean = sum / count as f64;
    ensure(mean <= 0.5 && max <= 2.0, || format!("endpoint error mean {mean:.3} px, max {max:.3} px"))?;
    Ok(format!("{} pairs, endpoint error mean {mean:.3} px, max {max:.3} px", gt.len()))
}

/// 200 descent steps at least halve the toy loss without large bumps.
pub fn toy_training() -> CheckResult {
    let t = Instant::now();
    let w = WeightArchive::random(Manifest::toy(), 8).map_err(e2s)?;
    let (_, trace) = train_toy(&w, &toy_sample(7)?, 200, TOY_LR).map_err(e2s)?;
    let totals: Vec<f64> = trace.iter().map(|r| r.total).collect();
    let (first, last) = (totals[0], *totals.last().expect("200 steps"));
    let secs = t.elapsed().as_secs_f64();
    log::info!("toy_training took {secs:.2} s");
    ensure(last <= 0.5 * first, || format!("loss {first:.4} -> {last:.4}"))?;
    ensure(windowed_monotone(&totals, 50, 0.1), || "loss rose by more than 10% within a 50-step window".into())?;
    ensure(secs < 300.0, || format!("took {secs:.0} s"))?;
    Ok(format!("loss {first:.4} -> {last:.4}"))
}

/// Score-set metrics and NCC on fixed fixtures.
pub fn metrics() -> CheckResult {
    let same = ScoreSet { genuine: vec![0.1, 0.4, 0.7], impostor: vec![0.1, 0.4, 0.7] };
    let e = eer(&same).map_err(e2s)?;
    ensure(e == 0.5, || format!("EER on identical distributions is {e}"))?;
    let fx = ScoreSet { genuine: vec![0.9, 0.8, 0.3], impostor: vec![0.7, 0.2, 0.1] };
    let z = zero_fmr(&fx).map_err(e2s)?;
    ensure(z == 1.0 / 3.0, || format!("ZeroFMR fixture gave {z}"))?;
    let sep = ScoreSet { genuine: vec![0.9, 0.8], impostor: vec![0.1, 0.2] };
    ensure(eer(&sep).map_err(e2s)? == 0.0, || "separable EER is not 0".into())?;
    let rows = [vec![0.9, 0.1, 0.2], vec![0.3, 0.6, 0.1], vec![0.5, 0.5, 0.1]];
    let r = rank1(&rows, &[0, 1, 1]).map_err(e2s)?;
    ensure(r == 2.0 / 3.0, || format!("rank-1 fixture gave {r}"))?;
    let a = Image::new(2, 3, vec![0.1, 0.5, 0.9, 0.3, 0.2, 0.8]).map_err(e2s)?;
    let s = ncc(&a, &a, &Mask::full(2, 3)).map_err(e2s)?;
    ensure((s - 1.0).abs() < 1e-12, || format!("self NCC is {s}"))?;
    Ok("EER 0.5, ZeroFMR 1/3, rank-1 2/3, self NCC 1".into())
}

/// RWA1 and DFL1 rewrite bit-identically; the CSV keeps 6 decimals.
pub fn formats() -> CheckResult {
    let w = WeightArchive::random(Manifest::toy(), 4).map_err(e2s)?;
    let mut first = Vec::new();
    w.write_to(&mut first).map_err(e2s)?;
    let mut second = Vec::new();
    WeightArchive::read_from(&mut first.as_slice()).map_err(e2s)?.write_to(&mut second).map_err(e2s)?;
    ensure(first == second, || "RWA1 rewrite differs".into())?;
    let rwa_len = first.len();

    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let disp = (0..17 * 23).map(|_| [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)]).collect();
    let d = DeformationField { height: 17, width: 23, disp };
    let mut first = Vec::new();
    d.write_to(&mut first).map_err(e2s)?;
    let mut second = Vec::new();
    DeformationField::read_from(&mut first.as_slice()).map_err(e2s)?.write_to(&mut second).map_err(e2s)?;
    ensure(first == second, || "DFL1 rewrite differs".into())?;

    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let pairs: Vec<Correspondence> = (0..50)
        .map(|_| {
            let mut c = Correspondence::new(
                rng.random_range(0.0..500.0),
                rng.random_range(0.0..500.0),
                rng.random_range(0.0..500.0),
                rng.random_range(0.0..500.0),
            );
            c.conf = rng.random_range(0.0..1.0);
            c
        })
        .collect();
    let set = CorrespondenceSet::new(pairs);
    let mut buf = Vec::new();
    set.write_csv(&mut buf).map_err(e2s)?;
    let back = CorrespondenceSet::read_csv(buf.as_slice()).map_err(e2s)?;
    ensure(back.len() == set.len(), || "CSV row count changed".into())?;
    let worst = set
        .pairs
        .iter()
        .zip(&back.pairs)
        .map(|(a, b)| {
            [a.xa - b.xa, a.ya - b.ya, a.xb - b.xb, a.yb - b.yb, a.conf - b.conf].iter().fold(0.0f64, |m, v| m.max(v.abs()))
        })
        .fold(0.0, f64::max);
    ensure(worst <= 1e-6, || format!("CSV round-trip error {worst:.3e}"))?;
    Ok(format!("RWA1 {rwa_len} bytes, DFL1 {} bytes, CSV error {worst:.1e}", first.len()))
}
