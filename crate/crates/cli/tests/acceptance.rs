use std::time::Instant;

use ridgealign::losses::Optimizer;
use ridgealign_cli::checks::{self, CheckResult};
use ridgealign_cli::{cmd_eval, cmd_synth, cmd_train_toy, RunConfig, TrainToyOptions};

/// Synthetic identities are trained on, then verified through the eval command.
fn trained_verification() -> CheckResult {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = RunConfig { out: dir.path().join("corpus"), seed: 40, ..RunConfig::default() };
    let manifest = cmd_synth(20, 64, 3.0, &corpus).map_err(|e| e.to_string())?;
    let train = RunConfig { out: dir.path().join("train"), seed: 5, ..RunConfig::default() };
    let opts =
        TrainToyOptions { pairs: 4, size: 64, max_disp: 3.0, steps: 300, lr: 3e-3, optimizer: Optimizer::Adam };
    cmd_train_toy(&opts, &train).map_err(|e| e.to_string())?;
    let eval = RunConfig {
        weights: Some(train.out.join("weights.rwa")),
        out: dir.path().join("eval"),
        threads: 0,
        ..RunConfig::default()
    };
    let s = cmd_eval(&manifest, None, &eval).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    let detail = format!(
        "EER {:.3}, genuine NCC {:.3} -> {:.3}, {} failures, {secs:.0} s",
        s.eer, s.mean_genuine_before, s.mean_genuine_after, s.failures
    );
    if s.eer < 0.25 && s.mean_genuine_after > s.mean_genuine_before && secs < 600.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let suite: Vec<(&str, fn() -> CheckResult)> = vec![
        ("tps_interpolation", checks::tps_interpolation),
        ("tps_affine", checks::tps_affine),
        ("tps_regularisation", checks::tps_regularisation),
        ("compose", checks::compose_fields),
        ("dual_softmax_mnn", checks::dual_softmax_mnn),
        ("gradients", checks::gradients),
        ("flow_nll", checks::flow_closed_form),
        ("gt_reconstruction", checks::gt_reconstruction),
        ("toy_training", checks::toy_training),
        ("trained_verification", trained_verification),
        ("metrics", checks::metrics),
        ("formats", checks::formats),
    ];
    let mut failed = Vec::new();
    for (k, (name, run)) in suite.into_iter().enumerate() {
        let (ok, detail) = match run() {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        println!("{:>2} {:<22} {}  {detail}", k + 1, name, if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}
