use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ridgealign::synth::ridge_image;
use ridgealign::warpfield::{write_mask, write_pgm};
use ridgealign::{DeformationField, Image, Mask};
use ridgealign_cli::{EXIT_ARCHIVE, EXIT_METRIC, EXIT_REGISTRATION, EXIT_USAGE};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ridgealign")).args(args).current_dir(cwd).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn write_pair(dir: &Path) {
    let (img, m) = ridge_image(64, 64, 3);
    write_pgm(&img, &dir.join("a.pgm")).unwrap();
    write_mask(&m, &dir.join("m.pgm")).unwrap();
}

#[test]
fn register_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path());
    let o = run(&["register", "a.pgm", "a.pgm", "--mask-a", "m.pgm", "--mask-b", "m.pgm", "--seed", "3", "--theta", "0.001"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["correspondences.csv", "field.dfl", "warped.pgm", "warped_mask.pgm", "overlay.png", "score.csv"] {
        assert!(dir.path().join("out").join(f).exists(), "{f} missing");
    }
    let corr = ridgealign::CorrespondenceSet::load(&dir.path().join("out/correspondences.csv")).unwrap();
    assert!(corr.len() >= 3);
}

#[test]
fn register_output_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path());
    let base = ["register", "a.pgm", "a.pgm", "--mask-a", "m.pgm", "--mask-b", "m.pgm", "--seed", "3", "--theta", "0.001"];
    let o1 = run(&[&base[..], &["--out", "o1"]].concat(), dir.path());
    let o2 = run(&[&base[..], &["--out", "o2", "--threads", "4"]].concat(), dir.path());
    assert_eq!(code(&o1), 0);
    assert_eq!(code(&o2), 0);
    for f in ["correspondences.csv", "field.dfl", "warped.pgm", "score.csv"] {
        let a = fs::read(dir.path().join("o1").join(f)).unwrap();
        let b = fs::read(dir.path().join("o2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn blank_images_exit_with_registration_failure() {
    let dir = tempfile::tempdir().unwrap();
    write_pgm(&Image::filled(64, 64, 0.0), &dir.path().join("blank.pgm")).unwrap();
    let o = run(&["register", "blank.pgm", "blank.pgm"], dir.path());
    assert_eq!(code(&o), EXIT_REGISTRATION);
}

#[test]
fn make_gt_with_zero_fields_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    DeformationField::zeros(32, 32).save(&p.join("z.dfl")).unwrap();
    write_mask(&Mask::full(32, 32), &p.join("full.pgm")).unwrap();
    write_mask(&Mask::empty(32, 32), &p.join("none.pgm")).unwrap();
    let o = run(&["make-gt", "z.dfl", "z.dfl", "full.pgm", "full.pgm", "--stride", "8"], p);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let gt = ridgealign::CorrespondenceSet::load(&p.join("out/correspondences.csv")).unwrap();
    assert_eq!(gt.len(), 16);
    assert!(gt.pairs.iter().all(|c| c.xa == c.xb && c.ya == c.yb));

    let o = run(&["make-gt", "z.dfl", "z.dfl", "full.pgm", "none.pgm", "--out", "disjoint"], p);
    assert_eq!(code(&o), 0);
    let gt = ridgealign::CorrespondenceSet::load(&p.join("disjoint/correspondences.csv")).unwrap();
    assert_eq!(gt.len(), 0);
}

#[test]
fn score_of_an_image_with_itself_is_one() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path());
    let o = run(&["score", "a.pgm", "a.pgm"], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "1.000000");
}

#[test]
fn manifest_without_both_labels_is_a_metric_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("m.csv"), "a,b,label\n").unwrap();
    let o = run(&["eval", "m.csv"], dir.path());
    assert_eq!(code(&o), EXIT_METRIC, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corrupted_archive_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.rwa"), b"RWA1 this is not an archive").unwrap();
    let o = run(&["selftest", "--weights", "bad.rwa"], dir.path());
    assert_eq!(code(&o), EXIT_ARCHIVE);
}

#[test]
fn unknown_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["register", "--bogus"], dir.path())), EXIT_USAGE);
}

#[test]
fn selftest_passes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let o1 = run(&["selftest"], dir.path());
    let o2 = run(&["selftest"], dir.path());
    assert_eq!(code(&o1), 0, "{}", String::from_utf8_lossy(&o1.stdout));
    assert_eq!(o1.stdout, o2.stdout);
}

#[test]
fn train_toy_writes_weights_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train-toy", "--steps", "5", "--seed", "2"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(dir.path().join("out/loss_trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 6);
    let w = ridgealign::WeightArchive::load(&dir.path().join("out/weights.rwa")).unwrap();
    assert_eq!(w.manifest(), &ridgealign::Manifest::toy());
}
