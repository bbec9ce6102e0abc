//! Command implementations behind the `ridgealign` binary. Each `cmd_*`
//! function writes its artifacts and returns a summary; [`CliError`] maps
//! failures to process exit codes.

pub mod checks;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use ridgealign::losses::{train, write_trace, LossReport, Optimizer, TrainConfig, TrainSample};
use ridgealign::pipeline::{overlay, register, save_overlay};
use ridgealign::scorer::{det_curve, eer, ncc, rank1, write_det, write_metrics, zero_fmr, ScoreSet};
use ridgealign::synth::warped_pair;
use ridgealign::warpfield::{build_gt, compose, read_image, read_mask, write_mask, write_pgm};
use ridgealign::{CorrespondenceSet, DeformationField, Error, Manifest, WeightArchive};

pub const EXIT_SELFTEST: i32 = 1;
pub const EXIT_REGISTRATION: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_ARCHIVE: i32 = 4;
pub const EXIT_METRIC: i32 = 5;
pub const EXIT_CONFIG: i32 = 6;
pub const EXIT_TRAINING: i32 = 7;
pub const EXIT_USAGE: i32 = 64;

/// Score recorded for a pair that could not be registered.
pub const FAILURE_SCORE: f64 = -1.0;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("self-test failed: {0}")]
    SelfTest(String),
    #[error("{path}: {source}")]
    Input { path: PathBuf, source: Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        let e = match self {
            CliError::SelfTest(_) => return EXIT_SELFTEST,
            CliError::Core(e) | CliError::Input { source: e, .. } => e,
        };
        match e {
            Error::InsufficientMatches(_) | Error::Singular(_) => EXIT_REGISTRATION,
            Error::Io(_) | Error::Image(_) | Error::Csv(_) | Error::Format(_) => EXIT_IO,
            Error::Archive(_) | Error::MissingTensor(_) | Error::Json(_) => EXIT_ARCHIVE,
            Error::Metric(_) | Error::UndefinedScore(_) => EXIT_METRIC,
            Error::Config(_) | Error::Dimension(_) => EXIT_CONFIG,
            Error::Diverged { .. } | Error::GradCheck { .. } => EXIT_TRAINING,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn at(path: &Path) -> impl FnOnce(Error) -> CliError + '_ {
    move |source| CliError::Input { path: path.to_path_buf(), source }
}

/// Options shared by every command.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub weights: Option<PathBuf>,
    pub theta: Option<f64>,
    pub window: Option<usize>,
    pub lambda: Option<f64>,
    pub stride: usize,
    pub seed: u64,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            weights: None,
            theta: None,
            window: None,
            lambda: None,
            stride: 8,
            seed: 0,
            threads: 1,
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    /// Loads the archive (or seeds an untrained one) and applies overrides.
    pub fn load_weights(&self) -> Result<WeightArchive> {
        let mut w = match &self.weights {
            Some(p) => WeightArchive::load(p).map_err(at(p))?,
            None => {
                log::warn!("no --weights given; using untrained toy weights from seed {}", self.seed);
                WeightArchive::random(Manifest::toy(), self.seed)?
            }
        };
        let m = w.manifest().clone();
        w.set_runtime(self.theta.unwrap_or(m.theta), self.window.unwrap_or(m.window), self.lambda.unwrap_or(m.lambda))?;
        Ok(w)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out).map_err(|e| at(&self.out)(e.into()))?;
        Ok(&self.out)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| CliError::Core(Error::Config(format!("thread pool: {e}"))))
    }
}

fn load_image(p: &Path) -> Result<ridgealign::Image> {
    read_image(p).map_err(at(p))
}

fn load_mask(p: Option<&Path>) -> Result<Option<ridgealign::Mask>> {
    p.map(|p| read_mask(p).map_err(at(p))).transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisterSummary {
    pub matches: usize,
    pub ncc_before: f64,
    pub ncc_after: f64,
}

/// Registers A onto B and writes `correspondences.csv`, `field.dfl`,
/// `warped.pgm`, `warped_mask.pgm`, `overlay.png` and `score.csv`.
pub fn cmd_register(
    a: &Path,
    b: &Path,
    mask_a: Option<&Path>,
    mask_b: Option<&Path>,
    cfg: &RunConfig,
) -> Result<RegisterSummary> {
    let w = cfg.load_weights()?;
    let (ia, ib) = (load_image(a)?, load_image(b)?);
    let (ma, mb) = (load_mask(mask_a)?, load_mask(mask_b)?);
    let r = cfg.pool()?.install(|| register(&ia, &ib, ma.as_ref(), mb.as_ref(), &w))?;
    let out = cfg.out_dir()?;
    r.corr.save(&out.join("correspondences.csv"))?;
    r.field.save(&out.join("field.dfl"))?;
    write_pgm(&r.warped, &out.join("warped.pgm"))?;
    write_mask(&r.warped_mask, &out.join("warped_mask.pgm"))?;
    save_overlay(&overlay(&r.warped, &r.warped_mask, &ib, &r.mask_b)?, &out.join("overlay.png"))?;
    let rows = [("matches", r.corr.len() as f64), ("ncc_before", r.ncc_before), ("ncc_after", r.ncc_after)];
    write_metrics(&rows, fs::File::create(out.join("score.csv"))?)?;
    Ok(RegisterSummary { matches: r.corr.len(), ncc_before: r.ncc_before, ncc_after: r.ncc_after })
}

/// Composes the coarse and fine fields and writes grid correspondences.
pub fn cmd_make_gt(
    coarse: &Path,
    fine: &Path,
    mask_a: &Path,
    mask_b: &Path,
    cfg: &RunConfig,
) -> Result<CorrespondenceSet> {
    let dc = DeformationField::load(coarse).map_err(at(coarse))?;
    let df = DeformationField::load(fine).map_err(at(fine))?;
    let ma = read_mask(mask_a).map_err(at(mask_a))?;
    let mb = read_mask(mask_b).map_err(at(mask_b))?;
    let gt = build_gt(&compose(&dc, &df)?, &ma, &mb, cfg.stride)?;
    gt.save(&cfg.out_dir()?.join("correspondences.csv"))?;
    Ok(gt)
}

/// NCC of two images over the intersection of their masks (full when
/// absent).
pub fn cmd_score(a: &Path, b: &Path, mask_a: Option<&Path>, mask_b: Option<&Path>, cfg: &RunConfig) -> Result<f64> {
    let (ia, ib) = (load_image(a)?, load_image(b)?);
    let full = |img: &ridgealign::Image| ridgealign::Mask::full(img.height, img.width);
    let ma = load_mask(mask_a)?.unwrap_or_else(|| full(&ia));
    let mb = load_mask(mask_b)?.unwrap_or_else(|| full(&ib));
    let s = ncc(&ia, &ib, &ma.and(&mb)?)?;
    write_metrics(&[("ncc", s)], fs::File::create(cfg.out_dir()?.join("score.csv"))?)?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub a: PathBuf,
    pub b: PathBuf,
    pub genuine: bool,
}

/// Reads an `a,b,label` CSV where label is `genuine` or `impostor`.
/// Relative paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| at(path)(e.into()))?;
    let header: Vec<String> = rdr.headers().map_err(|e| at(path)(e.into()))?.iter().map(str::to_owned).collect();
    if header != ["a", "b", "label"] {
        return Err(at(path)(Error::Format(format!("expected header a,b,label, got {}", header.join(",")))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| at(path)(e.into()))?;
        let genuine = match &rec[2] {
            "genuine" => true,
            "impostor" => false,
            other => return Err(at(path)(Error::Format(format!("unknown label `{other}`")))),
        };
        rows.push(ManifestRow { a: base.join(&rec[0]), b: base.join(&rec[1]), genuine });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub score: f64,
    pub before: Option<f64>,
    pub error: Option<String>,
}

fn score_pair(a: &Path, b: &Path, w: &WeightArchive) -> PairScore {
    let run = || -> Result<(f64, f64)> {
        let r = register(&load_image(a)?, &load_image(b)?, None, None, w)?;
        Ok((r.ncc_after, r.ncc_before))
    };
    match run() {
        Ok((after, before)) => PairScore { score: after, before: Some(before), error: None },
        Err(e) => {
            log::warn!("{} vs {}: {e}; scoring {FAILURE_SCORE}", a.display(), b.display());
            PairScore { score: FAILURE_SCORE, before: None, error: Some(e.to_string()) }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub eer: f64,
    pub zero_fmr: f64,
    pub rank1: Option<f64>,
    pub failures: usize,
    pub mean_genuine_before: f64,
    pub mean_genuine_after: f64,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Registers every manifest pair and writes `scores.csv`, `metrics.csv`
/// and `det.csv`. A gallery manifest (`query,gallery` rows naming each
/// probe's genuine mate) adds rank-1 over all listed gallery images.
pub fn cmd_eval(manifest: &Path, gallery: Option<&Path>, cfg: &RunConfig) -> Result<EvalSummary> {
    let rows = read_manifest(manifest)?;
    if rows.is_empty() {
        return Err(Error::Metric("manifest lists no pairs".into()).into());
    }
    let w = cfg.load_weights()?;
    let pool = cfg.pool()?;
    let scores: Vec<PairScore> = pool.install(|| rows.par_iter().map(|r| score_pair(&r.a, &r.b, &w)).collect());

    let out = cfg.out_dir()?;
    let mut wtr = csv::Writer::from_path(out.join("scores.csv"))?;
    wtr.write_record(["a", "b", "label", "score", "ncc_before", "status"])?;
    for (r, s) in rows.iter().zip(&scores) {
        wtr.write_record([
            r.a.display().to_string(),
            r.b.display().to_string(),
            if r.genuine { "genuine" } else { "impostor" }.to_string(),
            format!("{:.6}", s.score),
            s.before.map_or(String::new(), |v| format!("{v:.6}")),
            s.error.clone().unwrap_or_else(|| "ok".into()),
        ])
        ?;
    }
    wtr.flush()?;

    let set = ScoreSet {
        genuine: rows.iter().zip(&scores).filter(|(r, _)| r.genuine).map(|(_, s)| s.score).collect(),
        impostor: rows.iter().zip(&scores).filter(|(r, _)| !r.genuine).map(|(_, s)| s.score).collect(),
    };
    let (e, z) = (eer(&set)?, zero_fmr(&set)?);
    let ok_genuine: Vec<(f64, f64)> = rows
        .iter()
        .zip(&scores)
        .filter(|(r, s)| r.genuine && s.error.is_none())
        .map(|(_, s)| (s.before.expect("successful pair"), s.score))
        .collect();
    let before = mean(&ok_genuine.iter().map(|p| p.0).collect::<Vec<_>>());
    let after = mean(&ok_genuine.iter().map(|p| p.1).collect::<Vec<_>>());
    let failures = scores.iter().filter(|s| s.error.is_some()).count();
    let r1 = gallery.map(|g| eval_rank1(g, &w, &pool)).transpose()?;

    let mut metrics = vec![
        ("eer", e),
        ("zerofmr", z),
        ("genuine_pairs", set.genuine.len() as f64),
        ("impostor_pairs", set.impostor.len() as f64),
        ("failures", failures as f64),
        ("mean_genuine_ncc_before", before),
        ("mean_genuine_ncc_after", after),
    ];
    if let Some(r) = r1 {
        metrics.push(("rank1", r));
    }
    write_metrics(&metrics, fs::File::create(out.join("metrics.csv"))?)?;
    write_det(&det_curve(&set)?, fs::File::create(out.join("det.csv"))?)?;
    Ok(EvalSummary {
        eer: e,
        zero_fmr: z,
        rank1: r1,
        failures,
        mean_genuine_before: before,
        mean_genuine_after: after,
    })
}

fn eval_rank1(path: &Path, w: &WeightArchive, pool: &rayon::ThreadPool) -> Result<f64> {
    let base = path.parent().unwrap_or(Path::new("."));
    let mut rdr = csv::Reader::from_path(path).map_err(|e| at(path)(e.into()))?;
    let mut pairs: Vec<(PathBuf, PathBuf)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| at(path)(e.into()))?;
        if rec.len() != 2 {
            return Err(at(path)(Error::Format("gallery rows need query,gallery".into())));
        }
        pairs.push((base.join(&rec[0]), base.join(&rec[1])));
    }
    let mut gallery: Vec<PathBuf> = Vec::new();
    for (_, g) in &pairs {
        if !gallery.contains(g) {
            gallery.push(g.clone());
        }
    }
    let genuine: Vec<usize> =
        pairs.iter().map(|(_, g)| gallery.iter().position(|x| x == g).expect("listed")).collect();
    let jobs: Vec<(usize, usize)> = (0..pairs.len()).flat_map(|q| (0..gallery.len()).map(move |g| (q, g))).collect();
    let flat: Vec<f64> =
        pool.install(|| jobs.par_iter().map(|&(q, g)| score_pair(&pairs[q].0, &gallery[g], w).score).collect());
    let table: Vec<Vec<f64>> = flat.chunks(gallery.len().max(1)).map(<[f64]>::to_vec).collect();
    Ok(rank1(&table, &genuine)?)
}

/// One line per check and the overall verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct SelfTestReport {
    pub lines: Vec<(String, bool, String)>,
}

impl SelfTestReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.1)
    }

    pub fn render(&self) -> String {
        let width = self.lines.iter().map(|l| l.0.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (name, ok, detail) in &self.lines {
            s += &format!("{name:<width$}  {}  {detail}\n", if *ok { "PASS" } else { "FAIL" });
        }
        s
    }
}

/// Runs every check; validates the archive first when one is given.
pub fn cmd_selftest(cfg: &RunConfig) -> Result<SelfTestReport> {
    if let Some(p) = &cfg.weights {
        WeightArchive::load(p).map_err(at(p))?;
    }
    let lines = checks::all()
        .into_iter()
        .map(|c| match (c.run)() {
            Ok(d) => (c.name.to_string(), true, d),
            Err(d) => (c.name.to_string(), false, d),
        })
        .collect();
    Ok(SelfTestReport { lines })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainToyOptions {
    pub pairs: usize,
    pub size: usize,
    pub max_disp: f64,
    pub steps: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainToyOptions {
    fn default() -> Self {
        Self {
            pairs: 1,
            size: 32,
            max_disp: 2.0,
            steps: 200,
            lr: ridgealign::losses::TOY_LR,
            optimizer: Optimizer::Sgd,
        }
    }
}

/// Trains toy weights on synthetic warped pairs and writes `weights.rwa`
/// and `loss_trace.csv`. Starts from `--weights` when given.
pub fn cmd_train_toy(opts: &TrainToyOptions, cfg: &RunConfig) -> Result<Vec<LossReport>> {
    let w0 = match &cfg.weights {
        Some(p) => WeightArchive::load(p).map_err(at(p))?,
        None => WeightArchive::random(Manifest::toy(), cfg.seed)?,
    };
    let samples = (0..opts.pairs)
        .map(|k| {
            let s = warped_pair(opts.size, opts.size, opts.max_disp, 8, cfg.seed.wrapping_add(1000 + k as u64))?;
            TrainSample::new(s.a, s.b, &s.corr)
        })
        .collect::<ridgealign::Result<Vec<_>>>()?;
    let tc = TrainConfig { steps: opts.steps, lr: opts.lr, clip: Some(10.0), optimizer: opts.optimizer };
    let (w, trace) = train(&w0, &samples, &tc, |step, r| log::info!("step {step}: total {:.6}", r.total))?;
    let out = cfg.out_dir()?;
    w.save(&out.join("weights.rwa"))?;
    write_trace(&trace, fs::File::create(out.join("loss_trace.csv"))?)?;
    Ok(trace)
}

/// Writes `count` synthetic images with warped copies, their masks, and
/// an eval manifest pairing each image with its copy (genuine) and with
/// the copy of the image `shift` places on (impostor).
pub fn cmd_synth(count: usize, size: usize, max_disp: f64, cfg: &RunConfig) -> Result<PathBuf> {
    if count < 2 {
        return Err(Error::Config("need at least two images".into()).into());
    }
    let out = cfg.out_dir()?;
    for k in 0..count {
        let s = warped_pair(size, size, max_disp, cfg.stride, cfg.seed.wrapping_add(k as u64))?;
        write_pgm(&s.a, &out.join(format!("img{k:03}_a.pgm")))?;
        write_pgm(&s.b, &out.join(format!("img{k:03}_b.pgm")))?;
        write_mask(&s.mask_a, &out.join(format!("img{k:03}_a_mask.pgm")))?;
        write_mask(&s.mask_b, &out.join(format!("img{k:03}_b_mask.pgm")))?;
        s.corr.save(&out.join(format!("img{k:03}_gt.csv")))?;
    }
    let path = out.join("manifest.csv");
    let mut wtr = csv::Writer::from_path(&path)?;
    wtr.write_record(["a", "b", "label"])?;
    let shift = count / 3 + 1;
    for k in 0..count {
        let a = format!("img{k:03}_a.pgm");
        wtr.write_record([a.clone(), format!("img{k:03}_b.pgm"), "genuine".into()])?;
        let other = (k + shift) % count;
        wtr.write_record([a, format!("img{other:03}_b.pgm"), "impostor".into()])?;
    }
    wtr.flush()?;
    Ok(path)
}
