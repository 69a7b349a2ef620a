use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use irreg::correlation::write_debug_dump;
use irreg::dataset::{
    crop_frame, derive_seed, save_image_atomic, synthesize_set, write_atomic, write_procedural_sources, Manifest,
    ManifestRecord,
};
use irreg::estimator::{
    register_hierarchical, register_hierarchical_probed, EstimatorConfig, LevelDiagnostics, Stage,
};
use irreg::features::{transform_by_name, CouplingParams, FeatureTransform};
use irreg::geometry::{average_corner_error, offsets_from_homography, CornerFrame, CornerOffsets, Homography};
use irreg::imaging::{load_image, warp, Image};
use irreg::metrics::{evaluate_pair, offset_error, to_csv, to_table, MetricRow};

use crate::{
    usage, Cli, CliError, Command, DebugCorrArgs, EvalArgs, Global, MakeScenesArgs, RegisterArgs, StageArg,
    SynthArgs, Target,
};

type CliResult<T = ()> = std::result::Result<T, CliError>;

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::MakeScenes(a) => make_scenes(&cli.global, a),
        Command::Synth(a) => synth(&cli.global, a),
        Command::Register(a) => register(&cli.global, a),
        Command::Eval(a) => eval(&cli.global, a),
        Command::DebugCorr(a) => debug_corr(&cli.global, a),
    }
}

fn load_config(g: &Global) -> CliResult<EstimatorConfig> {
    let mut cfg = match &g.config {
        Some(p) => EstimatorConfig::from_json_file(p).map_err(|e| usage(format!("config {}: {e}", p.display())))?,
        None => EstimatorConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn build_transform(cfg: &EstimatorConfig) -> CliResult<Arc<dyn FeatureTransform>> {
    let params = match &cfg.transform_params {
        Some(p) => Some(Arc::new(
            CouplingParams::load(p).map_err(|e| usage(format!("transform params {}: {e}", p.display())))?,
        )),
        None => None,
    };
    transform_by_name(&cfg.transform, params).map_err(|e| usage(e.to_string()))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn create_dir(p: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn make_scenes(g: &Global, a: &MakeScenesArgs) -> CliResult {
    if a.width < 64 || a.height < 64 {
        return Err(usage("scenes must be at least 64x64"));
    }
    write_procedural_sources(&a.out, a.count, a.width, a.height, g.seed.unwrap_or(0))
        .with_context(|| format!("writing scenes to {}", a.out.display()))?;
    println!("{} scene pairs written to {}", a.count, a.out.display());
    Ok(())
}

fn synth(g: &Global, a: &SynthArgs) -> CliResult {
    if !(a.rho >= 0.0 && a.rho.is_finite()) {
        return Err(usage("--rho must be a non-negative number"));
    }
    if a.size < irreg::imaging::PYRAMID_MIN_SIDE {
        return Err(usage(format!("--size must be at least {}", irreg::imaging::PYRAMID_MIN_SIDE)));
    }
    let m = synthesize_set(&a.src, &a.out, a.size, a.rho, a.count, g.seed.unwrap_or(0))
        .with_context(|| format!("synthesizing from {}", a.src.display()))?;
    print!("{}", m.summary_table());
    Ok(())
}

struct PairJob {
    index: usize,
    src: PathBuf,
    tgt: PathBuf,
    gt: Option<CornerOffsets>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairResult {
    pub index: usize,
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub target: Target,
    pub h_full: Homography,
    pub delta3: Option<CornerOffsets>,
    pub delta2: Option<CornerOffsets>,
    pub delta1: CornerOffsets,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gt: Option<CornerOffsets>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ace: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset_errors: Option<[f64; 3]>,
    pub levels: Vec<LevelDiagnostics>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairTiming {
    pub index: usize,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ace: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub pairs: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub median_ace: Option<f64>,
    pub mean_ace: Option<f64>,
    pub fraction_ace_below_2px: Option<f64>,
    pub mean_seconds: f64,
}

/// Everything needed to rerun a registration batch, plus timing metadata.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub input: String,
    pub target: Target,
    pub config: EstimatorConfig,
    pub seed: u64,
    pub threads: usize,
    pub started_unix: u64,
    pub pairs: Vec<PairTiming>,
    pub summary: RunSummary,
}

fn median(v: &mut [f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some((v[n / 2] + v[(n - 1) / 2]) / 2.0)
}

fn load_target(path: &Path, target: Target) -> anyhow::Result<Image> {
    let img = load_image(path)?;
    Ok(match target {
        Target::Inverted => img.to_gray().map(|v| 1.0 - v),
        _ => img,
    })
}

fn level_errors(r: &irreg::estimator::RegistrationResult, gt: &CornerOffsets) -> Option<[f64; 3]> {
    Some([offset_error(r.delta3.as_ref()?, gt), offset_error(r.delta2.as_ref()?, gt), offset_error(&r.delta1, gt)])
}

fn register_one(job: &PairJob, cfg: &EstimatorConfig, transform: &dyn FeatureTransform, target: Target, out: &Path) -> anyhow::Result<(PairResult, f64)> {
    let src = load_image(&job.src)?;
    let tgt = load_target(&job.tgt, target)?;
    let cfg = EstimatorConfig { seed: derive_seed(cfg.seed, job.index as u64), ..cfg.clone() };
    let t0 = Instant::now();
    let r = register_hierarchical(&src, &tgt, transform, &cfg)?;
    let seconds = t0.elapsed().as_secs_f64();
    let (warped, _) = warp(&src, &r.h_full)?;
    save_image_atomic(&warped, &out.join("warped").join(format!("{:06}.png", job.index)))?;
    let result = PairResult {
        index: job.index,
        src: job.src.clone(),
        tgt: job.tgt.clone(),
        target,
        h_full: r.h_full,
        delta3: r.delta3,
        delta2: r.delta2,
        delta1: r.delta1,
        gt: job.gt,
        ace: job.gt.map(|gt| average_corner_error(&r.delta1, &gt)),
        offset_errors: job.gt.and_then(|gt| level_errors(&r, &gt)),
        levels: r.levels,
    };
    write_atomic(&out.join("results").join(format!("{:06}.json", job.index)), to_json(&result).as_bytes())?;
    Ok((result, seconds))
}

fn manifest_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn register(g: &Global, a: &RegisterArgs) -> CliResult {
    let cfg = load_config(g)?;
    let transform = build_transform(&cfg)?;
    let (jobs, input) = match (&a.manifest, &a.src, &a.tgt) {
        (Some(m), _, _) => {
            let manifest = Manifest::load(m).map_err(|e| CliError::Failure(anyhow!("manifest {}: {e}", m.display())))?;
            let dir = manifest_dir(m);
            let jobs = manifest
                .records
                .iter()
                .map(|r| PairJob {
                    index: r.index,
                    src: dir.join(&r.vis),
                    tgt: dir.join(if a.target == Target::Ir { &r.ir } else { &r.aligned }),
                    gt: Some(r.offsets),
                })
                .collect::<Vec<_>>();
            (jobs, m.display().to_string())
        }
        (None, Some(s), Some(t)) => {
            (vec![PairJob { index: 0, src: s.clone(), tgt: t.clone(), gt: None }], format!("{} -> {}", s.display(), t.display()))
        }
        _ => return Err(usage("give either --manifest or both --src and --tgt")),
    };
    create_dir(&a.out.join("results"))?;
    create_dir(&a.out.join("warped"))?;
    let started_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let outcomes: Vec<anyhow::Result<(PairResult, f64)>> =
        jobs.par_iter().map(|j| register_one(j, &cfg, transform.as_ref(), a.target, &a.out)).collect();
    let mut pairs = Vec::new();
    let mut aces = Vec::new();
    let mut secs = Vec::new();
    for (job, o) in jobs.iter().zip(outcomes) {
        match o {
            Ok((r, s)) => {
                aces.extend(r.ace);
                secs.push(s);
                pairs.push(PairTiming { index: job.index, seconds: s, ace: r.ace, error: None });
            }
            Err(e) => {
                log::warn!("pair {} failed: {e:#}", job.index);
                pairs.push(PairTiming { index: job.index, seconds: 0.0, ace: None, error: Some(format!("{e:#}")) });
            }
        }
    }
    let succeeded = secs.len();
    let summary = RunSummary {
        pairs: jobs.len(),
        succeeded,
        failed: jobs.len() - succeeded,
        mean_ace: (!aces.is_empty()).then(|| aces.iter().sum::<f64>() / aces.len() as f64),
        fraction_ace_below_2px: (!aces.is_empty())
            .then(|| aces.iter().filter(|v| **v < 2.0).count() as f64 / aces.len() as f64),
        median_ace: median(&mut aces),
        mean_seconds: if secs.is_empty() { 0.0 } else { secs.iter().sum::<f64>() / secs.len() as f64 },
    };
    let record = RunRecord {
        command: "register".into(),
        input,
        target: a.target,
        config: cfg,
        seed: g.seed.unwrap_or(0),
        threads: rayon::current_num_threads(),
        started_unix,
        pairs,
        summary,
    };
    write_atomic(&a.out.join("run.json"), to_json(&record).as_bytes()).map_err(anyhow::Error::from)?;
    let s = &record.summary;
    println!("registered {}/{} pairs", s.succeeded, s.pairs);
    if let (Some(med), Some(mean)) = (s.median_ace, s.mean_ace) {
        println!("ACE median {med:.4} px, mean {mean:.4} px");
    }
    println!("mean time per pair {:.3} s", s.mean_seconds);
    if succeeded == 0 && !jobs.is_empty() {
        return Err(CliError::Failure(anyhow!("no pair registered successfully")));
    }
    Ok(())
}

fn eval_one(rec: &ManifestRecord, dir: &Path, results: Option<&Path>, frame: &CornerFrame) -> anyhow::Result<MetricRow> {
    let distorted = load_image(&dir.join(&rec.vis))?;
    let truth = load_image(&dir.join(&rec.aligned))?;
    let (h, levels) = match results {
        Some(res) => {
            let path = res.join("results").join(format!("{:06}.json", rec.index));
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let r: PairResult = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            let levels = match (r.delta3, r.delta2) {
                (Some(d3), Some(d2)) => Some([
                    offset_error(&d3, &rec.offsets),
                    offset_error(&d2, &rec.offsets),
                    offset_error(&r.delta1, &rec.offsets),
                ]),
                _ => None,
            };
            (r.h_full, levels)
        }
        None => (Homography::identity(), None),
    };
    let (registered, mask) = warp(&distorted, &h)?;
    let mut report = evaluate_pair(&registered, &truth, Some(&mask))?;
    report.ace = Some(average_corner_error(&offsets_from_homography(&h, frame)?, &rec.offsets));
    report.offset_errors = levels;
    Ok(MetricRow { id: format!("{:06}", rec.index), report, seconds: None })
}

fn eval(_g: &Global, a: &EvalArgs) -> CliResult {
    let manifest =
        Manifest::load(&a.manifest).map_err(|e| CliError::Failure(anyhow!("manifest {}: {e}", a.manifest.display())))?;
    let dir = manifest_dir(&a.manifest);
    let results = if a.identity { None } else { a.results.as_deref() };
    let frame = crop_frame(manifest.size);
    let rows: Vec<anyhow::Result<MetricRow>> =
        manifest.records.par_iter().map(|r| eval_one(r, &dir, results, &frame)).collect();
    let rows: Vec<MetricRow> = rows.into_iter().collect::<anyhow::Result<_>>()?;
    let out_dir = a.out.clone().or_else(|| results.map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from("."));
    create_dir(&out_dir)?;
    write_atomic(&out_dir.join("results.csv"), to_csv(&rows).as_bytes()).map_err(anyhow::Error::from)?;
    // timings come from the run record and only appear in the printed table
    let timings: BTreeMap<usize, f64> = results
        .and_then(|r| std::fs::read_to_string(r.join("run.json")).ok())
        .and_then(|t| serde_json::from_str::<RunRecord>(&t).ok())
        .map(|run| run.pairs.into_iter().filter(|p| p.error.is_none()).map(|p| (p.index, p.seconds)).collect())
        .unwrap_or_default();
    let timed: Vec<MetricRow> = rows
        .iter()
        .zip(&manifest.records)
        .map(|(r, rec)| MetricRow { seconds: timings.get(&rec.index).copied(), ..r.clone() })
        .collect();
    print!("{}", to_table(&timed));
    Ok(())
}

fn debug_corr(g: &Global, a: &DebugCorrArgs) -> CliResult {
    let cfg = load_config(g)?;
    if !(1..=cfg.levels).contains(&a.level) {
        return Err(usage(format!("--level must be within 1..={}", cfg.levels)));
    }
    if !(1..=cfg.rounds).contains(&a.round) {
        return Err(usage(format!("--round must be within 1..={}", cfg.rounds)));
    }
    let stage = match a.stage {
        StageArg::Horizontal => Stage::Horizontal,
        StageArg::Vertical => Stage::Vertical,
        StageArg::Grid => Stage::Grid,
    };
    let transform = build_transform(&cfg)?;
    let src = load_image(&a.src).with_context(|| format!("loading {}", a.src.display()))?;
    let tgt = load_image(&a.tgt).with_context(|| format!("loading {}", a.tgt.display()))?;
    create_dir(&a.out)?;
    let stem = format!("l{}_r{}_{}", a.level, a.round, format!("{stage:?}").to_lowercase());
    let mut dumped: Option<irreg::Result<()>> = None;
    register_hierarchical_probed(&src, &tgt, transform.as_ref(), &cfg, &mut |p| {
        if p.level == a.level && p.round == a.round && p.stage == stage {
            dumped = Some(write_debug_dump(&a.out, &stem, p.volume, p.field));
        }
    })
    .map_err(anyhow::Error::from)?;
    match dumped {
        Some(r) => r.map_err(anyhow::Error::from)?,
        None => return Err(CliError::Failure(anyhow!("selected stage was never reached"))),
    }
    println!("wrote {}/{stem}.corr.json and {stem}.field.json", a.out.display());
    Ok(())
}
