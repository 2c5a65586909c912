//! Command-line entry point: segment slides, tile patches, evaluate masks,
//! compute grading concordance, and generate synthetic phantom corpora.
//!
//! Per-slide problems never abort a corpus run; they are recorded in the
//! summary and the exit code is nonzero only when every slide failed.
//! Every command is deterministic given (inputs, params, seed) and every
//! output directory carries a `provenance.json`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use tissuelab_core::concordance::{
    bootstrap_kappa, discordance_report, pool_predictions, read_predictions_csv,
    write_discordance_csv, KappaResult, Method, PoolReducer, PredictionSet,
};
use tissuelab_core::metrics::{
    aggregate_cohort, failure_report, pixel_confusion, write_metrics_csv, CohortAggregate,
    FailureReport, MaskMetrics,
};
use tissuelab_core::phantom::generate_corpus;
use tissuelab_core::pipeline::{segment_tissue, SegmentationParams};
use tissuelab_core::pyramid::{open_slide, read_at_mpp, read_mask, write_mask};
use tissuelab_core::raster::BinaryMask;
use tissuelab_core::tiler::{extract_records, TileSpec};

#[derive(Parser)]
#[command(name = "tissuelab", version, about = "Tissue detection and evaluation toolkit for whole-slide images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the classical thresholding pipeline over a slide corpus.
    Segment {
        /// Slide manifest file, or a directory scanned for slide.json files.
        #[arg(long)]
        slides: PathBuf,
        /// Segmentation parameter file; built-in defaults when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
        /// Also export per-step pipeline traces.
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Extract tissue patches into one record file per slide.
    Tile {
        #[arg(long)]
        slides: PathBuf,
        /// Directory of masks gating the extraction (<slide_id>.png).
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 512)]
        patch_size: usize,
        #[arg(long, default_value_t = 0)]
        overlap: usize,
        #[arg(long, default_value_t = 8.0)]
        mpp: f64,
        /// Minimum tissue fraction for a patch to be kept.
        #[arg(long, default_value_t = 0.10)]
        min_tissue: f64,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare two mask sets: failure taxonomy, and full pixel metrics
    /// when reference masks are given.
    EvalMasks {
        #[arg(long)]
        masks_a: PathBuf,
        #[arg(long)]
        masks_b: PathBuf,
        /// Reference masks; enables sensitivity/precision metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Slide manifests used to resolve cohorts.
        #[arg(long)]
        slides: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Quadratic-weighted-kappa concordance and discordance reports from a
    /// predictions CSV.
    Kappa {
        /// CSV: slide_id,group_id,cohort,truth_isup,pred_isup_a,pred_isup_b
        #[arg(long)]
        predictions: PathBuf,
        /// failure_report.json whose flagged slides are dropped before
        /// computing kappa.
        #[arg(long)]
        exclude: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        replicates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Reducer for pooling cohorts graded per location/patient.
        #[arg(long, value_enum, default_value_t = PoolArg::Max)]
        pool: PoolArg,
    },
    /// Generate a synthetic phantom corpus with ground-truth masks and
    /// planted grades.
    Phantom {
        #[arg(long, default_value_t = 50)]
        n_slides: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Max,
    Majority,
}

impl From<PoolArg> for PoolReducer {
    fn from(v: PoolArg) -> Self {
        match v {
            PoolArg::Max => PoolReducer::Max,
            PoolArg::Majority => PoolReducer::Majority,
        }
    }
}

#[derive(Serialize, Clone)]
struct Provenance {
    tool: &'static str,
    version: &'static str,
    command: String,
    params_hash: String,
    seed: u64,
}

impl Provenance {
    fn new(command: &str, params: &SegmentationParams, seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(params.to_file_string().as_bytes());
        Self {
            tool: "tissuelab",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            params_hash: format!("{:x}", hasher.finalize()),
            seed,
        }
    }

    fn comment_line(&self) -> String {
        format!(
            "# {} {} {} params={} seed={}\n",
            self.tool,
            self.version,
            self.command,
            &self.params_hash[..12],
            self.seed
        )
    }

    fn write_json(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        std::fs::write(
            out_dir.join("provenance.json"),
            serde_json::to_string_pretty(self)?,
        )?;
        Ok(())
    }
}

/// Collects slide.json manifests: the path itself if it is a file, else a
/// shallow recursive scan, sorted for canonical ordering.
fn discover_manifests(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    fn scan(dir: &Path, depth: usize, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        if depth > 4 {
            return Ok(());
        }
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let p = entry.path();
            if p.is_dir() {
                scan(&p, depth + 1, out)?;
            } else if p.file_name().is_some_and(|n| n == "slide.json") {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    scan(path, 0, &mut out).with_context(|| format!("scanning {}", path.display()))?;
    if out.is_empty() {
        bail!("no slide.json manifests found under {}", path.display());
    }
    out.sort();
    Ok(out)
}

/// Loads every mask in a directory, keyed by the sidecar slide id.
fn load_mask_dir(dir: &Path) -> Result<BTreeMap<String, BinaryMask>> {
    let mut out = BTreeMap::new();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no mask images (*.png) found in {}", dir.display());
    }
    for p in paths {
        let (mask, slide_id) = read_mask(&p).with_context(|| format!("reading {}", p.display()))?;
        if out.insert(slide_id.clone(), mask).is_some() {
            bail!("duplicate slide id `{slide_id}` in {}", dir.display());
        }
    }
    Ok(out)
}

fn cohort_map(slides: Option<&PathBuf>) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if let Some(dir) = slides {
        for mp in discover_manifests(dir)? {
            let slide = open_slide(&mp).with_context(|| format!("opening {}", mp.display()))?;
            out.insert(slide.slide_id().to_string(), slide.manifest.cohort.clone());
        }
    }
    Ok(out)
}

fn configure_jobs(jobs: Option<usize>) -> Result<()> {
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring worker threads")?;
    }
    Ok(())
}

fn csv_file_with_provenance(path: &Path, prov: &Provenance) -> Result<File> {
    let mut f = File::create(path)?;
    f.write_all(prov.comment_line().as_bytes())?;
    Ok(f)
}

struct SegmentOutcome {
    slide_id: String,
    cohort: String,
    status: String,
    threshold: Option<f64>,
    tissue_pixels: Option<usize>,
    detail: String,
}

fn run_segment(
    slides: &Path,
    params_path: Option<&PathBuf>,
    out: &Path,
    jobs: Option<usize>,
    trace: bool,
    seed: u64,
) -> Result<()> {
    configure_jobs(jobs)?;
    let params = match params_path {
        Some(p) => SegmentationParams::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => SegmentationParams::default(),
    };
    let prov = Provenance::new("segment", &params, seed);
    prov.write_json(out)?;
    let manifests = discover_manifests(slides)?;

    let outcomes: Vec<SegmentOutcome> = manifests
        .par_iter()
        .map(|mp| {
            let fallback_id = mp
                .parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| mp.display().to_string());
            match segment_one(mp, &params, out, trace) {
                Ok(o) => o,
                Err(e) => SegmentOutcome {
                    slide_id: fallback_id,
                    cohort: String::new(),
                    status: "error".into(),
                    threshold: None,
                    tissue_pixels: None,
                    detail: format!("{e:#}"),
                },
            }
        })
        .collect();

    let mut rows = outcomes;
    rows.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let f = csv_file_with_provenance(&out.join("segment_summary.csv"), &prov)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["slide_id", "cohort", "status", "threshold", "tissue_pixels", "detail"])?;
    for r in &rows {
        w.write_record([
            r.slide_id.clone(),
            r.cohort.clone(),
            r.status.clone(),
            r.threshold.map(|t| t.to_string()).unwrap_or_default(),
            r.tissue_pixels.map(|n| n.to_string()).unwrap_or_default(),
            r.detail.clone(),
        ])?;
    }
    w.flush()?;

    let n_err = rows.iter().filter(|r| r.status == "error").count();
    for r in rows.iter().filter(|r| r.status != "ok") {
        eprintln!("{}: {} {}", r.slide_id, r.status, r.detail);
    }
    if n_err == rows.len() {
        bail!("all {} slides failed", rows.len());
    }
    println!(
        "segmented {} slides ({} empty, {} errors) -> {}",
        rows.len(),
        rows.iter().filter(|r| r.status == "empty").count(),
        n_err,
        out.display()
    );
    Ok(())
}

fn segment_one(
    manifest: &Path,
    params: &SegmentationParams,
    out: &Path,
    trace: bool,
) -> Result<SegmentOutcome> {
    let slide = open_slide(manifest)?;
    let img = read_at_mpp(&slide, params.target_mpp)?;
    let (mask, tr) = segment_tissue(&img, params)?;
    write_mask(&mask, slide.slide_id(), &out.join("masks").join(format!("{}.png", slide.slide_id())))?;
    if trace {
        tr.export(&out.join("traces").join(slide.slide_id()))?;
    }
    let tissue = mask.count_foreground();
    Ok(SegmentOutcome {
        slide_id: slide.slide_id().to_string(),
        cohort: slide.manifest.cohort.clone(),
        status: if tr.empty_segmentation || tissue == 0 { "empty".into() } else { "ok".into() },
        threshold: tr.threshold,
        tissue_pixels: Some(tissue),
        detail: String::new(),
    })
}

#[allow(clippy::too_many_arguments)]
fn run_tile(
    slides: &Path,
    masks: &Path,
    out: &Path,
    spec: TileSpec,
    jobs: Option<usize>,
    seed: u64,
) -> Result<()> {
    configure_jobs(jobs)?;
    let prov = Provenance::new("tile", &SegmentationParams::default(), seed);
    prov.write_json(out)?;
    let manifests = discover_manifests(slides)?;

    struct Row {
        slide_id: String,
        status: String,
        total: usize,
        kept: usize,
        detail: String,
    }
    let rows: Vec<Row> = manifests
        .par_iter()
        .map(|mp| {
            let run = || -> Result<Row> {
                let slide = open_slide(mp)?;
                let mask_path = masks.join(format!("{}.png", slide.slide_id()));
                let (mask, _) = read_mask(&mask_path)
                    .with_context(|| format!("mask for {}", slide.slide_id()))?;
                let record_path = out.join("records").join(format!("{}.tfrecord", slide.slide_id()));
                let summary = extract_records(&slide, &mask, &spec, &record_path)?;
                Ok(Row {
                    slide_id: summary.slide_id,
                    status: if summary.empty { "empty".into() } else { "ok".into() },
                    total: summary.total_patches,
                    kept: summary.kept_patches,
                    detail: String::new(),
                })
            };
            run().unwrap_or_else(|e| Row {
                slide_id: mp
                    .parent()
                    .and_then(|d| d.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                status: "error".into(),
                total: 0,
                kept: 0,
                detail: format!("{e:#}"),
            })
        })
        .collect();

    let mut rows = rows;
    rows.sort_by(|a, b| a.slide_id.cmp(&b.slide_id));
    let f = csv_file_with_provenance(&out.join("tile_summary.csv"), &prov)?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["slide_id", "status", "total_patches", "kept_patches", "detail"])?;
    for r in &rows {
        w.write_record([
            r.slide_id.clone(),
            r.status.clone(),
            r.total.to_string(),
            r.kept.to_string(),
            r.detail.clone(),
        ])?;
    }
    w.flush()?;
    let n_err = rows.iter().filter(|r| r.status == "error").count();
    if n_err == rows.len() {
        bail!("all {} slides failed", rows.len());
    }
    println!(
        "tiled {} slides ({} empty, {} errors) -> {}",
        rows.len(),
        rows.iter().filter(|r| r.status == "empty").count(),
        n_err,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FailureReportFile<'a> {
    provenance: &'a Provenance,
    method_a: String,
    method_b: String,
    #[serde(flatten)]
    report: &'a FailureReport,
}

#[derive(Serialize)]
struct AggregatesFile<'a> {
    provenance: &'a Provenance,
    method_a: Vec<CohortAggregate>,
    method_b: Vec<CohortAggregate>,
}

fn run_eval(
    masks_a: &Path,
    masks_b: &Path,
    truth: Option<&PathBuf>,
    slides: Option<&PathBuf>,
    out: &Path,
    replicates: usize,
    seed: u64,
) -> Result<()> {
    let prov = Provenance::new("eval-masks", &SegmentationParams::default(), seed);
    prov.write_json(out)?;
    let a = load_mask_dir(masks_a)?;
    let b = load_mask_dir(masks_b)?;
    let cohorts = cohort_map(slides)?;

    let report = failure_report(&a, &b, &cohorts)?;
    let file = FailureReportFile {
        provenance: &prov,
        method_a: masks_a.display().to_string(),
        method_b: masks_b.display().to_string(),
        report: &report,
    };
    std::fs::write(out.join("failure_report.json"), serde_json::to_string_pretty(&file)?)?;
    std::fs::write(
        out.join("failure_report.txt"),
        format!("{}{}", prov.comment_line(), report.to_table("A", "B")),
    )?;

    if let Some(truth_dir) = truth {
        let truth_masks = load_mask_dir(truth_dir)?;
        let evaluate = |pred: &BTreeMap<String, BinaryMask>, name: &str| -> Result<Vec<CohortAggregate>> {
            let mut rows: Vec<(String, MaskMetrics)> = Vec::new();
            for (id, mask) in pred {
                let Some(t) = truth_masks.get(id) else {
                    bail!("no reference mask for slide `{id}`");
                };
                let cohort = cohorts.get(id).cloned().unwrap_or_else(|| "all".into());
                rows.push((cohort, pixel_confusion(id, mask, t)?));
            }
            let f = csv_file_with_provenance(&out.join(format!("metrics_{name}.csv")), &prov)?;
            write_metrics_csv(f, &rows)?;
            let mut by_cohort: BTreeMap<String, Vec<MaskMetrics>> = BTreeMap::new();
            for (cohort, m) in rows {
                by_cohort.entry(cohort).or_default().push(m);
            }
            let mut aggs = Vec::new();
            for (cohort, ms) in by_cohort {
                aggs.push(aggregate_cohort(&cohort, &ms, replicates, seed)?);
            }
            Ok(aggs)
        };
        let agg_a = evaluate(&a, "a")?;
        let agg_b = evaluate(&b, "b")?;
        let file = AggregatesFile { provenance: &prov, method_a: agg_a, method_b: agg_b };
        std::fs::write(out.join("aggregates.json"), serde_json::to_string_pretty(&file)?)?;
    }
    println!(
        "evaluated {} slide pairs; {} excluded by failure taxonomy -> {}",
        report.total.total,
        report.excluded_slide_ids.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct CohortKappa {
    cohort: String,
    pooled: bool,
    n_cases: usize,
    method_a: KappaResult,
    method_b: KappaResult,
}

#[derive(Serialize)]
struct KappaFile<'a> {
    provenance: &'a Provenance,
    n_excluded: usize,
    cohorts: Vec<CohortKappa>,
    overall: CohortKappa,
    discordance: DiscordanceSummary,
}

#[derive(Serialize)]
struct DiscordanceSummary {
    n_total: usize,
    n_discordant: usize,
    overall_rate: f64,
    n_malignant: usize,
    n_discordant_malignant: usize,
    malignant_rate: f64,
}

fn run_kappa(
    predictions: &Path,
    exclude: Option<&PathBuf>,
    out: &Path,
    replicates: usize,
    seed: u64,
    pool: PoolReducer,
) -> Result<()> {
    let prov = Provenance::new("kappa", &SegmentationParams::default(), seed);
    prov.write_json(out)?;
    let file = File::open(predictions).with_context(|| format!("opening {}", predictions.display()))?;
    let mut ps = read_predictions_csv(file)?;

    let mut n_excluded = 0usize;
    if let Some(path) = exclude {
        let text = std::fs::read_to_string(path)?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let ids: Vec<String> = v
            .get("excluded_slide_ids")
            .and_then(|x| serde_json::from_value(x.clone()).ok())
            .context("exclude file has no excluded_slide_ids list")?;
        let before = ps.len();
        ps = ps.drop_excluded(&ids);
        n_excluded = before - ps.len();
    }
    if ps.is_empty() {
        bail!("no prediction rows left to evaluate");
    }

    let kappa_pair = |set: &PredictionSet| -> Result<(KappaResult, KappaResult)> {
        Ok((
            bootstrap_kappa(set, Method::A, replicates, seed)?,
            bootstrap_kappa(set, Method::B, replicates, seed)?,
        ))
    };

    let mut cohort_results = Vec::new();
    for cohort in ps.cohorts() {
        let subset = ps.filter_cohort(&cohort);
        let pooled = subset.rows().iter().any(|r| r.group_id != r.slide_id);
        let set = if pooled { pool_predictions(&subset, pool) } else { subset };
        let (ka, kb) = kappa_pair(&set)?;
        cohort_results.push(CohortKappa {
            cohort,
            pooled,
            n_cases: set.len(),
            method_a: ka,
            method_b: kb,
        });
    }
    let overall_pooled = ps.rows().iter().any(|r| r.group_id != r.slide_id);
    let overall_set = if overall_pooled { pool_predictions(&ps, pool) } else { ps.clone() };
    let (ka, kb) = kappa_pair(&overall_set)?;
    let overall = CohortKappa {
        cohort: "overall".into(),
        pooled: overall_pooled,
        n_cases: overall_set.len(),
        method_a: ka,
        method_b: kb,
    };

    // Discordance is reported at slide level, before pooling.
    let disc = discordance_report(&ps);
    let f = csv_file_with_provenance(&out.join("discordance.csv"), &prov)?;
    write_discordance_csv(f, &disc)?;

    let file = KappaFile {
        provenance: &prov,
        n_excluded,
        cohorts: cohort_results,
        overall,
        discordance: DiscordanceSummary {
            n_total: disc.n_total,
            n_discordant: disc.n_discordant,
            overall_rate: disc.overall_rate(),
            n_malignant: disc.n_malignant,
            n_discordant_malignant: disc.n_discordant_malignant,
            malignant_rate: disc.malignant_rate(),
        },
    };
    std::fs::write(out.join("kappa.json"), serde_json::to_string_pretty(&file)?)?;
    println!(
        "kappa over {} slides ({} excluded), {} discordant -> {}",
        disc.n_total,
        n_excluded,
        disc.n_discordant,
        out.display()
    );
    Ok(())
}

fn run_phantom(n_slides: usize, seed: u64, out: &Path) -> Result<()> {
    if n_slides < 1 {
        bail!("need at least one slide");
    }
    let prov = Provenance::new("phantom", &SegmentationParams::default(), seed);
    prov.write_json(out)?;
    let corpus = generate_corpus(out, n_slides, seed)?;
    let standard = corpus
        .slides
        .iter()
        .filter(|s| s.kind == tissuelab_core::phantom::PhantomKind::Standard)
        .count();
    println!(
        "generated {} phantom slides ({} standard, {} special) -> {}",
        corpus.slides.len(),
        standard,
        corpus.slides.len() - standard,
        out.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Segment { slides, params, out, jobs, trace, seed } => {
            run_segment(&slides, params.as_ref(), &out, jobs, trace, seed)
        }
        Command::Tile { slides, masks, out, patch_size, overlap, mpp, min_tissue, jobs, seed } => {
            let spec = TileSpec { patch_size, overlap, mpp, min_tissue_fraction: min_tissue };
            run_tile(&slides, &masks, &out, spec, jobs, seed)
        }
        Command::EvalMasks { masks_a, masks_b, truth, slides, out, replicates, seed } => {
            run_eval(&masks_a, &masks_b, truth.as_ref(), slides.as_ref(), &out, replicates, seed)
        }
        Command::Kappa { predictions, exclude, out, replicates, seed, pool } => {
            run_kappa(&predictions, exclude.as_ref(), &out, replicates, seed, pool.into())
        }
        Command::Phantom { n_slides, seed, out } => run_phantom(n_slides, seed, &out),
    }
}
