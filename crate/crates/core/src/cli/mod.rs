//! The `pd-diag` command line.

pub mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use crate::cohort::{load_cohort, read_manifest, write_manifest, Cohort, SubjectRecord};
use crate::diagnoser::Label;
use crate::preprocess::{run_pipeline, verify_processed};
use crate::priors::{default_relevance_table, load_relevance_table, RelevanceTable};
use crate::synth::{generate_cohort, split_cohort, write_cohort};
use crate::training::{
    format_loss_trace, format_predictions, load_checkpoint, metrics_for, parse_predictions,
    predict, prepare_samples, roc_curve, save_checkpoint, train_stage, Checkpoint, Confusion,
    IntensityNorm, Metrics, ModelParams, Prediction, Sample,
};
use crate::volume_io::{read_atlas, AtlasVolume};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "pd-diag",
    version,
    about = "Prior-guided Parkinson's disease classification from T1 volumes"
)]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Commands,
}

#[derive(Debug, Subcommand)]
pub enum Commands {
    /// Generate a synthetic cohort, atlas and manifest.
    Synth(SynthArgs),
    /// Run the external preprocessing tools over a cohort.
    Preprocess(PreprocessArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Write per-subject predictions.
    Predict(PredictArgs),
    /// Compute metrics from predictions or a checkpoint.
    Evaluate(EvaluateArgs),
    /// Write the confusion matrix and ROC points, or dump the effective config.
    Report(ReportArgs),
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    /// Cohort manifest CSV.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Atlas label volume.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
    /// Region relevance CSV (defaults to the built-in table).
    #[arg(long)]
    pub relevance: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct SplitArgs {
    /// Stratified cross-validation folds.
    #[arg(long)]
    pub folds: Option<usize>,
    /// Fold held out for testing.
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long = "n")]
    pub n_subjects: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Cube edge length, or D,H,W.
    #[arg(long)]
    pub dims: Option<String>,
    #[arg(long)]
    pub pd_fraction: Option<f64>,
    #[arg(long)]
    pub acceleration: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Manifest written with the processed volume paths.
    #[arg(long)]
    pub out_manifest: PathBuf,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub template: Option<PathBuf>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Copy inputs through unchanged.
    #[arg(long)]
    pub bypass: bool,
    /// Check processed volumes against this atlas grid.
    #[arg(long)]
    pub atlas: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: Option<u8>,
    /// Directory holding stageN.ckpt and stageN_loss.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Ablation: no prior aggregation (fusion projection fixed at zero).
    #[arg(long)]
    pub no_fusion: bool,
    /// Ablation: no brain-age branch or logit correction.
    #[arg(long)]
    pub no_aging: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Predictions CSV; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction CSVs, one per fold.
    #[arg(long, num_args = 1..)]
    pub predictions: Vec<PathBuf>,
    /// Evaluate a checkpoint directly instead of prediction files.
    #[arg(long, conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub split: SplitArgs,
    /// Metrics document; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long, required_unless_present = "dump_config")]
    pub predictions: Option<PathBuf>,
    #[arg(long, required_unless_present = "dump_config")]
    pub out_dir: Option<PathBuf>,
    /// Print the effective configuration, defaults included.
    #[arg(long)]
    pub dump_config: bool,
}

/// Runs a parsed command line. Errors are returned for the caller to print.
pub fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    match cli.command {
        Commands::Synth(a) => cmd_synth(&mut cfg, a),
        Commands::Preprocess(a) => cmd_preprocess(&mut cfg, a),
        Commands::Train(a) => cmd_train(&mut cfg, a),
        Commands::Predict(a) => cmd_predict(&mut cfg, a),
        Commands::Evaluate(a) => cmd_evaluate(&mut cfg, a),
        Commands::Report(a) => cmd_report(&cfg, a),
    }
}

fn parse_dims(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<usize> = s
        .split([',', 'x'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad --dims {s:?}"))?;
    match parts[..] {
        [n] => Ok((n, n, n)),
        [d, h, w] => Ok((d, h, w)),
        _ => bail!("--dims takes one edge length or D,H,W"),
    }
}

fn cmd_synth(cfg: &mut RunConfig, a: SynthArgs) -> Result<ExitCode> {
    let s = &mut cfg.synth;
    if let Some(n) = a.n_subjects {
        s.n_subjects = n;
    }
    if let Some(seed) = a.seed {
        s.seed = seed;
    }
    if let Some(d) = &a.dims {
        s.dims = parse_dims(d)?;
    }
    if let Some(f) = a.pd_fraction {
        s.pd_fraction = f;
    }
    if let Some(acc) = a.acceleration {
        s.acceleration = acc;
    }
    if let Some(noise) = a.noise {
        s.noise_std = noise;
    }
    for w in s.warnings(cfg.prior.zeta, cfg.prior.tau) {
        eprintln!("warning: {w}");
    }
    let (mut cohort, sa) = generate_cohort(s)?;
    let written = write_cohort(&a.out, &mut cohort, &sa)?;
    println!("manifest {}", written.manifest.display());
    println!("atlas {}", written.atlas.display());
    println!("relevance {}", written.relevance.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_preprocess(cfg: &mut RunConfig, a: PreprocessArgs) -> Result<ExitCode> {
    let p = &mut cfg.preprocess;
    if let Some(d) = a.cache_dir {
        p.cache_dir = d;
    }
    if let Some(t) = a.template {
        p.template = t;
    }
    if let Some(j) = a.jobs {
        p.jobs = j;
    }
    p.bypass |= a.bypass;
    let manifest = a
        .manifest
        .or_else(|| cfg.data.cohort_manifest.clone())
        .ok_or_else(|| anyhow!("no cohort manifest; pass --manifest"))?;
    let records = read_manifest(&manifest)?;
    let mut subjects = Vec::with_capacity(records.len());
    for r in &records {
        let path = r
            .path
            .clone()
            .ok_or_else(|| anyhow!("subject {} has no scan path", r.id))?;
        subjects.push((r.id.clone(), path));
    }
    let results = run_pipeline(&subjects, &cfg.preprocess)?;
    let atlas_dims = match a.atlas.or_else(|| cfg.data.atlas_path.clone()) {
        Some(p) => Some(read_atlas(&p, None)?.dims()),
        None => None,
    };
    let mut out_records = Vec::new();
    let mut failures = 0;
    for (rec, res) in records.iter().zip(&results) {
        let status: Vec<String> = res
            .steps
            .iter()
            .map(|(s, st)| format!("{s}={st:?}").to_lowercase())
            .collect();
        if !res.succeeded() {
            failures += 1;
            eprintln!(
                "{} failed: {}",
                rec.id,
                res.error.as_deref().unwrap_or("unknown error")
            );
            continue;
        }
        if let Some(dims) = atlas_dims {
            let v = crate::volume_io::read_volume(&res.output)?;
            if let Err(e) = verify_processed(&v, dims) {
                failures += 1;
                eprintln!("{}: {e}", rec.id);
                continue;
            }
        }
        println!("{} {}", rec.id, status.join(" "));
        out_records.push(SubjectRecord {
            path: Some(res.output.clone()),
            ..rec.clone()
        });
    }
    write_manifest(&a.out_manifest, &out_records)?;
    if failures > 0 {
        eprintln!("{failures} of {} subjects failed", records.len());
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

fn apply_data(cfg: &mut RunConfig, d: &DataArgs) {
    if let Some(m) = &d.manifest {
        cfg.data.cohort_manifest = Some(m.clone());
    }
    if let Some(a) = &d.atlas {
        cfg.data.atlas_path = Some(a.clone());
    }
    if let Some(r) = &d.relevance {
        cfg.data.relevance_csv = Some(r.clone());
    }
}

fn apply_split(cfg: &mut RunConfig, s: &SplitArgs) {
    if let Some(f) = s.folds {
        cfg.train.folds = f;
    }
    if let Some(f) = s.fold {
        cfg.train.fold = f;
    }
    if let Some(seed) = s.split_seed {
        cfg.train.split_seed = seed;
    }
}

fn relevance_table(cfg: &RunConfig) -> Result<RelevanceTable> {
    Ok(match &cfg.data.relevance_csv {
        Some(p) => load_relevance_table(p)?,
        None => default_relevance_table(),
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Part {
    Train,
    Test,
}

struct Loaded {
    cohort: Cohort,
    atlas: AtlasVolume,
    table: RelevanceTable,
}

impl Loaded {
    fn samples(&self, norm: IntensityNorm) -> Result<Vec<Sample>> {
        Ok(prepare_samples(
            &self.cohort,
            &self.atlas,
            &self.table,
            norm,
        )?)
    }
}

/// Loads the requested side of the split with its atlas and relevance table.
fn load_subjects(cfg: &RunConfig, part: Part) -> Result<Loaded> {
    let manifest = cfg.data.cohort_manifest.as_ref().ok_or_else(|| {
        anyhow!("no cohort manifest; pass --manifest or set data.cohort_manifest")
    })?;
    let atlas_path = cfg
        .data
        .atlas_path
        .as_ref()
        .ok_or_else(|| anyhow!("no atlas; pass --atlas or set data.atlas_path"))?;
    let table = relevance_table(cfg)?;
    let atlas = read_atlas(atlas_path, Some(table.regions()))?;
    let mut records = read_manifest(manifest)?;
    if cfg.train.folds > 0 {
        let labels: Vec<Label> = records
            .iter()
            .map(|r| {
                r.label
                    .ok_or_else(|| anyhow!("cross-validation needs labels; {} has none", r.id))
            })
            .collect::<Result<_>>()?;
        let folds = split_cohort(&labels, cfg.train.folds, cfg.train.split_seed)?;
        let fold = folds.get(cfg.train.fold).ok_or_else(|| {
            anyhow!(
                "fold {} out of range for {} folds",
                cfg.train.fold,
                cfg.train.folds
            )
        })?;
        let keep = if part == Part::Train {
            &fold.train
        } else {
            &fold.test
        };
        records = keep.iter().map(|&i| records[i].clone()).collect();
    }
    let cohort = load_cohort(&records)?;
    for s in &cohort {
        verify_processed(&s.volume, atlas.dims())
            .with_context(|| format!("subject {}", s.record.id))?;
    }
    Ok(Loaded {
        cohort,
        atlas,
        table,
    })
}

fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| anyhow!("{} is not a file path", path.display()))?
        .to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn checkpoint_path(dir: &Path, stage: u8) -> PathBuf {
    dir.join(format!("stage{stage}.ckpt"))
}

fn cmd_train(cfg: &mut RunConfig, a: TrainArgs) -> Result<ExitCode> {
    apply_data(cfg, &a.data);
    apply_split(cfg, &a.split);
    let t = &mut cfg.train;
    if let Some(s) = a.stage {
        t.stage = s;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch {
        t.batch = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
    }
    if let Some(v) = a.jobs {
        t.jobs = v;
    }
    if let Some(c) = a.channels {
        cfg.model.channels = c;
    }
    cfg.model.fusion &= !a.no_fusion;
    cfg.model.aging &= !a.no_aging;
    let stage = cfg.train.stage;
    if !(1..=3).contains(&stage) {
        bail!("stage must be 1, 2 or 3 (got {stage})");
    }
    if cfg.model.channels < 2 || !cfg.model.channels.is_multiple_of(2) {
        bail!("model.channels must be an even number of at least 2");
    }
    cfg.prior.validate()?;

    let loaded = load_subjects(cfg, Part::Train)?;
    let params = match stage {
        1 => {
            let mut p = ModelParams::init(
                cfg.model.channels,
                cfg.model.age_center,
                cfg.model.age_scale,
                cfg.model.architecture(),
                cfg.train.seed,
            );
            p.input_norm = IntensityNorm::fit(loaded.cohort.iter().map(|s| &s.volume));
            p
        }
        _ => {
            for prev in 1..stage {
                let p = checkpoint_path(&a.out, prev);
                if !p.is_file() {
                    bail!(
                        "stage {stage} needs the stage {prev} checkpoint, missing at {}",
                        p.display()
                    );
                }
            }
            load_checkpoint(checkpoint_path(&a.out, stage - 1))
                .with_context(|| format!("loading stage {} checkpoint", stage - 1))?
                .params
        }
    };
    let samples = loaded.samples(params.input_norm)?;
    let out = train_stage(
        stage,
        &samples,
        &cfg.train.train_config(),
        params,
        &cfg.prior,
    )?;
    std::fs::create_dir_all(&a.out)?;
    let ckpt = Checkpoint {
        params: out.params,
        optim: Some(out.optim),
        stage,
        config_hash: cfg.training_hash(),
    };
    let path = checkpoint_path(&a.out, stage);
    save_checkpoint(&ckpt, &path)?;
    let trace_path = a.out.join(format!("stage{stage}_loss.csv"));
    write_atomic(&trace_path, &format_loss_trace(&out.trace))?;
    if let Some(last) = out.trace.last() {
        eprintln!("stage {stage}: final epoch loss {:.6}", last.loss);
    }
    println!("checkpoint {}", path.display());
    println!("loss_trace {}", trace_path.display());
    Ok(ExitCode::SUCCESS)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_predict(cfg: &mut RunConfig, a: PredictArgs) -> Result<ExitCode> {
    apply_data(cfg, &a.data);
    apply_split(cfg, &a.split);
    let ckpt = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let samples = load_subjects(cfg, Part::Test)?.samples(ckpt.params.input_norm)?;
    let preds = predict(&ckpt.params, &samples, &cfg.prior)?;
    emit(a.out.as_deref(), &format_predictions(&preds))?;
    Ok(ExitCode::SUCCESS)
}

fn require_labels(preds: &[Prediction], source: &str) -> Result<()> {
    if preds.iter().any(|p| p.label.is_none()) {
        bail!("{source} has unlabeled subjects; evaluate needs ground truth (use `predict` for label-free cohorts)");
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string())
        .unwrap_or_else(|| "\"undefined\"".into())
}

fn cmd_evaluate(cfg: &mut RunConfig, a: EvaluateArgs) -> Result<ExitCode> {
    apply_data(cfg, &a.data);
    apply_split(cfg, &a.split);
    let mut sets: Vec<(String, Vec<Prediction>)> = Vec::new();
    if let Some(ck) = &a.checkpoint {
        let ckpt = load_checkpoint(ck).with_context(|| format!("loading {}", ck.display()))?;
        let samples = load_subjects(cfg, Part::Test)?.samples(ckpt.params.input_norm)?;
        if samples.iter().any(|s| s.label.is_none()) {
            bail!("cohort has unlabeled subjects; evaluate needs ground truth (use `predict` for label-free cohorts)");
        }
        sets.push((
            ck.display().to_string(),
            predict(&ckpt.params, &samples, &cfg.prior)?,
        ));
    } else {
        if a.predictions.is_empty() {
            bail!("pass --predictions FILE... or --checkpoint");
        }
        for p in &a.predictions {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let preds =
                parse_predictions(&text).with_context(|| format!("parsing {}", p.display()))?;
            require_labels(&preds, &p.display().to_string())?;
            sets.push((p.display().to_string(), preds));
        }
    }
    let per_set: Vec<Metrics> = sets
        .iter()
        .map(|(_, p)| metrics_for(p))
        .collect::<Result<_, _>>()?;
    let mut doc = String::new();
    if per_set.len() == 1 {
        doc.push_str(&per_set[0].to_document());
    } else {
        let pooled: Vec<Prediction> = sets.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
        doc.push_str("[pooled]\n");
        doc.push_str(&metrics_for(&pooled)?.to_document());
        doc.push_str("\n[mean]\n");
        for (key, get) in [
            ("acc", (|m: &Metrics| m.acc) as fn(&Metrics) -> Option<f64>),
            ("tpr", |m| m.tpr),
            ("fpr", |m| m.fpr),
            ("auc", |m| m.auc),
        ] {
            let vals: Option<Vec<f64>> = per_set.iter().map(get).collect();
            let mean = vals.map(|v| v.iter().sum::<f64>() / v.len() as f64);
            doc.push_str(&format!("{key} = {}\n", fmt_opt(mean)));
        }
        for ((name, _), m) in sets.iter().zip(&per_set) {
            doc.push_str(&format!("\n[[fold]]\nsource = {name:?}\n"));
            doc.push_str(&m.to_document());
        }
    }
    emit(a.out.as_deref(), &doc)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_report(cfg: &RunConfig, a: ReportArgs) -> Result<ExitCode> {
    if a.dump_config {
        print!("{}", cfg.to_toml());
        return Ok(ExitCode::SUCCESS);
    }
    let (Some(pred_path), Some(out_dir)) = (a.predictions, a.out_dir) else {
        bail!("report needs --predictions and --out-dir");
    };
    let text = std::fs::read_to_string(&pred_path)
        .with_context(|| format!("reading {}", pred_path.display()))?;
    let preds = parse_predictions(&text)?;
    require_labels(&preds, &pred_path.display().to_string())?;
    let actual: Vec<bool> = preds.iter().map(|p| p.label == Some(Label::Pd)).collect();
    let predicted: Vec<bool> = preds.iter().map(|p| p.decision == Label::Pd).collect();
    let c = Confusion::from_predictions(&predicted, &actual);
    std::fs::create_dir_all(&out_dir)?;
    let confusion = format!(
        "actual\\predicted,pd,other\npd,{},{}\nother,{},{}\n",
        c.tp, c.fn_, c.fp, c.tn
    );
    write_atomic(&out_dir.join("confusion.csv"), &confusion)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.p_pd).collect();
    let mut roc = String::from("fpr,tpr,threshold\n");
    for p in roc_curve(&scores, &actual)? {
        roc.push_str(&format!("{},{},{}\n", p.fpr, p.tpr, p.threshold));
    }
    write_atomic(&out_dir.join("roc.csv"), &roc)?;
    println!("confusion {}", out_dir.join("confusion.csv").display());
    println!("roc {}", out_dir.join("roc.csv").display());
    Ok(ExitCode::SUCCESS)
}
