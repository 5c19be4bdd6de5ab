//! Three-stage training, evaluation, optimizer, checkpoints and metrics.

pub mod checkpoint;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::diagnoser::Label;
use crate::nn::{ModelError, Parameters};
use crate::priors::AgingPriorParams;
use crate::seed::derive_seed;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::gradient_check;
pub use metrics::{roc_auc, roc_curve, Confusion, Metrics, RocPoint};
pub use model::{prepare_samples, Architecture, IntensityNorm, ModelParams, Prediction, Sample};
pub use optim::{adamw_step, cosine_lr, OptimState};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid stage {0}; expected 1, 2 or 3")]
    InvalidStage(u8),
    #[error("empty cohort")]
    EmptyCohort,
    #[error("stage 2 needs at least one healthy subject")]
    NoHealthy,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient at flat index {0}")]
    NonFiniteGradient(usize),
    #[error("step {step} outside 0..={total_steps}")]
    StepOutOfRange { step: u64, total_steps: u64 },
    #[error("ROC needs both classes present")]
    SingleClass,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint: truncated")]
    Truncated,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Classifier,
    AgeRegressor,
    Joint,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Classifier => 1,
            Stage::AgeRegressor => 2,
            Stage::Joint => 3,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = TrainError;
    fn try_from(n: u8) -> Result<Self, TrainError> {
        match n {
            1 => Ok(Stage::Classifier),
            2 => Ok(Stage::AgeRegressor),
            3 => Ok(Stage::Joint),
            _ => Err(TrainError::InvalidStage(n)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Gradient-accumulation count per optimizer step.
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Worker threads for per-sample passes; results do not depend on it.
    pub jobs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch: 4,
            lr: 1e-3,
            weight_decay: 1e-3,
            seed: 0,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: f64,
    pub age: f64,
    pub cls: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub params: ModelParams,
    pub trace: Vec<EpochLoss>,
    pub optim: OptimState,
}

/// Trainable parameter groups for a stage under the given architecture.
pub fn stage_groups(stage: Stage, arch: Architecture) -> Vec<&'static str> {
    let mut groups = match stage {
        Stage::Classifier => vec!["encoder", "fusion", "branch1"],
        Stage::AgeRegressor => vec!["branch2"],
        Stage::Joint if arch.aging => vec!["encoder", "fusion", "branch1", "branch2"],
        Stage::Joint => vec!["encoder", "fusion", "branch1"],
    };
    if !arch.fusion {
        groups.retain(|g| *g != "fusion");
    }
    groups
}

enum Inputs<'a> {
    Raw(Vec<&'a Sample>),
    // Stage 2: the frozen encoder's fused features, computed once.
    Fused(Vec<(crate::aggregator::DenseFeature, f64)>),
}

impl Inputs<'_> {
    fn len(&self) -> usize {
        match self {
            Inputs::Raw(v) => v.len(),
            Inputs::Fused(v) => v.len(),
        }
    }
}

fn sample_step(
    stage: Stage,
    inputs: &Inputs<'_>,
    i: usize,
    params: &ModelParams,
    prior: &AgingPriorParams,
) -> Result<(ModelParams, model::SampleLoss), TrainError> {
    let mut g = params.zeros_like();
    let loss = match (stage, inputs) {
        (Stage::AgeRegressor, Inputs::Fused(v)) => {
            model::regression_step(params, &v[i].0, v[i].1, &mut g)?
        }
        (Stage::Joint, Inputs::Raw(v)) if params.arch.aging => {
            model::joint_step(params, v[i], prior, &mut g)?
        }
        (_, Inputs::Raw(v)) => model::classification_step(params, v[i], &mut g)?,
        (_, Inputs::Fused(_)) => unreachable!("fused inputs are only built for stage 2"),
    };
    if !loss.total.is_finite() {
        return Err(TrainError::NonFiniteLoss);
    }
    Ok((g, loss))
}

fn build_pool(jobs: usize) -> Option<rayon::ThreadPool> {
    (jobs > 1)
        .then(|| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build()
                .ok()
        })
        .flatten()
}

// Sequential unless a pool exists; collection order is fixed either way.
fn run_pool<T: Send>(pool: &Option<rayon::ThreadPool>, f: impl FnOnce() -> T + Send) -> T {
    match pool {
        Some(p) => p.install(f),
        None => f(),
    }
}

/// Runs one training stage and returns updated parameters, the per-epoch loss
/// trace and the final optimizer state.
pub fn train_stage(
    stage: u8,
    samples: &[Sample],
    config: &TrainConfig,
    params: ModelParams,
    prior: &AgingPriorParams,
) -> Result<StageOutput, TrainError> {
    let stage = Stage::try_from(stage)?;
    if samples.is_empty() {
        return Err(TrainError::EmptyCohort);
    }
    if config.batch == 0 {
        return Err(TrainError::InvalidInput("batch must be at least 1".into()));
    }
    prior
        .validate()
        .map_err(|e| TrainError::InvalidInput(e.to_string()))?;
    let pool = build_pool(config.jobs);
    let inputs = match stage {
        Stage::AgeRegressor => {
            let healthy: Vec<&Sample> = samples.iter().filter(|s| s.is_healthy).collect();
            if healthy.is_empty() {
                return Err(TrainError::NoHealthy);
            }
            let fused = run_pool(&pool, || {
                healthy
                    .par_iter()
                    .map(|s| model::fused_feature(&params, s).map(|f| (f, s.age)))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            Inputs::Fused(fused)
        }
        _ => {
            if let Some(s) = samples.iter().find(|s| s.label.is_none()) {
                return Err(TrainError::InvalidInput(format!(
                    "subject {} has no label",
                    s.id
                )));
            }
            Inputs::Raw(samples.iter().collect())
        }
    };

    let mut params = params;
    let n = inputs.len();
    let steps_per_epoch = n.div_ceil(config.batch);
    let total_steps = (config.epochs * steps_per_epoch) as u64;
    let mask = params.mask(&stage_groups(stage, params.arch));
    let mut optim = OptimState::new(
        params.num_params(),
        config.lr,
        config.weight_decay,
        total_steps,
    );
    let mut flat = params.flatten();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
            config.seed,
            stage.number() as u64,
            epoch as u64,
        ]));
        order.shuffle(&mut rng);
        let mut sums = model::SampleLoss::default();
        for batch in order.chunks(config.batch) {
            let current = &params;
            let results = run_pool(&pool, || {
                batch
                    .par_iter()
                    .map(|&i| sample_step(stage, &inputs, i, current, prior))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            let mut acc = vec![0.0; flat.len()];
            for (g, loss) in &results {
                let mut k = 0;
                g.visit("", &mut |_, s| {
                    for v in s {
                        acc[k] += v;
                        k += 1;
                    }
                });
                sums.total += loss.total;
                sums.age += loss.age;
                sums.cls += loss.cls;
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().for_each(|v| *v *= scale);
            let lr = cosine_lr(optim.step, total_steps, config.lr)?;
            adamw_step(&mut flat, &acc, &mut optim, lr, Some(&mask))?;
            params.load_flat(&flat);
        }
        let inv = 1.0 / n as f64;
        trace.push(EpochLoss {
            epoch: epoch + 1,
            loss: sums.total * inv,
            age: sums.age * inv,
            cls: sums.cls * inv,
        });
    }
    Ok(StageOutput {
        params,
        trace,
        optim,
    })
}

/// Stages 1, 2 and 3 in order starting from `params`. Returns the final
/// parameters and one loss trace per stage.
pub fn train_all_stages(
    samples: &[Sample],
    config: &TrainConfig,
    params: ModelParams,
    prior: &AgingPriorParams,
) -> Result<(ModelParams, Vec<Vec<EpochLoss>>), TrainError> {
    let mut params = params;
    let mut traces = Vec::with_capacity(3);
    for stage in 1..=3 {
        let out = train_stage(stage, samples, config, params, prior)?;
        params = out.params;
        traces.push(out.trace);
    }
    Ok((params, traces))
}

/// Full forward path on every sample; metrics need every sample labeled.
pub fn evaluate(
    params: &ModelParams,
    samples: &[Sample],
    prior: &AgingPriorParams,
) -> Result<(Metrics, Vec<Prediction>), TrainError> {
    let preds = predict(params, samples, prior)?;
    Ok((metrics_for(&preds)?, preds))
}

pub fn predict(
    params: &ModelParams,
    samples: &[Sample],
    prior: &AgingPriorParams,
) -> Result<Vec<Prediction>, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyCohort);
    }
    samples
        .iter()
        .map(|s| model::predict_sample(params, s, prior).map_err(TrainError::from))
        .collect()
}

pub fn metrics_for(preds: &[Prediction]) -> Result<Metrics, TrainError> {
    if preds.is_empty() {
        return Err(TrainError::EmptyCohort);
    }
    let mut actual = Vec::with_capacity(preds.len());
    for p in preds {
        match p.label {
            Some(l) => actual.push(l.is_pd()),
            None => {
                return Err(TrainError::InvalidInput(format!(
                    "subject {} has no label",
                    p.subject_id
                )))
            }
        }
    }
    let predicted: Vec<bool> = preds.iter().map(|p| p.decision == Label::Pd).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.p_pd).collect();
    let auc = match roc_auc(&scores, &actual) {
        Ok(a) => Some(a),
        Err(TrainError::SingleClass) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics::from_confusion(
        Confusion::from_predictions(&predicted, &actual),
        auc,
    ))
}

pub const PREDICTIONS_HEADER: &str = "subject_id,label,p_pd,delta,predicted_age,decision";
pub const LOSS_TRACE_HEADER: &str = "epoch,loss,age_loss,cls_loss";

pub fn format_predictions(preds: &[Prediction]) -> String {
    let mut out = format!("{PREDICTIONS_HEADER}\n");
    for p in preds {
        let label = p.label.map(|l| l.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.subject_id, label, p.p_pd, p.delta, p.predicted_age, p.decision
        ));
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>, TrainError> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == PREDICTIONS_HEADER => {}
        _ => {
            return Err(TrainError::InvalidInput(format!(
                "expected header `{PREDICTIONS_HEADER}`"
            )))
        }
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || TrainError::InvalidInput(format!("bad prediction row {line:?}"));
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(Prediction {
                subject_id: f[0].to_string(),
                label: if f[1].is_empty() {
                    None
                } else {
                    Some(f[1].parse().map_err(|_| bad())?)
                },
                p_pd: num(f[2])?,
                delta: num(f[3])?,
                predicted_age: num(f[4])?,
                decision: f[5].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

pub fn format_loss_trace(trace: &[EpochLoss]) -> String {
    let mut out = format!("{LOSS_TRACE_HEADER}\n");
    for e in trace {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.loss, e.age, e.cls));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_numbers() {
        assert!(matches!(
            Stage::try_from(4),
            Err(TrainError::InvalidStage(4))
        ));
        assert!(matches!(
            Stage::try_from(0),
            Err(TrainError::InvalidStage(0))
        ));
        assert_eq!(Stage::try_from(2).unwrap(), Stage::AgeRegressor);
    }

    #[test]
    fn groups_follow_architecture() {
        let full = Architecture::default();
        assert_eq!(stage_groups(Stage::AgeRegressor, full), vec!["branch2"]);
        let no_fusion = Architecture {
            fusion: false,
            aging: true,
        };
        assert!(!stage_groups(Stage::Joint, no_fusion).contains(&"fusion"));
        let no_aging = Architecture {
            fusion: true,
            aging: false,
        };
        assert!(!stage_groups(Stage::Joint, no_aging).contains(&"branch2"));
    }

    #[test]
    fn predictions_round_trip() {
        let preds = vec![
            Prediction {
                subject_id: "a".into(),
                label: Some(Label::Pd),
                p_pd: 0.875,
                delta: 11.25,
                predicted_age: 70.5,
                decision: Label::Pd,
            },
            Prediction {
                subject_id: "b".into(),
                label: None,
                p_pd: 0.1,
                delta: -0.3,
                predicted_age: 61.7,
                decision: Label::Other,
            },
        ];
        assert_eq!(
            parse_predictions(&format_predictions(&preds)).unwrap(),
            preds
        );
    }
}
