//! The full parameter set and the per-sample forward/backward passes used by
//! training and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{
    encode_dense_backward, encode_dense_cached, region_average_pool, upsample_fuse,
    upsample_fuse_backward, volume_as_feature, weighted_aggregate, AggregatedFeature, DenseFeature,
    EncoderParams, FusionProjection,
};
use crate::cohort::Subject;
use crate::diagnoser::{
    branch_backward, branch_forward, cls_loss, cls_loss_grad, correct_logits, decide,
    total_loss_backward, BranchParams, Label, Logits,
};
use crate::nn::{join, FeatureMap, ModelError, Parameters};
use crate::priors::{AgingPriorParams, RelevanceTable};
use crate::volume_io::{AtlasVolume, Volume3D};

/// Which prior pathways are active. Disabling one reproduces an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    /// Relevance-weighted aggregate fused into the dense feature.
    pub fusion: bool,
    /// Age-gap branch and logit correction.
    pub aging: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            fusion: true,
            aging: true,
        }
    }
}

/// Fixed affine intensity standardization `(x - center) / scale`, estimated
/// once from the training cohort and applied to every input volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityNorm {
    pub center: f64,
    pub scale: f64,
}

impl Default for IntensityNorm {
    fn default() -> Self {
        IntensityNorm {
            center: 0.0,
            scale: 1.0,
        }
    }
}

impl IntensityNorm {
    /// Mean and population standard deviation over every voxel of every volume.
    pub fn fit<'a>(volumes: impl IntoIterator<Item = &'a Volume3D>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        let volumes: Vec<&Volume3D> = volumes.into_iter().collect();
        for v in &volumes {
            n += v.data().len();
            sum += v.data().iter().sum::<f64>();
        }
        if n == 0 {
            return IntensityNorm::default();
        }
        let center = sum / n as f64;
        for v in &volumes {
            sq += v
                .data()
                .iter()
                .map(|x| (x - center) * (x - center))
                .sum::<f64>();
        }
        let sd = (sq / n as f64).sqrt();
        IntensityNorm {
            center,
            scale: if sd > 0.0 { sd } else { 1.0 },
        }
    }

    pub fn apply(&self, volume: &Volume3D) -> Volume3D {
        let data = volume
            .data()
            .iter()
            .map(|x| (x - self.center) / self.scale)
            .collect();
        Volume3D::new(volume.dims(), data).expect("affine map of a finite volume is finite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub fusion: FusionProjection,
    pub branch1: BranchParams,
    pub branch2: BranchParams,
    pub arch: Architecture,
    pub input_norm: IntensityNorm,
}

impl ModelParams {
    pub fn zeros(channels: usize) -> Self {
        ModelParams {
            encoder: EncoderParams::zeros(channels),
            fusion: FusionProjection::zeros(channels),
            branch1: BranchParams::zeros(channels, 2),
            branch2: BranchParams::zeros(channels, 1),
            arch: Architecture::default(),
            input_norm: IntensityNorm::default(),
        }
    }

    /// Seeded initialization. Branch 2 outputs `age_center + age_scale · y`.
    pub fn init(
        channels: usize,
        age_center: f64,
        age_scale: f64,
        arch: Architecture,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(channels, &mut rng);
        let mut fusion = FusionProjection::init(channels, &mut rng);
        let branch1 = BranchParams::init(channels, 2, &mut rng);
        let branch2 =
            BranchParams::init(channels, 1, &mut rng).with_output_norm(age_center, age_scale);
        if !arch.fusion {
            fusion.fill(0.0);
        }
        ModelParams {
            encoder,
            fusion,
            branch1,
            branch2,
            arch,
            input_norm: IntensityNorm::default(),
        }
    }

    pub fn channels(&self) -> usize {
        self.encoder.channels()
    }

    /// Same shapes and architecture, all trainable values zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }

    /// Flat mask selecting the parameter groups (by top-level name) to train.
    pub fn mask(&self, groups: &[&str]) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.num_params());
        self.visit("", &mut |name, s| {
            let on = groups.iter().any(|g| name.starts_with(&format!("{g}.")));
            mask.extend(std::iter::repeat_n(on, s.len()));
        });
        mask
    }
}

impl Parameters for ModelParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.fusion.visit(&join(prefix, "fusion"), f);
        self.branch1.visit(&join(prefix, "branch1"), f);
        self.branch2.visit(&join(prefix, "branch2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.fusion.visit_mut(&join(prefix, "fusion"), f);
        self.branch1.visit_mut(&join(prefix, "branch1"), f);
        self.branch2.visit_mut(&join(prefix, "branch2"), f);
    }
}

/// A standardized subject with its parameter-free aggregate precomputed.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub input: FeatureMap,
    pub agg: AggregatedFeature,
    pub age: f64,
    pub label: Option<Label>,
    pub is_healthy: bool,
}

pub fn prepare_samples(
    cohort: &[Subject],
    atlas: &AtlasVolume,
    table: &RelevanceTable,
    norm: IntensityNorm,
) -> Result<Vec<Sample>, ModelError> {
    if table.regions() != atlas.regions() {
        return Err(ModelError::LengthMismatch {
            expected: atlas.regions(),
            found: table.regions(),
        });
    }
    cohort
        .iter()
        .map(|s| {
            let volume = norm.apply(&s.volume);
            let pooled = region_average_pool(&volume, atlas)?;
            let agg = weighted_aggregate(&pooled, table)?;
            Ok(Sample {
                id: s.record.id.clone(),
                input: volume_as_feature(&volume),
                agg,
                age: s.record.age,
                label: s.record.label,
                is_healthy: s.record.is_healthy,
            })
        })
        .collect()
}

/// Encoder + fusion forward pass.
pub fn fused_feature(params: &ModelParams, sample: &Sample) -> Result<DenseFeature, ModelError> {
    let (dense, _) = encode_dense_cached(sample.input.clone(), &params.encoder)?;
    upsample_fuse(&sample.agg, &dense, &params.fusion)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub subject_id: String,
    pub label: Option<Label>,
    pub p_pd: f64,
    pub delta: f64,
    pub predicted_age: f64,
    pub decision: Label,
}

pub fn predict_sample(
    params: &ModelParams,
    sample: &Sample,
    prior: &AgingPriorParams,
) -> Result<Prediction, ModelError> {
    let fused = fused_feature(params, sample)?;
    let (z, _) = branch_forward(&fused, &params.branch1)?;
    let (a, _) = branch_forward(&fused, &params.branch2)?;
    let z = Logits::new(z[0], z[1]);
    let predicted_age = a[0];
    let delta = predicted_age - sample.age;
    let logits = if params.arch.aging {
        correct_logits(z, delta, prior)
    } else {
        z
    };
    let (decision, p_pd) = decide(logits);
    if !p_pd.is_finite() || !delta.is_finite() {
        return Err(ModelError::NonFinite("prediction"));
    }
    Ok(Prediction {
        subject_id: sample.id.clone(),
        label: sample.label,
        p_pd,
        delta,
        predicted_age,
        decision,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SampleLoss {
    pub total: f64,
    pub age: f64,
    pub cls: f64,
}

fn require_label(sample: &Sample) -> Result<Label, ModelError> {
    sample
        .label
        .ok_or_else(|| ModelError::ShapeMismatch(format!("subject {} has no label", sample.id)))
}

/// Uncorrected cross entropy on branch 1 (stage 1, and stage 3 without the aging branch).
pub fn classification_step(
    params: &ModelParams,
    sample: &Sample,
    grads: &mut ModelParams,
) -> Result<SampleLoss, ModelError> {
    let label = require_label(sample)?;
    let (dense, enc_cache) = encode_dense_cached(sample.input.clone(), &params.encoder)?;
    let fused = upsample_fuse(&sample.agg, &dense, &params.fusion)?;
    let (z, cache) = branch_forward(&fused, &params.branch1)?;
    let z = Logits::new(z[0], z[1]);
    let loss = cls_loss(z, label);
    let g = cls_loss_grad(z, label);
    let g_fused = branch_backward(
        &fused,
        &params.branch1,
        &cache,
        &[g.pd, g.ot],
        &mut grads.branch1,
    );
    backprop_fused(params, sample, &enc_cache, &g_fused, grads);
    Ok(SampleLoss {
        total: loss,
        age: 0.0,
        cls: loss,
    })
}

/// Squared error of branch 2 against chronological age on a precomputed fused feature.
pub fn regression_step(
    params: &ModelParams,
    fused: &DenseFeature,
    age: f64,
    grads: &mut ModelParams,
) -> Result<SampleLoss, ModelError> {
    let (a, cache) = branch_forward(fused, &params.branch2)?;
    let err = a[0] - age;
    branch_backward(
        fused,
        &params.branch2,
        &cache,
        &[2.0 * err],
        &mut grads.branch2,
    );
    let loss = err * err;
    Ok(SampleLoss {
        total: loss,
        age: loss,
        cls: 0.0,
    })
}

/// Age hinge plus corrected cross entropy, backpropagated through both branches and the encoder.
pub fn joint_step(
    params: &ModelParams,
    sample: &Sample,
    prior: &AgingPriorParams,
    grads: &mut ModelParams,
) -> Result<SampleLoss, ModelError> {
    let label = require_label(sample)?;
    let (dense, enc_cache) = encode_dense_cached(sample.input.clone(), &params.encoder)?;
    let fused = upsample_fuse(&sample.agg, &dense, &params.fusion)?;
    let (total, c, g_fused) = total_loss_backward(
        &fused,
        sample.age,
        label,
        &params.branch1,
        &params.branch2,
        prior,
        &mut grads.branch1,
        &mut grads.branch2,
    )?;
    backprop_fused(params, sample, &enc_cache, &g_fused, grads);
    Ok(SampleLoss {
        total,
        age: c.age,
        cls: c.cls,
    })
}

fn backprop_fused(
    params: &ModelParams,
    sample: &Sample,
    enc_cache: &crate::aggregator::EncoderCache,
    g_fused: &DenseFeature,
    grads: &mut ModelParams,
) {
    upsample_fuse_backward(&sample.agg, g_fused, &mut grads.fusion);
    encode_dense_backward(&params.encoder, enc_cache, g_fused, &mut grads.encoder);
}
