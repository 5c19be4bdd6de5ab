//! Dual-branch head: classification logits, regional brain-age regression,
//! the age-gap hinge loss, softplus logit calibration and the combined loss.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aggregator::DenseFeature;
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, join, relu, relu_backward, Conv3d, FeatureMap,
    Linear, ModelError, Parameters,
};
use crate::priors::AgingPriorParams;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Logits {
    pub pd: f64,
    pub ot: f64,
}

impl Logits {
    pub fn new(pd: f64, ot: f64) -> Self {
        Logits { pd, ot }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "pd")]
    Pd,
    #[serde(rename = "other")]
    Other,
}

impl Label {
    pub fn is_pd(self) -> bool {
        self == Label::Pd
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Pd => "pd",
            Label::Other => "other",
        })
    }
}

impl FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pd" | "1" => Ok(Label::Pd),
            "other" | "ot" | "0" => Ok(Label::Other),
            other => Err(format!("unknown label {other:?} (expected pd or other)")),
        }
    }
}

/// One stride-2 convolution block, global average pooling and an affine head.
///
/// The head output is mapped through `center + scale * y`; the pair is a fixed
/// (non-trained) output normalization, identity for the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchParams {
    pub conv: Conv3d,
    pub head: Linear,
    pub output_center: f64,
    pub output_scale: f64,
}

impl BranchParams {
    pub fn zeros(channels: usize, outputs: usize) -> Self {
        BranchParams {
            conv: Conv3d::zeros(channels, channels),
            head: Linear::zeros(channels, outputs),
            output_center: 0.0,
            output_scale: 1.0,
        }
    }

    pub fn init<R: Rng>(channels: usize, outputs: usize, rng: &mut R) -> Self {
        BranchParams {
            conv: Conv3d::init(channels, channels, 0.1, rng),
            head: Linear::init(channels, outputs, rng),
            output_center: 0.0,
            output_scale: 1.0,
        }
    }

    pub fn with_output_norm(mut self, center: f64, scale: f64) -> Self {
        self.output_center = center;
        self.output_scale = scale;
        self
    }

    pub fn outputs(&self) -> usize {
        self.head.out_features
    }
}

impl Parameters for BranchParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone)]
pub struct BranchCache {
    pre: FeatureMap,
    pooled: Vec<f64>,
}

pub fn branch_forward(
    fused: &DenseFeature,
    params: &BranchParams,
) -> Result<(Vec<f64>, BranchCache), ModelError> {
    if fused.channels != params.conv.in_channels {
        return Err(ModelError::ShapeMismatch(format!(
            "fused feature has {} channels, branch expects {}",
            fused.channels, params.conv.in_channels
        )));
    }
    let pre = params.conv.forward(fused)?;
    let pooled = global_avg_pool(&relu(&pre));
    let out = params
        .head
        .forward(&pooled)
        .into_iter()
        .map(|y| params.output_center + params.output_scale * y)
        .collect();
    Ok((out, BranchCache { pre, pooled }))
}

/// Accumulates branch gradients and returns dL/dX_fuse.
pub fn branch_backward(
    fused: &DenseFeature,
    params: &BranchParams,
    cache: &BranchCache,
    grad_out: &[f64],
    grads: &mut BranchParams,
) -> DenseFeature {
    let g_head: Vec<f64> = grad_out.iter().map(|g| g * params.output_scale).collect();
    let g_pooled = params
        .head
        .backward(&cache.pooled, &g_head, &mut grads.head);
    let mut g_act = global_avg_pool_backward(&g_pooled, cache.pre.channels, cache.pre.dims);
    relu_backward(&cache.pre, &mut g_act);
    params
        .conv
        .backward(fused, &g_act, &mut grads.conv, true)
        .expect("input gradient requested")
}

pub fn classify(fused: &DenseFeature, params: &BranchParams) -> Result<Logits, ModelError> {
    if params.outputs() != 2 {
        return Err(ModelError::ShapeMismatch(format!(
            "classifier head has {} outputs, expected 2",
            params.outputs()
        )));
    }
    let (out, _) = branch_forward(fused, params)?;
    Ok(Logits::new(out[0], out[1]))
}

/// Predicted brain age of the PD-associated regions, in years.
pub fn predict_brain_age(fused: &DenseFeature, params: &BranchParams) -> Result<f64, ModelError> {
    if params.outputs() != 1 {
        return Err(ModelError::ShapeMismatch(format!(
            "regression head has {} outputs, expected 1",
            params.outputs()
        )));
    }
    let (out, _) = branch_forward(fused, params)?;
    Ok(out[0])
}

/// Hinge on the age gap: PD below ζ and everyone else above τ are penalized linearly.
pub fn age_loss(delta: f64, label: Label, prior: &AgingPriorParams) -> f64 {
    match label {
        Label::Pd => (prior.zeta - delta).max(0.0),
        Label::Other => (delta - prior.tau).max(0.0),
    }
}

/// d age_loss / dΔ; the kink itself takes the zero side.
pub fn age_loss_grad(delta: f64, label: Label, prior: &AgingPriorParams) -> f64 {
    match label {
        Label::Pd if delta < prior.zeta => -1.0,
        Label::Other if delta > prior.tau => 1.0,
        _ => 0.0,
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn phi(delta: f64, tau: f64) -> f64 {
    softplus(delta - tau) - softplus(tau - delta)
}

pub fn phi_grad(delta: f64, tau: f64) -> f64 {
    sigmoid(delta - tau) + sigmoid(tau - delta)
}

pub fn correct_logits(z: Logits, delta: f64, prior: &AgingPriorParams) -> Logits {
    let shift = prior.alpha * phi(delta, prior.tau);
    Logits::new(z.pd + shift, z.ot - shift)
}

/// Two-class cross entropy on (possibly corrected) logits.
///
/// `-z_y + ln(e^z_pd + e^z_ot)` reduces to `softplus(z_other - z_y)`.
pub fn cls_loss(z: Logits, label: Label) -> f64 {
    match label {
        Label::Pd => softplus(z.ot - z.pd),
        Label::Other => softplus(z.pd - z.ot),
    }
}

/// Gradient of [`cls_loss`] with respect to `(z_pd, z_ot)`.
pub fn cls_loss_grad(z: Logits, label: Label) -> Logits {
    let p = sigmoid(z.pd - z.ot);
    let y = if label.is_pd() { 1.0 } else { 0.0 };
    Logits::new(p - y, (1.0 - p) - (1.0 - y))
}

/// Softmax readout; exact ties go to `Other`.
pub fn decide(z: Logits) -> (Label, f64) {
    let p = sigmoid(z.pd - z.ot);
    let label = if p > 0.5 { Label::Pd } else { Label::Other };
    (label, p)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    pub age: f64,
    pub cls: f64,
    pub predicted_age: f64,
    pub delta: f64,
    pub logits: Logits,
    pub corrected: Logits,
}

pub fn total_loss(
    fused: &DenseFeature,
    age_chrono: f64,
    label: Label,
    branch1: &BranchParams,
    branch2: &BranchParams,
    prior: &AgingPriorParams,
) -> Result<(f64, LossComponents), ModelError> {
    let z = classify(fused, branch1)?;
    let predicted_age = predict_brain_age(fused, branch2)?;
    let c = loss_components(z, predicted_age, age_chrono, label, prior)?;
    Ok((c.age + c.cls, c))
}

fn loss_components(
    z: Logits,
    predicted_age: f64,
    age_chrono: f64,
    label: Label,
    prior: &AgingPriorParams,
) -> Result<LossComponents, ModelError> {
    let delta = crate::priors::age_gap(predicted_age, age_chrono)
        .map_err(|_| ModelError::NonFinite("age gap"))?;
    let corrected = correct_logits(z, delta, prior);
    Ok(LossComponents {
        age: age_loss(delta, label, prior),
        cls: cls_loss(corrected, label),
        predicted_age,
        delta,
        logits: z,
        corrected,
    })
}

/// Total loss with gradients accumulated into `grads1`/`grads2`; returns dL/dX_fuse.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_backward(
    fused: &DenseFeature,
    age_chrono: f64,
    label: Label,
    branch1: &BranchParams,
    branch2: &BranchParams,
    prior: &AgingPriorParams,
    grads1: &mut BranchParams,
    grads2: &mut BranchParams,
) -> Result<(f64, LossComponents, DenseFeature), ModelError> {
    let (z_out, cache1) = branch_forward(fused, branch1)?;
    let (a_out, cache2) = branch_forward(fused, branch2)?;
    let z = Logits::new(z_out[0], z_out[1]);
    let c = loss_components(z, a_out[0], age_chrono, label, prior)?;

    let gz = cls_loss_grad(c.corrected, label);
    // Both corrected logits depend on Δ through ±α·φ(Δ).
    let d_delta = age_loss_grad(c.delta, label, prior)
        + prior.alpha * phi_grad(c.delta, prior.tau) * (gz.pd - gz.ot);

    let mut g_fused = branch_backward(fused, branch1, &cache1, &[gz.pd, gz.ot], grads1);
    let g2 = branch_backward(fused, branch2, &cache2, &[d_delta], grads2);
    g_fused
        .data
        .iter_mut()
        .zip(&g2.data)
        .for_each(|(a, b)| *a += b);
    Ok((c.age + c.cls, c, g_fused))
}
