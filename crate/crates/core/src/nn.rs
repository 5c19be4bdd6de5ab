//! Small dense building blocks with hand-written backward passes: channel-major
//! 3-D feature maps, stride-2 convolution, rectification and affine layers.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("dims {0:?} are not divisible by 4")]
    IndivisibleDims((usize, usize, usize)),
    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },
    #[error("channel mismatch: expected {expected}, found {found}")]
    ChannelMismatch { expected: usize, found: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

/// C × D × H × W values, channel-major, W fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub dims: (usize, usize, usize),
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, dims: (usize, usize, usize)) -> Self {
        FeatureMap {
            channels,
            dims,
            data: vec![0.0; channels * dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_data(channels: usize, dims: (usize, usize, usize), data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * dims.0 * dims.1 * dims.2);
        FeatureMap {
            channels,
            dims,
            data,
        }
    }

    pub fn spatial(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.spatial();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.channels, self.dims.0, self.dims.1, self.dims.2)
    }
}

/// Visitor over named parameter slices, used for flattening, optimizers and checkpoints.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64]));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, s| n += s.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit("", &mut |_, s| out.extend_from_slice(s));
        out
    }

    /// Overwrites every parameter from `flat`, which must have `num_params()` entries.
    fn load_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut off = 0;
        self.visit_mut("", &mut |_, s| {
            s.copy_from_slice(&flat[off..off + s.len()]);
            off += s.len();
        });
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut("", &mut |_, s| s.fill(value));
    }

    fn add_assign_from(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut off = 0;
        self.visit_mut("", &mut |_, s| {
            for (a, b) in s.iter_mut().zip(&flat[off..]) {
                *a += b;
            }
            off += s.len();
        });
    }

    fn scale(&mut self, k: f64) {
        self.visit_mut("", &mut |_, s| s.iter_mut().for_each(|v| *v *= k));
    }

    fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit("", &mut |_, s| ok &= s.iter().all(|v| v.is_finite()));
        ok
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Output extent of a kernel-3, stride-2, padding-1 convolution.
pub fn conv_out_len(n: usize) -> usize {
    (n - 1) / 2 + 1
}

// Output positions `o` (exclusive range) for which input index 2o + k - 1 is in bounds.
#[inline]
fn valid_range(k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if n_in < k { 0 } else { (n_in - k) / 2 + 1 };
    (lo, hi.min(n_out))
}

/// 3×3×3 convolution with stride 2 and zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][kd][kh][kw]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3d {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Conv3d {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 27],
            bias: vec![0.0; out_channels],
        }
    }

    /// He-normal weights, constant bias.
    pub fn init<R: Rng>(in_channels: usize, out_channels: usize, bias: f64, rng: &mut R) -> Self {
        let std = (2.0 / (27.0 * in_channels as f64)).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let mut c = Self::zeros(in_channels, out_channels);
        c.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        c.bias.fill(bias);
        c
    }

    fn widx(&self, oc: usize, ic: usize, kd: usize, kh: usize, kw: usize) -> usize {
        (((oc * self.in_channels + ic) * 3 + kd) * 3 + kh) * 3 + kw
    }

    pub fn forward(&self, x: &FeatureMap) -> Result<FeatureMap, ModelError> {
        if x.channels != self.in_channels {
            return Err(ModelError::ChannelMismatch {
                expected: self.in_channels,
                found: x.channels,
            });
        }
        let (d, h, w) = x.dims;
        let od = conv_out_len(d);
        let oh = conv_out_len(h);
        let ow = conv_out_len(w);
        let mut out = FeatureMap::zeros(self.out_channels, (od, oh, ow));
        let in_sp = d * h * w;
        let out_sp = od * oh * ow;
        for oc in 0..self.out_channels {
            let dst = &mut out.data[oc * out_sp..(oc + 1) * out_sp];
            dst.fill(self.bias[oc]);
            for ic in 0..self.in_channels {
                let src = &x.data[ic * in_sp..(ic + 1) * in_sp];
                for kd in 0..3 {
                    let (d0, d1) = valid_range(kd, d, od);
                    for kh in 0..3 {
                        let (h0, h1) = valid_range(kh, h, oh);
                        for kw in 0..3 {
                            let (w0, w1) = valid_range(kw, w, ow);
                            let wv = self.weight[self.widx(oc, ic, kd, kh, kw)];
                            for zo in d0..d1 {
                                let zi = 2 * zo + kd - 1;
                                for yo in h0..h1 {
                                    let yi = 2 * yo + kh - 1;
                                    let orow = (zo * oh + yo) * ow;
                                    let irow = (zi * h + yi) * w;
                                    for xo in w0..w1 {
                                        dst[orow + xo] += wv * src[irow + 2 * xo + kw - 1];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grads`; returns the input gradient when asked.
    pub fn backward(
        &self,
        x: &FeatureMap,
        grad_out: &FeatureMap,
        grads: &mut Conv3d,
        want_input_grad: bool,
    ) -> Option<FeatureMap> {
        let (d, h, w) = x.dims;
        let (od, oh, ow) = grad_out.dims;
        let in_sp = d * h * w;
        let out_sp = od * oh * ow;
        let mut gin = want_input_grad.then(|| FeatureMap::zeros(self.in_channels, x.dims));
        for oc in 0..self.out_channels {
            let g = &grad_out.data[oc * out_sp..(oc + 1) * out_sp];
            grads.bias[oc] += g.iter().sum::<f64>();
            for ic in 0..self.in_channels {
                let src = &x.data[ic * in_sp..(ic + 1) * in_sp];
                for kd in 0..3 {
                    let (d0, d1) = valid_range(kd, d, od);
                    for kh in 0..3 {
                        let (h0, h1) = valid_range(kh, h, oh);
                        for kw in 0..3 {
                            let (w0, w1) = valid_range(kw, w, ow);
                            let wi = self.widx(oc, ic, kd, kh, kw);
                            let wv = self.weight[wi];
                            let mut acc = 0.0;
                            for zo in d0..d1 {
                                let zi = 2 * zo + kd - 1;
                                for yo in h0..h1 {
                                    let yi = 2 * yo + kh - 1;
                                    let orow = (zo * oh + yo) * ow;
                                    let irow = (zi * h + yi) * w;
                                    for xo in w0..w1 {
                                        acc += g[orow + xo] * src[irow + 2 * xo + kw - 1];
                                    }
                                    if let Some(gin) = gin.as_mut() {
                                        let gdst = &mut gin.data[ic * in_sp..(ic + 1) * in_sp];
                                        for xo in w0..w1 {
                                            gdst[irow + 2 * xo + kw - 1] += wv * g[orow + xo];
                                        }
                                    }
                                }
                            }
                            grads.weight[wi] += acc;
                        }
                    }
                }
            }
        }
        gin
    }
}

impl Parameters for Conv3d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `y = W x + b`, with `W` stored `[out][in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_features: usize, out_features: usize) -> Self {
        Linear {
            in_features,
            out_features,
            weight: vec![0.0; in_features * out_features],
            bias: vec![0.0; out_features],
        }
    }

    pub fn init<R: Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let std = (1.0 / in_features as f64).sqrt();
        let normal = Normal::new(0.0, std).unwrap();
        let mut l = Self::zeros(in_features, out_features);
        l.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
        l
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_features)
            .map(|o| {
                let row = &self.weight[o * self.in_features..(o + 1) * self.in_features];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64], grads: &mut Linear) -> Vec<f64> {
        let mut gin = vec![0.0; self.in_features];
        for (o, &g) in grad_out.iter().enumerate() {
            grads.bias[o] += g;
            let row = o * self.in_features;
            for i in 0..self.in_features {
                grads.weight[row + i] += g * x[i];
                gin[i] += g * self.weight[row + i];
            }
        }
        gin
    }
}

impl Parameters for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

pub fn relu(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        channels: x.channels,
        dims: x.dims,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Masks `grad` in place by the sign of the pre-activation.
pub fn relu_backward(pre: &FeatureMap, grad: &mut FeatureMap) {
    for (g, &p) in grad.data.iter_mut().zip(&pre.data) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn global_avg_pool(x: &FeatureMap) -> Vec<f64> {
    let n = x.spatial() as f64;
    (0..x.channels)
        .map(|c| x.channel(c).iter().sum::<f64>() / n)
        .collect()
}

pub fn global_avg_pool_backward(
    grad: &[f64],
    channels: usize,
    dims: (usize, usize, usize),
) -> FeatureMap {
    let mut out = FeatureMap::zeros(channels, dims);
    let sp = out.spatial();
    for (c, &g) in grad.iter().enumerate() {
        out.data[c * sp..(c + 1) * sp].fill(g / sp as f64);
    }
    out
}
