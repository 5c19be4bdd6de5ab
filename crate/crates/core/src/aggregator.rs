//! Relevance-prior feature aggregation: dense encoding of the scan,
//! region-wise average pooling, relevance-weighted mean/std and additive
//! fusion of the broadcast aggregate into the dense feature.

use rand::Rng;

use crate::nn::{join, relu, relu_backward, Conv3d, FeatureMap, ModelError, Parameters};
use crate::priors::RelevanceTable;
use crate::volume_io::{AtlasVolume, Volume3D};

/// Encoder output: C channels on a grid downsampled by 4 in every axis.
pub type DenseFeature = FeatureMap;

/// Two stride-2 convolution blocks with rectification, widths 1 → C/2 → C.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub conv1: Conv3d,
    pub conv2: Conv3d,
}

impl EncoderParams {
    pub fn zeros(channels: usize) -> Self {
        let mid = (channels / 2).max(1);
        EncoderParams {
            conv1: Conv3d::zeros(1, mid),
            conv2: Conv3d::zeros(mid, channels),
        }
    }

    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mid = (channels / 2).max(1);
        EncoderParams {
            conv1: Conv3d::init(1, mid, 0.1, rng),
            conv2: Conv3d::init(mid, channels, 0.1, rng),
        }
    }

    pub fn channels(&self) -> usize {
        self.conv2.out_channels
    }
}

impl Parameters for EncoderParams {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
    }
}

/// Intermediates kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct EncoderCache {
    input: FeatureMap,
    pre1: FeatureMap,
    act1: FeatureMap,
    pre2: FeatureMap,
}

pub fn volume_as_feature(volume: &Volume3D) -> FeatureMap {
    FeatureMap::from_data(1, volume.dims(), volume.data().to_vec())
}

fn check_divisible(dims: (usize, usize, usize)) -> Result<(), ModelError> {
    if !dims.0.is_multiple_of(4) || !dims.1.is_multiple_of(4) || !dims.2.is_multiple_of(4) {
        return Err(ModelError::IndivisibleDims(dims));
    }
    Ok(())
}

pub fn encode_dense(volume: &Volume3D, params: &EncoderParams) -> Result<DenseFeature, ModelError> {
    encode_dense_cached(volume_as_feature(volume), params).map(|(out, _)| out)
}

pub fn encode_dense_cached(
    input: FeatureMap,
    params: &EncoderParams,
) -> Result<(DenseFeature, EncoderCache), ModelError> {
    check_divisible(input.dims)?;
    let pre1 = params.conv1.forward(&input)?;
    let act1 = relu(&pre1);
    let pre2 = params.conv2.forward(&act1)?;
    let out = relu(&pre2);
    Ok((
        out,
        EncoderCache {
            input,
            pre1,
            act1,
            pre2,
        },
    ))
}

/// Accumulates encoder parameter gradients given dL/dX_dense.
pub fn encode_dense_backward(
    params: &EncoderParams,
    cache: &EncoderCache,
    grad_dense: &DenseFeature,
    grads: &mut EncoderParams,
) {
    let mut g2 = grad_dense.clone();
    relu_backward(&cache.pre2, &mut g2);
    let mut g1 = params
        .conv2
        .backward(&cache.act1, &g2, &mut grads.conv2, true)
        .expect("input gradient requested");
    relu_backward(&cache.pre1, &mut g1);
    params
        .conv1
        .backward(&cache.input, &g1, &mut grads.conv1, false);
}

/// Per-region mean intensity, index 0 holding region 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPooled(pub Vec<f64>);

pub fn region_average_pool(
    volume: &Volume3D,
    atlas: &AtlasVolume,
) -> Result<RegionPooled, ModelError> {
    if volume.dims() != atlas.dims() {
        return Err(ModelError::DimMismatch {
            expected: atlas.dims(),
            found: volume.dims(),
        });
    }
    let r = atlas.regions();
    let mut sums = vec![0.0; r + 1];
    let mut counts = vec![0usize; r + 1];
    for (&l, &v) in atlas.labels().iter().zip(volume.data()) {
        sums[l as usize] += v;
        counts[l as usize] += 1;
    }
    Ok(RegionPooled(
        (1..=r).map(|i| sums[i] / counts[i] as f64).collect(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregatedFeature {
    pub mean: f64,
    pub std: f64,
}

/// Relevance-weighted mean and population standard deviation of the pooled values.
pub fn weighted_aggregate(
    pooled: &RegionPooled,
    table: &RelevanceTable,
) -> Result<AggregatedFeature, ModelError> {
    weighted_aggregate_with(&pooled.0, &table.weights())
}

pub fn weighted_aggregate_with(
    values: &[f64],
    weights: &[f64],
) -> Result<AggregatedFeature, ModelError> {
    if values.len() != weights.len() {
        return Err(ModelError::LengthMismatch {
            expected: weights.len(),
            found: values.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    let mean = weights.iter().zip(values).map(|(w, v)| w * v).sum::<f64>() / total;
    let var = weights
        .iter()
        .zip(values)
        .map(|(w, v)| w * (v - mean) * (v - mean))
        .sum::<f64>()
        / total;
    Ok(AggregatedFeature {
        mean,
        std: var.max(0.0).sqrt(),
    })
}

/// Linear lift of `(mean, std)` into C channels, broadcast over space.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionProjection {
    /// `[channel][mean, std]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FusionProjection {
    pub fn zeros(channels: usize) -> Self {
        FusionProjection {
            weight: vec![0.0; 2 * channels],
            bias: vec![0.0; channels],
        }
    }

    pub fn init<R: Rng>(channels: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(channels);
        p.weight
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-0.5..0.5));
        p
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn lift(&self, agg: &AggregatedFeature) -> Vec<f64> {
        (0..self.channels())
            .map(|c| {
                self.weight[2 * c] * agg.mean + self.weight[2 * c + 1] * agg.std + self.bias[c]
            })
            .collect()
    }
}

impl Parameters for FusionProjection {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        f(&join(prefix, "weight"), &mut self.weight);
        f(&join(prefix, "bias"), &mut self.bias);
    }
}

/// `X_fuse = broadcast(proj · [mean, std] + b) + X_dense`.
pub fn upsample_fuse(
    agg: &AggregatedFeature,
    dense: &DenseFeature,
    proj: &FusionProjection,
) -> Result<DenseFeature, ModelError> {
    if proj.channels() != dense.channels {
        return Err(ModelError::ChannelMismatch {
            expected: dense.channels,
            found: proj.channels(),
        });
    }
    let up = proj.lift(agg);
    let sp = dense.spatial();
    let mut out = dense.clone();
    for (c, u) in up.iter().enumerate() {
        out.data[c * sp..(c + 1) * sp]
            .iter_mut()
            .for_each(|v| *v += u);
    }
    Ok(out)
}

/// Accumulates projection gradients; the dense gradient equals `grad_fused`.
pub fn upsample_fuse_backward(
    agg: &AggregatedFeature,
    grad_fused: &DenseFeature,
    grads: &mut FusionProjection,
) {
    let sp = grad_fused.spatial();
    for c in 0..grad_fused.channels {
        let g: f64 = grad_fused.data[c * sp..(c + 1) * sp].iter().sum();
        grads.weight[2 * c] += g * agg.mean;
        grads.weight[2 * c + 1] += g * agg.std;
        grads.bias[c] += g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::priors::default_relevance_table;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn encoder_shape_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = EncoderParams::init(8, &mut rng);
        let v = Volume3D::new((32, 32, 32), (0..32768).map(|i| (i % 7) as f64).collect()).unwrap();
        let out = encode_dense(&v, &p).unwrap();
        assert_eq!(out.shape(), (8, 8, 8, 8));
    }

    #[test]
    fn encoder_zero_in_zero_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = EncoderParams::init(8, &mut rng);
        p.conv1.bias.fill(0.0);
        p.conv2.bias.fill(0.0);
        let out = encode_dense(&Volume3D::zeros((8, 8, 8)), &p).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rejects_indivisible() {
        let p = EncoderParams::zeros(8);
        assert_eq!(
            encode_dense(&Volume3D::zeros((8, 6, 8)), &p),
            Err(ModelError::IndivisibleDims((8, 6, 8)))
        );
    }

    #[test]
    fn pooling_constant_and_single_region() {
        let v = Volume3D::new((2, 2, 2), vec![7.3; 8]).unwrap();
        let atlas = AtlasVolume::new((2, 2, 2), vec![1, 2, 3, 1, 2, 3, 1, 2], 3).unwrap();
        let p = region_average_pool(&v, &atlas).unwrap();
        assert!(p.0.iter().all(|&x| x == 7.3));

        let data: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let v = Volume3D::new((2, 2, 2), data).unwrap();
        let one = AtlasVolume::new((2, 2, 2), vec![1; 8], 1).unwrap();
        assert_eq!(region_average_pool(&v, &one).unwrap().0, vec![3.5]);
    }

    #[test]
    fn pooling_dim_mismatch() {
        let v = Volume3D::zeros((2, 2, 2));
        let atlas = AtlasVolume::new((2, 2, 1), vec![1; 4], 1).unwrap();
        assert!(matches!(
            region_average_pool(&v, &atlas),
            Err(ModelError::DimMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_examples() {
        let agg = weighted_aggregate_with(&[4.0, 4.0, 4.0], &[1.0, 0.01, 0.001]).unwrap();
        assert_eq!(agg.mean, 4.0);
        assert_eq!(agg.std, 0.0);

        let agg = weighted_aggregate_with(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((agg.mean - 2.0).abs() < 1e-15);
        assert!((agg.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);

        let pooled = RegionPooled((0..48).map(|i| (i as f64).sin()).collect());
        let table = default_relevance_table();
        let a = weighted_aggregate(&pooled, &table).unwrap();
        let w10: Vec<f64> = table.weights().iter().map(|w| w * 10.0).collect();
        let b = weighted_aggregate_with(&pooled.0, &w10).unwrap();
        assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.abs());
        assert!((a.std - b.std).abs() <= 1e-12 * a.std.abs());

        assert!(matches!(
            weighted_aggregate(&RegionPooled(vec![1.0]), &table),
            Err(ModelError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn fuse_zero_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dense = FeatureMap::from_data(3, (2, 2, 2), (0..24).map(|_| rng.random()).collect());
        let agg = AggregatedFeature {
            mean: 3.0,
            std: 1.5,
        };
        let out = upsample_fuse(&agg, &dense, &FusionProjection::zeros(3)).unwrap();
        assert_eq!(out, dense);
    }

    #[test]
    fn fuse_column_selector() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dense = FeatureMap::from_data(3, (2, 2, 2), (0..24).map(|_| rng.random()).collect());
        let mut proj = FusionProjection::zeros(3);
        proj.weight[0] = 1.0; // mean -> channel 0
        let out = upsample_fuse(
            &AggregatedFeature {
                mean: 1.0,
                std: 0.0,
            },
            &dense,
            &proj,
        )
        .unwrap();
        assert_eq!(out.shape(), dense.shape());
        for c in 0..3 {
            for (o, d) in out.channel(c).iter().zip(dense.channel(c)) {
                let expect = if c == 0 { d + 1.0 } else { *d };
                assert_eq!(*o, expect);
            }
        }
    }

    #[test]
    fn fuse_channel_mismatch() {
        let dense = FeatureMap::zeros(3, (1, 1, 1));
        let agg = AggregatedFeature {
            mean: 0.0,
            std: 0.0,
        };
        assert!(matches!(
            upsample_fuse(&agg, &dense, &FusionProjection::zeros(4)),
            Err(ModelError::ChannelMismatch { .. })
        ));
    }
}
