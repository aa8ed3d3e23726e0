//! Small plain convolutional classifiers and the standardized-input baseline.
//!
//! A model is `[conv -> relu -> (maxpool)]* -> flatten -> dense -> relu ->
//! dense`. Convolutions use `kernel / 2` zero padding. Lookup models and
//! baselines share this body and differ only in `input_channels`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::ImageBatch;
use crate::error::{Error, Result};
use crate::gradcore::{Graph, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBlock {
    pub kernel: usize,
    pub filters: usize,
    pub stride: usize,
    pub pool: bool,
}

impl ConvBlock {
    pub fn new(kernel: usize, filters: usize, stride: usize, pool: bool) -> Self {
        Self {
            kernel,
            filters,
            stride,
            pool,
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub height: usize,
    pub width: usize,
    pub conv_blocks: Vec<ConvBlock>,
    pub head_width: usize,
    pub classes: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Three conv blocks of 16/32/32 filters with pooling, used as the
    /// desk-scale stand-in for the CIFAR architectures.
    pub fn three_block(input_channels: usize, side: usize, classes: usize, seed: u64) -> Self {
        Self {
            input_channels,
            height: side,
            width: side,
            conv_blocks: vec![
                ConvBlock::new(3, 16, 1, true),
                ConvBlock::new(3, 32, 1, true),
                ConvBlock::new(3, 32, 1, true),
            ],
            head_width: 64,
            classes,
            seed,
        }
    }

    /// Same body with a different input stage width.
    pub fn with_input_channels(&self, input_channels: usize) -> Self {
        Self {
            input_channels,
            ..self.clone()
        }
    }

    /// Spatial size after each block, or an error if any stage collapses.
    pub fn feature_sizes(&self) -> Result<Vec<(usize, usize)>> {
        if self.input_channels == 0 || self.classes == 0 || self.head_width == 0 {
            return Err(Error::InvalidConfig(
                "channels, classes and head width must be positive".into(),
            ));
        }
        let (mut h, mut w) = (self.height, self.width);
        let mut sizes = Vec::with_capacity(self.conv_blocks.len());
        for (i, b) in self.conv_blocks.iter().enumerate() {
            if b.kernel == 0 || b.filters == 0 || b.stride == 0 {
                return Err(Error::InvalidConfig(format!("block {i}: zero-sized parameter")));
            }
            let p = b.padding();
            if h + 2 * p < b.kernel || w + 2 * p < b.kernel {
                return Err(Error::InvalidConfig(format!("block {i}: kernel larger than input")));
            }
            h = (h + 2 * p - b.kernel) / b.stride + 1;
            w = (w + 2 * p - b.kernel) / b.stride + 1;
            if b.pool {
                if h < 2 || w < 2 {
                    return Err(Error::InvalidConfig(format!(
                        "block {i}: pooling a {h}x{w} map would go below 1x1"
                    )));
                }
                h /= 2;
                w /= 2;
            }
            sizes.push((h, w));
        }
        Ok(sizes)
    }

    fn flat_features(&self) -> Result<usize> {
        let sizes = self.feature_sizes()?;
        let (h, w) = sizes.last().copied().unwrap_or((self.height, self.width));
        let c = self.conv_blocks.last().map_or(self.input_channels, |b| b.filters);
        Ok(c * h * w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<NamedTensor>,
    grads: Vec<Tensor>,
}

impl Model {
    /// Seeded He (fan-in) normal weights, zero biases.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let flat = config.flat_features()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let mut he = |name: String, shape: Vec<usize>, fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let value = Tensor::from_fn(shape, |_| normal.sample(&mut rng));
            params.push(NamedTensor { name, value });
        };
        let mut channels = config.input_channels;
        let mut shapes = Vec::new();
        for (i, b) in config.conv_blocks.iter().enumerate() {
            let fan_in = channels * b.kernel * b.kernel;
            he(format!("conv{i}.weight"), vec![b.filters, channels, b.kernel, b.kernel], fan_in);
            shapes.push((format!("conv{i}.bias"), vec![b.filters]));
            channels = b.filters;
        }
        he("fc0.weight".into(), vec![flat, config.head_width], flat);
        he("fc1.weight".into(), vec![config.head_width, config.classes], config.head_width);
        for (name, shape) in shapes {
            params.push(NamedTensor {
                name,
                value: Tensor::zeros(shape),
            });
        }
        for (name, n) in [("fc0.bias", config.head_width), ("fc1.bias", config.classes)] {
            params.push(NamedTensor {
                name: name.into(),
                value: Tensor::zeros(vec![n]),
            });
        }
        // canonical order: layer by layer, weight before bias
        params.sort_by_key(|p| param_rank(&p.name));
        let grads = params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect();
        Ok(Self {
            config,
            params,
            grads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|p| p.name == name).map(|p| &mut p.value)
    }

    pub fn grads(&self) -> &[Tensor] {
        &self.grads
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Stores gradients in parameter order.
    pub fn set_grads(&mut self, grads: Vec<Tensor>) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} gradients, got {}",
                self.params.len(),
                grads.len()
            )));
        }
        for (p, g) in self.params.iter().zip(&grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_grads",
                    left: p.value.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Parameters plus gradients split for an optimizer step.
    pub fn params_and_grads(&mut self) -> (&mut [NamedTensor], &[Tensor]) {
        (&mut self.params, &self.grads)
    }

    /// Records the forward pass on `graph`; returns the logits node and the
    /// parameter leaves in parameter order.
    pub fn forward_graph(&self, graph: &mut Graph, input: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let shape = graph.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                op: "model input",
                left: shape,
                right: vec![0, self.config.input_channels, self.config.height, self.config.width],
            });
        }
        let n = shape[0];
        let ids: Vec<NodeId> = self.params.iter().map(|p| graph.param(p.value.clone())).collect();
        let mut x = input;
        for (i, b) in self.config.conv_blocks.iter().enumerate() {
            x = graph.conv2d(x, ids[2 * i], Some(ids[2 * i + 1]), b.stride, b.padding())?;
            x = graph.relu(x);
            if b.pool {
                x = graph.max_pool2d(x, 2, 2)?;
            }
        }
        let feat = graph.value(x).len() / n.max(1);
        x = graph.reshape(x, vec![n, feat])?;
        let base = 2 * self.config.conv_blocks.len();
        x = graph.dense(x, ids[base], ids[base + 1])?;
        x = graph.relu(x);
        let logits = graph.dense(x, ids[base + 2], ids[base + 3])?;
        Ok((logits, ids))
    }

    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.input(input.clone());
        let (logits, _) = self.forward_graph(&mut g, x)?;
        Ok(g.value(logits).clone())
    }
}

fn param_rank(name: &str) -> (usize, usize, bool) {
    let (layer, kind) = name.split_once('.').unwrap_or((name, ""));
    let group = usize::from(layer.starts_with("fc"));
    let idx = layer
        .trim_start_matches(|c: char| c.is_ascii_alphabetic())
        .parse()
        .unwrap_or(0);
    (group, idx, kind == "bias")
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Moments of a single `[3,H,W]` image (population std).
    pub fn of_image(image: &[u8]) -> Self {
        Self::of_images(std::iter::once(image))
    }

    /// Moments pooled over every pixel of every image.
    pub fn of_images<'a>(images: impl IntoIterator<Item = &'a [u8]>) -> Self {
        let mut sum = [0.0f64; 3];
        let mut sq = [0.0f64; 3];
        let mut count = 0usize;
        for img in images {
            let plane = img.len() / 3;
            for c in 0..3 {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = p as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += plane;
        }
        let n = count.max(1) as f64;
        let mean = sum.map(|s| s / n);
        let mut std = [0.0; 3];
        for c in 0..3 {
            std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
        }
        Self { mean, std }
    }
}

/// How the baseline turns bytes into network inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Standardization {
    /// Each image by its own per-channel moments.
    PerImage,
    /// Fixed moments, typically from the whole training set.
    Dataset(ChannelStats),
}

/// Guard applied to the standard deviation of degenerate images.
pub const STD_EPSILON: f64 = 1e-8;

/// `(pixel - mean) / std` per channel. With `epsilon`, the std is clamped
/// from below; without it a zero std is an error.
pub fn standardize(image: &[u8], stats: &ChannelStats, epsilon: Option<f64>) -> Result<Vec<f64>> {
    let plane = image.len() / 3;
    let mut out = Vec::with_capacity(image.len());
    for c in 0..3 {
        let std = match epsilon {
            Some(eps) => stats.std[c].max(eps),
            None if stats.std[c] > 0.0 && stats.std[c].is_finite() => stats.std[c],
            None => return Err(Error::ZeroStd { channel: c }),
        };
        let mean = stats.mean[c];
        out.extend(image[c * plane..(c + 1) * plane].iter().map(|&p| (p as f64 - mean) / std));
    }
    Ok(out)
}

impl Standardization {
    /// Standardizes a whole batch into `[N,3,H,W]`.
    pub fn apply(&self, batch: &ImageBatch) -> Result<Tensor> {
        let mut data = Vec::with_capacity(batch.pixels().len());
        for i in 0..batch.len() {
            let img = batch.image(i);
            let stats = match self {
                Standardization::PerImage => ChannelStats::of_image(img),
                Standardization::Dataset(s) => *s,
            };
            data.extend(standardize(img, &stats, Some(STD_EPSILON))?);
        }
        Tensor::new(vec![batch.len(), 3, batch.height(), batch.width()], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(input_channels: usize) -> ModelConfig {
        ModelConfig {
            input_channels,
            height: 8,
            width: 8,
            conv_blocks: vec![ConvBlock::new(3, 16, 1, true), ConvBlock::new(3, 8, 1, true)],
            head_width: 8,
            classes: 3,
            seed: 1,
        }
    }

    #[test]
    fn first_kernel_follows_input_channels() {
        let m = Model::build(tiny(6)).unwrap();
        assert_eq!(m.param("conv0.weight").unwrap().shape(), &[16, 6, 3, 3]);
        let names: Vec<&str> = m.params().iter().map(|p| p.name.as_str()).collect();
        assert_eq!(
            names,
            ["conv0.weight", "conv0.bias", "conv1.weight", "conv1.bias", "fc0.weight", "fc0.bias", "fc1.weight", "fc1.bias"]
        );
    }

    #[test]
    fn build_is_deterministic() {
        assert_eq!(Model::build(tiny(3)).unwrap(), Model::build(tiny(3)).unwrap());
        let other = ModelConfig { seed: 2, ..tiny(3) };
        assert_ne!(Model::build(tiny(3)).unwrap(), Model::build(other).unwrap());
    }

    #[test]
    fn first_layer_param_delta() {
        let a = Model::build(tiny(3)).unwrap().param_count();
        let b = Model::build(tiny(6)).unwrap().param_count();
        assert_eq!(b - a, 3 * 3 * 3 * 16);
    }

    #[test]
    fn impossible_pooling_rejected() {
        let mut cfg = tiny(3);
        cfg.conv_blocks = vec![ConvBlock::new(3, 4, 1, true); 4];
        assert!(matches!(Model::build(cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn zero_params_give_zero_logits() {
        let mut m = Model::build(tiny(3)).unwrap();
        for p in m.params_mut() {
            p.value.data_mut().fill(0.0);
        }
        let x = Tensor::from_fn(vec![2, 3, 8, 8], |i| (i % 13) as f64);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batch_rows_independent() {
        let m = Model::build(tiny(3)).unwrap();
        let one: Vec<f64> = (0..192).map(|i| ((i * 7) % 19) as f64 / 10.0).collect();
        let mut two = one.clone();
        two.extend(&one);
        let y = m.forward(&Tensor::new(vec![2, 3, 8, 8], two).unwrap()).unwrap();
        assert_eq!(y.data()[..3], y.data()[3..]);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let m = Model::build(tiny(6)).unwrap();
        assert!(m.forward(&Tensor::zeros(vec![1, 3, 8, 8])).is_err());
    }

    #[test]
    fn standardize_cases() {
        let stats = ChannelStats {
            mean: [10.0, 20.0, 30.0],
            std: [2.0, 4.0, 5.0],
        };
        let out = standardize(&[14; 12], &stats, None).unwrap();
        assert_eq!(&out[..4], &[2.0; 4]);
        assert_eq!(&out[4..8], &[-1.5; 4]);
        assert_eq!(&out[8..], &[-3.2; 4]);

        let flat = [77u8; 12];
        let s = ChannelStats::of_image(&flat);
        assert!(matches!(standardize(&flat, &s, None), Err(Error::ZeroStd { channel: 0 })));
        assert!(standardize(&flat, &s, Some(STD_EPSILON)).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn per_image_moments_are_unit() {
        let img: Vec<u8> = (0..3 * 100).map(|i| ((i * 7919) % 256) as u8).collect();
        let out = standardize(&img, &ChannelStats::of_image(&img), Some(STD_EPSILON)).unwrap();
        for c in 0..3 {
            let ch = &out[c * 100..(c + 1) * 100];
            let mean = ch.iter().sum::<f64>() / 100.0;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 100.0;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }
}
