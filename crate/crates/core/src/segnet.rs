//! Compact encoder-decoder segmentation network.
//!
//! The network maps a 5-channel input (RGB plus two guidance channels) to a
//! per-pixel foreground probability at full resolution. Each encoder stage
//! halves the resolution with a strided 3x3 convolution followed by a second
//! 3x3 convolution. The decoder mirrors the encoder: bilinear 2x upsampling,
//! concatenation with the matching skip tensor, and a 3x3 convolution. A 1x1
//! head and a sigmoid produce the probability map.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamSet, ParamVars};
use crate::tensor::Tensor;

/// Lower and upper clamp applied to every probability before a log.
pub const PROB_EPS: f64 = 1e-7;

pub const INPUT_CHANNELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_size: usize,
    /// Channel width of each encoder stage; the stem uses the first width.
    pub widths: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_channels: INPUT_CHANNELS,
            input_size: 64,
            widths: vec![8, 16, 32],
        }
    }
}

/// One convolution of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvLayer {
    fn new(name: impl Into<String>, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            kernel,
            stride,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    fn padding(&self) -> usize {
        self.kernel / 2
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels != INPUT_CHANNELS {
            return Err(Error::Architecture(format!(
                "input must be a {INPUT_CHANNELS}-channel map, got {} channels",
                self.input_channels
            )));
        }
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Architecture("widths must be non-empty and positive".into()));
        }
        let factor = 1usize << self.widths.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::Architecture(format!(
                "input size {} must be a positive multiple of {factor}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Every convolution in evaluation order.
    pub fn layers(&self) -> Vec<ConvLayer> {
        let w = &self.widths;
        let mut layers = vec![ConvLayer::new("stem", self.input_channels, w[0], 3, 1)];
        for (k, &width) in w.iter().enumerate() {
            let c_prev = if k == 0 { w[0] } else { w[k - 1] };
            layers.push(ConvLayer::new(format!("down{k}.a"), c_prev, width, 3, 2));
            layers.push(ConvLayer::new(format!("down{k}.b"), width, width, 3, 1));
        }
        let mut current = *w.last().unwrap();
        for k in (0..w.len()).rev() {
            let skip = if k == 0 { w[0] } else { w[k - 1] };
            layers.push(ConvLayer::new(format!("up{k}"), current + skip, skip, 3, 1));
            current = skip;
        }
        layers.push(ConvLayer::new("head", w[0], 1, 1, 1));
        layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.c_out * l.c_in * l.kernel * l.kernel + l.c_out)
            .sum()
    }
}

/// Network parameters together with the architecture they instantiate.
#[derive(Debug, Clone, PartialEq)]
pub struct SegNet {
    pub arch: Architecture,
    pub params: ParamSet,
}

impl SegNet {
    /// Fan-in scaled uniform initialisation; biases start at zero.
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for layer in arch.layers() {
            let fan_in = layer.c_in * layer.kernel * layer.kernel;
            let bound = (6.0 / fan_in as f64).sqrt();
            let shape = [layer.c_out, layer.c_in, layer.kernel, layer.kernel];
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            params.insert(layer.weight_name(), Tensor::new(shape.to_vec(), data)?)?;
            params.insert(layer.bias_name(), Tensor::zeros(&[layer.c_out]))?;
        }
        log::debug!("built network with {} parameters", params.num_scalars());
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: Architecture, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let expected = Self::build(arch.clone(), 0)?;
        expected
            .params
            .check_layout(&params, "segnet")
            .map_err(|e| Error::Architecture(e.to_string()))?;
        Ok(Self { arch, params })
    }

    /// Sets the head to zero so every output probability is exactly 0.5.
    pub fn zero_head(&mut self) -> Result<()> {
        for name in ["head.weight", "head.bias"] {
            let shape = self.params.get(name).expect("head exists").shape().to_vec();
            self.params.replace(name, Tensor::zeros(&shape))?;
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.arch.input_channels, self.arch.input_size, self.arch.input_size]
    }

    /// Records the forward pass; returns the `[H, W]` probability node.
    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var> {
        let expected = self.input_shape();
        g.value(x).expect_shape("segnet.forward", &expected)?;
        let layers = self.arch.layers();
        let mut it = layers.iter();
        let mut conv = |g: &mut Graph, input: Var, relu: bool| -> Result<Var> {
            let layer = it.next().expect("layer list matches forward");
            let w = vars.get(&layer.weight_name())?;
            let b = vars.get(&layer.bias_name())?;
            let y = g.conv2d(input, w, b, layer.stride, layer.padding())?;
            Ok(if relu { g.relu(y) } else { y })
        };

        let mut h = conv(g, x, true)?;
        let mut skips = vec![h];
        for _ in 0..self.arch.widths.len() {
            h = conv(g, h, true)?;
            h = conv(g, h, true)?;
            skips.push(h);
        }
        skips.pop();
        while let Some(skip) = skips.pop() {
            let up = g.upsample2x(h)?;
            let cat = g.concat_channels(up, skip)?;
            h = conv(g, cat, true)?;
        }
        let logits = conv(g, h, false)?;
        let probs = g.sigmoid(logits);
        let size = self.arch.input_size;
        Ok(g.reshape(probs, &[size, size])?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Prediction> {
        let mut g = Graph::new();
        let vars = self.params.register(&mut g, false);
        let xv = g.constant(x.clone());
        let probs = self.forward(&mut g, &vars, xv)?;
        Ok(Prediction::from_probabilities(g.value(probs)))
    }
}

/// Probability map and its 0.5-thresholded mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probabilities: Tensor,
    pub binary: Tensor,
}

impl Prediction {
    pub fn from_probabilities(probs: &Tensor) -> Self {
        let probabilities = probs.map(|p| p.clamp(PROB_EPS, 1.0 - PROB_EPS));
        let binary = probabilities.map(|p| if p >= 0.5 { 1.0 } else { 0.0 });
        Self { probabilities, binary }
    }

    pub fn height(&self) -> usize {
        self.binary.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.binary.shape()[1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_layer_plan() {
        let names: Vec<_> = Architecture::default().layers().into_iter().map(|l| l.name).collect();
        assert_eq!(
            names,
            ["stem", "down0.a", "down0.b", "down1.a", "down1.b", "down2.a", "down2.b", "up2", "up1", "up0", "head"]
        );
    }

    #[test]
    fn rejects_four_channel_input() {
        let arch = Architecture {
            input_channels: 4,
            ..Architecture::default()
        };
        assert!(matches!(SegNet::build(arch, 0), Err(Error::Architecture(_))));
    }

    #[test]
    fn rejects_indivisible_size() {
        let arch = Architecture {
            input_size: 60,
            ..Architecture::default()
        };
        assert!(SegNet::build(arch, 0).is_err());
    }

    #[test]
    fn same_seed_same_params() {
        let a = SegNet::build(Architecture::default(), 11).unwrap();
        let b = SegNet::build(Architecture::default(), 11).unwrap();
        let c = SegNet::build(Architecture::default(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn zero_head_predicts_half() {
        let mut net = SegNet::build(Architecture::default(), 3).unwrap();
        net.zero_head().unwrap();
        let x = Tensor::full(&net.input_shape(), 0.3);
        let p = net.predict(&x).unwrap();
        assert_eq!(p.probabilities.shape(), &[64, 64]);
        assert!(p.probabilities.data().iter().all(|&v| v == 0.5));
        assert!(p.binary.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wrong_input_shape() {
        let net = SegNet::build(Architecture::default(), 3).unwrap();
        assert!(net.predict(&Tensor::zeros(&[5, 32, 32])).is_err());
        assert!(net.predict(&Tensor::zeros(&[3, 64, 64])).is_err());
    }

    #[test]
    fn prediction_clamps_and_thresholds() {
        let probs = Tensor::new(vec![1, 4], vec![0.0, 0.5, 0.4999, 1.0]).unwrap();
        let p = Prediction::from_probabilities(&probs);
        assert_eq!(p.probabilities.data()[0], PROB_EPS);
        assert_eq!(p.probabilities.data()[3], 1.0 - PROB_EPS);
        assert_eq!(p.binary.data(), &[0.0, 1.0, 0.0, 1.0]);
    }
}
