use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::conv::{Conv2d, ConvGrad};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::num::Real;

/// Classification head variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Two logits per anchor (background, object), trained with softmax
    /// cross-entropy. Channel `k` holds the background logit of scale `k`,
    /// channel `K + k` the object logit.
    Softmax,
    /// One logit per anchor, trained with sigmoid + squared error against
    /// soft targets.
    PreciseSigmoid,
}

impl HeadKind {
    pub fn cls_channels(self, num_anchors: usize) -> usize {
        match self {
            HeadKind::Softmax => 2 * num_anchors,
            HeadKind::PreciseSigmoid => num_anchors,
        }
    }

    pub(crate) fn tag(self) -> f64 {
        match self {
            HeadKind::Softmax => 0.0,
            HeadKind::PreciseSigmoid => 1.0,
        }
    }

    pub(crate) fn from_tag(t: f64) -> Option<Self> {
        match t as i64 {
            0 => Some(HeadKind::Softmax),
            1 => Some(HeadKind::PreciseSigmoid),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub in_channels: usize,
    /// Backbone channels at width 1; every layer is a 3x3 conv + ReLU.
    pub channels: Vec<usize>,
    /// Multiplier on backbone channels (rounded up). Heads are unaffected.
    pub width: f64,
    /// Power of two; the first `log2(total_stride)` layers use stride 2.
    pub total_stride: usize,
    /// Anchors per feature-map cell.
    pub num_anchors: usize,
    pub head: HeadKind,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 1,
            channels: vec![16, 32, 64, 64],
            width: 1.0,
            total_stride: 16,
            num_anchors: 4,
            head: HeadKind::Softmax,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_anchors == 0 {
            return Err(Error::invalid("in_channels and num_anchors must be >= 1"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("backbone channels must be non-empty and positive"));
        }
        if !(self.width > 0.0 && self.width <= 1.0) {
            return Err(Error::invalid(format!("width must lie in (0, 1], got {}", self.width)));
        }
        self.layer_strides().map(|_| ())
    }

    pub fn layer_channels(&self) -> Vec<usize> {
        self.channels
            .iter()
            .map(|&c| ((c as f64 * self.width).ceil() as usize).max(1))
            .collect()
    }

    pub fn layer_strides(&self) -> Result<Vec<usize>> {
        let s = self.total_stride;
        if s == 0 || !s.is_power_of_two() {
            return Err(Error::invalid(format!("total stride {s} is not a power of two")));
        }
        let halvings = s.trailing_zeros() as usize;
        if halvings > self.channels.len() {
            return Err(Error::invalid(format!(
                "{} layers cannot reach total stride {s}",
                self.channels.len()
            )));
        }
        Ok((0..self.channels.len()).map(|i| if i < halvings { 2 } else { 1 }).collect())
    }

    pub fn cls_channels(&self) -> usize {
        self.head.cls_channels(self.num_anchors)
    }

    pub fn reg_channels(&self) -> usize {
        4 * self.num_anchors
    }
}

#[derive(Debug, Clone)]
struct ForwardCache<T> {
    /// `acts[0]` is the input, `acts[l + 1]` the ReLU output of layer `l`.
    acts: Vec<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetOutput<T> {
    pub cls: Tensor<T>,
    pub reg: Tensor<T>,
}

/// Gradients in [`DetectorNet::layers`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads<T> {
    pub layers: Vec<ConvGrad<T>>,
}

impl<T: Real> NetGrads<T> {
    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weight.iter().chain(&g.bias).all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|g| g.weight.iter().chain(&g.bias))
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales to L2 norm `max_norm` if larger; returns the norm before.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm {
            let k = T::of(max_norm / n);
            for g in &mut self.layers {
                g.weight.iter_mut().chain(g.bias.iter_mut()).for_each(|v| *v *= k);
            }
        }
        n
    }

    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|g| g.weight.iter().chain(&g.bias).copied())
            .collect()
    }
}

/// Fully convolutional one-stage detector: a strided 3x3 backbone followed by
/// 1x1 classification and regression heads on the same feature map.
#[derive(Debug, Clone)]
pub struct DetectorNet<T> {
    config: NetConfig,
    pub backbone: Vec<Conv2d<T>>,
    pub cls_head: Conv2d<T>,
    pub reg_head: Conv2d<T>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Real> PartialEq for DetectorNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.backbone == other.backbone
            && self.cls_head == other.cls_head
            && self.reg_head == other.reg_head
    }
}

impl<T: Real> DetectorNet<T> {
    /// All-zero parameters.
    pub fn zeros(config: NetConfig) -> Result<Self> {
        config.validate()?;
        let chans = config.layer_channels();
        let strides = config.layer_strides()?;
        let mut backbone = Vec::with_capacity(chans.len());
        let mut prev = config.in_channels;
        for (&c, &s) in chans.iter().zip(&strides) {
            backbone.push(Conv2d::zeros(prev, c, 3, s, 1));
            prev = c;
        }
        let cls_head = Conv2d::zeros(prev, config.cls_channels(), 1, 1, 0);
        let reg_head = Conv2d::zeros(prev, config.reg_channels(), 1, 1, 0);
        Ok(DetectorNet {
            config,
            backbone,
            cls_head,
            reg_head,
            cache: None,
        })
    }

    /// He-normal backbone, `N(0, 0.01)` heads, zero biases.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &mut net.backbone {
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            conv.init_normal(std, &mut rng);
        }
        net.cls_head.init_normal(0.01, &mut rng);
        net.reg_head.init_normal(0.01, &mut rng);
        Ok(net)
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.config.head
    }

    pub fn num_anchors(&self) -> usize {
        self.config.num_anchors
    }

    /// Named layers in parameter order: backbone, classification head,
    /// regression head.
    pub fn layers(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut out: Vec<(String, &Conv2d<T>)> = self
            .backbone
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("backbone.{i}"), c))
            .collect();
        out.push(("cls_head".into(), &self.cls_head));
        out.push(("reg_head".into(), &self.reg_head));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Conv2d<T>> {
        let mut out: Vec<&mut Conv2d<T>> = self.backbone.iter_mut().collect();
        out.push(&mut self.cls_head);
        out.push(&mut self.reg_head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.layers()
            .iter()
            .map(|(_, c)| c.weight.len() + c.bias.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.layers()
            .iter()
            .flat_map(|(_, c)| c.weight.iter().chain(&c.bias).copied())
            .collect()
    }

    pub fn set_flat_params(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                values.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for conv in self.layers_mut() {
            for p in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
                *p = values[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// SHA-256 over every parameter's little-endian bytes.
    pub fn checksum(&self) -> String {
        let mut bytes = Vec::with_capacity(self.num_params() * T::BYTES);
        for v in self.flat_params() {
            v.write_le(&mut bytes);
        }
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Feature-map size for an input of `h x w`.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.config.total_stride;
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::shape(format!("input {h}x{w} is not a multiple of total stride {s}")));
        }
        Ok((h / s, w / s))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.channels() != self.config.in_channels {
            return Err(Error::shape(format!(
                "net expects {} input channels, got {}",
                self.config.in_channels,
                x.channels()
            )));
        }
        if x.batch() == 0 {
            return Err(Error::shape("empty batch"));
        }
        self.output_dims(x.height(), x.width()).map(|_| ())
    }

    fn run(&self, x: &Tensor<T>, keep: bool) -> Result<(NetOutput<T>, Option<ForwardCache<T>>)> {
        self.check_input(x)?;
        let mut acts = Vec::with_capacity(self.backbone.len() + 1);
        let mut cur = x.clone();
        for conv in &self.backbone {
            let mut out = conv.forward(&cur)?;
            out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
            if keep {
                acts.push(cur);
            }
            cur = out;
        }
        let cls = self.cls_head.forward(&cur)?;
        let reg = self.reg_head.forward(&cur)?;
        let cache = keep.then(|| {
            acts.push(cur);
            ForwardCache { acts }
        });
        Ok((NetOutput { cls, reg }, cache))
    }

    /// Inference forward pass; keeps no state.
    pub fn forward(&self, x: &Tensor<T>) -> Result<NetOutput<T>> {
        Ok(self.run(x, false)?.0)
    }

    /// Forward pass that records activations for [`DetectorNet::backward`].
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<NetOutput<T>> {
        let (out, cache) = self.run(x, true)?;
        self.cache = cache;
        Ok(out)
    }

    /// Parameter gradients given upstream gradients on both output maps.
    /// Consumes the activations of the last [`DetectorNet::forward_train`].
    pub fn backward(&mut self, d_cls: &Tensor<T>, d_reg: &Tensor<T>) -> Result<NetGrads<T>> {
        let cache = self.cache.take().ok_or(Error::NoForwardCache)?;
        let feat = cache.acts.last().expect("cache holds the feature map");
        let mut grads: Vec<ConvGrad<T>> = self.layers().iter().map(|(_, c)| ConvGrad::zeros_like(c)).collect();
        let nb = self.backbone.len();

        let mut d_feat = self
            .cls_head
            .backward(feat, d_cls, &mut grads[nb], true)?
            .expect("input grad requested");
        let d_feat_reg = self
            .reg_head
            .backward(feat, d_reg, &mut grads[nb + 1], true)?
            .expect("input grad requested");
        d_feat
            .data_mut()
            .iter_mut()
            .zip(d_feat_reg.data())
            .for_each(|(a, b)| *a += *b);

        let mut upstream = d_feat;
        for l in (0..nb).rev() {
            // ReLU: pass gradient where the activation was positive
            let act = &cache.acts[l + 1];
            upstream
                .data_mut()
                .iter_mut()
                .zip(act.data())
                .for_each(|(g, &a)| {
                    if a <= T::zero() {
                        *g = T::zero()
                    }
                });
            let dx = self.backbone[l].backward(&cache.acts[l], &upstream, &mut grads[l], l > 0)?;
            if let Some(dx) = dx {
                upstream = dx;
            }
        }
        Ok(NetGrads { layers: grads })
    }

    /// Sign pattern of every backbone pre-activation; gradient checks use it
    /// to detect ReLU kinks inside a finite-difference step.
    pub fn relu_pattern(&self, x: &Tensor<T>) -> Result<Vec<bool>> {
        self.check_input(x)?;
        let mut pattern = Vec::new();
        let mut cur = x.clone();
        for conv in &self.backbone {
            let mut out = conv.forward(&cur)?;
            for v in out.data_mut() {
                pattern.push(*v > T::zero());
                *v = v.max(T::zero());
            }
            cur = out;
        }
        Ok(pattern)
    }

    pub fn cast<U: Real>(&self) -> DetectorNet<U> {
        let conv = |c: &Conv2d<T>| Conv2d {
            in_channels: c.in_channels,
            out_channels: c.out_channels,
            kernel: c.kernel,
            stride: c.stride,
            padding: c.padding,
            weight: c.weight.iter().map(|v| U::of(v.f64())).collect(),
            bias: c.bias.iter().map(|v| U::of(v.f64())).collect(),
        };
        DetectorNet {
            config: self.config.clone(),
            backbone: self.backbone.iter().map(conv).collect(),
            cls_head: conv(&self.cls_head),
            reg_head: conv(&self.reg_head),
            cache: None,
        }
    }

    /// Converts a softmax-head net into a sigmoid-head net. Backbone and
    /// regression head are copied; the new logit of scale `k` is
    /// `object_k - background_k`, so `sigmoid(new) == softmax_object`.
    pub fn switch_head_softmax_to_sigmoid(&self) -> Result<Self> {
        if self.config.head != HeadKind::Softmax {
            return Err(Error::invalid("net already has a sigmoid head"));
        }
        let k = self.config.num_anchors;
        let mut config = self.config.clone();
        config.head = HeadKind::PreciseSigmoid;
        let old = &self.cls_head;
        let fan = old.fan_in();
        let mut cls = Conv2d::zeros(old.in_channels, k, 1, 1, 0);
        for a in 0..k {
            for i in 0..fan {
                cls.weight[a * fan + i] = old.weight[(k + a) * fan + i] - old.weight[a * fan + i];
            }
            cls.bias[a] = old.bias[k + a] - old.bias[a];
        }
        Ok(DetectorNet {
            config,
            backbone: self.backbone.clone(),
            cls_head: cls,
            reg_head: self.reg_head.clone(),
            cache: None,
        })
    }

    /// Same architecture with backbone channels scaled by `factor`, freshly
    /// initialized. Head output channels are unchanged.
    pub fn shrunk(&self, factor: f64, seed: u64) -> Result<Self> {
        if !(factor > 0.0 && factor <= 1.0) {
            return Err(Error::invalid(format!("shrink factor must lie in (0, 1], got {factor}")));
        }
        let mut config = self.config.clone();
        config.channels = self.config.layer_channels();
        config.width = factor;
        Self::new(config, seed)
    }
}
