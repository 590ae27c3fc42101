use serde::{Deserialize, Serialize};

use super::conv::ConvGrad;
use super::net::{DetectorNet, NetGrads};
use crate::error::{Error, Result};
use crate::num::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    /// L2 penalty on convolution weights (biases are not decayed).
    pub weight_decay: f64,
}

/// One momentum-SGD update of a flat parameter slice:
/// `v = momentum * v + lr * (g + decay * w); w -= v`.
pub fn sgd_update<T: Real>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T, decay: T) {
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + lr * (g + decay * *w);
        *w -= *v;
    }
}

/// Momentum buffers for a [`DetectorNet`].
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    velocity: Vec<ConvGrad<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(net: &DetectorNet<T>) -> Self {
        Sgd {
            velocity: net.layers().iter().map(|(_, c)| ConvGrad::zeros_like(c)).collect(),
        }
    }

    pub fn step(&mut self, net: &mut DetectorNet<T>, grads: &NetGrads<T>, cfg: &SgdConfig) -> Result<()> {
        if grads.layers.len() != self.velocity.len() {
            return Err(Error::shape("gradient layer count does not match the net"));
        }
        let (lr, mom, decay) = (T::of(cfg.learning_rate), T::of(cfg.momentum), T::of(cfg.weight_decay));
        for ((conv, g), v) in net.layers_mut().into_iter().zip(&grads.layers).zip(&mut self.velocity) {
            if g.weight.len() != conv.weight.len() || g.bias.len() != conv.bias.len() {
                return Err(Error::shape("gradient shape does not match the net"));
            }
            sgd_update(&mut conv.weight, &g.weight, &mut v.weight, lr, mom, decay);
            sgd_update(&mut conv.bias, &g.bias, &mut v.bias, lr, mom, T::zero());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::micronet::net::{HeadKind, NetConfig};

    #[test]
    fn quadratic_toy_update() {
        // f(w) = 0.5 * w^2, gradient w; hand-computed momentum steps
        let mut w = [2.0f64];
        let mut v = [0.0f64];
        let g = w[0];
        sgd_update(&mut w, &[g], &mut v, 0.1, 0.9, 0.0);
        assert_eq!((w[0], v[0]), (1.8, 0.2));
        let g = w[0];
        sgd_update(&mut w, &[g], &mut v, 0.1, 0.9, 0.0);
        // v = 0.9 * 0.2 + 0.1 * 1.8 = 0.36; w = 1.8 - 0.36
        assert!((v[0] - 0.36).abs() < 1e-15 && (w[0] - 1.44).abs() < 1e-15);

        let mut w = [1.0f64];
        let mut v = [0.0f64];
        sgd_update(&mut w, &[0.5], &mut v, 0.1, 0.0, 0.1);
        assert!((w[0] - (1.0 - 0.1 * (0.5 + 0.1))).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_leaves_net_unchanged() {
        let cfg = NetConfig {
            head: HeadKind::Softmax,
            ..NetConfig::default()
        };
        let mut net = DetectorNet::<f32>::new(cfg, 1).unwrap();
        let before = net.clone();
        let grads = NetGrads {
            layers: net
                .layers()
                .iter()
                .map(|(_, c)| ConvGrad {
                    weight: vec![1.0; c.weight.len()],
                    bias: vec![1.0; c.bias.len()],
                })
                .collect(),
        };
        let mut opt = Sgd::new(&net);
        let sgd = SgdConfig {
            learning_rate: 0.0,
            momentum: 0.9,
            weight_decay: 5e-4,
        };
        opt.step(&mut net, &grads, &sgd).unwrap();
        assert_eq!(net, before);
    }
}
