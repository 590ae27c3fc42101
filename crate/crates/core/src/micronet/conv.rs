use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::num::Real;

/// Square-kernel 2-D convolution with zero padding, computed as im2col + GEMM.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out_channels, in_channels * kernel * kernel]`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> ConvGrad<T> {
    pub fn zeros_like(conv: &Conv2d<T>) -> Self {
        ConvGrad {
            weight: vec![T::zero(); conv.weight.len()],
            bias: vec![T::zero(); conv.bias.len()],
        }
    }
}

impl<T: Real> Conv2d<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: vec![T::zero(); out_channels * in_channels * kernel * kernel],
            bias: vec![T::zero(); out_channels],
        }
    }

    /// Normal weights with standard deviation `std`, zero bias.
    pub fn init_normal<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let dist = Normal::new(0.0, std).expect("finite std");
        for w in &mut self.weight {
            *w = T::of(dist.sample(rng));
        }
        self.bias.iter_mut().for_each(|b| *b = T::zero());
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::shape(format!("input {h}x{w} smaller than kernel {}", self.kernel)));
        }
        Ok(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, ho: usize, wo: usize, cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = ho * wo;
        for c in 0..self.in_channels {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &xc[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p;
                            *v = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize, dx: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let plane = ho * wo;
        for c in 0..self.in_channels {
            let dxc = &mut dx[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..ho {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut dxc[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..wo {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, h, w] = x.shape();
        if c != self.in_channels {
            return Err(Error::shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (ho, wo) = self.output_size(h, w)?;
        let plane = ho * wo;
        let ckk = self.fan_in();
        let mut out = Tensor::zeros([n, self.out_channels, ho, wo]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); ckk * plane] };
        for b in 0..n {
            let xb = x.item(b);
            let src: &[T] = if self.is_pointwise() {
                xb
            } else {
                self.im2col(xb, h, w, ho, wo, &mut cols);
                &cols
            };
            let ob = out.item_mut(b);
            for (oc, chunk) in ob.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias[oc]);
            }
            T::gemm(
                self.out_channels,
                ckk,
                plane,
                T::one(),
                &self.weight,
                (ckk as isize, 1),
                src,
                (plane as isize, 1),
                T::one(),
                ob,
                (plane as isize, 1),
            );
        }
        Ok(out)
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient when `need_input_grad` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dout: &Tensor<T>,
        grad: &mut ConvGrad<T>,
        need_input_grad: bool,
    ) -> Result<Option<Tensor<T>>> {
        let [n, _, h, w] = x.shape();
        let (ho, wo) = self.output_size(h, w)?;
        if dout.shape() != [n, self.out_channels, ho, wo] {
            return Err(Error::shape(format!(
                "conv backward: upstream {:?}, expected {:?}",
                dout.shape(),
                [n, self.out_channels, ho, wo]
            )));
        }
        let plane = ho * wo;
        let ckk = self.fan_in();
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); ckk * plane] };
        let mut dcols = vec![T::zero(); ckk * plane];
        let mut dx = need_input_grad.then(|| Tensor::zeros(x.shape()));
        for b in 0..n {
            let db = dout.item(b);
            for (oc, chunk) in db.chunks(plane).enumerate() {
                grad.bias[oc] += chunk.iter().copied().sum();
            }
            let xb = x.item(b);
            let src: &[T] = if pointwise {
                xb
            } else {
                self.im2col(xb, h, w, ho, wo, &mut cols);
                &cols
            };
            // dW += dOut * cols^T
            T::gemm(
                self.out_channels,
                plane,
                ckk,
                T::one(),
                db,
                (plane as isize, 1),
                src,
                (1, plane as isize),
                T::one(),
                &mut grad.weight,
                (ckk as isize, 1),
            );
            if let Some(dx) = dx.as_mut() {
                // dCols = W^T * dOut
                T::gemm(
                    ckk,
                    self.out_channels,
                    plane,
                    T::one(),
                    &self.weight,
                    (1, ckk as isize),
                    db,
                    (plane as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (plane as isize, 1),
                );
                let dxb = dx.item_mut(b);
                if pointwise {
                    dxb.copy_from_slice(&dcols);
                } else {
                    self.col2im(&dcols, h, w, ho, wo, dxb);
                }
            }
        }
        Ok(dx)
    }
}
