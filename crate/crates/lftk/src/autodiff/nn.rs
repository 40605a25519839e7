//! Convolution layer wrapper and weight initialization.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Tensor;

/// Uniform init over ±sqrt(6 / fan_in).
pub fn uniform_fan_in(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::param(shape, data)
}

/// Same-padding, stride-1 2-D convolution layer.
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        with_bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Conv2d {
        let fan_in = in_ch * kh * kw;
        let weight = uniform_fan_in(&[out_ch, in_ch, kh, kw], fan_in, rng);
        let bias = with_bias.then(|| Tensor::param(&[out_ch], vec![0.0; out_ch]));
        Conv2d { weight, bias }
    }

    /// Layer with caller-provided fixed weights (no gradient).
    pub fn fixed(out_ch: usize, in_ch: usize, kh: usize, kw: usize, data: Vec<f32>) -> Conv2d {
        Conv2d { weight: Tensor::from_vec(&[out_ch, in_ch, kh, kw], data), bias: None }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, self.bias.as_ref())
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = vec![self.weight.clone()];
        if let Some(b) = &self.bias {
            p.push(b.clone());
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}
