//! Thin layer wrappers over candle tensors backed by a [`ParamStore`].

use candle_core::{Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// Uniform fan-in initialization for weight and bias.
    pub fn new(p: &ParamStore, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let b_init = bias.then_some(Init::Uniform { bound });
        Self::with_init(p, in_dim, out_dim, Init::Uniform { bound }, b_init)
    }

    pub fn xavier(p: &ParamStore, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Self::with_init(p, in_dim, out_dim, Init::Uniform { bound }, bias.then_some(Init::Zeros))
    }

    pub fn with_init(
        p: &ParamStore,
        in_dim: usize,
        out_dim: usize,
        weight_init: Init,
        bias_init: Option<Init>,
    ) -> Result<Self> {
        let weight = p.get((out_dim, in_dim), "weight", weight_init)?;
        let bias = match bias_init {
            Some(init) => Some(p.get(out_dim, "bias", init)?),
            None => None,
        };
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    /// Applies the layer over the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().expect("linear input must have a last dimension");
        let rows = x.elem_count() / in_dim.max(1);
        let x2 = x.reshape((rows, in_dim))?;
        let mut y = x2.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &ParamStore,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = p.get((out_ch, in_ch, kernel, kernel), "weight", Init::Uniform { bound })?;
        let bias = if bias {
            Some(p.get(out_ch, "bias", Init::Uniform { bound })?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    /// `x` is `[N, C, H, W]`. Lowered to one matrix product over shifted
    /// copies of the padded input, which keeps the backward pass on cheap
    /// primitives.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (out_ch, _, k, _) = self.weight.dims4()?;
        let (p, s) = (self.padding, self.stride);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let padded = if p > 0 { x.pad_with_zeros(2, p, p)?.pad_with_zeros(3, p, p)? } else { x.clone() };
        let rows = (s > 1).then(|| strided_index(ho, s, x.device())).transpose()?;
        let cols = (s > 1).then(|| strided_index(wo, s, x.device())).transpose()?;
        let mut taps = Vec::with_capacity(k * k);
        for ky in 0..k {
            for kx in 0..k {
                let mut t = padded.narrow(2, ky, (ho - 1) * s + 1)?.narrow(3, kx, (wo - 1) * s + 1)?;
                if let (Some(r), Some(c)) = (&rows, &cols) {
                    t = t.contiguous()?.index_select(r, 2)?.index_select(c, 3)?;
                }
                taps.push(t);
            }
        }
        let patches = if taps.len() == 1 { taps.pop().expect("one tap") } else { Tensor::cat(&taps, 1)? };
        let patches = patches.reshape((n, k * k * c, ho * wo))?;
        let weight = self.weight.permute((0, 2, 3, 1))?.reshape((out_ch, k * k * c))?;
        let mut y = weight.broadcast_matmul(&patches)?.reshape((n, out_ch, ho, wo))?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?;
        }
        Ok(y)
    }
}

fn strided_index(len: usize, stride: usize, device: &candle_core::Device) -> Result<Tensor> {
    let idx: Vec<u32> = (0..len).map(|i| (i * stride) as u32).collect();
    Ok(Tensor::from_vec(idx, len, device)?)
}

/// Layer normalization over the last dimension, composed from primitive ops
/// so that it is differentiable end to end.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(p: &ParamStore, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.get(dim, "weight", Init::Const(1.0))?,
            bias: p.get(dim, "bias", Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Position-wise feed-forward sublayer `Linear -> GELU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(p: &ParamStore, dim: usize, expansion: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), dim, dim * expansion, true)?,
            fc2: Linear::new(&p.pp("fc2"), dim * expansion, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)
    }
}

/// `[C, X, Y]` feature grid to `[X*Y, C]` tokens (row-major cells).
pub fn grid_to_tokens(grid: &Tensor) -> Result<Tensor> {
    let (c, x, y) = grid.dims3()?;
    Ok(grid.reshape((c, x * y))?.t()?.contiguous()?)
}

/// Inverse of [`grid_to_tokens`].
pub fn tokens_to_grid(tokens: &Tensor, x: usize, y: usize) -> Result<Tensor> {
    let (_, c) = tokens.dims2()?;
    Ok(tokens.t()?.contiguous()?.reshape((c, x, y))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn linear_matches_hand_product() {
        let p = ParamStore::new(0, DType::F64, &Device::Cpu);
        let lin = Linear::with_init(
            &p,
            2,
            2,
            Init::Values(vec![1.0, 2.0, 3.0, 4.0]),
            Some(Init::Values(vec![0.5, -0.5])),
        )
        .unwrap();
        let x = Tensor::new(&[[1.0f64, 1.0]], &Device::Cpu).unwrap();
        let y = lin.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        assert_eq!(y, vec![vec![3.5, 6.5]]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_variance() {
        let p = ParamStore::new(0, DType::F64, &Device::Cpu);
        let ln = LayerNorm::new(&p, 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn token_grid_round_trip() {
        let g = Tensor::arange(0f64, 24.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 4))
            .unwrap();
        let t = grid_to_tokens(&g).unwrap();
        assert_eq!(t.dims(), &[12, 2]);
        // cell (1, 2) -> token 6, channel 1 -> 12 + 6
        assert_eq!(t.get(6).unwrap().to_vec1::<f64>().unwrap(), vec![6.0, 18.0]);
        let back = tokens_to_grid(&t, 3, 4).unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            g.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
    }
}
