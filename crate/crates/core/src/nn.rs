//! Layers built on the tape: linear, MLP and valid (unpadded) convolution.

use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq)]
pub enum Init {
    /// N(0, 2/fan_in)
    He,
    /// N(0, 1/fan_in)
    Lecun,
    Normal(f64),
    Zeros,
}

impl Init {
    pub fn sample<S: Scalar>(self, shape: [usize; 2], fan_in: usize, rng: &mut Rng) -> Tensor<S> {
        let std = match self {
            Init::He => (2.0 / fan_in as f64).sqrt(),
            Init::Lecun => (1.0 / fan_in as f64).sqrt(),
            Init::Normal(s) => s,
            Init::Zeros => return Tensor::zeros(shape),
        };
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape[0] * shape[1]).map(|_| S::lit(normal.sample(rng))).collect();
        Tensor::new(shape, data).expect("shape matches data")
    }
}

/// `y = x·W + b` with `W: [in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        trainable: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), init.sample([in_dim, out_dim], in_dim, rng), trainable)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([1, out_dim]), trainable)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Linear layers with ReLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Contract(format!("mlp `{name}` needs at least two widths")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], true, Init::He, true, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(Linear::params).collect()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// Geometry of a channel-last feature map.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct MapShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Valid 2-D convolution over channel-last maps, lowered to gather + matmul.
/// A 1-D convolution is the `height == 1, kernel_h == 1` case.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: MapShape,
    pub output: MapShape,
    pub kernel: (usize, usize),
    pub stride: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        input: MapShape,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let (kh, kw) = kernel;
        if stride == 0 || kh > input.height || kw > input.width {
            return Err(Error::Contract(format!(
                "conv `{name}`: kernel {kernel:?} stride {stride} does not fit {input:?}"
            )));
        }
        let output = MapShape {
            height: (input.height - kh) / stride + 1,
            width: (input.width - kw) / stride + 1,
            channels: out_channels,
        };
        let fan_in = kh * kw * input.channels;
        let weight = store.add(format!("{name}.weight"), Init::He.sample([fan_in, out_channels], fan_in, rng), true)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([1, out_channels]), true)?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
            kernel,
            stride,
        })
    }

    fn patch_index(&self, batch: usize) -> Vec<Option<usize>> {
        let MapShape { height, width, channels } = self.input;
        let (kh, kw) = self.kernel;
        let mut index = Vec::with_capacity(batch * self.output.height * self.output.width * kh * kw * channels);
        for b in 0..batch {
            for oy in 0..self.output.height {
                for ox in 0..self.output.width {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = oy * self.stride + ky;
                            let x = ox * self.stride + kx;
                            let base = ((b * height + y) * width + x) * channels;
                            index.extend((0..channels).map(|c| Some(base + c)));
                        }
                    }
                }
            }
        }
        index
    }

    /// `x: [batch·H·W × C_in] → [batch·H'·W' × C_out]`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var, batch: usize) -> Result<Var> {
        let expect = [batch * self.input.height * self.input.width, self.input.channels];
        if g.value(x).shape() != expect {
            return Err(Error::dim("conv", g.value(x).shape(), &expect));
        }
        let positions = batch * self.output.height * self.output.width;
        let cols = self.kernel.0 * self.kernel.1 * self.input.channels;
        let patches = g.gather(x, self.patch_index(batch), [positions, cols])?;
        let w = g.param(store, self.weight);
        let y = g.matmul(patches, w)?;
        let b = g.param(store, self.bias);
        g.add_row(y, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = rng_for(5, &[]);
        let mut store = ParamStore::<f64>::new();
        let input = MapShape {
            height: 4,
            width: 5,
            channels: 2,
        };
        let conv = Conv::new(&mut store, "c", input, 3, (2, 3), 1, &mut rng).unwrap();
        let x = Init::Normal(1.0).sample::<f64>([2 * 20, 2], 1, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = conv.forward(&mut g, &store, xv, 2).unwrap();
        assert_eq!(g.value(y).shape(), &[2 * 3 * 3, 3]);

        let w = store.value(conv.weight);
        for b in 0..2 {
            for oy in 0..3 {
                for ox in 0..3 {
                    for o in 0..3 {
                        let mut acc = 0.0;
                        for ky in 0..2 {
                            for kx in 0..3 {
                                for c in 0..2 {
                                    let xin = x.data()[((b * 4 + oy + ky) * 5 + ox + kx) * 2 + c];
                                    acc += xin * w.at((ky * 3 + kx) * 2 + c, o);
                                }
                            }
                        }
                        let row = (b * 3 + oy) * 3 + ox;
                        assert!((g.value(y).at(row, o) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut rng = rng_for(0, &[]);
        let mut store = ParamStore::<f64>::new();
        let input = MapShape {
            height: 1,
            width: 3,
            channels: 1,
        };
        assert!(Conv::new(&mut store, "c", input, 1, (1, 4), 1, &mut rng).is_err());
    }
}
