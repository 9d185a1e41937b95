use crate::diff::{Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::Result;
use crate::rng::Rng;
use rand::Rng as _;

fn kaiming(shape: &[usize], fan_in: usize, r: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| r.random_range(-bound..bound))
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new(params: &mut ParamSet, name: &str, inputs: usize, outputs: usize, r: &mut Rng) -> Self {
        Dense {
            w: params.add(format!("{name}.w"), kaiming(&[inputs, outputs], inputs, r)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[outputs])),
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Stride-1 convolution with per-channel bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub pad: usize,
}

impl Conv {
    pub fn new(params: &mut ParamSet, name: &str, cin: usize, cout: usize, kernel: usize, pad: usize, r: &mut Rng) -> Self {
        let fan_in = cin * kernel * kernel;
        Conv {
            w: params.add(format!("{name}.w"), kaiming(&[cout, cin, kernel, kernel], fan_in, r)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[cout])),
            pad,
        }
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        let y = g.conv2d(x, w, self.pad)?;
        g.add_channel_bias(y, b)
    }
}
