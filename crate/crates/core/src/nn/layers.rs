use crate::error::Result;
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{Bound, Init, ParamId, ParameterStore};
use crate::nn::tensor::Tensor;

/// Fully connected layer, `x[B, in] -> [B, out]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    pub fn new(store: &mut ParameterStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), init.uniform(&[fan_in, fan_out], fan_in));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.dense(x, p.var(self.w), p.var(self.b))
    }

    pub fn num_params(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// 2-D convolution with square kernel and "same" padding for odd kernels.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub k: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParameterStore,
        init: &mut Init,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let k = store.add(
            format!("{name}.k"),
            init.uniform(&[out_ch, in_ch, kernel, kernel], fan_in),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[out_ch]));
        Self {
            k,
            b,
            stride: 1,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.k), p.var(self.b), self.stride, self.pad)
    }
}
