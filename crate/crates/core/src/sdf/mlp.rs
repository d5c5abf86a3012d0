//! Small fully connected decoder with a sharp softplus activation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// Layer widths including input and the scalar output.
    pub dims: Vec<usize>,
    /// Softplus sharpness.
    pub sharpness: f64,
    /// Per layer: row-major weights (`out x in`) followed by the bias.
    pub params: Vec<f64>,
}

/// Per-sample activations retained for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    /// `acts[0]` is the input; `acts[l + 1]` the output of layer `l`.
    pub acts: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pub pre: Vec<Vec<f64>>,
}

#[inline]
fn softplus(x: f64, k: f64) -> f64 {
    let kx = k * x;
    (kx.max(0.0) + (-kx.abs()).exp().ln_1p()) / k
}

#[inline]
fn softplus_grad(x: f64, k: f64) -> f64 {
    let kx = k * x;
    if kx >= 0.0 {
        1.0 / (1.0 + (-kx).exp())
    } else {
        let e = kx.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    pub fn new(dims: Vec<usize>, sharpness: f64, rng: &mut impl Rng) -> Self {
        let mut params = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            params.extend((0..fan_in * fan_out).map(|_| normal.sample(rng)));
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Self { dims, sharpness, params }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for k in 0..l {
            off += self.dims[k] * self.dims[k + 1] + self.dims[k + 1];
        }
        (off, off + self.dims[l] * self.dims[l + 1])
    }

    /// Index of the output bias in `params`.
    pub fn output_bias_index(&self) -> usize {
        self.params.len() - 1
    }

    /// Range of the output layer's weights in `params`.
    pub fn output_weight_range(&self) -> std::ops::Range<usize> {
        let l = self.dims.len() - 2;
        let (w, b) = self.layer_offsets(l);
        w..b
    }

    pub fn forward(&self, input: &[f64], trace: &mut MlpTrace) -> f64 {
        let nl = self.dims.len() - 1;
        trace.acts.resize(nl + 1, Vec::new());
        trace.pre.resize(nl, Vec::new());
        trace.acts[0].clear();
        trace.acts[0].extend_from_slice(input);
        for l in 0..nl {
            let (wo, bo) = self.layer_offsets(l);
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            let (prev, rest) = trace.acts.split_at_mut(l + 1);
            let x = &prev[l];
            let pre = &mut trace.pre[l];
            pre.clear();
            for o in 0..dout {
                let row = &self.params[wo + o * din..wo + (o + 1) * din];
                let mut acc = self.params[bo + o];
                for (w, v) in row.iter().zip(x.iter()) {
                    acc += w * v;
                }
                pre.push(acc);
            }
            let out = &mut rest[0];
            out.clear();
            if l + 1 < nl {
                out.extend(pre.iter().map(|&v| softplus(v, self.sharpness)));
            } else {
                out.extend_from_slice(pre);
            }
        }
        trace.acts[nl][0]
    }

    /// Accumulates parameter gradients into `grad` and writes the input
    /// gradient into `grad_input`, for upstream `d_out`.
    pub fn backward(&self, trace: &MlpTrace, d_out: f64, grad: &mut [f64], grad_input: &mut Vec<f64>) {
        let nl = self.dims.len() - 1;
        let mut g_cur: Vec<f64> = vec![d_out];
        for l in (0..nl).rev() {
            let (wo, bo) = self.layer_offsets(l);
            let (din, dout) = (self.dims[l], self.dims[l + 1]);
            if l + 1 < nl {
                for (g, &p) in g_cur.iter_mut().zip(&trace.pre[l]) {
                    *g *= softplus_grad(p, self.sharpness);
                }
            }
            let x = &trace.acts[l];
            let mut g_prev = vec![0.0; din];
            for o in 0..dout {
                let go = g_cur[o];
                if go == 0.0 {
                    continue;
                }
                grad[bo + o] += go;
                let row = wo + o * din;
                for i in 0..din {
                    grad[row + i] += go * x[i];
                    g_prev[i] += go * self.params[row + i];
                }
            }
            g_cur = g_prev;
        }
        *grad_input = g_cur;
    }
}
