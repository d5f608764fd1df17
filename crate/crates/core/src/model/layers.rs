//! Building blocks of the post-filter graph. All layers act on
//! (channels x features) frames along the frequency axis; recurrence over
//! time lives in the GRU states held by the caller.

use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Linear,
    Relu,
    Sigmoid,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Linear => v,
            Activation::Relu => v.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-v).exp()),
        }
    }
}

/// Depthwise + pointwise convolution along features, centered zero
/// padding, stride 1.
#[derive(Debug, Clone)]
pub struct SeparableConv {
    /// in_channels x kernel.
    pub depthwise: Tensor2,
    /// out_channels x in_channels.
    pub pointwise: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl SeparableConv {
    pub fn kernel(&self) -> usize {
        self.depthwise.cols
    }

    pub fn in_channels(&self) -> usize {
        self.depthwise.rows
    }

    pub fn out_channels(&self) -> usize {
        self.pointwise.rows
    }

    pub fn apply(&self, input: &Tensor2) -> Tensor2 {
        debug_assert_eq!(input.rows, self.in_channels());
        let width = input.cols;
        let k = self.kernel();
        let pad = (k - 1) / 2;
        let mut depth = Tensor2::zeros(input.rows, width);
        for c in 0..input.rows {
            for p in 0..width {
                let mut acc = 0.0;
                for j in 0..k {
                    let q = p + j;
                    if q < pad || q - pad >= width {
                        continue;
                    }
                    acc += self.depthwise.at(c, j) * input.at(c, q - pad);
                }
                *depth.at_mut(c, p) = acc;
            }
        }
        let mut out = Tensor2::zeros(self.out_channels(), width);
        for o in 0..self.out_channels() {
            for p in 0..width {
                let mut acc = self.bias[o];
                for c in 0..input.rows {
                    acc += self.pointwise.at(o, c) * depth.at(c, p);
                }
                *out.at_mut(o, p) = self.activation.apply(acc);
            }
        }
        out
    }
}

/// Full convolution along features with centered zero padding and stride.
#[derive(Debug, Clone)]
pub struct Conv1d {
    /// Flattened out_channels x in_channels x kernel.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl Conv1d {
    pub fn out_channels(&self) -> usize {
        self.bias.len()
    }

    #[inline]
    fn w(&self, o: usize, c: usize, j: usize) -> f64 {
        self.weight[(o * self.in_channels + c) * self.kernel + j]
    }

    /// Output width for an input of `width` features.
    pub fn out_width(&self, width: usize) -> usize {
        let pad = (self.kernel - 1) / 2;
        (width + 2 * pad - self.kernel) / self.stride + 1
    }

    pub fn apply(&self, input: &Tensor2) -> Tensor2 {
        debug_assert_eq!(input.rows, self.in_channels);
        let width = input.cols;
        let pad = (self.kernel - 1) / 2;
        let out_w = self.out_width(width);
        let mut out = Tensor2::zeros(self.out_channels(), out_w);
        for o in 0..self.out_channels() {
            for q in 0..out_w {
                let mut acc = self.bias[o];
                for c in 0..self.in_channels {
                    for j in 0..self.kernel {
                        let idx = q * self.stride + j;
                        if idx < pad || idx - pad >= width {
                            continue;
                        }
                        acc += self.w(o, c, j) * input.at(c, idx - pad);
                    }
                }
                *out.at_mut(o, q) = self.activation.apply(acc);
            }
        }
        out
    }
}

/// Factor-2 max pooling along features; an odd trailing feature is kept
/// as-is.
pub fn max_pool2(input: &Tensor2) -> Tensor2 {
    let out_w = input.cols.div_ceil(2);
    let mut out = Tensor2::zeros(input.rows, out_w);
    for c in 0..input.rows {
        for q in 0..out_w {
            let a = input.at(c, 2 * q);
            let b = if 2 * q + 1 < input.cols { input.at(c, 2 * q + 1) } else { a };
            *out.at_mut(c, q) = a.max(b);
        }
    }
    out
}

/// Gated recurrent unit with stacked gate matrices in [reset; update;
/// candidate] order:
///
/// ```text
/// r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone)]
pub struct Gru {
    /// 3*hidden x input.
    pub weight_ih: Tensor2,
    /// 3*hidden x hidden.
    pub weight_hh: Tensor2,
    pub bias_ih: Vec<f64>,
    pub bias_hh: Vec<f64>,
}

impl Gru {
    pub fn hidden(&self) -> usize {
        self.weight_hh.cols
    }

    pub fn input_size(&self) -> usize {
        self.weight_ih.cols
    }

    pub fn step(&self, x: &[f64], h: &mut [f64]) {
        let hid = self.hidden();
        debug_assert_eq!(x.len(), self.input_size());
        debug_assert_eq!(h.len(), hid);
        let mut gates_i = vec![0.0f64; 3 * hid];
        let mut gates_h = vec![0.0f64; 3 * hid];
        for (g, gi) in gates_i.iter_mut().enumerate() {
            let mut acc = self.bias_ih[g];
            for (i, &xi) in x.iter().enumerate() {
                acc += self.weight_ih.at(g, i) * xi;
            }
            *gi = acc;
        }
        for (g, gh) in gates_h.iter_mut().enumerate() {
            let mut acc = self.bias_hh[g];
            for (i, &hi) in h.iter().enumerate() {
                acc += self.weight_hh.at(g, i) * hi;
            }
            *gh = acc;
        }
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..hid {
            let r = sigmoid(gates_i[j] + gates_h[j]);
            let z = sigmoid(gates_i[hid + j] + gates_h[hid + j]);
            let n = (gates_i[2 * hid + j] + r * gates_h[2 * hid + j]).tanh();
            h[j] = (1.0 - z) * n + z * h[j];
        }
    }
}

/// Fully connected layer, out x in.
#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.weight.cols);
        let mut out = Vec::with_capacity(self.weight.rows);
        for o in 0..self.weight.rows {
            let mut acc = self.bias[o];
            for (i, &xi) in x.iter().enumerate() {
                acc += self.weight.at(o, i) * xi;
            }
            out.push(self.activation.apply(acc));
        }
        out
    }
}
