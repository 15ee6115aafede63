//! The two feedforward networks of a transformer++ block: a GELU MLP with
//! hidden width `4d`, and a SwiGLU network `(swish(xW) ⊗ xV)·O + b`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::linear::Linear;
use crate::params::{Parameters, TensorMut, TensorRef};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn swish_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// SwiGLU hidden width: `8d/3` rounded up to a multiple of 8.
pub fn swiglu_hidden(d: usize) -> usize {
    (8 * d).div_ceil(3).div_ceil(8) * 8
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpFfn {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl MlpFfn {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, std: f64) -> Self {
        Self {
            fc1: Linear::init(rng, d, 4 * d, true, std),
            fc2: Linear::init(rng, 4 * d, d, true, std),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let act = pre.mapv(gelu);
        let y = self.fc2.forward(act.view());
        (
            y,
            MlpCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward(&self, c: &MlpCache, dy: ArrayView2<f64>, grad: &mut MlpFfn) -> Array2<f64> {
        let dact = self.fc2.backward(c.act.view(), dy, &mut grad.fc2);
        let dpre = dact * c.pre.mapv(gelu_grad);
        self.fc1.backward(c.x.view(), dpre.view(), &mut grad.fc1)
    }
}

impl Parameters for MlpFfn {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.fc1.collect(&crate::params::join(prefix, "fc1"), out);
        self.fc2.collect(&crate::params::join(prefix, "fc2"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.fc1.collect_mut(&crate::params::join(prefix, "fc1"), out);
        self.fc2.collect_mut(&crate::params::join(prefix, "fc2"), out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwiGlu {
    /// Gate projection, no bias.
    pub w: Linear,
    /// Value projection, no bias.
    pub v: Linear,
    /// Output projection with bias.
    pub o: Linear,
}

#[derive(Debug, Clone)]
pub struct SwiGluCache {
    x: Array2<f64>,
    gate: Array2<f64>,
    value: Array2<f64>,
    product: Array2<f64>,
}

impl SwiGlu {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, std: f64) -> Self {
        let h = swiglu_hidden(d);
        Self {
            w: Linear::init(rng, d, h, false, std),
            v: Linear::init(rng, d, h, false, std),
            o: Linear::init(rng, h, d, true, std),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w.d_out()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, SwiGluCache) {
        let gate = self.w.forward(x);
        let value = self.v.forward(x);
        let product = gate.mapv(swish) * &value;
        let y = self.o.forward(product.view());
        (
            y,
            SwiGluCache {
                x: x.to_owned(),
                gate,
                value,
                product,
            },
        )
    }

    pub fn backward(&self, c: &SwiGluCache, dy: ArrayView2<f64>, grad: &mut SwiGlu) -> Array2<f64> {
        let dprod = self.o.backward(c.product.view(), dy, &mut grad.o);
        let dvalue = &dprod * &c.gate.mapv(swish);
        let dgate = dprod * &c.value * c.gate.mapv(swish_grad);
        let dx_gate = self.w.backward(c.x.view(), dgate.view(), &mut grad.w);
        let dx_value = self.v.backward(c.x.view(), dvalue.view(), &mut grad.v);
        dx_gate + dx_value
    }
}

impl Parameters for SwiGlu {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.w.collect(&crate::params::join(prefix, "w"), out);
        self.v.collect(&crate::params::join(prefix, "v"), out);
        self.o.collect(&crate::params::join(prefix, "o"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.w.collect_mut(&crate::params::join(prefix, "w"), out);
        self.v.collect_mut(&crate::params::join(prefix, "v"), out);
        self.o.collect_mut(&crate::params::join(prefix, "o"), out);
    }
}

pub fn mlp_ffn(x: ArrayView2<f64>, params: &MlpFfn) -> Array2<f64> {
    params.forward(x).0
}

pub fn swiglu_ffn(x: ArrayView2<f64>, params: &SwiGlu) -> Array2<f64> {
    params.forward(x).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};

    #[test]
    fn activation_values() {
        assert_eq!(swish(0.0), 0.0);
        // 1 / (1 + e^-1)
        assert!((swish(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(swish(-40.0).abs() < 1e-15);
        assert_eq!(swish_grad(0.0), 0.5);
        assert_eq!(gelu(0.0), 0.0);
        // 0.5 * (1 + erf(1/sqrt 2)) = Phi(1)
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-15);
    }

    #[test]
    fn activation_grads_match_central_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (swish(x + h) - swish(x - h)) / (2.0 * h);
            assert!((fd - swish_grad(x)).abs() < 1e-8);
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn hidden_widths() {
        assert_eq!(swiglu_hidden(192), 512);
        assert_eq!(swiglu_hidden(768), 2048);
        assert_eq!(swiglu_hidden(1024), 2736);
        assert_eq!(swiglu_hidden(384), 1024);
        assert_eq!(swiglu_hidden(8), 24);
    }

    fn scalar_swiglu(w: f64, v: f64, o: f64, b: f64) -> SwiGlu {
        SwiGlu {
            w: Linear {
                weight: array![[w]],
                bias: None,
            },
            v: Linear {
                weight: array![[v]],
                bias: None,
            },
            o: Linear {
                weight: array![[o]],
                bias: Some(array![b]),
            },
        }
    }

    #[test]
    fn swiglu_scalar_case() {
        let y = swiglu_ffn(array![[1.0]].view(), &scalar_swiglu(1.0, 1.0, 1.0, 0.0));
        assert!((y[(0, 0)] - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn swiglu_zero_input_and_zero_gate_give_bias() {
        let mut rng = rand::thread_rng();
        let mut p = SwiGlu::init(&mut rng, 4, 0.5);
        p.o.bias = Some(array![1.0, 2.0, 3.0, 4.0]);
        let y = swiglu_ffn(Array2::zeros((2, 4)).view(), &p);
        assert!(y.rows().into_iter().all(|r| r == array![1.0, 2.0, 3.0, 4.0]));
        p.v.weight.fill(0.0);
        let x = Array2::from_elem((3, 4), 0.9);
        let y = swiglu_ffn(x.view(), &p);
        assert!(y.rows().into_iter().all(|r| r == array![1.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn mlp_zero_weights_broadcast_bias() {
        let mut p = MlpFfn {
            fc1: Linear::zeros(3, 12, true),
            fc2: Linear::zeros(12, 3, true),
        };
        p.fc2.bias = Some(Array1::from_vec(vec![0.5, -0.5, 2.0]));
        let y = mlp_ffn(Array2::from_elem((2, 3), 4.0).view(), &p);
        assert!(y.rows().into_iter().all(|r| r.to_vec() == vec![0.5, -0.5, 2.0]));
    }
}
