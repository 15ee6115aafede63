use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::params::{push_mut, push_ref, Parameters, Role, TensorMut, TensorRef};

pub const INIT_STD: f64 = 0.02;

/// Normal(0, std) truncated to ±2 std, rounded onto the f32 grid so that
/// parameters survive an f32 checkpoint unchanged.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break (z * std) as f32 as f64;
            }
        })
        .collect()
}

pub fn normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32 as f64
        })
        .collect()
}

/// `y = x · weight + bias`, weight stored `[in × out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize, bias: bool, std: f64) -> Self {
        let weight =
            Array2::from_shape_vec((d_in, d_out), trunc_normal(rng, d_in * d_out, std)).expect("shape matches length");
        Self {
            weight,
            bias: bias.then(|| Array1::zeros(d_out)),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: bias.then(|| Array1::zeros(d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let y = x.dot(&self.weight);
        match &self.bias {
            Some(b) => y + b,
            None => y,
        }
    }

    /// Accumulates weight/bias gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        if let Some(gb) = grad.bias.as_mut() {
            *gb += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight.t())
    }
}

impl Parameters for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        push_ref!(out, prefix, "weight", Role::Matrix, self.weight);
        if let Some(b) = &self.bias {
            push_ref!(out, prefix, "bias", Role::Bias, b);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        push_mut!(out, prefix, "weight", Role::Matrix, self.weight);
        if let Some(b) = self.bias.as_mut() {
            push_mut!(out, prefix, "bias", Role::Bias, b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn truncation_bounds_and_f32_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = trunc_normal(&mut rng, 10_000, 0.02);
        assert!(v.iter().all(|x| x.abs() <= 0.04 + 1e-9));
        assert!(v.iter().all(|&x| x as f32 as f64 == x));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        // truncating at 2 sigma shrinks the std to ~0.88 sigma
        assert!((std / 0.02 - 0.88).abs() < 0.03, "std {std}");
    }

    #[test]
    fn backward_matches_definition() {
        let lin = Linear {
            weight: Array2::from_shape_vec((2, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            bias: Some(Array1::from_vec(vec![0.5, 0.0, -0.5])),
        };
        let x = Array2::from_shape_vec((1, 2), vec![1.0, -1.0]).unwrap();
        assert_eq!(lin.forward(x.view()).row(0).to_vec(), vec![-2.5, -3.0, -3.5]);
        let dy = Array2::from_shape_vec((1, 3), vec![1.0, 0.0, 2.0]).unwrap();
        let mut g = Linear::zeros(2, 3, true);
        let dx = lin.backward(x.view(), dy.view(), &mut g);
        assert_eq!(dx.row(0).to_vec(), vec![7.0, 16.0]);
        assert_eq!(g.bias.unwrap().to_vec(), vec![1.0, 0.0, 2.0]);
        assert_eq!(g.weight.row(1).to_vec(), vec![-1.0, 0.0, -2.0]);
    }
}
