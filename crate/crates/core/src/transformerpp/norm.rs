use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::params::{push_mut, push_ref, Parameters, Role, TensorMut, TensorRef};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub scale: Array1<f64>,
    pub shift: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            scale: Array1::ones(d),
            shift: Array1::zeros(d),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (normalized, inv_std) = normalize(x);
        let y = &normalized * &self.scale + &self.shift;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.scale += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.shift += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.scale;
        let d = dy.ncols() as f64;
        let mut dx = Array2::zeros(dy.raw_dim());
        Zip::from(dx.rows_mut())
            .and(dxhat.rows())
            .and(cache.normalized.rows())
            .and(&cache.inv_std)
            .for_each(|mut out, g, xh, &r| {
                let mean_g = g.sum() / d;
                let mean_gx = g.dot(&xh) / d;
                Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
                    *o = r * (gi - mean_g - xi * mean_gx);
                });
            });
        dx
    }
}

/// Row-wise zero mean / unit variance (biased variance, eps inside the root).
fn normalize(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut out = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, r) in out.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * *r);
    }
    (out, inv_std)
}

/// Plain `layer_norm(x, scale, shift)`.
pub fn layer_norm(x: ArrayView2<f64>, scale: ArrayView1<f64>, shift: ArrayView1<f64>) -> Array2<f64> {
    let (n, _) = normalize(x);
    n * &scale + &shift
}

impl Parameters for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        push_ref!(out, prefix, "scale", Role::NormScale, self.scale);
        push_ref!(out, prefix, "shift", Role::NormShift, self.shift);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        push_mut!(out, prefix, "scale", Role::NormScale, self.scale);
        push_mut!(out, prefix, "shift", Role::NormShift, self.shift);
    }
}
