use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

use super::linear::Linear;
use super::rope::RopeTable;
use crate::params::{join, Parameters, TensorMut, TensorRef};

/// Rotary table plus the per-row positions it should use.
#[derive(Debug, Clone, Copy)]
pub struct Rope<'a> {
    pub table: &'a RopeTable,
    pub positions: &'a [usize],
}

/// Bidirectional multi-head self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    x: Array2<f64>,
    /// Queries and keys after rotation (if any).
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    positions: Option<Vec<usize>>,
}

fn softmax_rows(mut s: Array2<f64>) -> Array2<f64> {
    for mut row in s.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    s
}

impl Attention {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, heads: usize, std: f64) -> Self {
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        Self {
            q: Linear::init(rng, d, d, true, std),
            k: Linear::init(rng, d, d, true, std),
            v: Linear::init(rng, d, d, true, std),
            out: Linear::init(rng, d, d, true, std),
            heads,
        }
    }

    pub fn d_head(&self) -> usize {
        self.q.d_out() / self.heads
    }

    fn project(&self, x: ArrayView2<f64>, rope: Option<Rope<'_>>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let mut q = self.q.forward(x);
        let mut k = self.k.forward(x);
        let v = self.v.forward(x);
        if let Some(r) = rope {
            q = r.table.rotate(q.view(), self.heads, r.positions);
            k = r.table.rotate(k.view(), self.heads, r.positions);
        }
        (q, k, v)
    }

    fn head_probs(&self, q: &Array2<f64>, k: &Array2<f64>, h: usize) -> Array2<f64> {
        let dh = self.d_head();
        let cols = s![.., h * dh..(h + 1) * dh];
        let scale = 1.0 / (dh as f64).sqrt();
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(scores)
    }

    /// Attention weights for every head, `[L × L]` each.
    pub fn probabilities(&self, x: ArrayView2<f64>, rope: Option<Rope<'_>>) -> Vec<Array2<f64>> {
        let (q, k, _) = self.project(x, rope);
        (0..self.heads).map(|h| self.head_probs(&q, &k, h)).collect()
    }

    pub fn forward(&self, x: ArrayView2<f64>, rope: Option<Rope<'_>>) -> (Array2<f64>, AttentionCache) {
        let (q, k, v) = self.project(x, rope);
        let dh = self.d_head();
        let mut context = Array2::zeros(v.raw_dim());
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = self.head_probs(&q, &k, h);
            context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let y = self.out.forward(context.view());
        let cache = AttentionCache {
            x: x.to_owned(),
            q,
            k,
            v,
            probs,
            context,
            positions: rope.map(|r| r.positions.to_vec()),
        };
        (y, cache)
    }

    pub fn backward(
        &self,
        c: &AttentionCache,
        dy: ArrayView2<f64>,
        rope: Option<&RopeTable>,
        grad: &mut Attention,
    ) -> Array2<f64> {
        let dh = self.d_head();
        let scale = 1.0 / (dh as f64).sqrt();
        let dcontext = self.out.backward(c.context.view(), dy, &mut grad.out);
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dk = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, p) in c.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dctx = dcontext.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));
            let dp = dctx.dot(&c.v.slice(cols).t());
            // softmax backward, row-wise: ds = p ⊙ (dp − Σ_j dp_j p_j)
            let inner = (&dp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = (dp - &inner) * p * scale;
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        if let (Some(table), Some(pos)) = (rope, c.positions.as_deref()) {
            dq = table.rotate_back(dq.view(), self.heads, pos);
            dk = table.rotate_back(dk.view(), self.heads, pos);
        }
        let x = c.x.view();
        let mut dx = self.q.backward(x, dq.view(), &mut grad.q);
        dx += &self.k.backward(x, dk.view(), &mut grad.k);
        dx += &self.v.backward(x, dv.view(), &mut grad.v);
        dx
    }
}

impl Parameters for Attention {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.q.collect(&join(prefix, "q"), out);
        self.k.collect(&join(prefix, "k"), out);
        self.v.collect(&join(prefix, "v"), out);
        self.out.collect(&join(prefix, "out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.q.collect_mut(&join(prefix, "q"), out);
        self.k.collect_mut(&join(prefix, "k"), out);
        self.v.collect_mut(&join(prefix, "v"), out);
        self.out.collect_mut(&join(prefix, "out"), out);
    }
}

pub fn mha(x: ArrayView2<f64>, params: &Attention, rope: Option<Rope<'_>>) -> Array2<f64> {
    params.forward(x, rope).0
}
