//! Macaron transformer++ block:
//!
//! ```text
//! a = x + ½·MLP(LN1(x))
//! b = a + MHA(LN2(a))
//! y = LN_out(b + ½·SwiGLU(LN3(b)))
//! ```
//!
//! `LN3` is optional; without it the SwiGLU branch reads `b` directly and the
//! block has exactly three layer norms.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::attention::{Attention, AttentionCache, Rope};
use super::ffn::{MlpCache, MlpFfn, SwiGlu, SwiGluCache};
use super::norm::{LayerNorm, LayerNormCache};
use super::rope::RopeTable;
use crate::params::{join, Parameters, TensorMut, TensorRef};

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNorm,
    pub mlp: MlpFfn,
    pub ln2: LayerNorm,
    pub attn: Attention,
    pub ln3: Option<LayerNorm>,
    pub swiglu: SwiGlu,
    pub ln_out: LayerNorm,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LayerNormCache,
    mlp: MlpCache,
    ln2: LayerNormCache,
    attn: AttentionCache,
    ln3: Option<LayerNormCache>,
    swiglu: SwiGluCache,
    ln_out: LayerNormCache,
}

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize, heads: usize, swiglu_pre_ln: bool, std: f64) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            mlp: MlpFfn::init(rng, d, std),
            ln2: LayerNorm::new(d),
            attn: Attention::init(rng, d, heads, std),
            ln3: swiglu_pre_ln.then(|| LayerNorm::new(d)),
            swiglu: SwiGlu::init(rng, d, std),
            ln_out: LayerNorm::new(d),
        }
    }

    /// All-zero linear layers, identity norms. Used for layouts and gradients.
    pub fn zeros(d: usize, heads: usize, swiglu_pre_ln: bool) -> Self {
        let h = super::ffn::swiglu_hidden(d);
        Self {
            ln1: LayerNorm::new(d),
            mlp: MlpFfn {
                fc1: super::Linear::zeros(d, 4 * d, true),
                fc2: super::Linear::zeros(4 * d, d, true),
            },
            ln2: LayerNorm::new(d),
            attn: Attention {
                q: super::Linear::zeros(d, d, true),
                k: super::Linear::zeros(d, d, true),
                v: super::Linear::zeros(d, d, true),
                out: super::Linear::zeros(d, d, true),
                heads,
            },
            ln3: swiglu_pre_ln.then(|| LayerNorm::new(d)),
            swiglu: SwiGlu {
                w: super::Linear::zeros(d, h, false),
                v: super::Linear::zeros(d, h, false),
                o: super::Linear::zeros(h, d, true),
            },
            ln_out: LayerNorm::new(d),
        }
    }

    pub fn width(&self) -> usize {
        self.ln1.scale.len()
    }

    pub fn heads(&self) -> usize {
        self.attn.heads
    }

    pub fn forward(&self, x: ArrayView2<f64>, rope: Option<Rope<'_>>) -> (Array2<f64>, BlockCache) {
        let (n1, ln1) = self.ln1.forward(x);
        let (m, mlp) = self.mlp.forward(n1.view());
        let a = &x + &(0.5 * m);

        let (n2, ln2) = self.ln2.forward(a.view());
        let (h, attn) = self.attn.forward(n2.view(), rope);
        let b = a + h;

        let (g, swiglu, ln3) = match &self.ln3 {
            Some(ln) => {
                let (n3, c3) = ln.forward(b.view());
                let (g, sc) = self.swiglu.forward(n3.view());
                (g, sc, Some(c3))
            }
            None => {
                let (g, sc) = self.swiglu.forward(b.view());
                (g, sc, None)
            }
        };
        let c = b + 0.5 * g;
        let (y, ln_out) = self.ln_out.forward(c.view());
        (
            y,
            BlockCache {
                ln1,
                mlp,
                ln2,
                attn,
                ln3,
                swiglu,
                ln_out,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BlockCache,
        dy: ArrayView2<f64>,
        rope: Option<&RopeTable>,
        grad: &mut BlockParams,
    ) -> Array2<f64> {
        let dc = self.ln_out.backward(&cache.ln_out, dy, &mut grad.ln_out);

        let dg = 0.5 * &dc;
        let dswiglu_in = self.swiglu.backward(&cache.swiglu, dg.view(), &mut grad.swiglu);
        let mut db = dc;
        match (&self.ln3, &cache.ln3, grad.ln3.as_mut()) {
            (Some(ln), Some(c3), Some(g3)) => db += &ln.backward(c3, dswiglu_in.view(), g3),
            (None, None, None) => db += &dswiglu_in,
            _ => unreachable!("ln3 presence differs between params, cache and grads"),
        }

        let dn2 = self.attn.backward(&cache.attn, db.view(), rope, &mut grad.attn);
        let mut da = db;
        da += &self.ln2.backward(&cache.ln2, dn2.view(), &mut grad.ln2);

        let dm = 0.5 * &da;
        let dn1 = self.mlp.backward(&cache.mlp, dm.view(), &mut grad.mlp);
        let mut dx = da;
        dx += &self.ln1.backward(&cache.ln1, dn1.view(), &mut grad.ln1);
        dx
    }
}

impl Parameters for BlockParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.ln1.collect(&join(prefix, "ln1"), out);
        self.mlp.collect(&join(prefix, "mlp"), out);
        self.ln2.collect(&join(prefix, "ln2"), out);
        self.attn.collect(&join(prefix, "attn"), out);
        if let Some(ln) = &self.ln3 {
            ln.collect(&join(prefix, "ln3"), out);
        }
        self.swiglu.collect(&join(prefix, "swiglu"), out);
        self.ln_out.collect(&join(prefix, "ln_out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.ln1.collect_mut(&join(prefix, "ln1"), out);
        self.mlp.collect_mut(&join(prefix, "mlp"), out);
        self.ln2.collect_mut(&join(prefix, "ln2"), out);
        self.attn.collect_mut(&join(prefix, "attn"), out);
        if let Some(ln) = self.ln3.as_mut() {
            ln.collect_mut(&join(prefix, "ln3"), out);
        }
        self.swiglu.collect_mut(&join(prefix, "swiglu"), out);
        self.ln_out.collect_mut(&join(prefix, "ln_out"), out);
    }
}

pub fn block_forward(x: ArrayView2<f64>, params: &BlockParams, rope: Option<Rope<'_>>) -> Array2<f64> {
    params.forward(x, rope).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transformerpp::norm::layer_norm;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_block(d: usize, heads: usize, pre_ln: bool) -> BlockParams {
        let mut b = BlockParams::init(&mut ChaCha8Rng::seed_from_u64(0), d, heads, pre_ln, 0.02);
        for t in b.tensors_mut() {
            if !t.name.contains("ln") {
                t.data.fill(0.0);
            }
        }
        b
    }

    #[test]
    fn zero_sub_blocks_reduce_to_final_layer_norm() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i as f64 + 1.0) * (j as f64 - 3.5));
        for pre_ln in [true, false] {
            let blk = zero_block(8, 2, pre_ln);
            let y = block_forward(x.view(), &blk, None);
            let expect = layer_norm(x.view(), blk.ln_out.scale.view(), blk.ln_out.shift.view());
            for (a, b) in y.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (d, heads, l) in [(8, 2, 1), (16, 4, 7), (12, 3, 5)] {
            let blk = BlockParams::init(&mut rng, d, heads, true, 0.1);
            let x = Array2::from_elem((l, d), 0.3);
            assert_eq!(block_forward(x.view(), &blk, None).dim(), (l, d));
        }
    }

    #[test]
    fn parameter_names_are_unique() {
        let blk = BlockParams::init(&mut ChaCha8Rng::seed_from_u64(1), 8, 2, true, 0.02);
        let names: Vec<String> = blk.tensors().into_iter().map(|t| t.name).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(names.len(), dedup.len());
        assert!(names.contains(&"ln3.scale".to_string()));
    }
}
