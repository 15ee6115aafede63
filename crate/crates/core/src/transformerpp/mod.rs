//! Transformer++ building blocks with hand-written reverse-mode gradients.
//!
//! Every layer follows the same shape: `forward` returns the output plus a
//! cache, and `backward` consumes that cache, accumulates parameter
//! gradients into a same-typed gradient struct, and returns `dL/dx`.

pub mod attention;
pub mod block;
pub mod ffn;
pub mod linear;
pub mod norm;
pub mod rope;

pub use attention::{mha, Attention, Rope};
pub use block::{block_forward, BlockCache, BlockParams};
pub use ffn::{gelu, mlp_ffn, swiglu_ffn, swiglu_hidden, swish, MlpFfn, SwiGlu};
pub use linear::Linear;
pub use norm::{layer_norm, LayerNorm};
pub use rope::{rope_rotate, RopeTable, ROPE_BASE};

#[cfg(test)]
mod gradient_tests {
    //! Central-difference checks for each layer in isolation.

    use super::*;
    use crate::params::Parameters;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const STEP: f64 = 1e-4;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
    }

    /// Loss `Σ y ⊙ w` for a fixed random `w`, so `dL/dy = w`.
    fn check<P, F, B>(params: &P, x: &Array2<f64>, weights: &Array2<f64>, forward: F, backward: B)
    where
        P: Parameters + Clone,
        F: Fn(&P, &Array2<f64>) -> Array2<f64>,
        B: Fn(&P, &Array2<f64>, &Array2<f64>, &mut P) -> Array2<f64>,
    {
        let loss = |p: &P, x: &Array2<f64>| (forward(p, x) * weights).sum();
        let mut grad = params.zeros_like();
        let dx = backward(params, x, weights, &mut grad);

        let mut worst: f64 = 0.0;
        for idx in 0..x.len() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += STEP;
            minus.as_slice_mut().unwrap()[idx] -= STEP;
            let fd = (loss(params, &plus) - loss(params, &minus)) / (2.0 * STEP);
            let an = dx.as_slice().unwrap()[idx];
            worst = worst.max((an - fd).abs() / fd.abs().max(1e-8).max(1e-3));
        }
        let grads = grad.tensors();
        for (t, g) in params.tensors().iter().zip(&grads) {
            for idx in 0..t.data.len() {
                let mut p = params.clone();
                p.tensors_mut().into_iter().find(|m| m.name == t.name).unwrap().data[idx] += STEP;
                let up = loss(&p, x);
                let mut p = params.clone();
                p.tensors_mut().into_iter().find(|m| m.name == t.name).unwrap().data[idx] -= STEP;
                let down = loss(&p, x);
                let fd = (up - down) / (2.0 * STEP);
                let an = g.data[idx];
                worst = worst.max((an - fd).abs() / fd.abs().max(1e-8).max(1e-3));
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst:e}");
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::new(6);
        ln.scale = random(1, 6, &mut rng).row(0).to_owned();
        ln.shift = random(1, 6, &mut rng).row(0).to_owned();
        let x = random(4, 6, &mut rng);
        let w = random(4, 6, &mut rng);
        check(
            &ln,
            &x,
            &w,
            |p, x| p.forward(x.view()).0,
            |p, x, dy, g| {
                let (_, c) = p.forward(x.view());
                p.backward(&c, dy.view(), g)
            },
        );
    }

    #[test]
    fn mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = MlpFfn::init(&mut rng, 4, 0.5);
        let x = random(3, 4, &mut rng);
        let w = random(3, 4, &mut rng);
        check(
            &mlp,
            &x,
            &w,
            |p, x| p.forward(x.view()).0,
            |p, x, dy, g| {
                let (_, c) = p.forward(x.view());
                p.backward(&c, dy.view(), g)
            },
        );
    }

    #[test]
    fn swiglu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ffn = SwiGlu::init(&mut rng, 4, 0.5);
        let x = random(3, 4, &mut rng);
        let w = random(3, 4, &mut rng);
        check(
            &ffn,
            &x,
            &w,
            |p, x| p.forward(x.view()).0,
            |p, x, dy, g| {
                let (_, c) = p.forward(x.view());
                p.backward(&c, dy.view(), g)
            },
        );
    }

    #[test]
    fn attention_gradients_with_and_without_rope() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = Attention::init(&mut rng, 8, 2, 0.5);
        let x = random(5, 8, &mut rng);
        let w = random(5, 8, &mut rng);
        let table = RopeTable::new(16, 4, ROPE_BASE).unwrap();
        let pos = [0usize, 3, 4, 9, 15];
        for use_rope in [false, true] {
            let rope = use_rope.then_some(Rope {
                table: &table,
                positions: &pos,
            });
            check(
                &attn,
                &x,
                &w,
                |p, x| p.forward(x.view(), rope).0,
                |p, x, dy, g| {
                    let (_, c) = p.forward(x.view(), rope);
                    p.backward(&c, dy.view(), rope.map(|r| r.table), g)
                },
            );
        }
    }

    #[test]
    fn block_gradients_both_layouts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let table = RopeTable::new(8, 4, ROPE_BASE).unwrap();
        let pos = [0usize, 1, 2, 5, 6, 7];
        for pre_ln in [true, false] {
            let mut blk = BlockParams::init(&mut rng, 8, 2, pre_ln, 0.3);
            for t in blk.tensors_mut() {
                if t.name.contains("ln") {
                    t.data.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
                }
            }
            let x = random(6, 8, &mut rng);
            let w = random(6, 8, &mut rng);
            let rope = Some(Rope {
                table: &table,
                positions: &pos,
            });
            check(
                &blk,
                &x,
                &w,
                |p, x| p.forward(x.view(), rope).0,
                |p, x, dy, g| {
                    let (_, c) = p.forward(x.view(), rope);
                    p.backward(&c, dy.view(), Some(&table), g)
                },
            );
        }
    }
}
