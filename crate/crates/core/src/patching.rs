//! Non-overlapping spectrogram patches and their linear embedding.
//!
//! Patch `i` covers time block `i / grid_f` and frequency block `i % grid_f`
//! (time-major). Inside a patch, values are flattened row-major over
//! `(time, freq)`.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchConfig {
    pub patch_t: usize,
    pub patch_f: usize,
    pub grid_t: usize,
    pub grid_f: usize,
}

impl PatchConfig {
    pub fn new(input_shape: (usize, usize), patch_t: usize, patch_f: usize) -> Result<Self> {
        let (t, f) = input_shape;
        if patch_t == 0 || patch_f == 0 {
            return Err(Error::Config("patch dims must be positive".into()));
        }
        if t % patch_t != 0 || f % patch_f != 0 || t == 0 || f == 0 {
            return Err(Error::Shape(format!(
                "input {t}x{f} is not divisible into {patch_t}x{patch_f} patches"
            )));
        }
        Ok(Self {
            patch_t,
            patch_f,
            grid_t: t / patch_t,
            grid_f: f / patch_f,
        })
    }

    pub fn n_patches(&self) -> usize {
        self.grid_t * self.grid_f
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_t * self.patch_f
    }

    pub fn input_shape(&self) -> (usize, usize) {
        (self.grid_t * self.patch_t, self.grid_f * self.patch_f)
    }

    /// Grid coordinate `(time_block, freq_block)` of patch `index`.
    pub fn coord(&self, index: usize) -> (usize, usize) {
        (index / self.grid_f, index % self.grid_f)
    }
}

/// Flattened patches, `[N × patch_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchTargets {
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Position {
    Cls,
    Patch { index: usize, time: usize, freq: usize },
}

impl Position {
    /// Flattened 1-D position used by rotary embeddings: cls is 0, patch `i` is `i + 1`.
    pub fn flat(&self) -> usize {
        match *self {
            Position::Cls => 0,
            Position::Patch { index, .. } => index + 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Array2<f64>,
    pub positions: Vec<Position>,
}

impl TokenSequence {
    pub fn new(tokens: Array2<f64>, positions: Vec<Position>) -> Result<Self> {
        if tokens.nrows() != positions.len() {
            return Err(Error::Shape(format!(
                "{} tokens but {} positions",
                tokens.nrows(),
                positions.len()
            )));
        }
        if positions.iter().skip(1).any(|p| *p == Position::Cls) {
            return Err(Error::Shape("cls may only appear at index 0".into()));
        }
        Ok(Self { tokens, positions })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn has_cls(&self) -> bool {
        self.positions.first() == Some(&Position::Cls)
    }

    pub fn flat_positions(&self) -> Vec<usize> {
        self.positions.iter().map(Position::flat).collect()
    }

    /// Prepends the cls token. Fails if the sequence already has one.
    pub fn prefix_cls(&self, cls: ArrayView1<f64>) -> Result<Self> {
        if self.has_cls() {
            return Err(Error::Shape("sequence already starts with cls".into()));
        }
        if cls.len() != self.tokens.ncols() {
            return Err(Error::Shape(format!(
                "cls width {} vs token width {}",
                cls.len(),
                self.tokens.ncols()
            )));
        }
        let mut tokens = Array2::zeros((self.len() + 1, self.tokens.ncols()));
        tokens.row_mut(0).assign(&cls);
        tokens.slice_mut(s![1.., ..]).assign(&self.tokens);
        let mut positions = Vec::with_capacity(self.len() + 1);
        positions.push(Position::Cls);
        positions.extend_from_slice(&self.positions);
        Ok(Self { tokens, positions })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionalMode {
    Sinusoidal2D,
    None,
}

pub fn patch_positions(cfg: &PatchConfig) -> Vec<Position> {
    (0..cfg.n_patches())
        .map(|index| {
            let (time, freq) = cfg.coord(index);
            Position::Patch { index, time, freq }
        })
        .collect()
}

pub fn patchify(s: &Spectrogram, cfg: &PatchConfig) -> Result<PatchTargets> {
    if s.shape() != cfg.input_shape() {
        return Err(Error::Shape(format!(
            "spectrogram {:?} does not match patch grid input {:?}",
            s.shape(),
            cfg.input_shape()
        )));
    }
    let (pt, pf) = (cfg.patch_t, cfg.patch_f);
    let mut out = Array2::zeros((cfg.n_patches(), cfg.patch_dim()));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let (bt, bf) = cfg.coord(i);
        let block = s.values.slice(s![bt * pt..(bt + 1) * pt, bf * pf..(bf + 1) * pf]);
        for (dst, src) in row.iter_mut().zip(block.iter()) {
            *dst = *src;
        }
    }
    Ok(PatchTargets { values: out })
}

pub fn unpatchify(p: &PatchTargets, cfg: &PatchConfig) -> Result<Spectrogram> {
    if p.values.dim() != (cfg.n_patches(), cfg.patch_dim()) {
        return Err(Error::Shape(format!(
            "patches {:?}, expected [{} x {}]",
            p.values.dim(),
            cfg.n_patches(),
            cfg.patch_dim()
        )));
    }
    let (pt, pf) = (cfg.patch_t, cfg.patch_f);
    let mut out = Array2::zeros(cfg.input_shape());
    for (i, row) in p.values.outer_iter().enumerate() {
        let (bt, bf) = cfg.coord(i);
        let mut block = out.slice_mut(s![bt * pt..(bt + 1) * pt, bf * pf..(bf + 1) * pf]);
        for (dst, src) in block.iter_mut().zip(row.iter()) {
            *dst = *src;
        }
    }
    Ok(Spectrogram::new(out))
}

/// Standard 1-D sinusoidal table, `[n × dim]`, with `(sin, cos)` pairs interleaved.
fn sinusoidal_1d(n: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, dim), |(p, j)| {
        let i = j / 2;
        let omega = 1.0 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        let angle = p as f64 * omega;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Fixed 2-D sinusoidal table `[grid_t * grid_f × d_model]`, rows in patch
/// order. The first half of each row encodes the time block, the second half
/// the frequency block.
pub fn sinusoidal_2d(grid_t: usize, grid_f: usize, d_model: usize) -> Result<Array2<f64>> {
    if d_model % 4 != 0 || d_model == 0 {
        return Err(Error::Config(format!(
            "2-d sinusoidal table needs d_model divisible by 4, got {d_model}"
        )));
    }
    let half = d_model / 2;
    let time = sinusoidal_1d(grid_t, half);
    let freq = sinusoidal_1d(grid_f, half);
    let mut out = Array2::zeros((grid_t * grid_f, d_model));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let (t, f) = (i / grid_f, i % grid_f);
        row.slice_mut(s![..half]).assign(&time.row(t));
        row.slice_mut(s![half..]).assign(&freq.row(f));
    }
    Ok(out)
}

/// `tokens = patches · weight + bias`, plus the 2-D sinusoidal table when requested.
pub fn embed_patches(
    p: &PatchTargets,
    cfg: &PatchConfig,
    weight: ArrayView2<f64>,
    bias: ArrayView1<f64>,
    pos: PositionalMode,
) -> Result<TokenSequence> {
    if weight.nrows() != p.values.ncols() || weight.ncols() != bias.len() {
        return Err(Error::Shape(format!(
            "patch embed weight {:?} / bias {} incompatible with patches {:?}",
            weight.dim(),
            bias.len(),
            p.values.dim()
        )));
    }
    if p.values.nrows() != cfg.n_patches() {
        return Err(Error::Shape(format!(
            "{} patches but grid has {}",
            p.values.nrows(),
            cfg.n_patches()
        )));
    }
    let mut tokens = p.values.dot(&weight) + &bias;
    if pos == PositionalMode::Sinusoidal2D {
        tokens += &sinusoidal_2d(cfg.grid_t, cfg.grid_f, weight.ncols())?;
    }
    TokenSequence::new(tokens, patch_positions(cfg))
}

/// Convenience for callers that hold owned parameters.
pub fn embed_owned(
    p: &PatchTargets,
    cfg: &PatchConfig,
    weight: &Array2<f64>,
    bias: &Array1<f64>,
    pos: PositionalMode,
) -> Result<TokenSequence> {
    embed_patches(p, cfg, weight.view(), bias.view(), pos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn reference_grid() -> PatchConfig {
        PatchConfig::new((200, 80), 4, 16).unwrap()
    }

    #[test]
    fn default_grid_is_50_by_5() {
        let cfg = reference_grid();
        assert_eq!((cfg.grid_t, cfg.grid_f), (50, 5));
        assert_eq!(cfg.n_patches(), 250);
        assert_eq!(cfg.patch_dim(), 64);
        let s = Spectrogram::new(Array2::from_elem((200, 80), 1.5));
        let p = patchify(&s, &cfg).unwrap();
        assert_eq!(p.values.dim(), (250, 64));
        assert!(p.values.iter().all(|&v| v == 1.5));
    }

    #[test]
    fn indivisible_rejected() {
        assert!(PatchConfig::new((201, 80), 4, 16).is_err());
        let cfg = reference_grid();
        let s = Spectrogram::new(Array2::zeros((100, 80)));
        assert!(patchify(&s, &cfg).is_err());
    }

    #[test]
    fn one_hot_row_lands_on_mapped_pixel() {
        let cfg = reference_grid();
        let mut p = PatchTargets {
            values: Array2::zeros((250, 64)),
        };
        // patch 17 -> time block 3, freq block 2; entry 37 -> dt 2, df 5
        p.values[(17, 37)] = 1.0;
        let s = unpatchify(&p, &cfg).unwrap();
        let (t, f) = (3 * 4 + 37 / 16, 2 * 16 + 37 % 16);
        assert_eq!(s.values[(t, f)], 1.0);
        assert_eq!(s.values.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn zero_patches_zero_spectrogram() {
        let cfg = reference_grid();
        let p = PatchTargets {
            values: Array2::zeros((250, 64)),
        };
        assert!(unpatchify(&p, &cfg).unwrap().values.iter().all(|&v| v == 0.0));
        let bad = PatchTargets {
            values: Array2::zeros((249, 64)),
        };
        assert!(unpatchify(&bad, &cfg).is_err());
    }

    #[test]
    fn sinusoidal_origin_row_alternates() {
        let t = sinusoidal_2d(50, 5, 16).unwrap();
        let row0: Vec<f64> = t.row(0).to_vec();
        let expect: Vec<f64> = (0..16).map(|j| (j % 2) as f64).collect();
        assert_eq!(row0, expect);
        assert!(t.iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(t, sinusoidal_2d(50, 5, 16).unwrap());
        assert!(sinusoidal_2d(2, 2, 6).is_err());
    }

    #[test]
    fn sinusoidal_rows_are_distinct_over_grid() {
        for d in [4, 8, 64, 192] {
            let t = sinusoidal_2d(50, 5, d).unwrap();
            for i in 0..t.nrows() {
                for j in i + 1..t.nrows() {
                    assert_ne!(t.row(i), t.row(j), "rows {i} and {j} collide for d={d}");
                }
            }
        }
    }

    #[test]
    fn zero_embedding_without_positions_is_zero() {
        let cfg = PatchConfig::new((8, 8), 4, 4).unwrap();
        let p = PatchTargets {
            values: Array2::from_elem((4, 16), 3.0),
        };
        let seq = embed_owned(
            &p,
            &cfg,
            &Array2::zeros((16, 8)),
            &Array1::zeros(8),
            PositionalMode::None,
        )
        .unwrap();
        assert!(seq.tokens.iter().all(|&v| v == 0.0));
        assert_eq!(seq.len(), 4);
        let with_cls = seq.prefix_cls(Array1::ones(8).view()).unwrap();
        assert_eq!(with_cls.len(), 5);
        assert!(with_cls.has_cls());
        assert!(with_cls.prefix_cls(Array1::ones(8).view()).is_err());
    }

    proptest! {
        #[test]
        fn patchify_round_trip(seed in any::<u64>()) {
            let cfg = PatchConfig::new((12, 8), 4, 2).unwrap();
            let vals = Array2::from_shape_fn((12, 8), |(i, j)| {
                ((seed % 1000) as f64 * 0.013 + i as f64 * 1.7 - j as f64 * 0.3).sin()
            });
            let s = Spectrogram::new(vals);
            let back = unpatchify(&patchify(&s, &cfg).unwrap(), &cfg).unwrap();
            prop_assert_eq!(back, s);
        }

        #[test]
        fn embedding_is_affine_without_positions(
            a in proptest::collection::vec(-3.0f64..3.0, 4 * 8),
            b in proptest::collection::vec(-3.0f64..3.0, 4 * 8),
        ) {
            let cfg = PatchConfig::new((4, 8), 2, 4).unwrap();
            let w = Array2::from_shape_fn((8, 4), |(i, j)| (i as f64 - j as f64) * 0.25);
            let bias = Array1::from_vec(vec![0.5, -1.0, 2.0, 0.0]);
            let pa = PatchTargets { values: Array2::from_shape_vec((4, 8), a).unwrap() };
            let pb = PatchTargets { values: Array2::from_shape_vec((4, 8), b).unwrap() };
            let sum = PatchTargets { values: &pa.values + &pb.values };
            let ea = embed_owned(&pa, &cfg, &w, &bias, PositionalMode::None).unwrap().tokens;
            let eb = embed_owned(&pb, &cfg, &w, &bias, PositionalMode::None).unwrap().tokens;
            let es = embed_owned(&sum, &cfg, &w, &bias, PositionalMode::None).unwrap().tokens;
            let rhs = ea + eb - &bias;
            for (x, y) in es.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
