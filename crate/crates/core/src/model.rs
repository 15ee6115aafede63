//! The masked autoencoder: patch embedding, cls token, transformer++ encoder
//! over visible patches, mask-token restoration, transformer++ decoder and a
//! linear reconstruction head trained with masked MSE.

use ndarray::{s, Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Spectrogram;
use crate::error::{Error, Result};
use crate::masking::{apply_mask, restore_with_mask_token, sample_mask, MaskSpec};
use crate::params::{join, push_mut, push_ref, Parameters, Role, TensorMut, TensorRef};
use crate::patching::{
    embed_patches, patchify, sinusoidal_2d, PatchConfig, PatchTargets, PositionalMode, TokenSequence,
};
use crate::transformerpp::linear::{normal, INIT_STD};
use crate::transformerpp::{BlockCache, BlockParams, Linear, Rope, RopeTable, ROPE_BASE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub d_dec: usize,
    pub dec_layers: usize,
    pub dec_heads: usize,
    pub patch_t: usize,
    pub patch_f: usize,
    pub input_t: usize,
    pub input_f: usize,
    pub mask_ratio: f64,
    pub rope_encoder: bool,
    pub rope_decoder: bool,
    /// Pre-LN on the SwiGLU branch (four norms per block). When false the
    /// branch reads the residual stream directly.
    pub swiglu_pre_ln: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Base,
    Large,
}

impl Preset {
    /// Encoder parameter counts reported for the three published sizes.
    pub fn reference_encoder_params(self) -> f64 {
        match self {
            Preset::Tiny => 8.9e6,
            Preset::Base => 141.9e6,
            Preset::Large => 504.0e6,
        }
    }

    pub fn all() -> [Preset; 3] {
        [Preset::Tiny, Preset::Base, Preset::Large]
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tiny" => Ok(Preset::Tiny),
            "base" => Ok(Preset::Base),
            "large" => Ok(Preset::Large),
            other => Err(Error::Config(format!("unknown preset `{other}` (tiny|base|large)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Encoder,
    Full,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        let (d_model, enc_layers, d_dec) = match p {
            Preset::Tiny => (192, 12, 384),
            Preset::Base => (768, 12, 384),
            Preset::Large => (1024, 24, 512),
        };
        Self {
            d_model,
            enc_layers,
            enc_heads: d_model / 64,
            d_dec,
            dec_layers: 4,
            dec_heads: d_dec / 64,
            patch_t: 4,
            patch_f: 16,
            input_t: 200,
            input_f: 80,
            mask_ratio: 0.8,
            rope_encoder: false,
            rope_decoder: false,
            swiglu_pre_ln: true,
        }
    }

    pub fn tiny() -> Self {
        Self::preset(Preset::Tiny)
    }

    pub fn base() -> Self {
        Self::preset(Preset::Base)
    }

    pub fn large() -> Self {
        Self::preset(Preset::Large)
    }

    /// Changes the decoder width, keeping 64-wide decoder heads.
    pub fn with_decoder_width(mut self, d_dec: usize) -> Self {
        self.d_dec = d_dec;
        self.dec_heads = (d_dec / 64).max(1);
        self
    }

    pub fn patch_config(&self) -> Result<PatchConfig> {
        PatchConfig::new((self.input_t, self.input_f), self.patch_t, self.patch_f)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.patch_config()?;
        let check_width = |name: &str, d: usize, heads: usize, rope: bool, sinusoid: bool| -> Result<()> {
            if d == 0 || heads == 0 || d % heads != 0 {
                return Err(Error::Config(format!(
                    "{name}: width {d} not divisible by {heads} heads"
                )));
            }
            if rope && (d / heads) % 2 != 0 {
                return Err(Error::Config(format!(
                    "{name}: rotary embeddings need an even head width"
                )));
            }
            if sinusoid && d % 4 != 0 {
                return Err(Error::Config(format!(
                    "{name}: sinusoidal positions need width divisible by 4, got {d}"
                )));
            }
            Ok(())
        };
        check_width(
            "encoder",
            self.d_model,
            self.enc_heads,
            self.rope_encoder,
            !self.rope_encoder,
        )?;
        check_width(
            "decoder",
            self.d_dec,
            self.dec_heads,
            self.rope_decoder,
            !self.rope_decoder,
        )?;
        if self.enc_layers == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::Config(format!("mask ratio {} outside (0, 1)", self.mask_ratio)));
        }
        let keep = crate::masking::visible_count(grid.n_patches(), self.mask_ratio);
        if keep == 0 || keep == grid.n_patches() {
            return Err(Error::Config(format!(
                "mask ratio {} leaves {keep} of {} patches visible",
                self.mask_ratio,
                grid.n_patches()
            )));
        }
        Ok(())
    }
}

fn block_param_count(d: usize, pre_ln: bool) -> usize {
    let h = crate::transformerpp::swiglu_hidden(d);
    let norms = if pre_ln { 4 } else { 3 } * 2 * d;
    let mlp = 8 * d * d + 5 * d;
    let attn = 4 * (d * d + d);
    let swiglu = 2 * d * h + h * d + d;
    norms + mlp + attn + swiglu
}

/// Closed-form trainable parameter count.
pub fn param_count(cfg: &ModelConfig, scope: Scope) -> usize {
    let patch_dim = cfg.patch_t * cfg.patch_f;
    let (d, dd) = (cfg.d_model, cfg.d_dec);
    let encoder = patch_dim * d + d + d + cfg.enc_layers * block_param_count(d, cfg.swiglu_pre_ln);
    match scope {
        Scope::Encoder => encoder,
        Scope::Full => {
            encoder
                + d * dd
                + dd
                + dd
                + cfg.dec_layers * block_param_count(dd, cfg.swiglu_pre_ln)
                + dd * patch_dim
                + patch_dim
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub patch_embed: Linear,
    pub cls_token: Array1<f64>,
    pub enc_blocks: Vec<BlockParams>,
    pub enc_to_dec: Linear,
    pub mask_token: Array1<f64>,
    pub dec_blocks: Vec<BlockParams>,
    pub dec_out: Linear,
}

impl Parameters for ModelParams {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<TensorRef<'a>>) {
        self.patch_embed.collect(&join(prefix, "patch_embed"), out);
        push_ref!(out, prefix, "cls_token", Role::Token, self.cls_token);
        for (i, b) in self.enc_blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("encoder.{i}")), out);
        }
        self.enc_to_dec.collect(&join(prefix, "enc_to_dec"), out);
        push_ref!(out, prefix, "mask_token", Role::Token, self.mask_token);
        for (i, b) in self.dec_blocks.iter().enumerate() {
            b.collect(&join(prefix, &format!("decoder.{i}")), out);
        }
        self.dec_out.collect(&join(prefix, "dec_out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a>>) {
        self.patch_embed.collect_mut(&join(prefix, "patch_embed"), out);
        push_mut!(out, prefix, "cls_token", Role::Token, self.cls_token);
        for (i, b) in self.enc_blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("encoder.{i}")), out);
        }
        self.enc_to_dec.collect_mut(&join(prefix, "enc_to_dec"), out);
        push_mut!(out, prefix, "mask_token", Role::Token, self.mask_token);
        for (i, b) in self.dec_blocks.iter_mut().enumerate() {
            b.collect_mut(&join(prefix, &format!("decoder.{i}")), out);
        }
        self.dec_out.collect_mut(&join(prefix, "dec_out"), out);
    }
}

impl ModelParams {
    /// Zero linear layers and tokens, identity norms; the shape template for
    /// loading checkpoints.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let patch_dim = cfg.patch_t * cfg.patch_f;
        Self {
            patch_embed: Linear::zeros(patch_dim, cfg.d_model, true),
            cls_token: Array1::zeros(cfg.d_model),
            enc_blocks: (0..cfg.enc_layers)
                .map(|_| BlockParams::zeros(cfg.d_model, cfg.enc_heads.max(1), cfg.swiglu_pre_ln))
                .collect(),
            enc_to_dec: Linear::zeros(cfg.d_model, cfg.d_dec, true),
            mask_token: Array1::zeros(cfg.d_dec),
            dec_blocks: (0..cfg.dec_layers)
                .map(|_| BlockParams::zeros(cfg.d_dec, cfg.dec_heads.max(1), cfg.swiglu_pre_ln))
                .collect(),
            dec_out: Linear::zeros(cfg.d_dec, patch_dim, true),
        }
    }
}

/// `(name, shape, role)` for every trainable tensor of `cfg`, in checkpoint
/// order, without allocating the whole model.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Role)> {
    let patch_dim = cfg.patch_t * cfg.patch_f;
    let mut refs = Vec::new();
    let pe = Linear::zeros(patch_dim, cfg.d_model, true);
    let cls = Array1::<f64>::zeros(cfg.d_model);
    let enc = BlockParams::zeros(cfg.d_model, cfg.enc_heads.max(1), cfg.swiglu_pre_ln);
    let e2d = Linear::zeros(cfg.d_model, cfg.d_dec, true);
    let mask = Array1::<f64>::zeros(cfg.d_dec);
    let dec = BlockParams::zeros(cfg.d_dec, cfg.dec_heads.max(1), cfg.swiglu_pre_ln);
    let head = Linear::zeros(cfg.d_dec, patch_dim, true);

    pe.collect("patch_embed", &mut refs);
    push_ref!(refs, "", "cls_token", Role::Token, cls);
    for i in 0..cfg.enc_layers {
        enc.collect(&format!("encoder.{i}"), &mut refs);
    }
    e2d.collect("enc_to_dec", &mut refs);
    push_ref!(refs, "", "mask_token", Role::Token, mask);
    for i in 0..cfg.dec_layers {
        dec.collect(&format!("decoder.{i}"), &mut refs);
    }
    head.collect("dec_out", &mut refs);
    refs.into_iter().map(|t| (t.name, t.shape, t.role)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionOutput {
    /// `[N × patch_dim]`, cls slot already dropped.
    pub y: Array2<f64>,
    pub loss: f64,
    pub spec: MaskSpec,
}

/// Architecture plus the fixed (non-trainable) tables derived from it.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    grid: PatchConfig,
    dec_sincos: Option<Array2<f64>>,
    enc_rope: Option<RopeTable>,
    dec_rope: Option<RopeTable>,
}

/// Activations kept for the backward pass of one sample.
struct ForwardTrace {
    targets: PatchTargets,
    spec: MaskSpec,
    enc_positions: Vec<usize>,
    enc_caches: Vec<BlockCache>,
    enc_out: Array2<f64>,
    dec_in: Array2<f64>,
    dec_caches: Vec<BlockCache>,
    dec_out_in: Array2<f64>,
    y: Array2<f64>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = cfg.patch_config()?;
        let n = grid.n_patches();
        let dec_sincos = (!cfg.rope_decoder)
            .then(|| sinusoidal_2d(grid.grid_t, grid.grid_f, cfg.d_dec))
            .transpose()?;
        let enc_rope = cfg
            .rope_encoder
            .then(|| RopeTable::new(n + 1, cfg.d_model / cfg.enc_heads, ROPE_BASE))
            .transpose()?;
        let dec_rope = cfg
            .rope_decoder
            .then(|| RopeTable::new(n + 1, cfg.d_dec / cfg.dec_heads, ROPE_BASE))
            .transpose()?;
        Ok(Self {
            cfg,
            grid,
            dec_sincos,
            enc_rope,
            dec_rope,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &PatchConfig {
        &self.grid
    }

    /// Linear weights ~ truncated normal(0.02), biases 0, norms (1, 0),
    /// cls/mask tokens ~ normal(0.02). Deterministic for a given rng state.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        self.init_params_with_std(rng, INIT_STD)
    }

    pub fn init_params_with_std<R: Rng + ?Sized>(&self, rng: &mut R, std: f64) -> ModelParams {
        let c = &self.cfg;
        let pd = self.grid.patch_dim();
        let patch_embed = Linear::init(rng, pd, c.d_model, true, std);
        let cls_token = Array1::from_vec(normal(rng, c.d_model, std));
        let enc_blocks = (0..c.enc_layers)
            .map(|_| BlockParams::init(rng, c.d_model, c.enc_heads, c.swiglu_pre_ln, std))
            .collect();
        let enc_to_dec = Linear::init(rng, c.d_model, c.d_dec, true, std);
        let mask_token = Array1::from_vec(normal(rng, c.d_dec, std));
        let dec_blocks = (0..c.dec_layers)
            .map(|_| BlockParams::init(rng, c.d_dec, c.dec_heads, c.swiglu_pre_ln, std))
            .collect();
        let dec_out = Linear::init(rng, c.d_dec, pd, true, std);
        ModelParams {
            patch_embed,
            cls_token,
            enc_blocks,
            enc_to_dec,
            mask_token,
            dec_blocks,
            dec_out,
        }
    }

    fn positional_mode(&self) -> PositionalMode {
        if self.cfg.rope_encoder {
            PositionalMode::None
        } else {
            PositionalMode::Sinusoidal2D
        }
    }

    /// Patch embedding (+ fixed positions) with cls prefixed: `[N + 1 × d_model]`.
    pub fn embed(&self, params: &ModelParams, targets: &PatchTargets) -> Result<TokenSequence> {
        let seq = embed_patches(
            targets,
            &self.grid,
            params.patch_embed.weight.view(),
            params
                .patch_embed
                .bias
                .as_ref()
                .expect("patch embedding has a bias")
                .view(),
            self.positional_mode(),
        )?;
        seq.prefix_cls(params.cls_token.view())
    }

    fn run_encoder(
        &self,
        params: &ModelParams,
        visible: &TokenSequence,
        keep: bool,
    ) -> (Array2<f64>, Vec<usize>, Vec<BlockCache>) {
        let positions = visible.flat_positions();
        let rope = self.enc_rope.as_ref().map(|table| Rope {
            table,
            positions: &positions,
        });
        let mut x = visible.tokens.clone();
        let mut caches = Vec::new();
        for blk in &params.enc_blocks {
            let (y, c) = blk.forward(x.view(), rope);
            if keep {
                caches.push(c);
            }
            x = y;
        }
        (x, positions, caches)
    }

    /// Runs the encoder stack over `visible` (cls at slot 0).
    pub fn encode(&self, params: &ModelParams, visible: &TokenSequence) -> Result<TokenSequence> {
        if !visible.has_cls() {
            return Err(Error::Shape("encoder input must start with cls".into()));
        }
        if visible.tokens.ncols() != self.cfg.d_model {
            return Err(Error::Shape(format!(
                "encoder input width {} vs d_model {}",
                visible.tokens.ncols(),
                self.cfg.d_model
            )));
        }
        let (z, _, _) = self.run_encoder(params, visible, false);
        TokenSequence::new(z, visible.positions.clone())
    }

    /// Projection, mask-token restoration and decoder input positions.
    fn decoder_input(&self, params: &ModelParams, z_enc: &TokenSequence, spec: &MaskSpec) -> Result<Array2<f64>> {
        let projected = params.enc_to_dec.forward(z_enc.tokens.view());
        let proj_seq = TokenSequence::new(projected, z_enc.positions.clone())?;
        let mut full = restore_with_mask_token(&proj_seq, spec, params.mask_token.view(), &self.grid)?.tokens;
        if let Some(table) = &self.dec_sincos {
            let mut patches = full.slice_mut(s![1.., ..]);
            patches += table;
        }
        Ok(full)
    }

    fn run_decoder(&self, params: &ModelParams, x: Array2<f64>, keep: bool) -> (Array2<f64>, Vec<BlockCache>) {
        let positions: Vec<usize> = (0..x.nrows()).collect();
        let rope = self.dec_rope.as_ref().map(|table| Rope {
            table,
            positions: &positions,
        });
        let mut x = x;
        let mut caches = Vec::new();
        for blk in &params.dec_blocks {
            let (y, c) = blk.forward(x.view(), rope);
            if keep {
                caches.push(c);
            }
            x = y;
        }
        (x, caches)
    }

    /// Decoder pass producing reconstructions `[N × patch_dim]` (cls dropped).
    pub fn decode(&self, params: &ModelParams, z_enc: &TokenSequence, spec: &MaskSpec) -> Result<Array2<f64>> {
        let x = self.decoder_input(params, z_enc, spec)?;
        let (h, _) = self.run_decoder(params, x, false);
        let out = params.dec_out.forward(h.view());
        Ok(out.slice(s![1.., ..]).to_owned())
    }

    fn trace(&self, params: &ModelParams, s: &Spectrogram, spec: MaskSpec) -> Result<ForwardTrace> {
        let targets = patchify(s, &self.grid)?;
        if spec.n_patches != self.grid.n_patches() {
            return Err(Error::Mask(format!(
                "mask covers {} patches, model has {}",
                spec.n_patches,
                self.grid.n_patches()
            )));
        }
        if spec.masked_idx.is_empty() {
            return Err(Error::Mask("masked set is empty".into()));
        }
        let tokens = self.embed(params, &targets)?;
        let visible = apply_mask(&tokens, &spec)?;
        let (enc_out, enc_positions, enc_caches) = self.run_encoder(params, &visible, true);
        let z_enc = TokenSequence::new(enc_out.clone(), visible.positions.clone())?;
        let dec_in = self.decoder_input(params, &z_enc, &spec)?;
        let (dec_out_in, dec_caches) = self.run_decoder(params, dec_in.clone(), true);
        let y = params.dec_out.forward(dec_out_in.view()).slice(s![1.., ..]).to_owned();
        Ok(ForwardTrace {
            targets,
            spec,
            enc_positions,
            enc_caches,
            enc_out,
            dec_in,
            dec_caches,
            dec_out_in,
            y,
        })
    }

    /// Full pretraining forward pass with an explicit mask.
    pub fn forward_with_mask(
        &self,
        params: &ModelParams,
        s: &Spectrogram,
        spec: MaskSpec,
    ) -> Result<ReconstructionOutput> {
        let t = self.trace(params, s, spec)?;
        let loss = masked_mse(t.y.view(), &t.targets, &t.spec)?;
        Ok(ReconstructionOutput {
            y: t.y,
            loss,
            spec: t.spec,
        })
    }

    /// patchify → embed → cls → random mask → encode → decode → masked MSE.
    pub fn forward_pretrain<R: Rng + ?Sized>(
        &self,
        params: &ModelParams,
        s: &Spectrogram,
        rng: &mut R,
    ) -> Result<ReconstructionOutput> {
        let spec = sample_mask(self.grid.n_patches(), self.cfg.mask_ratio, rng)?;
        self.forward_with_mask(params, s, spec)
    }

    /// Loss and exact gradients for one sample under a given mask.
    pub fn loss_and_grad(
        &self,
        params: &ModelParams,
        s: &Spectrogram,
        spec: MaskSpec,
    ) -> Result<(ReconstructionOutput, ModelParams)> {
        let t = self.trace(params, s, spec)?;
        let loss = masked_mse(t.y.view(), &t.targets, &t.spec)?;
        let mut grad = params.zeros_like();

        // d loss / d y: only masked rows contribute
        let pd = self.grid.patch_dim();
        let n = self.grid.n_patches();
        let denom = (t.spec.n_masked() * pd) as f64;
        let mut dhead = Array2::zeros((n + 1, pd));
        for &m in &t.spec.masked_idx {
            let diff = &t.y.row(m) - &t.targets.values.row(m);
            dhead.row_mut(m + 1).assign(&(diff * (2.0 / denom)));
        }

        let mut dx = params
            .dec_out
            .backward(t.dec_out_in.view(), dhead.view(), &mut grad.dec_out);
        let dec_table = self.dec_rope.as_ref();
        for ((blk, cache), g) in params
            .dec_blocks
            .iter()
            .zip(&t.dec_caches)
            .zip(grad.dec_blocks.iter_mut())
            .rev()
        {
            dx = blk.backward(cache, dx.view(), dec_table, g);
        }
        let _ = &t.dec_in;

        // undo restoration: masked slots feed the shared mask token
        let mut dproj = Array2::zeros((t.spec.n_visible() + 1, self.cfg.d_dec));
        dproj.row_mut(0).assign(&dx.row(0));
        for (k, &v) in t.spec.visible_idx.iter().enumerate() {
            dproj.row_mut(k + 1).assign(&dx.row(v + 1));
        }
        for &m in &t.spec.masked_idx {
            grad.mask_token += &dx.row(m + 1);
        }

        let mut dz = params
            .enc_to_dec
            .backward(t.enc_out.view(), dproj.view(), &mut grad.enc_to_dec);
        let enc_table = self.enc_rope.as_ref();
        let _ = &t.enc_positions;
        for ((blk, cache), g) in params
            .enc_blocks
            .iter()
            .zip(&t.enc_caches)
            .zip(grad.enc_blocks.iter_mut())
            .rev()
        {
            dz = blk.backward(cache, dz.view(), enc_table, g);
        }

        grad.cls_token += &dz.row(0);
        let mut dpatch = Array2::zeros((n, self.cfg.d_model));
        for (k, &v) in t.spec.visible_idx.iter().enumerate() {
            dpatch.row_mut(v).assign(&dz.row(k + 1));
        }
        params
            .patch_embed
            .backward(t.targets.values.view(), dpatch.view(), &mut grad.patch_embed);

        Ok((
            ReconstructionOutput {
                y: t.y,
                loss,
                spec: t.spec,
            },
            grad,
        ))
    }

    /// Encoder output for a spectrogram with every patch visible, cls included.
    pub fn encode_unmasked(&self, params: &ModelParams, s: &Spectrogram) -> Result<TokenSequence> {
        let targets = patchify(s, &self.grid)?;
        let tokens = self.embed(params, &targets)?;
        self.encode(params, &tokens)
    }
}

/// Mean squared error over masked rows only.
pub fn masked_mse(y: ArrayView2<f64>, targets: &PatchTargets, spec: &MaskSpec) -> Result<f64> {
    if y.dim() != targets.values.dim() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs targets {:?}",
            y.dim(),
            targets.values.dim()
        )));
    }
    if spec.masked_idx.is_empty() {
        return Err(Error::Mask("masked MSE needs at least one masked patch".into()));
    }
    if spec.n_patches != y.nrows() {
        return Err(Error::Mask(format!(
            "mask covers {} patches, reconstruction has {}",
            spec.n_patches,
            y.nrows()
        )));
    }
    let sum: f64 = spec
        .masked_idx
        .iter()
        .map(|&m| {
            y.row(m)
                .iter()
                .zip(targets.values.row(m))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(sum / (spec.masked_idx.len() * y.ncols()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            enc_layers: 2,
            enc_heads: 2,
            d_dec: 8,
            dec_layers: 2,
            dec_heads: 2,
            patch_t: 2,
            patch_f: 4,
            input_t: 6,
            input_f: 16,
            mask_ratio: 0.75,
            rope_encoder: false,
            rope_decoder: false,
            swiglu_pre_ln: true,
        }
    }

    fn random_spec(cfg: &ModelConfig, seed: u64) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Spectrogram::new(Array2::from_shape_fn((cfg.input_t, cfg.input_f), |_| {
            rng.gen_range(-2.0..2.0)
        }))
    }

    #[test]
    fn presets_match_published_shapes() {
        let b = ModelConfig::base();
        assert_eq!((b.d_model, b.enc_layers, b.d_dec, b.dec_layers), (768, 12, 384, 4));
        assert_eq!((b.enc_heads, b.dec_heads), (12, 6));
        let t = ModelConfig::tiny();
        assert_eq!((t.d_model, t.enc_layers, t.d_dec, t.enc_heads), (192, 12, 384, 3));
        let l = ModelConfig::large();
        assert_eq!(
            (l.d_model, l.enc_layers, l.d_dec, l.enc_heads, l.dec_heads),
            (1024, 24, 512, 16, 8)
        );
        assert!(!b.rope_encoder && !b.rope_decoder);
        for p in Preset::all() {
            ModelConfig::preset(p).validate().unwrap();
        }
    }

    #[test]
    fn layout_matches_allocation() {
        for cfg in [small_config(), ModelConfig::tiny()] {
            let model = Model::new(cfg.clone()).unwrap();
            let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(0));
            let layout = tensor_layout(&cfg);
            let actual: Vec<_> = params
                .tensors()
                .into_iter()
                .map(|t| (t.name, t.shape, t.role))
                .collect();
            assert_eq!(layout, actual);
            assert_eq!(params.num_scalars(), param_count(&cfg, Scope::Full));
        }
    }

    #[test]
    fn same_seed_same_params() {
        let model = Model::new(small_config()).unwrap();
        let a = model.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let b = model.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert!(a.enc_blocks[0].ln1.scale.iter().all(|&v| v == 1.0));
        assert!(a.enc_blocks[0].mlp.fc1.bias.as_ref().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_mse_closed_forms() {
        let targets = PatchTargets {
            values: Array2::zeros((4, 64)),
        };
        let spec = MaskSpec::from_visible(4, vec![0, 1, 3], 0.25).unwrap();
        let mut y = Array2::zeros((4, 64));
        assert_eq!(masked_mse(y.view(), &targets, &spec).unwrap(), 0.0);
        y.row_mut(2).fill(0.5);
        assert_eq!(masked_mse(y.view(), &targets, &spec).unwrap(), 0.25);
        y.row_mut(0).fill(100.0);
        assert_eq!(masked_mse(y.view(), &targets, &spec).unwrap(), 0.25);
        assert!(masked_mse(y.view(), &targets, &MaskSpec::all_visible(4)).is_err());
    }

    #[test]
    fn forward_is_reproducible_and_positive() {
        let model = Model::new(small_config()).unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let s = random_spec(model.config(), 2);
        let a = model
            .forward_pretrain(&params, &s, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        let b = model
            .forward_pretrain(&params, &s, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!(a, b);
        assert!(a.loss.is_finite() && a.loss > 0.0);
        assert_eq!(a.y.dim(), (12, 8));
    }

    #[test]
    fn grad_path_reports_same_loss() {
        let model = Model::new(small_config()).unwrap();
        let params = model.init_params(&mut ChaCha8Rng::seed_from_u64(1));
        let s = random_spec(model.config(), 2);
        let spec = sample_mask(12, 0.75, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let plain = model.forward_with_mask(&params, &s, spec.clone()).unwrap();
        let (out, _) = model.loss_and_grad(&params, &s, spec).unwrap();
        assert_eq!(plain, out);
    }
}
