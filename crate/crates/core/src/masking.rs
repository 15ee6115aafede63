//! Random patch masking for the encoder and mask-token restoration for the decoder.
//!
//! Patch indices live in `0..N`; the cls token is slot 0 of every token
//! sequence and never part of the maskable set.

use ndarray::{s, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::{patch_positions, PatchConfig, Position, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub n_patches: usize,
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub mask_ratio: f64,
}

/// `round((1 - ratio) * n)` with halves rounded up.
pub fn visible_count(n_patches: usize, mask_ratio: f64) -> usize {
    ((1.0 - mask_ratio) * n_patches as f64 + 0.5).floor() as usize
}

impl MaskSpec {
    /// Builds a spec from an explicit visible set. Any subset is accepted,
    /// including "everything visible", which makes masking an identity.
    pub fn from_visible(n_patches: usize, mut visible: Vec<usize>, mask_ratio: f64) -> Result<Self> {
        visible.sort_unstable();
        visible.dedup();
        if visible.last().is_some_and(|&v| v >= n_patches) {
            return Err(Error::Mask(format!(
                "visible index out of range for {n_patches} patches"
            )));
        }
        let mut is_visible = vec![false; n_patches];
        for &v in &visible {
            is_visible[v] = true;
        }
        let masked = (0..n_patches).filter(|&i| !is_visible[i]).collect();
        Ok(Self {
            n_patches,
            visible_idx: visible,
            masked_idx: masked,
            mask_ratio,
        })
    }

    pub fn all_visible(n_patches: usize) -> Self {
        Self {
            n_patches,
            visible_idx: (0..n_patches).collect(),
            masked_idx: Vec::new(),
            mask_ratio: 0.0,
        }
    }

    pub fn n_visible(&self) -> usize {
        self.visible_idx.len()
    }

    pub fn n_masked(&self) -> usize {
        self.masked_idx.len()
    }

    /// Per-patch flag, true when the patch is masked.
    pub fn masked_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n_patches];
        for &i in &self.masked_idx {
            flags[i] = true;
        }
        flags
    }
}

pub fn sample_mask<R: Rng + ?Sized>(n_patches: usize, mask_ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::Mask(format!("mask ratio must be in (0, 1), got {mask_ratio}")));
    }
    if n_patches < 2 {
        return Err(Error::Mask(format!("need at least 2 patches, got {n_patches}")));
    }
    let keep = visible_count(n_patches, mask_ratio);
    if keep == 0 || keep == n_patches {
        return Err(Error::Mask(format!(
            "ratio {mask_ratio} on {n_patches} patches leaves {keep} visible"
        )));
    }
    let mut perm: Vec<usize> = (0..n_patches).collect();
    perm.shuffle(rng);
    let mut visible = perm[..keep].to_vec();
    let mut masked = perm[keep..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskSpec {
        n_patches,
        visible_idx: visible,
        masked_idx: masked,
        mask_ratio,
    })
}

/// Keeps cls plus the visible patches, in increasing patch order.
pub fn apply_mask(tokens: &TokenSequence, spec: &MaskSpec) -> Result<TokenSequence> {
    if !tokens.has_cls() || tokens.len() != spec.n_patches + 1 {
        return Err(Error::Mask(format!(
            "expected cls + {} patch tokens, got {} tokens (cls present: {})",
            spec.n_patches,
            tokens.len(),
            tokens.has_cls()
        )));
    }
    let width = tokens.tokens.ncols();
    let mut out = Array2::zeros((spec.n_visible() + 1, width));
    out.row_mut(0).assign(&tokens.tokens.row(0));
    let mut positions = Vec::with_capacity(spec.n_visible() + 1);
    positions.push(Position::Cls);
    for (k, &v) in spec.visible_idx.iter().enumerate() {
        out.row_mut(k + 1).assign(&tokens.tokens.row(v + 1));
        positions.push(tokens.positions[v + 1]);
    }
    TokenSequence::new(out, positions)
}

/// Scatters encoded tokens back to their patch slots and fills every masked
/// slot with `mask_token`. Output length is `N + 1` with cls at slot 0.
pub fn restore_with_mask_token(
    z_enc: &TokenSequence,
    spec: &MaskSpec,
    mask_token: ArrayView1<f64>,
    grid: &PatchConfig,
) -> Result<TokenSequence> {
    if !z_enc.has_cls() || z_enc.len() != spec.n_visible() + 1 {
        return Err(Error::Mask(format!(
            "expected cls + {} visible tokens, got {}",
            spec.n_visible(),
            z_enc.len()
        )));
    }
    if grid.n_patches() != spec.n_patches {
        return Err(Error::Mask(format!(
            "mask covers {} patches, grid has {}",
            spec.n_patches,
            grid.n_patches()
        )));
    }
    let width = z_enc.tokens.ncols();
    if mask_token.len() != width {
        return Err(Error::Shape(format!(
            "mask token width {} vs sequence width {width}",
            mask_token.len()
        )));
    }
    let mut out = Array2::zeros((spec.n_patches + 1, width));
    out.row_mut(0).assign(&z_enc.tokens.row(0));
    for &m in &spec.masked_idx {
        out.row_mut(m + 1).assign(&mask_token);
    }
    for (k, &v) in spec.visible_idx.iter().enumerate() {
        out.row_mut(v + 1).assign(&z_enc.tokens.row(k + 1));
    }
    let mut positions = Vec::with_capacity(spec.n_patches + 1);
    positions.push(Position::Cls);
    positions.extend(patch_positions(grid));
    debug_assert_eq!(out.slice(s![1.., ..]).nrows(), spec.n_patches);
    TokenSequence::new(out, positions)
}
