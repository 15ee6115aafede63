//! Self-checks run by `ampp verify`: each returns a named pass/fail line
//! with the measured quantity.

use ndarray::Array2;
use rand::Rng;

use crate::dsp::{Spectrogram, Waveform, CLIP_SAMPLES, SAMPLE_RATE};
use crate::error::Result;
use crate::evalkit::score::{aggregate_score, ScoreTable};
use crate::masking::{apply_mask, restore_with_mask_token, sample_mask};
use crate::model::{param_count, tensor_layout, Model, ModelConfig, Preset, Scope};
use crate::patching::{patchify, unpatchify, PatchConfig};
use crate::rng::derive_rng;
use crate::trainer::gradcheck::{grad_check, small_check_config, GradCheckOptions};
use crate::trainer::optim::{lr_at, OptimConfig};
use crate::transformerpp::{Attention, Rope, RopeTable, ROPE_BASE};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub measured: String,
    pub passed: bool,
}

fn check(name: &str, passed: bool, measured: String) -> Check {
    Check {
        name: name.into(),
        measured,
        passed,
    }
}

#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub gradcheck_tolerance: f64,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            gradcheck_tolerance: 1e-4,
            seed: 0,
        }
    }
}

pub fn param_counts() -> Vec<Check> {
    Preset::all()
        .into_iter()
        .map(|p| {
            let cfg = ModelConfig::preset(p);
            let closed = param_count(&cfg, Scope::Encoder);
            let summed: usize = tensor_layout(&cfg)
                .iter()
                .filter(|(name, _, _)| {
                    name.starts_with("patch_embed") || name == "cls_token" || name.starts_with("encoder.")
                })
                .map(|(_, shape, _)| shape.iter().product::<usize>())
                .sum();
            let reference = p.reference_encoder_params();
            let rel = (closed as f64 - reference).abs() / reference;
            check(
                &format!("param count {p:?}"),
                rel < 0.015 && closed == summed,
                format!("{closed} (tensors {summed}, reference {reference:.0}, rel {rel:.4})"),
            )
        })
        .collect()
}

pub fn gradients(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (enc, dec) in [(false, false), (true, true)] {
        let r = grad_check(
            &small_check_config(enc, dec),
            &GradCheckOptions {
                tolerance: opts.gradcheck_tolerance,
                seed: opts.seed,
                ..GradCheckOptions::default()
            },
        )?;
        let worst = r.worst().map(|t| t.name.clone()).unwrap_or_default();
        out.push(check(
            &format!("gradcheck rope={}", enc && dec),
            r.passed,
            format!(
                "{} coords, max rel err {:.2e} at {worst}, tol {:.0e}",
                r.coords, r.max_rel_error, r.tolerance
            ),
        ));
    }
    Ok(out)
}

pub fn rope_properties(seed: u64) -> Result<Vec<Check>> {
    let mut rng = derive_rng(seed, &[0x0a]);
    let (heads, dh, len) = (2, 16, 12);
    let table = RopeTable::new(64, dh, ROPE_BASE)?;
    let x = Array2::from_shape_fn((len, heads * dh), |_| rng.gen_range(-1.0..1.0));
    let pos: Vec<usize> = (0..len).map(|i| 3 * i).collect();
    let y = table.rotate(x.view(), heads, &pos);
    let mut norm_err: f64 = 0.0;
    for (a, b) in x.rows().into_iter().zip(y.rows()) {
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        norm_err = norm_err.max((na - nb).abs() / na);
    }
    let zero = table.rotate(x.view(), heads, &vec![0; len]);
    let identity = zero == x;

    let attn = Attention::init(&mut rng, heads * dh, heads, 0.3);
    let shifted: Vec<usize> = pos.iter().map(|p| p + 7).collect();
    let a = attn.probabilities(
        x.view(),
        Some(Rope {
            table: &table,
            positions: &pos,
        }),
    );
    let b = attn.probabilities(
        x.view(),
        Some(Rope {
            table: &table,
            positions: &shifted,
        }),
    );
    let shift_err = a
        .iter()
        .zip(&b)
        .flat_map(|(p, q)| p.iter().zip(q.iter()).map(|(u, v)| (u - v).abs()))
        .fold(0.0, f64::max);
    Ok(vec![
        check(
            "rope norm preservation",
            norm_err < 1e-12,
            format!("max rel change {norm_err:.1e}"),
        ),
        check("rope position 0 is identity", identity, format!("exact: {identity}")),
        check(
            "rope shift invariance",
            shift_err < 1e-5,
            format!("max prob diff {shift_err:.1e}"),
        ),
    ])
}

pub fn mask_round_trip(seed: u64) -> Result<Vec<Check>> {
    let grid = PatchConfig::new((200, 80), 4, 16)?;
    let spec = sample_mask(grid.n_patches(), 0.8, &mut derive_rng(seed, &[0x0b]))?;
    let counts = (spec.n_masked(), spec.n_visible());
    // tokens carry their own slot index so placement can be read back
    let tokens = Array2::from_shape_fn((grid.n_patches(), 4), |(i, _)| i as f64);
    let seq = crate::patching::TokenSequence::new(tokens, crate::patching::patch_positions(&grid))?
        .prefix_cls(ndarray::Array1::from_elem(4, -1.0).view())?;
    let visible = apply_mask(&seq, &spec)?;
    let sentinel = ndarray::Array1::from_elem(4, -7.0);
    let restored = restore_with_mask_token(&visible, &spec, sentinel.view(), &grid)?;
    let flags = spec.masked_flags();
    let placed = restored.tokens.row(0).iter().all(|&v| v == -1.0)
        && (0..grid.n_patches()).all(|i| {
            let want = if flags[i] { -7.0 } else { i as f64 };
            restored.tokens.row(i + 1).iter().all(|&v| v == want)
        });
    Ok(vec![
        check(
            "mask counts N=250 r=0.8",
            counts == (200, 50),
            format!("{} masked / {} visible", counts.0, counts.1),
        ),
        check("mask restore placement", placed, format!("exact: {placed}")),
    ])
}

pub fn patch_round_trip(seed: u64) -> Result<Vec<Check>> {
    let grid = PatchConfig::new((200, 80), 4, 16)?;
    let mut rng = derive_rng(seed, &[0x0c]);
    let s = Spectrogram::new(Array2::from_shape_fn((200, 80), |_| rng.gen_range(-20.0..5.0)));
    let p = patchify(&s, &grid)?;
    let back = unpatchify(&p, &grid)?;
    let shape = p.values.dim();
    Ok(vec![check(
        "patchify round trip",
        back == s && shape == (250, 64),
        format!("{shape:?}, exact: {}", back == s),
    )])
}

pub fn pipeline_shapes(seed: u64) -> Result<Vec<Check>> {
    let cfg = ModelConfig {
        d_model: 64,
        enc_layers: 1,
        enc_heads: 1,
        d_dec: 64,
        dec_layers: 1,
        dec_heads: 1,
        ..ModelConfig::tiny()
    };
    let model = Model::new(cfg)?;
    let params = model.init_params(&mut derive_rng(seed, &[0x0d]));
    let mut rng = derive_rng(seed, &[0x0e]);
    let w = Waveform::new(
        (0..CLIP_SAMPLES).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        SAMPLE_RATE,
    );
    let s = crate::dsp::logmel(&w, &crate::dsp::MelConfig::default())?;
    let targets = patchify(&s, model.grid())?;
    let spec = sample_mask(model.grid().n_patches(), 0.8, &mut rng)?;
    let tokens = model.embed(&params, &targets)?;
    let visible = apply_mask(&tokens, &spec)?;
    let out = model.forward_with_mask(&params, &s, spec)?;
    let got = (s.shape(), targets.values.dim(), visible.len(), out.y.dim());
    let want = ((200, 80), (250, 64), 51, (250, 64));
    Ok(vec![check("pipeline shapes", got == want, format!("{got:?}"))])
}

pub fn schedule() -> Vec<Check> {
    let c = OptimConfig {
        peak_lr: 1e-3,
        epochs: 100,
        warmup_epochs: 10,
        steps_per_epoch: 10,
        ..OptimConfig::default()
    };
    let (w, t) = (c.warmup_steps(), c.total_steps());
    let got = [lr_at(w / 2, &c), lr_at(w, &c), lr_at(w + (t - w) / 2, &c), lr_at(t, &c)];
    let want = [0.5e-3, 1e-3, 0.5e-3, 0.0];
    let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    vec![check("schedule landmarks", err < 1e-15, format!("{got:?}"))]
}

pub fn score_example() -> Vec<Check> {
    let table = ScoreTable {
        models: vec!["A".into(), "B".into(), "C".into()],
        tasks: vec!["t1".into(), "t2".into()],
        values: vec![vec![90.0, 60.0], vec![70.0, 40.0], vec![80.0, 60.0]],
    };
    let s: Vec<f64> = aggregate_score(&table)
        .map(|v| v.into_iter().map(|(_, x)| x).collect())
        .unwrap_or_default();
    vec![check(
        "aggregate score example",
        s == vec![100.0, 0.0, 75.0],
        format!("{s:?}"),
    )]
}

/// Every check, in report order.
pub fn run_all(opts: &VerifyOptions) -> Result<Vec<Check>> {
    let mut out = param_counts();
    out.extend(gradients(opts)?);
    out.extend(rope_properties(opts.seed)?);
    out.extend(mask_round_trip(opts.seed)?);
    out.extend(patch_round_trip(opts.seed)?);
    out.extend(pipeline_shapes(opts.seed)?);
    out.extend(schedule());
    out.extend(score_example());
    Ok(out)
}

pub fn format_table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut s = String::new();
    for c in checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        s.push_str(&format!("{status}  {:<width$}  {}\n", c.name, c.measured));
    }
    s
}
