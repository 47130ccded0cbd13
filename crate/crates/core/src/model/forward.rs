//! Forward passes of the Siamese encoder and the cross-attending decoder.
//!
//! All functions record onto a [`Tape`] of any precision so the same code
//! serves training (`f32`), inference, and `f64` gradient checks.

use super::config::LN_EPS;
use super::params::Bound;
use super::posembed::sincos_2d;
use super::{ModelConfig, ModelParams};
use crate::autodiff::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::patch::{apply_mask, patchify, MaskPlan, PatchSequence};
use crate::tensor::{Scalar, Tensor};

fn linear<S: Scalar>(tape: &mut Tape<S>, w: &Bound, x: Var, name: &str) -> Result<Var> {
    tape.linear(x, w.var(&format!("{name}.w")), w.var(&format!("{name}.b")))
}

fn norm<S: Scalar>(tape: &mut Tape<S>, w: &Bound, x: Var, name: &str) -> Result<Var> {
    tape.layer_norm(x, w.var(&format!("{name}.g")), w.var(&format!("{name}.b")), LN_EPS)
}

/// `[n, heads * dh] -> [heads, n, dh]`
fn split_heads<S: Scalar>(tape: &mut Tape<S>, x: Var, heads: usize) -> Result<Var> {
    let (n, d) = (tape.shape(x)[0], tape.shape(x)[1]);
    let r = tape.reshape(x, &[n, heads, d / heads])?;
    tape.permute(r, &[1, 0, 2])
}

/// `[heads, n, dh] -> [n, heads * dh]`
fn merge_heads<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let p = tape.permute(x, &[1, 0, 2])?;
    tape.reshape(p, &[s[1], s[0] * s[2]])
}

/// Scaled dot-product attention over `[heads, n, dh]` operands.
fn attend<S: Scalar>(tape: &mut Tape<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    let dh = tape.shape(q)[2];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, S::of(1.0 / (dh as f64).sqrt()))?;
    let attn = tape.softmax(scores, 2)?;
    tape.matmul(attn, v)
}

fn self_attention<S: Scalar>(tape: &mut Tape<S>, w: &Bound, x: Var, name: &str, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let qkv = linear(tape, w, x, &format!("{name}.qkv"))?;
    let mut parts = Vec::with_capacity(3);
    for i in 0..3 {
        let s = tape.slice(qkv, 1, i * d, (i + 1) * d)?;
        parts.push(split_heads(tape, s, heads)?);
    }
    let out = attend(tape, parts[0], parts[1], parts[2])?;
    let merged = merge_heads(tape, out)?;
    linear(tape, w, merged, &format!("{name}.proj"))
}

/// Queries from `x`, keys and values from `memory`.
fn cross_attention<S: Scalar>(tape: &mut Tape<S>, w: &Bound, x: Var, memory: Var, name: &str, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let q = linear(tape, w, x, &format!("{name}.q"))?;
    let q = split_heads(tape, q, heads)?;
    let kv = linear(tape, w, memory, &format!("{name}.kv"))?;
    let k = tape.slice(kv, 1, 0, d)?;
    let k = split_heads(tape, k, heads)?;
    let v = tape.slice(kv, 1, d, 2 * d)?;
    let v = split_heads(tape, v, heads)?;
    let out = attend(tape, q, k, v)?;
    let merged = merge_heads(tape, out)?;
    linear(tape, w, merged, &format!("{name}.proj"))
}

fn mlp<S: Scalar>(tape: &mut Tape<S>, w: &Bound, x: Var, name: &str) -> Result<Var> {
    let h = linear(tape, w, x, &format!("{name}.fc1"))?;
    let h = tape.gelu(h)?;
    linear(tape, w, h, &format!("{name}.fc2"))
}

fn encoder_block<S: Scalar>(tape: &mut Tape<S>, w: &Bound, x: Var, i: usize) -> Result<Var> {
    let heads = w.config().enc_heads;
    let p = format!("enc.{i}");
    let h = norm(tape, w, x, &format!("{p}.norm1"))?;
    let h = self_attention(tape, w, h, &format!("{p}.attn"), heads)?;
    let x = tape.add(x, h)?;
    let h = norm(tape, w, x, &format!("{p}.norm2"))?;
    let h = mlp(tape, w, h, &format!("{p}.mlp"))?;
    tape.add(x, h)
}

/// Self-attention, then cross-attention to `memory`, then MLP; all pre-norm.
fn decoder_block<S: Scalar>(tape: &mut Tape<S>, w: &Bound, x: Var, memory: Var, i: usize) -> Result<Var> {
    let heads = w.config().dec_heads;
    let p = format!("dec.{i}");
    let h = norm(tape, w, x, &format!("{p}.norm1"))?;
    let h = self_attention(tape, w, h, &format!("{p}.self_attn"), heads)?;
    let x = tape.add(x, h)?;
    let h = norm(tape, w, x, &format!("{p}.norm2"))?;
    let h = cross_attention(tape, w, h, memory, &format!("{p}.cross_attn"), heads)?;
    let x = tape.add(x, h)?;
    let h = norm(tape, w, x, &format!("{p}.norm3"))?;
    let h = mlp(tape, w, h, &format!("{p}.mlp"))?;
    tape.add(x, h)
}

/// Encodes visible patch tokens `[n_vis, P*P*C]` located at grid `positions`.
///
/// Output is `[n_vis + 1, enc_dim]`: the class token first, then the visible
/// tokens in the given order.
pub fn encode<S: Scalar>(tape: &mut Tape<S>, w: &Bound, tokens: Var, positions: &[usize]) -> Result<Var> {
    let cfg = w.config();
    let n = cfg.num_patches();
    ensure!(
        tape.shape(tokens) == [positions.len(), cfg.patch_dim()],
        "encoder input {:?} does not match {} positions of width {}",
        tape.shape(tokens),
        positions.len(),
        cfg.patch_dim()
    );
    if let Some(&bad) = positions.iter().find(|&&p| p >= n) {
        return Err(Error::Contract(format!("position {bad} outside a grid of {n} patches")));
    }
    let x = linear(tape, w, tokens, "patch_embed")?;
    let table = sincos_2d::<S>(cfg.enc_dim, cfg.grid()).gather_rows(positions)?;
    let pos = tape.constant(table);
    let x = tape.add(x, pos)?;
    let mut x = tape.concat(&[w.var("cls_token"), x], 0)?;
    for i in 0..cfg.enc_depth {
        x = encoder_block(tape, w, x, i)?;
    }
    norm(tape, w, x, "enc.norm")
}

/// Encodes the visible part of a view under `plan`.
pub fn encode_view<S: Scalar>(tape: &mut Tape<S>, w: &Bound, seq: &PatchSequence<f32>, plan: &MaskPlan) -> Result<Var> {
    let (visible, _) = apply_mask(seq, plan)?;
    let tokens = tape.constant(visible.cast());
    encode(tape, w, tokens, &plan.visible_idx)
}

/// Concatenates anchor encodings along the token axis, in anchor order.
pub fn concat_anchors<S: Scalar>(tape: &mut Tape<S>, anchors: &[Var]) -> Result<Var> {
    ensure!(!anchors.is_empty(), "at least one anchor is required");
    let d = tape.shape(anchors[0])[1];
    for &a in anchors {
        if tape.shape(a).len() != 2 || tape.shape(a)[1] != d {
            return Err(Error::shape("concat_anchors", tape.shape(anchors[0]), tape.shape(a)));
        }
    }
    if anchors.len() == 1 {
        return Ok(anchors[0]);
    }
    tape.concat(anchors, 0)
}

/// Decoder input: embedded target tokens with mask tokens at masked positions,
/// plus decoder positional embeddings. `[N + 1, dec_dim]`, class token first.
pub fn decoder_input<S: Scalar>(tape: &mut Tape<S>, w: &Bound, target: Var, plan: &MaskPlan) -> Result<Var> {
    let cfg = w.config();
    let rows = tape.shape(target)[0];
    ensure!(rows == plan.visible_idx.len() + 1, "target encoding has {rows} rows, plan has {} visible patches", plan.visible_idx.len());
    ensure!(plan.len() == cfg.num_patches(), "plan covers {} patches, model expects {}", plan.len(), cfg.num_patches());
    let t = linear(tape, w, target, "dec_embed")?;
    let cls = tape.slice(t, 0, 0, 1)?;
    let vis = tape.slice(t, 0, 1, rows)?;
    let pool = tape.concat(&[vis, w.var("mask_token")], 0)?;
    let restored = tape.gather_rows(pool, &plan.restore_order())?;
    let x = tape.concat(&[cls, restored], 0)?;
    let table = sincos_2d::<S>(cfg.dec_dim, cfg.grid());
    let table = Tensor::concat(&[&Tensor::zeros(&[1, cfg.dec_dim]), &table], 0)?;
    let pos = tape.constant(table);
    tape.add(x, pos)
}

/// Projects concatenated anchor encodings into the decoder width.
pub fn embed_anchors<S: Scalar>(tape: &mut Tape<S>, w: &Bound, anchors: Var) -> Result<Var> {
    ensure!(tape.shape(anchors)[0] >= 1, "empty anchor set");
    linear(tape, w, anchors, "dec_embed")
}

/// Runs the decoder on `t_a` while cross-attending to `a_v` (already in decoder
/// width) and returns pixel predictions `[|masked|, P*P*C]` at masked positions.
pub fn decode<S: Scalar>(tape: &mut Tape<S>, w: &Bound, t_a: Var, a_v: Var, plan: &MaskPlan) -> Result<Var> {
    let cfg = w.config();
    ensure!(tape.shape(a_v).len() == 2 && tape.shape(a_v)[0] >= 1, "decoder needs at least one anchor token");
    ensure!(!plan.masked_idx.is_empty(), "nothing is masked, nothing to reconstruct");
    let mut x = t_a;
    for i in 0..cfg.dec_depth {
        x = decoder_block(tape, w, x, a_v, i)?;
    }
    let x = norm(tape, w, x, "dec.norm")?;
    let pred = linear(tape, w, x, "head")?;
    let rows: Vec<usize> = plan.masked_idx.iter().map(|&i| i + 1).collect();
    tape.gather_rows(pred, &rows)
}

/// One view and how it is masked.
#[derive(Clone, Debug)]
pub struct MaskedView {
    pub seq: PatchSequence<f32>,
    pub plan: MaskPlan,
}

impl MaskedView {
    pub fn new(image: &Tensor<f32>, patch_size: usize, ratio: f64, seed: u64) -> Result<Self> {
        let seq = patchify(image, patch_size)?;
        let plan = MaskPlan::sample(seq.len(), ratio, seed)?;
        Ok(Self { seq, plan })
    }
}

/// A target view plus its anchors, ready for one reconstruction step.
#[derive(Clone, Debug)]
pub struct CrossViewSample {
    pub target: MaskedView,
    pub anchors: Vec<MaskedView>,
}

/// Reconstruction targets at the masked positions, optionally per-patch normalised.
pub fn reconstruction_targets(view: &MaskedView, norm_pix: bool) -> Result<Tensor<f32>> {
    let (_, masked) = apply_mask(&view.seq, &view.plan)?;
    if !norm_pix {
        return Ok(masked);
    }
    let d = masked.cols();
    let mut out = masked.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (d - 1).max(1) as f64;
        let sd = (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = ((*v as f64 - mean) / sd) as f32;
        }
    }
    Ok(out)
}

/// Predictions `[|masked|, P*P*C]` for a sample.
pub fn predict<S: Scalar>(tape: &mut Tape<S>, w: &Bound, sample: &CrossViewSample) -> Result<Var> {
    let target = encode_view(tape, w, &sample.target.seq, &sample.target.plan)?;
    let mut encoded = Vec::with_capacity(sample.anchors.len());
    for a in &sample.anchors {
        encoded.push(encode_view(tape, w, &a.seq, &a.plan)?);
    }
    let a_v = concat_anchors(tape, &encoded)?;
    let a_v = embed_anchors(tape, w, a_v)?;
    let t_a = decoder_input(tape, w, target, &sample.target.plan)?;
    decode(tape, w, t_a, a_v, &sample.target.plan)
}

/// Mean squared error over the masked target patches.
pub fn sample_loss<S: Scalar>(tape: &mut Tape<S>, w: &Bound, sample: &CrossViewSample) -> Result<Var> {
    let pred = predict(tape, w, sample)?;
    let target = reconstruction_targets(&sample.target, w.config().norm_pix)?;
    let target = tape.constant(target.cast());
    tape.mse(pred, target)
}

/// Class token and all patch tokens of an unmasked image.
pub fn extract_features(params: &ModelParams, image: &Tensor<f32>) -> Result<(Vec<f32>, Tensor<f32>)> {
    let cfg: &ModelConfig = &params.config;
    let seq = patchify(image, cfg.patch_size)?;
    ensure!(
        seq.len() == cfg.num_patches() && seq.channels == cfg.channels,
        "image {:?} does not match the model's {}px x {} channel input",
        image.shape(),
        cfg.image_size,
        cfg.channels
    );
    let mut tape = Tape::<f32>::new();
    let w = params.bind(&mut tape, false);
    let out = encode_view(&mut tape, &w, &seq, &MaskPlan::unmasked(seq.len()))?;
    let out = tape.value(out);
    let cls = out.row(0).to_vec();
    let patches = out.slice(0, 1, out.shape()[0])?;
    Ok((cls, patches))
}
