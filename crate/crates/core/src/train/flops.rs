//! Analytic compute count for one training sample.
//!
//! Counts follow the common profiler convention of one operation per
//! multiply-accumulate. The encoder's attention products run inside a fused
//! attention kernel that such profilers do not see, so they are reported in
//! the breakdown but left out of the total; the decoder's attention is built
//! from explicit matrix products and is counted.

use crate::model::ModelConfig;
use crate::patch::visible_count;

/// Multiply-accumulate counts per stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlopsBreakdown {
    pub target_encoder: f64,
    pub anchor_encoders: f64,
    /// Attention score and mixing products inside the encoders (not in the total).
    pub encoder_attention: f64,
    pub decoder_embed: f64,
    pub decoder_self_attention: f64,
    pub decoder_cross_attention: f64,
    pub decoder_mlp: f64,
    pub head: f64,
    pub loss: f64,
    /// Tokens seen by one anchor encoder and by the target encoder, class token included.
    pub anchor_tokens: usize,
    pub target_tokens: usize,
}

impl FlopsBreakdown {
    pub fn total(&self) -> f64 {
        self.target_encoder
            + self.anchor_encoders
            + self.decoder_embed
            + self.decoder_self_attention
            + self.decoder_cross_attention
            + self.decoder_mlp
            + self.head
            + self.loss
    }

    pub fn gflops(&self) -> f64 {
        self.total() / 1e9
    }
}

/// Encoder linear layers on `n` tokens (one of them the class token).
fn encoder_linear(cfg: &ModelConfig, n: usize) -> f64 {
    let (n, d) = (n as f64, cfg.enc_dim as f64);
    let h = (cfg.mlp_ratio * cfg.enc_dim) as f64;
    let embed = (n - 1.0) * cfg.patch_dim() as f64 * d;
    let per_block = n * (4.0 * d * d + 2.0 * d * h);
    embed + cfg.enc_depth as f64 * per_block
}

fn encoder_attention(cfg: &ModelConfig, n: usize) -> f64 {
    let n = n as f64;
    cfg.enc_depth as f64 * 2.0 * n * n * cfg.enc_dim as f64
}

/// Compute for one forward pass of a sample with `anchors` anchor views.
pub fn flops_breakdown(cfg: &ModelConfig, anchors: usize, anchor_mask: f64, target_mask: f64) -> FlopsBreakdown {
    let n = cfg.num_patches();
    let nt = visible_count(n, target_mask) + 1;
    let na = visible_count(n, anchor_mask) + 1;
    let kv = (anchors * na) as f64;
    let q = (n + 1) as f64;
    let (e, d) = (cfg.enc_dim as f64, cfg.dec_dim as f64);
    let h = (cfg.mlp_ratio * cfg.dec_dim) as f64;
    let layers = cfg.dec_depth as f64;
    let masked = (n - visible_count(n, target_mask)) as f64;
    FlopsBreakdown {
        target_encoder: encoder_linear(cfg, nt),
        anchor_encoders: anchors as f64 * encoder_linear(cfg, na),
        encoder_attention: encoder_attention(cfg, nt) + anchors as f64 * encoder_attention(cfg, na),
        decoder_embed: (nt as f64 + kv) * e * d,
        decoder_self_attention: layers * (q * 4.0 * d * d + 2.0 * q * q * d),
        decoder_cross_attention: layers * (q * 2.0 * d * d + kv * 2.0 * d * d + 2.0 * q * kv * d),
        decoder_mlp: layers * q * 2.0 * d * h,
        head: q * d * cfg.patch_dim() as f64,
        loss: masked * cfg.patch_dim() as f64,
        anchor_tokens: na,
        target_tokens: nt,
    }
}

/// Total GFLOPs for one training sample.
pub fn estimate_flops(cfg: &ModelConfig, anchors: usize, anchor_mask: f64, target_mask: f64) -> f64 {
    flops_breakdown(cfg, anchors, anchor_mask, target_mask).gflops()
}
