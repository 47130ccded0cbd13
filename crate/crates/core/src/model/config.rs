use crate::config::KeyValues;
use crate::error::{Error, Result};

/// Architecture and masking configuration of the encoder/decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub enc_dim: usize,
    pub enc_depth: usize,
    pub enc_heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub num_anchors: usize,
    pub target_mask: f64,
    pub anchor_mask: f64,
    pub norm_pix: bool,
}

pub const LN_EPS: f64 = 1e-6;

impl ModelConfig {
    /// ViT-S/16 encoder at 224 px with a four-block, 256-wide decoder.
    pub fn vit_s16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            enc_dim: 384,
            enc_depth: 12,
            enc_heads: 6,
            dec_dim: 256,
            dec_depth: 4,
            dec_heads: 8,
            mlp_ratio: 4,
            num_anchors: 1,
            target_mask: 0.9,
            anchor_mask: 0.0,
            norm_pix: false,
        }
    }

    /// 16 px images, 4 px patches, width 16, two blocks each side.
    pub fn tiny() -> Self {
        Self {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            enc_dim: 16,
            enc_depth: 2,
            enc_heads: 2,
            dec_dim: 16,
            dec_depth: 2,
            dec_heads: 2,
            mlp_ratio: 4,
            num_anchors: 2,
            target_mask: 0.9,
            anchor_mask: 0.25,
            norm_pix: false,
        }
    }

    /// 32 px images, 4 px patches, width 32: the desk-scale training preset.
    pub fn small() -> Self {
        Self { image_size: 32, patch_size: 4, enc_dim: 32, enc_heads: 4, dec_dim: 32, dec_heads: 4, ..Self::tiny() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "vit-s16" | "vit-s" => Ok(Self::vit_s16()),
            "tiny" => Ok(Self::tiny()),
            "small" => Ok(Self::small()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected vit-s16, small or tiny)"))),
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        let g = self.image_size / self.patch_size;
        (g, g)
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!("image size {} is not divisible by patch size {}", self.image_size, self.patch_size));
        }
        for (dim, heads, what) in [(self.enc_dim, self.enc_heads, "encoder"), (self.dec_dim, self.dec_heads, "decoder")] {
            if heads == 0 || dim % heads != 0 {
                return fail(format!("{what} width {dim} is not divisible by {heads} heads"));
            }
            if dim % 4 != 0 {
                return fail(format!("{what} width {dim} must be a multiple of 4 for 2-D positional tables"));
            }
        }
        if self.enc_depth == 0 || self.dec_depth == 0 || self.mlp_ratio == 0 {
            return fail("depths and mlp ratio must be positive".into());
        }
        if self.num_anchors == 0 {
            return fail("at least one anchor is required".into());
        }
        for (r, what) in [(self.target_mask, "target"), (self.anchor_mask, "anchor")] {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("{what} mask ratio {r} outside [0, 1)"));
            }
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 14] = [
        "image_size",
        "patch_size",
        "channels",
        "enc_dim",
        "enc_depth",
        "enc_heads",
        "dec_dim",
        "dec_depth",
        "dec_heads",
        "mlp_ratio",
        "num_anchors",
        "target_mask",
        "anchor_mask",
        "norm_pix",
    ];

    pub fn to_kv(&self, prefix: &str) -> KeyValues {
        let mut kv = KeyValues::new();
        let vals: [String; 14] = [
            self.image_size.to_string(),
            self.patch_size.to_string(),
            self.channels.to_string(),
            self.enc_dim.to_string(),
            self.enc_depth.to_string(),
            self.enc_heads.to_string(),
            self.dec_dim.to_string(),
            self.dec_depth.to_string(),
            self.dec_heads.to_string(),
            self.mlp_ratio.to_string(),
            self.num_anchors.to_string(),
            format!("{:?}", self.target_mask),
            format!("{:?}", self.anchor_mask),
            self.norm_pix.to_string(),
        ];
        for (k, v) in Self::KEYS.iter().zip(vals) {
            kv.set(format!("{prefix}{k}"), v);
        }
        kv
    }

    /// Overrides fields from `kv` keys of the form `{prefix}{field}`.
    pub fn apply_kv(&mut self, kv: &KeyValues, prefix: &str) -> Result<()> {
        let k = |f: &str| format!("{prefix}{f}");
        kv.read_into(&k("image_size"), &mut self.image_size)?;
        kv.read_into(&k("patch_size"), &mut self.patch_size)?;
        kv.read_into(&k("channels"), &mut self.channels)?;
        kv.read_into(&k("enc_dim"), &mut self.enc_dim)?;
        kv.read_into(&k("enc_depth"), &mut self.enc_depth)?;
        kv.read_into(&k("enc_heads"), &mut self.enc_heads)?;
        kv.read_into(&k("dec_dim"), &mut self.dec_dim)?;
        kv.read_into(&k("dec_depth"), &mut self.dec_depth)?;
        kv.read_into(&k("dec_heads"), &mut self.dec_heads)?;
        kv.read_into(&k("mlp_ratio"), &mut self.mlp_ratio)?;
        kv.read_into(&k("num_anchors"), &mut self.num_anchors)?;
        kv.read_into(&k("target_mask"), &mut self.target_mask)?;
        kv.read_into(&k("anchor_mask"), &mut self.anchor_mask)?;
        kv.read_into(&k("norm_pix"), &mut self.norm_pix)?;
        Ok(())
    }
}
