//! The two image branches: a frozen micro-ViT with a SAM-style neck and a
//! trainable multi-stage CNN.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{self, conv2d, layernorm, layernorm2d, linear, mlp};
use crate::numerics::{Scalar, Var};
use crate::params::{Init, ParamGroup, Session};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub vit_input: usize,
    pub cnn_input: usize,
    pub patch: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub neck_dim: usize,
    pub cnn_channels: Vec<usize>,
    pub intermediate_block_index: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vit_input: 64,
            cnn_input: 32,
            patch: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            mlp_ratio: 4,
            neck_dim: 32,
            cnn_channels: vec![16, 32, 32],
            intermediate_block_index: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.vit_input == 0 || self.vit_input % self.patch != 0 {
            return Err(Error::Config(format!(
                "vit_input {} must be a positive multiple of patch {}",
                self.vit_input, self.patch
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.intermediate_block_index >= self.depth {
            return Err(Error::Config(format!(
                "intermediate_block_index {} must be < depth {}",
                self.intermediate_block_index, self.depth
            )));
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return Err(Error::Config("cnn_channels must be a non-empty list of positive counts".into()));
        }
        let factor = 1usize << self.cnn_channels.len();
        if self.cnn_input < factor || self.cnn_input % factor != 0 {
            return Err(Error::Config(format!(
                "cnn_input {} too small or not divisible for {} halvings",
                self.cnn_input,
                self.cnn_channels.len()
            )));
        }
        if self.neck_dim == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("neck_dim and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Side of the ViT embedding grid.
    pub fn grid(&self) -> usize {
        self.vit_input / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn cnn_out_channels(&self) -> usize {
        *self.cnn_channels.last().unwrap()
    }

    pub fn init_vit<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        let (d, p) = (self.dim, self.patch);
        init.conv("vit.patch_embed", ParamGroup::VitFrozen, 3, d, p, true);
        init.normal("vit.pos_embed", ParamGroup::VitFrozen, &[1, self.tokens(), d], 0.02);
        for i in 0..self.depth {
            let b = format!("vit.blocks.{i}");
            init.layernorm(&format!("{b}.norm1"), ParamGroup::VitBlockNorm, d);
            init.linear(&format!("{b}.attn.qkv"), ParamGroup::VitFrozen, d, 3 * d);
            init.linear(&format!("{b}.attn.proj"), ParamGroup::VitFrozen, d, d);
            init.layernorm(&format!("{b}.norm2"), ParamGroup::VitBlockNorm, d);
            init.linear(&format!("{b}.mlp.fc1"), ParamGroup::VitFrozen, d, d * self.mlp_ratio);
            init.linear(&format!("{b}.mlp.fc2"), ParamGroup::VitFrozen, d * self.mlp_ratio, d);
        }
        let n = self.neck_dim;
        init.conv("vit.neck.conv1", ParamGroup::VitFrozen, d, n, 1, false);
        init.layernorm("vit.neck.ln1", ParamGroup::VitNeckNorm, n);
        init.conv("vit.neck.conv2", ParamGroup::VitFrozen, n, n, 3, false);
        init.layernorm("vit.neck.ln2", ParamGroup::VitNeckNorm, n);
    }

    pub fn init_cnn<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>) {
        let mut c_in = 3;
        for (i, &c) in self.cnn_channels.iter().enumerate() {
            let s = format!("cnn.stages.{i}");
            init.conv(&format!("{s}.down"), ParamGroup::Cnn, c_in, c, 3, true);
            init.layernorm(&format!("{s}.norm"), ParamGroup::Cnn, c);
            init.conv(&format!("{s}.res.conv1"), ParamGroup::Cnn, c, c, 3, true);
            init.conv(&format!("{s}.res.conv2"), ParamGroup::Cnn, c, c, 3, true);
            c_in = c;
        }
    }
}

/// ViT branch outputs, both on the `grid x grid` embedding lattice.
#[derive(Clone, Copy, Debug)]
pub struct VitOutputs {
    /// `[B, dim, grid, grid]`, output of block `intermediate_block_index`.
    pub intermediate_embedding: Var,
    /// `[B, neck_dim, grid, grid]`, post-neck.
    pub image_embedding: Var,
}

#[derive(Clone, Debug)]
pub struct CnnOutputs {
    pub stage_features: Vec<Var>,
    /// Last stage resized to the ViT grid: `[B, C_c, grid, grid]`.
    pub final_feature: Var,
}

fn check_image<T: Scalar>(s: &Session<'_, '_, T>, image: Var, side: usize, what: &str) -> Result<usize> {
    let sh = s.graph.shape(image);
    if sh.len() != 4 || sh[1] != 3 || sh[2] != side || sh[3] != side {
        return Err(Error::shape(format!(
            "{what} expects [B,3,{side},{side}], got {sh:?}"
        )));
    }
    let vals = s.graph.value(image).data();
    if vals.iter().any(|&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::invalid(format!("{what} pixel values must lie in [0,1]")));
    }
    Ok(sh[0])
}

fn vit_block<T: Scalar>(s: &mut Session<'_, '_, T>, x: Var, prefix: &str, cfg: &EncoderConfig) -> Result<Var> {
    let d = cfg.dim;
    let h = layernorm(s, x, &format!("{prefix}.norm1"))?;
    let qkv = linear(s, h, &format!("{prefix}.attn.qkv"))?;
    let q = s.graph.narrow(qkv, 2, 0, d)?;
    let k = s.graph.narrow(qkv, 2, d, d)?;
    let v = s.graph.narrow(qkv, 2, 2 * d, d)?;
    let (q, k, v) = (
        layers::split_heads(s, q, cfg.heads)?,
        layers::split_heads(s, k, cfg.heads)?,
        layers::split_heads(s, v, cfg.heads)?,
    );
    let a = layers::scaled_dot_attention(s, q, k, v)?;
    let a = layers::merge_heads(s, a)?;
    let a = linear(s, a, &format!("{prefix}.attn.proj"))?;
    let x = s.graph.add(x, a)?;
    let h = layernorm(s, x, &format!("{prefix}.norm2"))?;
    let m = mlp(s, h, &format!("{prefix}.mlp"))?;
    s.graph.add(x, m)
}

/// Patch embedding, transformer blocks, then conv/layernorm neck.
pub fn vit_encode<T: Scalar>(s: &mut Session<'_, '_, T>, image: Var, cfg: &EncoderConfig) -> Result<VitOutputs> {
    cfg.validate()?;
    check_image(s, image, cfg.vit_input, "vit_encode")?;
    let grid = cfg.grid();
    let patches = conv2d(s, image, "vit.patch_embed", cfg.patch, 0)?;
    let tokens = layers::to_tokens(s, patches)?;
    let pos = s.param("vit.pos_embed")?;
    let mut x = s.graph.add(tokens, pos)?;
    let mut intermediate = None;
    for i in 0..cfg.depth {
        x = vit_block(s, x, &format!("vit.blocks.{i}"), cfg)?;
        if i == cfg.intermediate_block_index {
            intermediate = Some(layers::from_tokens(s, x, grid, grid)?);
        }
    }
    let map = layers::from_tokens(s, x, grid, grid)?;
    let n = conv2d(s, map, "vit.neck.conv1", 1, 0)?;
    let n = layernorm2d(s, n, "vit.neck.ln1")?;
    let n = conv2d(s, n, "vit.neck.conv2", 1, 1)?;
    let n = layernorm2d(s, n, "vit.neck.ln2")?;
    Ok(VitOutputs {
        intermediate_embedding: intermediate.expect("index validated < depth"),
        image_embedding: n,
    })
}

/// Strided conv stages with a residual conv block each; the last stage is
/// resized bilinearly onto the ViT grid.
pub fn cnn_encode<T: Scalar>(s: &mut Session<'_, '_, T>, image: Var, cfg: &EncoderConfig) -> Result<CnnOutputs> {
    cfg.validate()?;
    check_image(s, image, cfg.cnn_input, "cnn_encode")?;
    let mut x = image;
    let mut stages = Vec::with_capacity(cfg.cnn_channels.len());
    for i in 0..cfg.cnn_channels.len() {
        let p = format!("cnn.stages.{i}");
        let y = conv2d(s, x, &format!("{p}.down"), 2, 1)?;
        let y = layernorm2d(s, y, &format!("{p}.norm"))?;
        let y = s.graph.gelu(y);
        let r = conv2d(s, y, &format!("{p}.res.conv1"), 1, 1)?;
        let r = s.graph.gelu(r);
        let r = conv2d(s, r, &format!("{p}.res.conv2"), 1, 1)?;
        x = s.graph.add(y, r)?;
        stages.push(x);
    }
    let grid = cfg.grid();
    let final_feature = s.graph.resize_bilinear(x, grid, grid)?;
    Ok(CnnOutputs {
        stage_features: stages,
        final_feature,
    })
}
