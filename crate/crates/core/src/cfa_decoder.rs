//! Promptless mask decoder augmented with the CNN branch.
//!
//! Two learned output tokens (mask, IoU) attend to the ViT image tokens through
//! two two-way attention blocks. Each block ends with a cross-branch attention
//! in which image tokens query the CNN tokens, with keys and values sharing one
//! projection. The dense positional term on image tokens is a 1x1 projection of
//! the CNN final feature. Before the mask head, the decoder image feature is
//! augmented with a fusion of shallow ViT, final ViT and CNN maps.

use rand::Rng;

use crate::encoders::{CnnOutputs, EncoderConfig, VitOutputs};
use crate::error::{Error, Result};
use crate::layers::{self, attention, conv2d, conv_transpose2d, layernorm, layernorm2d, mlp};
use crate::numerics::{Scalar, Tensor, Var};
use crate::params::{Init, ParamGroup, Session};

/// Ablation switches for the CNN-augmentation mechanisms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CfaFlags {
    pub cross_attention: bool,
    pub fusion: bool,
    pub pe_replace: bool,
}

impl CfaFlags {
    pub const ALL: CfaFlags = CfaFlags {
        cross_attention: true,
        fusion: true,
        pe_replace: true,
    };
    pub const NONE: CfaFlags = CfaFlags {
        cross_attention: false,
        fusion: false,
        pe_replace: false,
    };

    /// Whether the CNN branch is consumed at all.
    pub fn uses_cnn(self) -> bool {
        self.cross_attention || self.fusion || self.pe_replace
    }
}

impl Default for CfaFlags {
    fn default() -> Self {
        Self::ALL
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub heads: usize,
    pub mlp_dim: usize,
    pub blocks: usize,
    pub cross_heads: usize,
    pub cross_head_dim: usize,
    pub upscale_channels: [usize; 2],
    pub iou_hidden: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            mlp_dim: 64,
            blocks: 2,
            cross_heads: 4,
            cross_head_dim: 8,
            upscale_channels: [16, 8],
            iou_hidden: 32,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        let d = enc.neck_dim;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!("decoder dim {d} not divisible by heads {}", self.heads)));
        }
        if self.cross_heads * self.cross_head_dim != d {
            return Err(Error::Config(format!(
                "cross-branch heads*d = {} must equal decoder dim {d}",
                self.cross_heads * self.cross_head_dim
            )));
        }
        if self.blocks == 0 || self.mlp_dim == 0 || self.iou_hidden == 0 || self.upscale_channels.contains(&0) {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn init<T: Scalar, R: Rng>(&self, init: &mut Init<'_, T, R>, enc: &EncoderConfig, flags: CfaFlags) {
        let g = ParamGroup::Decoder;
        let d = enc.neck_dim;
        let cc = enc.cnn_out_channels();
        init.normal("dec.mask_token", g, &[1, d], 1.0);
        init.normal("dec.iou_token", g, &[1, d], 1.0);
        if flags.pe_replace {
            init.conv("dec.pe_proj", g, cc, d, 1, true);
        } else {
            init.normal("dec.dense_pe", g, &[1, enc.tokens(), d], 1.0);
        }
        for i in 0..self.blocks {
            let b = format!("dec.blocks.{i}");
            for a in ["self_attn", "cross_t2i", "cross_i2t"] {
                for p in ["q", "k", "v", "out"] {
                    init.linear(&format!("{b}.{a}.{p}"), g, d, d);
                }
            }
            for n in 1..=4 {
                init.layernorm(&format!("{b}.norm{n}"), g, d);
            }
            init.linear(&format!("{b}.mlp.fc1"), g, d, self.mlp_dim);
            init.linear(&format!("{b}.mlp.fc2"), g, self.mlp_dim, d);
            if flags.cross_attention {
                let hd = self.cross_heads * self.cross_head_dim;
                init.uniform(&format!("{b}.cba.w_q"), g, &[d, hd], 1.0 / (d as f64).sqrt());
                init.uniform(&format!("{b}.cba.w_k"), g, &[cc, hd], 1.0 / (cc as f64).sqrt());
                init.layernorm(&format!("{b}.norm5"), g, d);
            }
        }
        for p in ["q", "k", "v", "out"] {
            init.linear(&format!("dec.final_attn.{p}"), g, d, d);
        }
        init.layernorm("dec.norm_final", g, d);
        if flags.fusion {
            init.conv("dec.fuse.shallow_proj", g, enc.dim, d, 1, true);
            init.conv("dec.fuse.cnn_proj", g, cc, d, 1, true);
            init.conv("dec.fuse.conv", g, 3 * d, d, 1, true);
            init.layernorm("dec.fuse.norm", g, d);
        }
        let [u1, u2] = self.upscale_channels;
        init.conv_transpose("dec.up1", g, d, u1, 2);
        init.layernorm("dec.up_norm", g, u1);
        init.conv_transpose("dec.up2", g, u1, u2, 2);
        init.linear("dec.hyper.fc1", g, d, d);
        init.linear("dec.hyper.fc2", g, d, u2);
        init.linear("dec.iou_head.fc1", g, d, self.iou_hidden);
        init.linear("dec.iou_head.fc2", g, self.iou_hidden, 1);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecoderOutputs {
    /// `[B, 1, 4*grid, 4*grid]`.
    pub logits: Var,
    /// `[B, 1]`, raw (unclamped) IoU prediction.
    pub iou_score: Var,
    /// `[B, D, grid, grid]` when fusion is on.
    pub fused_feature: Option<Var>,
}

/// `softmax(Q K^T / sqrt(d)) V` per head with `Q = F_v W_q`, `K = V = F_c W_k`.
///
/// `f_v: [B,N,C_v]`, `f_c: [B,N,C_c]`, `w_q: [C_v, heads*d]`, `w_k: [C_c, heads*d]`;
/// returns `[B, N, heads*d]`.
pub fn cross_branch_attention<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    f_v: Var,
    f_c: Var,
    w_q: Var,
    w_k: Var,
    heads: usize,
) -> Result<Var> {
    let (sv, sc) = (s.graph.shape(f_v).to_vec(), s.graph.shape(f_c).to_vec());
    if sv.len() != 3 || sc.len() != 3 || sv[0] != sc[0] || sv[1] != sc[1] {
        return Err(Error::shape(format!(
            "cross-branch attention token mismatch: F_v {sv:?} vs F_c {sc:?}"
        )));
    }
    let q = s.graph.matmul(f_v, w_q)?;
    let kv = s.graph.matmul(f_c, w_k)?;
    let q = layers::split_heads(s, q, heads)?;
    let kv = layers::split_heads(s, kv, heads)?;
    let o = layers::scaled_dot_attention(s, q, kv, kv)?;
    layers::merge_heads(s, o)
}

/// Channel-concatenate the maps and apply the 1x1 conv `{prefix}.conv`.
/// This is the linear stage of [`multi_level_fuse`].
pub fn concat_project<T: Scalar>(s: &mut Session<'_, '_, T>, maps: &[Var], prefix: &str) -> Result<Var> {
    let first = s.graph.shape(maps[0]).to_vec();
    for m in maps {
        let sh = s.graph.shape(*m);
        if sh.len() != 4 || sh[0] != first[0] || sh[2..] != first[2..] {
            return Err(Error::shape(format!("fusion grid mismatch: {sh:?} vs {first:?}")));
        }
    }
    let cat = s.graph.concat(maps, 1)?;
    conv2d(s, cat, &format!("{prefix}.conv"), 1, 0)
}

/// Fuse shallow ViT, final ViT and CNN maps (same grid and channel count):
/// concat, 1x1 conv, channel layernorm, GELU.
pub fn multi_level_fuse<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    shallow_vit: Var,
    final_vit: Var,
    cnn_final: Var,
    prefix: &str,
) -> Result<Var> {
    let y = concat_project(s, &[shallow_vit, final_vit, cnn_final], prefix)?;
    let y = layernorm2d(s, y, &format!("{prefix}.norm"))?;
    Ok(s.graph.gelu(y))
}

/// Residual attention followed by layernorm.
fn attend<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    residual: Var,
    q: Var,
    k: Var,
    v: Var,
    prefix: &str,
    norm: &str,
    heads: usize,
) -> Result<Var> {
    let a = attention(s, q, k, v, prefix, heads)?;
    let x = s.graph.add(residual, a)?;
    layernorm(s, x, norm)
}

pub fn decode<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    vit: &VitOutputs,
    cnn: Option<&CnnOutputs>,
    enc: &EncoderConfig,
    cfg: &DecoderConfig,
    flags: CfaFlags,
) -> Result<DecoderOutputs> {
    cfg.validate(enc)?;
    if flags.uses_cnn() && cnn.is_none() {
        return Err(Error::invalid("CNN features required by the enabled CFA switches"));
    }
    let grid = enc.grid();
    let d = enc.neck_dim;
    let image = vit.image_embedding;
    let ish = s.graph.shape(image).to_vec();
    if ish.len() != 4 || ish[1] != d || ish[2] != grid || ish[3] != grid {
        return Err(Error::shape(format!("image embedding {ish:?} does not match [B,{d},{grid},{grid}]")));
    }
    let batch = ish[0];
    if let Some(c) = cnn {
        let csh = s.graph.shape(c.final_feature);
        if csh[0] != batch || csh[2] != grid || csh[3] != grid {
            return Err(Error::shape(format!("CNN final feature {csh:?} not on the {grid}x{grid} grid")));
        }
    }

    let mut keys = layers::to_tokens(s, image)?;
    let fc_tokens = match cnn {
        Some(c) => Some(layers::to_tokens(s, c.final_feature)?),
        None => None,
    };
    let key_pe = if flags.pe_replace {
        let c = cnn.expect("checked above");
        let pe = conv2d(s, c.final_feature, "dec.pe_proj", 1, 0)?;
        layers::to_tokens(s, pe)?
    } else {
        s.param("dec.dense_pe")?
    };

    let mask_tok = s.param("dec.mask_token")?;
    let iou_tok = s.param("dec.iou_token")?;
    let toks = s.graph.concat(&[mask_tok, iou_tok], 0)?;
    let toks = s.graph.reshape(toks, &[1, 2, d])?;
    let zeros = s.graph.constant(Tensor::zeros(&[batch, 2, d]));
    let query_pe = s.graph.add(zeros, toks)?;
    let mut queries = query_pe;

    for i in 0..cfg.blocks {
        let b = format!("dec.blocks.{i}");
        let q = s.graph.add(queries, query_pe)?;
        queries = attend(s, queries, q, q, queries, &format!("{b}.self_attn"), &format!("{b}.norm1"), cfg.heads)?;

        let q = s.graph.add(queries, query_pe)?;
        let k = s.graph.add(keys, key_pe)?;
        queries = attend(s, queries, q, k, keys, &format!("{b}.cross_t2i"), &format!("{b}.norm2"), cfg.heads)?;

        let m = mlp(s, queries, &format!("{b}.mlp"))?;
        let x = s.graph.add(queries, m)?;
        queries = layernorm(s, x, &format!("{b}.norm3"))?;

        let q = s.graph.add(keys, key_pe)?;
        let k = s.graph.add(queries, query_pe)?;
        keys = attend(s, keys, q, k, queries, &format!("{b}.cross_i2t"), &format!("{b}.norm4"), cfg.heads)?;

        if flags.cross_attention {
            let fv = s.graph.add(keys, key_pe)?;
            let w_q = s.param(&format!("{b}.cba.w_q"))?;
            let w_k = s.param(&format!("{b}.cba.w_k"))?;
            let fc = fc_tokens.expect("CNN present when cross_attention is on");
            let cba = cross_branch_attention(s, fv, fc, w_q, w_k, cfg.cross_heads)?;
            let x = s.graph.add(keys, cba)?;
            keys = layernorm(s, x, &format!("{b}.norm5"))?;
        }
    }

    let q = s.graph.add(queries, query_pe)?;
    let k = s.graph.add(keys, key_pe)?;
    queries = attend(s, queries, q, k, keys, "dec.final_attn", "dec.norm_final", cfg.heads)?;

    let mut feature = layers::from_tokens(s, keys, grid, grid)?;
    let mut fused_feature = None;
    if flags.fusion {
        let c = cnn.expect("checked above");
        let shallow = conv2d(s, vit.intermediate_embedding, "dec.fuse.shallow_proj", 1, 0)?;
        let cnn_map = conv2d(s, c.final_feature, "dec.fuse.cnn_proj", 1, 0)?;
        let fused = multi_level_fuse(s, shallow, image, cnn_map, "dec.fuse")?;
        feature = s.graph.add(feature, fused)?;
        fused_feature = Some(fused);
    }

    let up = conv_transpose2d(s, feature, "dec.up1", 2)?;
    let up = layernorm2d(s, up, "dec.up_norm")?;
    let up = s.graph.gelu(up);
    let up = conv_transpose2d(s, up, "dec.up2", 2)?;
    let up = s.graph.gelu(up);
    let ush = s.graph.shape(up).to_vec();
    let (uc, uh, uw) = (ush[1], ush[2], ush[3]);

    let mask_out = s.graph.narrow(queries, 1, 0, 1)?;
    let hyper = mlp(s, mask_out, "dec.hyper")?; // [B,1,uc]
    let flat = s.graph.reshape(up, &[batch, uc, uh * uw])?;
    let logits = s.graph.matmul(hyper, flat)?;
    let logits = s.graph.reshape(logits, &[batch, 1, uh, uw])?;

    let iou_out = s.graph.narrow(queries, 1, 1, 1)?;
    let iou = mlp(s, iou_out, "dec.iou_head")?;
    let iou_score = s.graph.reshape(iou, &[batch, 1])?;

    Ok(DecoderOutputs {
        logits,
        iou_score,
        fused_feature,
    })
}
