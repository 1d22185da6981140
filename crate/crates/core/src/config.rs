//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cfa_decoder::CfaFlags;
use crate::data_metrics::{OodShift, Sizes, SynthSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Image folder (`images/`, `masks/`); synthetic data is used when unset.
    pub dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            n_train: 300,
            n_val: 50,
            n_test: 50,
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    /// `train.seed` always mirrors `seed`.
    pub train: TrainConfig,
    pub data: DataConfig,
    pub out_dir: Option<PathBuf>,
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got '{v}'"))),
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        c.train.seed = c.seed;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        if self.data.n_train == 0 {
            return Err(Error::Config("data.n_train must be >= 1".into()));
        }
        let s = &self.data.synth.sizes;
        if s.vit_input != self.model.encoder.vit_input || s.cnn_input != self.model.encoder.cnn_input {
            return Err(Error::Config("data sizes must follow the model input sizes".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let enc = &mut self.model.encoder;
        let dec = &mut self.model.decoder;
        let syn = &mut self.data.synth;
        let tr = &mut self.train;
        match key {
            "seed" => self.seed = num(key, v)?,
            "out.dir" => self.out_dir = Some(PathBuf::from(v)),
            "data.dir" => self.data.dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "data.n_train" => self.data.n_train = num(key, v)?,
            "data.n_val" => self.data.n_val = num(key, v)?,
            "data.n_test" => self.data.n_test = num(key, v)?,
            "synth.n_blobs_min" => syn.n_blobs.0 = num(key, v)?,
            "synth.n_blobs_max" => syn.n_blobs.1 = num(key, v)?,
            "synth.radius_min" => syn.radius.0 = num(key, v)?,
            "synth.radius_max" => syn.radius.1 = num(key, v)?,
            "synth.texture_noise" => syn.texture_noise = num(key, v)?,
            "synth.background_freq" => syn.background_freq = num(key, v)?,
            "model.vit_input" => {
                enc.vit_input = num(key, v)?;
                syn.sizes.vit_input = enc.vit_input;
                syn.sizes.label_res = enc.vit_input;
            }
            "model.cnn_input" => {
                enc.cnn_input = num(key, v)?;
                syn.sizes.cnn_input = enc.cnn_input;
            }
            "model.patch" => enc.patch = num(key, v)?,
            "model.depth" => enc.depth = num(key, v)?,
            "model.dim" => enc.dim = num(key, v)?,
            "model.heads" => enc.heads = num(key, v)?,
            "model.mlp_ratio" => enc.mlp_ratio = num(key, v)?,
            "model.neck_dim" => enc.neck_dim = num(key, v)?,
            "model.cnn_channels" => enc.cnn_channels = list(key, v)?,
            "model.intermediate_block_index" => enc.intermediate_block_index = num(key, v)?,
            "decoder.heads" => dec.heads = num(key, v)?,
            "decoder.mlp_dim" => dec.mlp_dim = num(key, v)?,
            "decoder.blocks" => dec.blocks = num(key, v)?,
            "decoder.cross_heads" => dec.cross_heads = num(key, v)?,
            "decoder.cross_head_dim" => dec.cross_head_dim = num(key, v)?,
            "decoder.upscale_channels" => {
                let l = list(key, v)?;
                dec.upscale_channels = <[usize; 2]>::try_from(l)
                    .map_err(|_| Error::Config(format!("{key}: expected two counts")))?;
            }
            "decoder.iou_hidden" => dec.iou_hidden = num(key, v)?,
            "cfa.cross_attention" => self.model.cfa.cross_attention = parse_bool(key, v)?,
            "cfa.fusion" => self.model.cfa.fusion = parse_bool(key, v)?,
            "cfa.pe_replace" => self.model.cfa.pe_replace = parse_bool(key, v)?,
            "upr.lambda" => tr.upr.lambda = num(key, v)?,
            "upr.gate" => tr.upr.gate = v.parse()?,
            "upr.hint" => tr.upr.hint = parse_bool(key, v)?,
            "train.lr" => tr.lr = num(key, v)?,
            "train.weight_decay" => tr.weight_decay = num(key, v)?,
            "train.batch_size" => tr.batch_size = num(key, v)?,
            "train.max_iters" => tr.max_iters = num(key, v)?,
            "train.norm_policy" => tr.norm_policy = v.parse()?,
            "train.eval_every" => tr.eval_every = num(key, v)?,
            "train.grad_clip" => {
                tr.grad_clip = if v == "off" { None } else { Some(num(key, v)?) };
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Canonical text listing every key; `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let e = &self.model.encoder;
        let d = &self.model.decoder;
        let s = &self.data.synth;
        let t = &self.train;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut o = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(o, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        if let Some(p) = &self.out_dir {
            kv("out.dir", p.display().to_string());
        }
        if let Some(p) = &self.data.dir {
            kv("data.dir", p.display().to_string());
        }
        kv("data.n_train", self.data.n_train.to_string());
        kv("data.n_val", self.data.n_val.to_string());
        kv("data.n_test", self.data.n_test.to_string());
        kv("synth.n_blobs_min", s.n_blobs.0.to_string());
        kv("synth.n_blobs_max", s.n_blobs.1.to_string());
        kv("synth.radius_min", s.radius.0.to_string());
        kv("synth.radius_max", s.radius.1.to_string());
        kv("synth.texture_noise", s.texture_noise.to_string());
        kv("synth.background_freq", s.background_freq.to_string());
        kv("model.vit_input", e.vit_input.to_string());
        kv("model.cnn_input", e.cnn_input.to_string());
        kv("model.patch", e.patch.to_string());
        kv("model.depth", e.depth.to_string());
        kv("model.dim", e.dim.to_string());
        kv("model.heads", e.heads.to_string());
        kv("model.mlp_ratio", e.mlp_ratio.to_string());
        kv("model.neck_dim", e.neck_dim.to_string());
        kv("model.cnn_channels", join(&e.cnn_channels));
        kv("model.intermediate_block_index", e.intermediate_block_index.to_string());
        kv("decoder.heads", d.heads.to_string());
        kv("decoder.mlp_dim", d.mlp_dim.to_string());
        kv("decoder.blocks", d.blocks.to_string());
        kv("decoder.cross_heads", d.cross_heads.to_string());
        kv("decoder.cross_head_dim", d.cross_head_dim.to_string());
        kv("decoder.upscale_channels", join(&d.upscale_channels));
        kv("decoder.iou_hidden", d.iou_hidden.to_string());
        kv("cfa.cross_attention", on_off(self.model.cfa.cross_attention).into());
        kv("cfa.fusion", on_off(self.model.cfa.fusion).into());
        kv("cfa.pe_replace", on_off(self.model.cfa.pe_replace).into());
        kv("upr.lambda", t.upr.lambda.to_string());
        kv("upr.gate", t.upr.gate.to_string());
        kv("upr.hint", on_off(t.upr.hint).into());
        kv("train.lr", t.lr.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.max_iters", t.max_iters.to_string());
        kv("train.norm_policy", t.norm_policy.to_string());
        kv("train.eval_every", t.eval_every.to_string());
        kv(
            "train.grad_clip",
            t.grad_clip.map_or("off".to_string(), |c| c.to_string()),
        );
        o
    }

    pub fn sizes(&self) -> Sizes {
        self.data.synth.sizes
    }

    pub fn ood_spec(&self) -> SynthSpec {
        self.data.synth.with_ood(OodShift::default())
    }

    pub fn with_cfa(&self, cfa: CfaFlags) -> Self {
        let mut c = self.clone();
        c.model.cfa = cfa;
        c
    }
}
