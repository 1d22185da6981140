//! The full segmentation model: both encoders feeding the CFA decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cfa_decoder::{decode, CfaFlags, DecoderConfig, DecoderOutputs};
use crate::encoders::{cnn_encode, vit_encode, CnnOutputs, EncoderConfig, VitOutputs};
use crate::error::Result;
use crate::numerics::{Scalar, Var};
use crate::params::{Init, ParamStore, Session};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub cfa: CfaFlags,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate(&self.encoder)
    }

    /// Side of the decoder's logit map.
    pub fn logit_side(&self) -> usize {
        self.encoder.grid() * 4
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        self.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: &mut store,
            rng: &mut rng,
        };
        self.encoder.init_vit(&mut init);
        if self.cfa.uses_cnn() {
            self.encoder.init_cnn(&mut init);
        }
        self.decoder.init(&mut init, &self.encoder, self.cfa);
        Ok(store)
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub vit: VitOutputs,
    pub cnn: Option<CnnOutputs>,
    pub decoder: DecoderOutputs,
}

/// `vit_image: [B,3,vit_input,vit_input]`, `cnn_image: [B,3,cnn_input,cnn_input]`.
pub fn forward<T: Scalar>(
    s: &mut Session<'_, '_, T>,
    cfg: &ModelConfig,
    vit_image: Var,
    cnn_image: Var,
) -> Result<ModelOutputs> {
    let vit = vit_encode(s, vit_image, &cfg.encoder)?;
    let cnn = if cfg.cfa.uses_cnn() {
        Some(cnn_encode(s, cnn_image, &cfg.encoder)?)
    } else {
        None
    };
    let decoder = decode(s, &vit, cnn.as_ref(), &cfg.encoder, &cfg.decoder, cfg.cfa)?;
    Ok(ModelOutputs { vit, cnn, decoder })
}
