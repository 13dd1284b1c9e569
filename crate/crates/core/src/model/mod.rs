//! Concealment and recovery networks and their checkpointed bundle.

pub mod blocks;
pub mod conceal;
pub mod config;
pub mod recover;

use std::path::Path;

use rand::Rng;

pub use config::{Activation, ModelConfig, QkvVariant, Stage};
pub use recover::DecodedMessage;

use crate::error::{bail, Result, StegoError};
use crate::layout::{message_rng, BitMessage};
use crate::tensor::{read_checkpoint, write_checkpoint, Graph, ParamStore, Real, Tensor};

/// Fresh parameters for both networks.
pub fn init_params<T: Real, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut b = blocks::ParamBuilder { store: &mut store, rng };
    conceal::init_params(&mut b, cfg)?;
    recover::init_params(&mut b, cfg)?;
    Ok(store)
}

/// Output of one concealment: `stego = cover + residual`, unclamped.
#[derive(Clone, Debug, PartialEq)]
pub struct Concealed {
    pub stego: Tensor<f32>,
    pub residual: Tensor<f32>,
}

/// A configuration with its single-precision weights.
///
/// Inference methods take `&self` and build a private graph per call, so a
/// model can be shared between threads.
#[derive(Clone, Debug, PartialEq)]
pub struct StegoModel {
    pub config: ModelConfig,
    pub params: ParamStore<f32>,
    /// Optimizer steps applied so far.
    pub iterations: u64,
}

const META_PREFIX: &str = "meta.";

impl StegoModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, &mut message_rng(seed))?;
        Ok(StegoModel { config, params, iterations: 0 })
    }

    pub fn bit_len(&self) -> usize {
        self.config.bit_len()
    }

    fn check_image(&self, img: &Tensor<f32>) -> Result<()> {
        let (h, w) = (self.config.height, self.config.width);
        if img.shape() != [1, 3, h, w] {
            bail!(Config, "image {:?} does not match the model's [1, 3, {h}, {w}]", img.shape());
        }
        Ok(())
    }

    pub fn conceal(&self, cover: &Tensor<f32>, bits: &BitMessage) -> Result<Concealed> {
        self.check_image(cover)?;
        let grids = self.config.layout().encode(bits)?;
        let mut g = Graph::new().frozen(true);
        let c = g.input(cover.clone());
        let out = conceal::conceal(&mut g, &self.params, &self.config, c, &grids)?;
        Ok(Concealed { stego: g.value(out.stego).clone(), residual: g.value(out.residual).clone() })
    }

    pub fn recover(&self, stego: &Tensor<f32>) -> Result<DecodedMessage> {
        self.check_image(stego)?;
        let mut g = Graph::new().frozen(true);
        let x = g.input(stego.clone());
        let raw = recover::recover_raw(&mut g, &self.params, &self.config, x)?;
        DecodedMessage::from_raw(g.value(raw).clone(), &self.config)
    }

    /// Parameters plus `meta.*` entries describing the configuration.
    pub fn to_store(&self) -> Result<ParamStore<f32>> {
        let mut s = self.params.clone();
        let c = &self.config;
        let meta: [(&str, f64); 11] = [
            ("l_ms", c.l_ms as f64),
            ("n_r", c.n_r as f64),
            ("height", c.height as f64),
            ("width", c.width as f64),
            ("heads", c.heads as f64),
            ("window", c.window as f64),
            ("use_mhsa", c.use_mhsa as u8 as f64),
            ("use_pe", c.use_pe as u8 as f64),
            ("qkv_variant", c.qkv_variant.index() as f64),
            ("activation", matches!(c.activation, Activation::Relu) as u8 as f64),
            ("iterations", self.iterations as f64),
        ];
        for (k, v) in meta {
            if v > (1u64 << 24) as f64 {
                bail!(Config, "meta value {k} = {v} is not exactly representable");
            }
            s.insert(format!("{META_PREFIX}{k}"), Tensor::scalar(v as f32))?;
        }
        Ok(s)
    }

    pub fn from_store(store: &ParamStore<f32>) -> Result<Self> {
        let get = |k: &str| -> Result<u64> {
            let t = store
                .get(&format!("{META_PREFIX}{k}"))
                .ok_or_else(|| StegoError::Format(format!("checkpoint lacks {META_PREFIX}{k}")))?;
            let v = t.data()[0];
            if t.numel() != 1 || v < 0.0 || v.fract() != 0.0 {
                bail!(Format, "invalid {META_PREFIX}{k} entry");
            }
            Ok(v as u64)
        };
        let config = ModelConfig {
            l_ms: get("l_ms")? as usize,
            n_r: get("n_r")? as u32,
            height: get("height")? as usize,
            width: get("width")? as usize,
            heads: get("heads")? as usize,
            window: get("window")? as usize,
            use_mhsa: get("use_mhsa")? != 0,
            use_pe: get("use_pe")? != 0,
            qkv_variant: QkvVariant::from_index(get("qkv_variant")? as usize)?,
            activation: if get("activation")? != 0 { Activation::Relu } else { Activation::Gelu },
        };
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, t) in store.iter().filter(|(n, _)| !n.starts_with(META_PREFIX)) {
            params.insert(name, t.clone())?;
        }
        let expected = init_params::<f32, _>(&config, &mut message_rng(0))?;
        for (name, t) in expected.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => bail!(Format, "parameter {name} has shape {:?}, expected {:?}", p.shape(), t.shape()),
                None => bail!(Format, "checkpoint lacks parameter {name}"),
            }
        }
        if params.len() != expected.len() {
            bail!(Format, "checkpoint has {} parameters, configuration needs {}", params.len(), expected.len());
        }
        Ok(StegoModel { config, params, iterations: get("iterations")? })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_checkpoint(path, &self.to_store()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(&read_checkpoint(path)?)
    }
}
