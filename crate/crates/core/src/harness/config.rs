//! TOML run configuration and CSV report formatting.
//!
//! Every key is optional; missing keys take the defaults of the owning struct.
//!
//! ```toml
//! [model]
//! l_ms = 16
//! n_r = 1
//! height = 64
//! width = 64
//! heads = 2
//! window = 16
//! use_mhsa = true
//! use_pe = true
//! qkv_variant = "im_q/msg+im_kv"
//! activation = "gelu"
//!
//! [train]
//! iterations = 5000
//! batch_size = 2
//! image_size = 64
//! seed = 0
//! eval_interval = 500
//! holdout = 0.1
//! lr = 1e-4
//!
//! [loss]
//! lambda1 = 1e-4
//! lambda2 = 1e-6
//! perceptual = false
//! warmup_iterations = 0
//! warmup_lambda1 = 1e-4
//!
//! [data]
//! pattern = "*"
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result, StegoError};
use crate::model::ModelConfig;
use crate::train::{LossConfig, MetricsReport, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// File-name glob inside the dataset directory.
    pub pattern: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { pattern: "*".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| StegoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        if self.train.image_size != self.model.height || self.train.image_size != self.model.width {
            bail!(
                Config,
                "train.image_size = {} but the model is {}x{}",
                self.train.image_size,
                self.model.height,
                self.model.width
            );
        }
        Ok(())
    }
}

/// Formats with six significant digits, switching to exponent form outside `[1e-4, 1e6)`.
pub fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp) as usize, x);
        trim_zeros(&s).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mant))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub const METRICS_HEADER: &str = "iter,acc,psnr,ssim,ms_per_image";

/// One CSV row per report, in the metrics contract layout.
pub fn metrics_csv<'a>(rows: impl IntoIterator<Item = &'a MetricsReport>) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.iteration, sig6(r.acc), sig6(r.psnr), sig6(r.ssim), sig6(r.ms_per_image))
            .expect("writing to a String");
    }
    out
}
