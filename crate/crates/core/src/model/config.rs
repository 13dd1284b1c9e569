use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result, StegoError};
use crate::layout::LayoutConfig;

/// Source of the query and key/value tokens inside a fusion stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[derive(Default)]
pub enum QkvVariant {
    #[serde(rename = "msg_q/msg+im_kv")]
    MsgQMsgImKv,
    #[serde(rename = "msg_q/im_kv")]
    MsgQImKv,
    #[serde(rename = "im_q/msg+im_kv")]
    #[default]
    ImQMsgImKv,
    #[serde(rename = "im_q/msg_kv")]
    ImQMsgKv,
    #[serde(rename = "msg+im_q/msg+im_kv")]
    MsgImQMsgImKv,
}

impl QkvVariant {
    pub const ALL: [QkvVariant; 5] = [
        QkvVariant::MsgQMsgImKv,
        QkvVariant::MsgQImKv,
        QkvVariant::ImQMsgImKv,
        QkvVariant::ImQMsgKv,
        QkvVariant::MsgImQMsgImKv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            QkvVariant::MsgQMsgImKv => "msg_q/msg+im_kv",
            QkvVariant::MsgQImKv => "msg_q/im_kv",
            QkvVariant::ImQMsgImKv => "im_q/msg+im_kv",
            QkvVariant::ImQMsgKv => "im_q/msg_kv",
            QkvVariant::MsgImQMsgImKv => "msg+im_q/msg+im_kv",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&v| v == self).expect("listed")
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL.get(i).copied().ok_or_else(|| StegoError::Config(format!("unknown Q/K/V variant index {i}")))
    }
}


impl fmt::Display for QkvVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for QkvVariant {
    type Err = StegoError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| StegoError::Config(format!("unknown Q/K/V variant '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
}

/// Architecture hyperparameters shared by the concealment and recovery networks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub l_ms: usize,
    pub n_r: u32,
    pub height: usize,
    pub width: usize,
    pub heads: usize,
    pub window: usize,
    pub use_mhsa: bool,
    pub use_pe: bool,
    pub qkv_variant: QkvVariant,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            l_ms: 16,
            n_r: 1,
            height: 64,
            width: 64,
            heads: 2,
            window: 16,
            use_mhsa: true,
            use_pe: true,
            qkv_variant: QkvVariant::default(),
            activation: Activation::default(),
        }
    }
}

/// Scale and channel count of one message/fusion stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    pub scale: usize,
    pub channels: usize,
}

pub const LN_EPS: f64 = 1e-5;
pub const DECODER_MLP_RATIO: usize = 4;

impl ModelConfig {
    /// Base channel count `C = 2 * L_ms`.
    pub fn channels(&self) -> usize {
        2 * self.l_ms
    }

    pub fn stages(&self) -> [Stage; 3] {
        let c = self.channels();
        [
            Stage { scale: 2, channels: 2 * c },
            Stage { scale: 4, channels: 4 * c },
            Stage { scale: 4, channels: 4 * c },
        ]
    }

    /// Channel widths of the four decoder stages.
    pub fn decoder_dims(&self) -> [usize; 4] {
        let l = self.l_ms;
        [2 * l, 4 * l, 8 * l, 8 * l]
    }

    pub fn layout(&self) -> LayoutConfig {
        LayoutConfig {
            l_ms: self.l_ms,
            n_r: self.n_r,
            height: self.height,
            width: self.width,
            scales: self.stages().iter().map(|s| s.scale).collect(),
        }
    }

    /// Message length in bits carried by one cover.
    pub fn bit_len(&self) -> usize {
        self.layout().bit_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.window == 0 {
            bail!(Config, "heads and window must be positive");
        }
        if self.height == 0 || self.width == 0 {
            bail!(Config, "cover dimensions must be positive");
        }
        let tile = 4 * self.window;
        if !self.height.is_multiple_of(tile) || !self.width.is_multiple_of(tile) {
            bail!(
                Config,
                "cover {}x{} must be divisible by 4 * window = {tile}",
                self.height,
                self.width
            );
        }
        self.layout().validate()?;
        let widths = self.stages().map(|s| s.channels).into_iter().chain(self.decoder_dims());
        for ch in widths {
            if ch % self.heads != 0 {
                bail!(Config, "{ch} channels are not divisible by {} heads", self.heads);
            }
        }
        Ok(())
    }
}
