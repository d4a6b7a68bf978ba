//! TOML run configuration with `desk` and `paper` presets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::DEFAULT_TAPS;
use crate::error::{Error, Result};
use crate::layers::{ReceiverConfig, Variant};
use crate::phy::{LinkConfig, Span};
use crate::trainer::{EvalConfig, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

impl Preset {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Preset::Desk),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub velocity_mps: Span,
    pub delay_spread_s: Span,
    pub taps: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        let l = LinkConfig::default();
        ChannelConfig {
            velocity_mps: l.velocity_mps,
            delay_spread_s: l.delay_spread_s,
            taps: DEFAULT_TAPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub link: LinkConfig,
    pub channel: ChannelConfig,
    pub model: ReceiverConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (link, model) = match preset {
            Preset::Desk => (LinkConfig::default(), ReceiverConfig::desk()),
            Preset::Paper => (LinkConfig::paper(), ReceiverConfig::default()),
        };
        RunConfig {
            preset,
            seed: 0,
            link,
            channel: ChannelConfig::default(),
            model,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    /// Parses `text` over the defaults of its preset. `preset` takes priority
    /// over a `preset` key in the text.
    pub fn from_toml(text: &str, preset: Option<Preset>) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let named = match user.get("preset") {
            None => None,
            Some(toml::Value::String(s)) => {
                Some(Preset::from_name(s).ok_or_else(|| Error::Config(format!("unknown preset {s:?}")))?)
            }
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        };
        let chosen = preset.or(named).unwrap_or_default();
        let mut base = toml::Table::try_from(Self::preset(chosen)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        base.insert("preset".into(), toml::Value::try_from(chosen).expect("preset serializes"));
        let cfg: RunConfig = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Link description with the channel section folded in.
    pub fn link_config(&self) -> LinkConfig {
        LinkConfig {
            velocity_mps: self.channel.velocity_mps,
            delay_spread_s: self.channel.delay_spread_s,
            taps: self.channel.taps,
            ..self.link.clone()
        }
    }

    pub fn receiver_config(&self, variant: Variant) -> ReceiverConfig {
        self.model.clone().with_variant(variant)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.link_config();
        l.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let bits = (l.modulation_order as f64).log2().round() as usize;
        let pairs = [
            ("model.t", self.model.t, "link.num_symbols", l.num_symbols),
            ("model.f", self.model.f, "link.num_subcarriers", l.num_subcarriers),
            ("model.n_rx", self.model.n_rx, "link.num_rx", l.num_rx),
            ("model.bits_per_symbol", self.model.bits_per_symbol, "log2(link.modulation_order)", bits),
        ];
        for (a, x, b, y) in pairs {
            if x != y {
                return Err(Error::Config(format!("{a} = {x} disagrees with {b} = {y}")));
            }
        }
        Ok(())
    }
}
