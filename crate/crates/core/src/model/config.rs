use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Paper,
    #[default]
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected paper or toy)"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Toy => "toy",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Stem width; the three blocks use 2x, 4x and 8x this.
    pub base_width: usize,
    /// Adapter widths for the 1/2, 1/4 and 1/8 taps.
    pub adapter_channels: [usize; 3],
    /// Width `d` of the fused maps and of the ASPP output.
    pub fused_depth: usize,
    pub aspp_rates: [usize; 2],
    pub compress_dim: usize,
}

impl BackboneConfig {
    pub fn paper() -> Self {
        Self {
            base_width: 64,
            adapter_channels: [16, 32, 64],
            fused_depth: 128,
            aspp_rates: [2, 4],
            compress_dim: 64,
        }
    }

    /// Every width of [`BackboneConfig::paper`] divided by 4.
    pub fn toy() -> Self {
        let p = Self::paper();
        Self {
            base_width: p.base_width / 4,
            adapter_channels: p.adapter_channels.map(|c| c / 4),
            fused_depth: p.fused_depth / 4,
            aspp_rates: p.aspp_rates,
            compress_dim: p.compress_dim / 4,
        }
    }

    /// Channels of the concatenated multi-scale map.
    pub fn concat_channels(&self) -> usize {
        self.adapter_channels.iter().sum::<usize>() + self.fused_depth
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distance {
    Cosine,
    Euclidean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub alpha: f32,
    pub beta: f32,
    pub tau: f32,
    pub distance: Distance,
    pub relevance: bool,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            alpha: 20.0,
            beta: 5.0,
            tau: 1e-6,
            distance: Distance::Cosine,
            relevance: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    /// Weight of the newest batch in the running batch-norm statistics.
    pub bn_momentum: f32,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            backbone: match p {
                Preset::Paper => BackboneConfig::paper(),
                Preset::Toy => BackboneConfig::toy(),
            },
            head: HeadConfig::default(),
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.backbone;
        if b.base_width == 0 || b.fused_depth == 0 || b.compress_dim == 0 || b.adapter_channels.contains(&0) {
            return Err(Error::InvalidParameter("backbone widths must be positive".into()));
        }
        if b.aspp_rates.contains(&0) {
            return Err(Error::InvalidParameter("aspp rates must be positive".into()));
        }
        if !(self.head.tau > 0.0) || !(self.head.alpha > 0.0) {
            return Err(Error::InvalidParameter("alpha and tau must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidParameter("bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_decay: f32,
    pub lr_decay_period: usize,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_eps: f32,
    /// Steps per epoch; 0 means one pass over the raw samples.
    pub steps_per_epoch: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn preset(p: Preset) -> Self {
        let paper = Self {
            learning_rate: 1e-4,
            batch_size: 4,
            epochs: 40,
            lr_decay: 0.5,
            lr_decay_period: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            steps_per_epoch: 0,
            seed: 0,
        };
        match p {
            Preset::Paper => paper,
            Preset::Toy => Self {
                learning_rate: 2e-3,
                batch_size: 2,
                epochs: 16,
                lr_decay: 0.5,
                lr_decay_period: 6,
                steps_per_epoch: 40,
                ..paper
            },
        }
    }

    /// `lr * decay^floor(epoch / period)`.
    pub fn lr_at_epoch(&self, epoch: usize) -> f32 {
        let k = if self.lr_decay_period == 0 { 0 } else { epoch / self.lr_decay_period };
        self.learning_rate * self.lr_decay.powi(k as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidParameter("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.lr_decay > 0.0) {
            return Err(Error::InvalidParameter("learning rate and decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::InvalidParameter("adam betas must be in [0, 1)".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Toy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_widths() {
        let b = BackboneConfig::paper();
        assert_eq!(b.adapter_channels, [16, 32, 64]);
        assert_eq!((b.fused_depth, b.compress_dim, b.aspp_rates), (128, 64, [2, 4]));
        let t = BackboneConfig::toy();
        assert_eq!(t.adapter_channels, [4, 8, 16]);
        assert_eq!((t.fused_depth, t.compress_dim), (32, 16));
    }

    #[test]
    fn paper_schedule_halves_every_ten_epochs() {
        let t = TrainConfig::preset(Preset::Paper);
        assert_eq!((t.batch_size, t.epochs), (4, 40));
        assert_eq!(t.lr_at_epoch(0), 1e-4);
        assert_eq!(t.lr_at_epoch(9), 1e-4);
        assert_eq!(t.lr_at_epoch(10), 5e-5);
        assert_eq!(t.lr_at_epoch(39), 1.25e-5);
    }

    #[test]
    fn head_defaults() {
        let h = HeadConfig::default();
        assert_eq!((h.alpha, h.beta, h.tau), (20.0, 5.0, 1e-6));
    }
}
