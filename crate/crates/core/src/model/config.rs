use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters that shape the acoustic model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature dimension including the pitch channel.
    pub feat_dim: usize,
    pub bottleneck_dim: usize,
    pub encoder_prenet: usize,
    /// Width of the encoder memory; split evenly between the two directions.
    pub encoder_hidden: usize,
    pub attention_rnn: usize,
    pub decoder_rnn: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
    pub prenet: [usize; 2],
    pub prenet_dropout: f64,
    pub postnet_channels: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    pub mdn_mixtures: usize,
    pub classifier_dropout: f64,
    /// Decoding stops after `max_decode_ratio * source_frames` steps at most.
    pub max_decode_ratio: f64,
    pub phoneme_classes: usize,
    pub tone_classes: usize,
    /// Converted pitch below this is written as unvoiced (0 Hz).
    pub voicing_threshold_hz: f64,
    /// Weight of the single positive frame in the stop loss.
    #[serde(default = "one")]
    pub stop_pos_weight: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_dim: 20,
            bottleneck_dim: 16,
            encoder_prenet: 128,
            encoder_hidden: 128,
            attention_rnn: 128,
            decoder_rnn: 128,
            attention_dim: 64,
            location_filters: 8,
            location_kernel: 15,
            prenet: [64, 64],
            prenet_dropout: 0.5,
            postnet_channels: 64,
            postnet_layers: 3,
            postnet_kernel: 5,
            mdn_mixtures: 2,
            classifier_dropout: 0.5,
            max_decode_ratio: 3.0,
            phoneme_classes: 17,
            tone_classes: 6,
            voicing_threshold_hz: 50.0,
            stop_pos_weight: 1.0,
        }
    }
}

impl ModelConfig {
    /// Small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            feat_dim: 4,
            bottleneck_dim: 3,
            encoder_prenet: 8,
            encoder_hidden: 8,
            attention_rnn: 8,
            decoder_rnn: 8,
            attention_dim: 8,
            location_filters: 2,
            location_kernel: 3,
            prenet: [8, 8],
            prenet_dropout: 0.5,
            postnet_channels: 4,
            postnet_layers: 2,
            postnet_kernel: 3,
            mdn_mixtures: 2,
            classifier_dropout: 0.5,
            max_decode_ratio: 3.0,
            phoneme_classes: 5,
            tone_classes: 3,
            voicing_threshold_hz: 50.0,
            stop_pos_weight: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("feat_dim", self.feat_dim),
            ("bottleneck_dim", self.bottleneck_dim),
            ("encoder_prenet", self.encoder_prenet),
            ("encoder_hidden", self.encoder_hidden),
            ("attention_rnn", self.attention_rnn),
            ("decoder_rnn", self.decoder_rnn),
            ("attention_dim", self.attention_dim),
            ("location_filters", self.location_filters),
            ("location_kernel", self.location_kernel),
            ("prenet[0]", self.prenet[0]),
            ("prenet[1]", self.prenet[1]),
            ("postnet_channels", self.postnet_channels),
            ("postnet_layers", self.postnet_layers),
            ("postnet_kernel", self.postnet_kernel),
            ("mdn_mixtures", self.mdn_mixtures),
            ("phoneme_classes", self.phoneme_classes),
            ("tone_classes", self.tone_classes),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.feat_dim < 2 {
            return Err(Error::Config(
                "feat_dim must include a pitch channel (>= 2)".into(),
            ));
        }
        if self.encoder_hidden % 2 != 0 {
            return Err(Error::Config(
                "encoder_hidden must be even (two directions)".into(),
            ));
        }
        if self.location_kernel % 2 == 0 || self.postnet_kernel % 2 == 0 {
            return Err(Error::Config(
                "convolution kernels must have odd length".into(),
            ));
        }
        if !(self.stop_pos_weight > 0.0) {
            return Err(Error::Config("stop_pos_weight must be positive".into()));
        }
        if !(self.max_decode_ratio > 0.0) {
            return Err(Error::Config("max_decode_ratio must be positive".into()));
        }
        for (name, p) in [
            ("prenet_dropout", self.prenet_dropout),
            ("classifier_dropout", self.classifier_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1)")));
            }
        }
        Ok(())
    }

    /// Columns of the per-step output projection: logits, means, log-sigmas, stop.
    pub fn output_width(&self) -> usize {
        self.mdn_mixtures * (1 + 2 * self.feat_dim) + 1
    }

    pub fn decoder_tap_width(&self) -> usize {
        self.encoder_hidden + self.attention_rnn
    }

    /// Sets a field from a `model.<name>` config key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::Config(format!("bad value `{value}` for model.{key}"));
        let us = || value.parse::<usize>().map_err(|_| bad());
        let fl = || value.parse::<f64>().map_err(|_| bad());
        match key {
            "feat_dim" => self.feat_dim = us()?,
            "bottleneck_dim" => self.bottleneck_dim = us()?,
            "encoder_prenet" => self.encoder_prenet = us()?,
            "encoder_hidden" => self.encoder_hidden = us()?,
            "attention_rnn" => self.attention_rnn = us()?,
            "decoder_rnn" => self.decoder_rnn = us()?,
            "attention_dim" => self.attention_dim = us()?,
            "location_filters" => self.location_filters = us()?,
            "location_kernel" => self.location_kernel = us()?,
            "prenet" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 2 {
                    return Err(bad());
                }
                self.prenet = [
                    parts[0].parse().map_err(|_| bad())?,
                    parts[1].parse().map_err(|_| bad())?,
                ];
            }
            "prenet_dropout" => self.prenet_dropout = fl()?,
            "postnet_channels" => self.postnet_channels = us()?,
            "postnet_layers" => self.postnet_layers = us()?,
            "postnet_kernel" => self.postnet_kernel = us()?,
            "mdn_mixtures" => self.mdn_mixtures = us()?,
            "classifier_dropout" => self.classifier_dropout = fl()?,
            "max_decode_ratio" => self.max_decode_ratio = fl()?,
            "phoneme_classes" => self.phoneme_classes = us()?,
            "tone_classes" => self.tone_classes = us()?,
            "voicing_threshold_hz" => self.voicing_threshold_hz = fl()?,
            "stop_pos_weight" => self.stop_pos_weight = fl()?,
            _ => return Err(Error::Config(format!("unknown key model.{key}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        assert_eq!(ModelConfig::default().mdn_mixtures, 2);
    }

    #[test]
    fn rejects_degenerate_sizes() {
        let mut c = ModelConfig::tiny();
        c.mdn_mixtures = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.max_decode_ratio = 0.0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny();
        c.encoder_hidden = 7;
        assert!(c.validate().is_err());
    }

    #[test]
    fn set_parses_keys() {
        let mut c = ModelConfig::default();
        c.set("prenet", "32, 16").unwrap();
        c.set("mdn_mixtures", "3").unwrap();
        assert_eq!(c.prenet, [32, 16]);
        assert_eq!(c.mdn_mixtures, 3);
        assert!(c.set("nope", "1").is_err());
        assert!(c.set("feat_dim", "x").is_err());
    }
}
