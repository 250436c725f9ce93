//! Synthetic parallel corpus.
//!
//! Two "speakers" render the same phoneme/tone sequence with their own
//! spectral prototypes, durations and pitch contours. A speaker-independent
//! embedding table plays the role of ASR bottleneck features. The target
//! speaker's prototypes are a fixed linear map of the source's, so a
//! conversion model has something learnable to recover.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, UtterancePair};
use super::labels::{
    FrameLabel, Inventory, Segment, SegmentSeq, DEFAULT_TONE_COUNT, NO_TONE, SILENCE,
};
use super::track::{BottleneckTrack, FeatureTrack, FrameMatrix};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream, Rng};

const PHONEME_NAMES: &[&str] = &[
    "a", "o", "e", "i", "u", "v", "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q",
    "x", "zh", "ch", "sh", "r", "z", "c", "s", "ai", "ei", "ao", "ou", "an", "en", "ang", "eng",
    "ong",
];

/// Pitch offset at the start of a syllable and its change across it, in Hz.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToneContour {
    pub offset_hz: f64,
    pub slope_hz: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpeakerRenderSpec {
    /// Spectral prototype per phoneme id (pitch excluded).
    pub prototypes: Vec<Vec<f32>>,
    pub mean_duration_ms: Vec<f64>,
    /// Durations are drawn uniformly within `mean * (1 +- jitter)`.
    pub duration_jitter: f64,
    pub pitch_base_hz: f64,
    /// Indexed by tone id; entry 0 is unused.
    pub tone_contours: Vec<ToneContour>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SpeakerRenderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes.is_empty() || self.prototypes.len() != self.mean_duration_ms.len() {
            return Err(Error::Invalid(
                "one prototype and one duration per phoneme required".into(),
            ));
        }
        let dim = self.prototypes[0].len();
        if dim == 0 || self.prototypes.iter().any(|p| p.len() != dim) {
            return Err(Error::Invalid("prototype dimensions differ".into()));
        }
        if self.mean_duration_ms.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Invalid("mean durations must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0)
            || !(self.duration_jitter >= 0.0)
            || self.duration_jitter >= 1.0
        {
            return Err(Error::Invalid(
                "noise sigma must be >= 0 and jitter in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn spectral_dim(&self) -> usize {
        self.prototypes[0].len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckSpec {
    pub embeddings: Vec<Vec<f32>>,
    pub noise_sigma: f64,
    pub rate_divisor: usize,
}

fn lerp(a: &[f32], b: &[f32], w: f32) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| x + (y - x) * w).collect()
}

fn midpoint(a: &[f32], b: &[f32]) -> Vec<f32> {
    lerp(a, b, 0.5)
}

/// Renders one speaker's track and realized segmentation.
fn render(
    spec: &SpeakerRenderSpec,
    phonemes: &[FrameLabel],
    hop_ms: f64,
    rng: &mut Rng,
) -> Result<(FeatureTrack, SegmentSeq)> {
    let counts: Vec<usize> = phonemes
        .iter()
        .map(|l| {
            let mean = spec.mean_duration_ms[l.phoneme];
            let dur = mean * (1.0 + spec.duration_jitter * rng.random_range(-1.0..=1.0));
            ((dur / hop_ms).round() as usize).max(1)
        })
        .collect();
    let total: usize = counts.iter().sum();
    let dim = spec.spectral_dim() + 1;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;

    let mut frames = FrameMatrix::zeros(total, dim);
    let mut segments = Vec::with_capacity(phonemes.len());
    let mut t = 0;
    for (i, (&label, &n)) in phonemes.iter().zip(&counts).enumerate() {
        let cur = &spec.prototypes[label.phoneme];
        let prev = i
            .checked_sub(1)
            .map(|j| &spec.prototypes[phonemes[j].phoneme]);
        let next = phonemes.get(i + 1).map(|l| &spec.prototypes[l.phoneme]);
        for j in 0..n {
            let u = (j as f32 + 0.5) / n as f32;
            let mut v = match (prev, next) {
                (Some(p), _) if u < 0.25 => lerp(&midpoint(p, cur), cur, u / 0.25),
                (_, Some(q)) if u > 0.75 => lerp(cur, &midpoint(cur, q), (u - 0.75) / 0.25),
                _ => cur.clone(),
            };
            for x in &mut v {
                *x += noise.sample(rng) as f32;
            }
            let pitch = if label.phoneme == SILENCE {
                0.0
            } else {
                let c = spec.tone_contours[label.tone];
                spec.pitch_base_hz + c.offset_hz + c.slope_hz * u as f64
            };
            let row = frames.row_mut(t);
            row[..dim - 1].copy_from_slice(&v);
            row[dim - 1] = pitch as f32;
            t += 1;
        }
        let start_ms = ((t - n) as f64 * hop_ms).round() as u32;
        let end_ms = (t as f64 * hop_ms).round() as u32;
        segments.push(Segment {
            start_ms,
            end_ms,
            phoneme: label.phoneme,
            tone: label.tone,
        });
    }
    let lab = SegmentSeq::new(segments, spec.prototypes.len(), DEFAULT_TONE_COUNT)?;
    Ok((FeatureTrack::new(frames, hop_ms)?, lab))
}

/// Renders one parallel pair. Each speaker draws from a stream keyed by
/// `(seed, speaker seed)`, so identical specs give identical renderings.
pub fn gen_synthetic_pair(
    id: &str,
    phonemes: &[FrameLabel],
    src_spec: &SpeakerRenderSpec,
    tgt_spec: &SpeakerRenderSpec,
    bn_spec: &BottleneckSpec,
    hop_ms: f64,
    seed: u64,
) -> Result<UtterancePair> {
    if phonemes.is_empty() {
        return Err(Error::Invalid("empty phoneme sequence".into()));
    }
    if !phonemes[0].is_silence() || !phonemes[phonemes.len() - 1].is_silence() {
        return Err(Error::Invalid(
            "phoneme sequence must begin and end with silence".into(),
        ));
    }
    src_spec.validate()?;
    tgt_spec.validate()?;
    if let Some(bad) = phonemes
        .iter()
        .find(|l| l.phoneme >= src_spec.prototypes.len())
    {
        return Err(Error::Invalid(format!(
            "phoneme id {} has no prototype",
            bad.phoneme
        )));
    }

    let mut src_rng = stream(&[seed, src_spec.seed]);
    let mut tgt_rng = stream(&[seed, tgt_spec.seed]);
    let (src, src_lab) = render(src_spec, phonemes, hop_ms, &mut src_rng)?;
    let (tgt, tgt_lab) = render(tgt_spec, phonemes, hop_ms, &mut tgt_rng)?;

    let r = bn_spec.rate_divisor;
    let src_labels = super::labels::frame_labels(&src_lab, hop_ms, src.len())?;
    let bn_frames = src.len().div_ceil(r);
    let bn_dim = bn_spec.embeddings[0].len();
    let noise = Normal::new(0.0, bn_spec.noise_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut bn_rng = stream(&[seed, 0xB077_1E]);
    let mut bn = FrameMatrix::zeros(bn_frames, bn_dim);
    for i in 0..bn_frames {
        let center = (i * r + r / 2).min(src.len() - 1);
        let emb = &bn_spec.embeddings[src_labels[center].phoneme];
        for (x, e) in bn.row_mut(i).iter_mut().zip(emb) {
            *x = e + noise.sample(&mut bn_rng) as f32;
        }
    }

    Ok(UtterancePair {
        id: id.to_string(),
        src,
        tgt,
        src_lab,
        tgt_lab,
        src_bn: BottleneckTrack::new(bn, r)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Total feature dimension, pitch channel included.
    pub feat_dim: usize,
    pub bottleneck_dim: usize,
    pub hop_ms: f64,
    pub rate_divisor: usize,
    /// Non-silence phonemes in the inventory.
    pub phonemes: usize,
    /// Tones used by the generator (ids 1..=tones).
    pub tones: usize,
    pub min_phones: usize,
    pub max_phones: usize,
    /// Probability of a clause pause between two phonemes.
    pub pause_prob: f64,
    pub noise_sigma: f64,
    pub bn_noise_sigma: f64,
    pub duration_jitter: f64,
    pub silence_ms: f64,
    pub phone_ms: (f64, f64),
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            feat_dim: 20,
            bottleneck_dim: 16,
            hop_ms: 10.0,
            rate_divisor: 4,
            phonemes: 16,
            tones: 4,
            min_phones: 5,
            max_phones: 10,
            pause_prob: 0.18,
            noise_sigma: 0.1,
            bn_noise_sigma: 0.2,
            duration_jitter: 0.25,
            silence_ms: 50.0,
            phone_ms: (30.0, 60.0),
            seed: 1,
        }
    }
}

/// The two speakers, the bottleneck table and the inventory of a synthetic corpus.
#[derive(Clone, Debug)]
pub struct SyntheticVoices {
    pub config: SynthConfig,
    pub inventory: Inventory,
    pub src: SpeakerRenderSpec,
    pub tgt: SpeakerRenderSpec,
    pub bn: BottleneckSpec,
}

fn normal_vec(rng: &mut Rng, n: usize, sigma: f64) -> Vec<f32> {
    let dist = Normal::new(0.0, sigma).unwrap();
    (0..n).map(|_| dist.sample(rng) as f32).collect()
}

impl SyntheticVoices {
    pub fn new(config: SynthConfig) -> Result<Self> {
        if config.feat_dim < 2 || config.bottleneck_dim < 1 {
            return Err(Error::Config(
                "feat_dim must be >= 2 and bottleneck_dim >= 1".into(),
            ));
        }
        if config.phonemes == 0 || config.phonemes > PHONEME_NAMES.len() {
            return Err(Error::Config(format!(
                "phonemes must be in 1..={}",
                PHONEME_NAMES.len()
            )));
        }
        if config.tones == 0 || config.tones >= DEFAULT_TONE_COUNT {
            return Err(Error::Config(format!(
                "tones must be in 1..{DEFAULT_TONE_COUNT}"
            )));
        }
        if config.min_phones == 0 || config.min_phones > config.max_phones {
            return Err(Error::Config("need 1 <= min_phones <= max_phones".into()));
        }
        let mut inventory = Inventory::new(DEFAULT_TONE_COUNT);
        for name in &PHONEME_NAMES[..config.phonemes] {
            inventory.id_for(name);
        }
        let n = inventory.len();
        let spec_dim = config.feat_dim - 1;
        let mut rng = stream(&[config.seed, 0x5EED]);

        let mut src_protos = vec![vec![-2.0f32; spec_dim]];
        for _ in 1..n {
            src_protos.push(normal_vec(&mut rng, spec_dim, 1.0));
        }
        // Target prototypes: a fixed near-identity linear map plus offset.
        let scale = 0.3 / (spec_dim as f64).sqrt();
        let mixing: Vec<Vec<f32>> = (0..spec_dim)
            .map(|i| {
                let mut row = normal_vec(&mut rng, spec_dim, scale);
                row[i] += 0.7;
                row
            })
            .collect();
        let offset = normal_vec(&mut rng, spec_dim, 0.5);
        let tgt_protos: Vec<Vec<f32>> = src_protos
            .iter()
            .enumerate()
            .map(|(p, proto)| {
                if p == SILENCE {
                    return proto.clone();
                }
                mixing
                    .iter()
                    .zip(&offset)
                    .map(|(row, o)| row.iter().zip(proto).map(|(m, x)| m * x).sum::<f32>() + o)
                    .collect()
            })
            .collect();

        let (lo, hi) = config.phone_ms;
        let mut src_dur = vec![config.silence_ms];
        let mut tgt_dur = vec![config.silence_ms * 1.1];
        for _ in 1..n {
            let d = rng.random_range(lo..=hi);
            src_dur.push(d);
            tgt_dur.push(d * rng.random_range(0.8..=1.35));
        }

        let contours = |spread: f64| {
            vec![
                ToneContour {
                    offset_hz: 0.0,
                    slope_hz: 0.0,
                },
                ToneContour {
                    offset_hz: 15.0 * spread,
                    slope_hz: 0.0,
                },
                ToneContour {
                    offset_hz: -15.0 * spread,
                    slope_hz: 35.0 * spread,
                },
                ToneContour {
                    offset_hz: -20.0 * spread,
                    slope_hz: -10.0 * spread,
                },
                ToneContour {
                    offset_hz: 25.0 * spread,
                    slope_hz: -50.0 * spread,
                },
                ToneContour {
                    offset_hz: 0.0,
                    slope_hz: -5.0 * spread,
                },
            ]
        };

        let src = SpeakerRenderSpec {
            prototypes: src_protos,
            mean_duration_ms: src_dur,
            duration_jitter: config.duration_jitter,
            pitch_base_hz: 120.0,
            tone_contours: contours(1.0),
            noise_sigma: config.noise_sigma,
            seed: 1,
        };
        let tgt = SpeakerRenderSpec {
            prototypes: tgt_protos,
            mean_duration_ms: tgt_dur,
            duration_jitter: config.duration_jitter,
            pitch_base_hz: 220.0,
            tone_contours: contours(1.6),
            noise_sigma: config.noise_sigma,
            seed: 2,
        };
        let bn = BottleneckSpec {
            embeddings: (0..n)
                .map(|_| normal_vec(&mut rng, config.bottleneck_dim, 1.0))
                .collect(),
            noise_sigma: config.bn_noise_sigma,
            rate_divisor: config.rate_divisor,
        };
        Ok(SyntheticVoices {
            config,
            inventory,
            src,
            tgt,
            bn,
        })
    }

    /// Random sentence: silence, phonemes with occasional clause pauses, silence.
    pub fn sentence(&self, rng: &mut Rng) -> Vec<FrameLabel> {
        let c = &self.config;
        let len = rng.random_range(c.min_phones..=c.max_phones);
        let mut out = vec![FrameLabel::SILENCE];
        for i in 0..len {
            if i > 0 && rng.random_bool(c.pause_prob) {
                out.push(FrameLabel {
                    phoneme: SILENCE,
                    tone: NO_TONE,
                });
            }
            out.push(FrameLabel {
                phoneme: rng.random_range(1..=c.phonemes),
                tone: rng.random_range(1..=c.tones),
            });
        }
        out.push(FrameLabel::SILENCE);
        out
    }

    /// The `index`-th pair of the corpus; independent of generation order.
    pub fn pair(&self, index: usize) -> Result<UtterancePair> {
        let seed = derive_seed(&[self.config.seed, index as u64]);
        let mut rng = stream(&[seed, 0x5E47]);
        let phonemes = self.sentence(&mut rng);
        gen_synthetic_pair(
            &format!("utt{index:05}"),
            &phonemes,
            &self.src,
            &self.tgt,
            &self.bn,
            self.config.hop_ms,
            seed,
        )
    }

    /// Consecutive pair indices split into train, valid and test.
    pub fn corpus(&self, train: usize, valid: usize, test: usize) -> Result<Corpus> {
        let range = |a: usize, b: usize| (a..b).map(|i| self.pair(i)).collect::<Result<Vec<_>>>();
        Ok(Corpus {
            inventory: self.inventory.clone(),
            train: range(0, train)?,
            valid: range(train, train + valid)?,
            test: range(train + valid, train + valid + test)?,
        })
    }
}
