//! Objective metrics: DTW-aligned mel-cepstral distortion and F0 RMSE, and
//! attention-alignment diagnostics.

use std::f64::consts::{LN_10, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureTrack, FrameLabel, FrameMatrix};
use crate::model::AttentionTrace;
use crate::numeric::argmax;

/// Cepstral coefficients 1..=13 enter the distortion; c0 is left out.
pub const MCD_ORDER: usize = 13;

#[derive(Clone, Debug, PartialEq)]
pub struct DtwPath {
    pub pairs: Vec<(usize, usize)>,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Minimal-cost monotonic alignment with steps (1,1), (1,0), (0,1) and
/// Euclidean local cost. Ties prefer the diagonal, then (1,0).
pub fn dtw_align(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(DtwPath, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Invalid("dtw needs non-empty sequences".into()));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|r| r.len() != d) {
        return Err(Error::Invalid(
            "dtw inputs have different dimensions".into(),
        ));
    }
    let (n, m) = (a.len(), b.len());
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            let local = euclid(&a[i], &b[j]);
            let prev = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 {
                    acc[(i - 1) * m + j - 1]
                } else {
                    f64::INFINITY
                };
                let up = if i > 0 {
                    acc[(i - 1) * m + j]
                } else {
                    f64::INFINITY
                };
                let left = if j > 0 {
                    acc[i * m + j - 1]
                } else {
                    f64::INFINITY
                };
                diag.min(up).min(left)
            };
            acc[i * m + j] = local + prev;
        }
    }
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let diag = if i > 0 && j > 0 {
            acc[(i - 1) * m + j - 1]
        } else {
            f64::INFINITY
        };
        let up = if i > 0 {
            acc[(i - 1) * m + j]
        } else {
            f64::INFINITY
        };
        let left = if j > 0 {
            acc[i * m + j - 1]
        } else {
            f64::INFINITY
        };
        if diag <= up && diag <= left {
            i -= 1;
            j -= 1;
        } else if up <= left {
            i -= 1;
        } else {
            j -= 1;
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok((DtwPath { pairs }, acc[n * m - 1]))
}

/// Orthonormal DCT-II of one row.
pub fn dct2(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos())
                .sum();
            let scale = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            scale * s
        })
        .collect()
}

/// Cepstral coefficients `1..=order` of every frame's spectral channels
/// (pitch excluded).
pub fn cepstra(frames: &FrameMatrix, order: usize) -> Vec<Vec<f64>> {
    let spectral = frames.dim() - 1;
    (0..frames.frames())
        .map(|t| {
            let row: Vec<f64> = frames.row(t)[..spectral]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let c = dct2(&row);
            c[1..=order.min(spectral - 1)].to_vec()
        })
        .collect()
}

fn check_pair(conv: &FeatureTrack, reference: &FeatureTrack) -> Result<()> {
    if conv.dim() != reference.dim() {
        return Err(Error::Invalid(format!(
            "dimension mismatch: {} vs {}",
            conv.dim(),
            reference.dim()
        )));
    }
    if (conv.hop_ms - reference.hop_ms).abs() > 1e-9 {
        return Err(Error::Invalid("tracks have different hops".into()));
    }
    Ok(())
}

fn usable_order(dim: usize) -> usize {
    let available = dim.saturating_sub(2);
    if available < MCD_ORDER {
        log::warn!("only {available} cepstral coefficients available; mcd uses those");
    }
    available.min(MCD_ORDER)
}

const MCD_SCALE: f64 = 10.0 / LN_10;

/// Metrics of one converted utterance against its reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub mcd: f64,
    pub f0_rmse: f64,
    pub path_len: usize,
    pub voiced_pairs: usize,
}

/// MCD and voiced F0 RMSE along one DTW path over cepstra.
pub fn compare(conv: &FeatureTrack, reference: &FeatureTrack) -> Result<PairMetrics> {
    check_pair(conv, reference)?;
    let order = usable_order(conv.dim());
    let (ca, cb) = (
        cepstra(&conv.frames, order),
        cepstra(&reference.frames, order),
    );
    let (path, _) = dtw_align(&ca, &cb)?;
    let mcd = path
        .pairs
        .iter()
        .map(|&(i, j)| {
            MCD_SCALE
                * (2.0
                    * ca[i]
                        .iter()
                        .zip(&cb[j])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>())
                .sqrt()
        })
        .sum::<f64>()
        / path.pairs.len() as f64;
    let (pa, pb) = (conv.pitch(), reference.pitch());
    let voiced: Vec<f64> = path
        .pairs
        .iter()
        .filter(|&&(i, j)| pa[i] > 0.0 && pb[j] > 0.0)
        .map(|&(i, j)| (pa[i] as f64 - pb[j] as f64).powi(2))
        .collect();
    let f0_rmse = if voiced.is_empty() {
        log::warn!("no voiced frame pairs; f0 rmse reported as 0");
        0.0
    } else {
        (voiced.iter().sum::<f64>() / voiced.len() as f64).sqrt()
    };
    Ok(PairMetrics {
        mcd,
        f0_rmse,
        path_len: path.pairs.len(),
        voiced_pairs: voiced.len(),
    })
}

pub fn mcd(conv: &FeatureTrack, reference: &FeatureTrack) -> Result<f64> {
    Ok(compare(conv, reference)?.mcd)
}

pub fn f0_rmse(conv: &FeatureTrack, reference: &FeatureTrack) -> Result<f64> {
    Ok(compare(conv, reference)?.f0_rmse)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttnDiagnostics {
    /// Fraction of decoder steps whose attended encoder frame moves back by more than 2.
    pub monotonicity_violation: f64,
    /// Fraction of non-silence encoder frames that receive total attention below 0.2.
    pub coverage_deficit: f64,
    /// Fraction of decoder steps inside over-long runs on one encoder frame.
    pub repeat_score: f64,
}

impl AttnDiagnostics {
    pub fn mean(items: &[AttnDiagnostics]) -> AttnDiagnostics {
        let n = items.len().max(1) as f64;
        AttnDiagnostics {
            monotonicity_violation: items.iter().map(|d| d.monotonicity_violation).sum::<f64>() / n,
            coverage_deficit: items.iter().map(|d| d.coverage_deficit).sum::<f64>() / n,
            repeat_score: items.iter().map(|d| d.repeat_score).sum::<f64>() / n,
        }
    }
}

/// `enc_labels` marks silence frames to leave out of the coverage check;
/// without it every encoder frame counts.
pub fn attn_diagnostics(
    trace: &AttentionTrace,
    enc_labels: Option<&[FrameLabel]>,
) -> AttnDiagnostics {
    let w = &trace.weights;
    let (t_dec, t_enc) = w.shape();
    if t_dec == 0 || t_enc == 0 {
        return AttnDiagnostics::default();
    }
    let peaks: Vec<usize> = (0..t_dec).map(|t| argmax(w.row(t))).collect();
    let back = peaks.windows(2).filter(|p| p[0] > p[1] + 2).count();

    let mut column = vec![0.0; t_enc];
    for t in 0..t_dec {
        for (c, v) in column.iter_mut().zip(w.row(t)) {
            *c += v;
        }
    }
    let counted: Vec<usize> = (0..t_enc)
        .filter(|&j| enc_labels.is_none_or(|l| l.get(j).is_none_or(|x| !x.is_silence())))
        .collect();
    let deficit = if counted.is_empty() {
        0.0
    } else {
        counted.iter().filter(|&&j| column[j] < 0.2).count() as f64 / counted.len() as f64
    };

    let limit = 3.0 * t_dec as f64 / t_enc as f64;
    let mut repeated = 0;
    let mut start = 0;
    for t in 1..=t_dec {
        if t == t_dec || peaks[t] != peaks[start] {
            let len = t - start;
            if len as f64 > limit {
                repeated += len;
            }
            start = t;
        }
    }
    AttnDiagnostics {
        monotonicity_violation: back as f64 / t_dec as f64,
        coverage_deficit: deficit,
        repeat_score: repeated as f64 / t_dec as f64,
    }
}
