//! Frame matrices and the binary track file format.
//!
//! Layout: magic `SCNT`, then little-endian `u32` version (1), frame count,
//! dimension and hop in microseconds, then `T * D` row-major `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SCNT";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Time-major `f32` matrix: one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameMatrix {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FrameMatrix {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != frames * dim {
            return Err(Error::Invalid(format!(
                "frame data has {} values, expected {frames}x{dim}",
                data.len()
            )));
        }
        Ok(FrameMatrix { frames, dim, data })
    }

    pub fn zeros(frames: usize, dim: usize) -> Self {
        FrameMatrix {
            frames,
            dim,
            data: vec![0.0; frames * dim],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Invalid("ragged frame rows".into()));
        }
        Ok(FrameMatrix {
            frames: rows.len(),
            dim,
            data: rows.concat(),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn column(&self, d: usize) -> Vec<f32> {
        (0..self.frames)
            .map(|t| self.data[t * self.dim + d])
            .collect()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> FrameMatrix {
        assert!(
            start <= end && end <= self.frames,
            "frame slice out of range"
        );
        FrameMatrix {
            frames: end - start,
            dim: self.dim,
            data: self.data[start * self.dim..end * self.dim].to_vec(),
        }
    }

    pub fn truncated(&self, frames: usize) -> FrameMatrix {
        self.slice(0, frames.min(self.frames))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-frame spectral features plus a pitch channel in the last column.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTrack {
    pub frames: FrameMatrix,
    pub hop_ms: f64,
}

impl FeatureTrack {
    pub fn new(frames: FrameMatrix, hop_ms: f64) -> Result<Self> {
        if frames.frames() < 1 {
            return Err(Error::Invalid(
                "feature track needs at least one frame".into(),
            ));
        }
        if frames.dim() < 2 {
            return Err(Error::Invalid(
                "feature track needs a spectral and a pitch channel".into(),
            ));
        }
        if !(hop_ms > 0.0) {
            return Err(Error::Invalid(format!(
                "hop must be positive, got {hop_ms}"
            )));
        }
        if !frames.is_finite() {
            return Err(Error::Invalid(
                "feature track contains non-finite values".into(),
            ));
        }
        Ok(FeatureTrack { frames, hop_ms })
    }

    pub fn len(&self) -> usize {
        self.frames.frames()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.frames() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.dim()
    }

    pub fn pitch_channel(&self) -> usize {
        self.frames.dim() - 1
    }

    pub fn pitch(&self) -> Vec<f32> {
        self.frames.column(self.pitch_channel())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_track(path, &self.frames, self.hop_ms)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (frames, hop_ms) = read_track(path)?;
        FeatureTrack::new(frames, hop_ms)
    }
}

/// Linguistic bottleneck features at a coarser frame rate.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckTrack {
    pub frames: FrameMatrix,
    /// How many feature-track frames one bottleneck frame spans.
    pub rate_divisor: usize,
}

impl BottleneckTrack {
    pub fn new(frames: FrameMatrix, rate_divisor: usize) -> Result<Self> {
        if rate_divisor == 0 {
            return Err(Error::Invalid(
                "bottleneck rate divisor must be at least 1".into(),
            ));
        }
        if frames.dim() < 1 {
            return Err(Error::Invalid(
                "bottleneck features need at least one dimension".into(),
            ));
        }
        Ok(BottleneckTrack {
            frames,
            rate_divisor,
        })
    }

    pub fn save(&self, path: &Path, feature_hop_ms: f64) -> Result<()> {
        write_track(
            path,
            &self.frames,
            feature_hop_ms * self.rate_divisor as f64,
        )
    }

    /// Loads a bottleneck track, deriving the rate divisor from its hop.
    pub fn load(path: &Path, feature_hop_ms: f64) -> Result<Self> {
        let (frames, hop_ms) = read_track(path)?;
        let ratio = hop_ms / feature_hop_ms;
        let r = ratio.round();
        if r < 1.0 || (ratio - r).abs() > 1e-6 {
            return Err(Error::Format(format!(
                "bottleneck hop {hop_ms} ms is not a multiple of the feature hop {feature_hop_ms} ms"
            )));
        }
        BottleneckTrack::new(frames, r as usize)
    }

    /// Repeats each frame `rate_divisor` times and cuts to `frames` rows.
    pub fn upsample_to(&self, frames: usize) -> Result<FrameMatrix> {
        let up = upsample_repeat(self, self.rate_divisor)?;
        if up.frames() < frames {
            return Err(Error::Invalid(format!(
                "upsampled bottleneck has {} frames, feature track has {frames}",
                up.frames()
            )));
        }
        Ok(up.truncated(frames))
    }
}

/// Row `i` of the output is input row `i / rate`.
pub fn upsample_repeat(bn: &BottleneckTrack, rate: usize) -> Result<FrameMatrix> {
    if rate == 0 {
        return Err(Error::Invalid("upsampling rate must be at least 1".into()));
    }
    let src = &bn.frames;
    let mut data = Vec::with_capacity(src.frames() * rate * src.dim());
    for t in 0..src.frames() {
        for _ in 0..rate {
            data.extend_from_slice(src.row(t));
        }
    }
    FrameMatrix::new(src.frames() * rate, src.dim(), data)
}

pub fn encode_track(frames: &FrameMatrix, hop_ms: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + frames.data().len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(frames.frames() as u32).to_le_bytes());
    out.extend_from_slice(&(frames.dim() as u32).to_le_bytes());
    out.extend_from_slice(&((hop_ms * 1000.0).round() as u32).to_le_bytes());
    for v in frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_track(bytes: &[u8]) -> Result<(FrameMatrix, f64)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let (frames, dim, hop_us) = (word(8) as usize, word(12) as usize, word(16));
    let payload = &bytes[HEADER_LEN..];
    let expected = frames * dim * 4;
    if payload.len() < expected {
        return Err(Error::Format(format!(
            "truncated: header says {frames} frames of {dim}, file holds {} values",
            payload.len() / 4
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "dimension mismatch: {} trailing bytes after {frames}x{dim} values",
            payload.len() - expected
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((FrameMatrix::new(frames, dim, data)?, hop_us as f64 / 1000.0))
}

pub fn write_track(path: &Path, frames: &FrameMatrix, hop_ms: f64) -> Result<()> {
    fs::write(path, encode_track(frames, hop_ms)).map_err(|e| Error::io(path, e))
}

pub fn read_track(path: &Path) -> Result<(FrameMatrix, f64)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_track(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(vals: &[f32]) -> FrameMatrix {
        FrameMatrix::new(vals.len(), 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn upsample_by_four() {
        let bn = BottleneckTrack::new(rows(&[1.0, 2.0, 3.0]), 4).unwrap();
        let up = upsample_repeat(&bn, 4).unwrap();
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 3.0, 3.0, 3.0, 3.0]
        );
    }

    #[test]
    fn upsample_identity_and_double() {
        let bn = BottleneckTrack::new(rows(&[5.0, 6.0]), 1).unwrap();
        assert_eq!(upsample_repeat(&bn, 1).unwrap(), bn.frames);
        assert_eq!(
            upsample_repeat(&bn, 2).unwrap().data(),
            &[5.0, 5.0, 6.0, 6.0]
        );
        assert!(upsample_repeat(&bn, 0).is_err());
    }

    #[test]
    fn upsample_to_truncates() {
        let bn = BottleneckTrack::new(rows(&[1.0, 2.0, 3.0]), 4).unwrap();
        assert_eq!(bn.upsample_to(10).unwrap().frames(), 10);
        assert!(bn.upsample_to(13).is_err());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = encode_track(&rows(&[1.0]), 10.0);
        bytes[0] = b'X';
        assert!(matches!(decode_track(&bytes), Err(Error::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let m = FrameMatrix::new(10, 2, vec![0.5; 20]).unwrap();
        let bytes = encode_track(&m, 10.0);
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(decode_track(cut), Err(Error::Format(m)) if m.contains("truncated")));
    }

    #[test]
    fn feature_track_invariants() {
        assert!(FeatureTrack::new(FrameMatrix::zeros(0, 3), 10.0).is_err());
        assert!(FeatureTrack::new(FrameMatrix::zeros(2, 1), 10.0).is_err());
        assert!(FeatureTrack::new(FrameMatrix::zeros(2, 2), 0.0).is_err());
        let nan = FrameMatrix::new(1, 2, vec![f32::NAN, 0.0]).unwrap();
        assert!(FeatureTrack::new(nan, 10.0).is_err());
    }
}
