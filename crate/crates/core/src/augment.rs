//! Fragment augmentation driven by text alignment.
//!
//! An alignment point is a silence that both utterances of a parallel pair
//! share. Any two points delimit a pair of parallel fragments with the same
//! linguistic content, so `N` points give `N * (N - 1) / 2` fragments. During
//! training one fragment is drawn per visit of a pair, replacing the whole
//! utterance.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::labels::{segment_frames, FrameLabel, Segment, SegmentSeq};
use crate::features::{FrameMatrix, UtterancePair};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignmentPoint {
    pub index: usize,
    pub src_silence: (u32, u32),
    pub tgt_silence: (u32, u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FragmentSpec {
    pub src_range: (usize, usize),
    pub tgt_range: (usize, usize),
    pub start_point: usize,
    pub end_point: usize,
}

/// Pairs the k-th source silence with the k-th target silence, after checking
/// that both utterances carry the same non-silence content.
pub fn alignment_points(src_lab: &SegmentSeq, tgt_lab: &SegmentSeq) -> Result<Vec<AlignmentPoint>> {
    if src_lab.content() != tgt_lab.content() {
        return Err(Error::Alignment(
            "non-silence label sequences differ".into(),
        ));
    }
    let src: Vec<&Segment> = src_lab.silences().collect();
    let tgt: Vec<&Segment> = tgt_lab.silences().collect();
    if src.len() != tgt.len() {
        return Err(Error::Alignment(format!(
            "source has {} silences, target has {}",
            src.len(),
            tgt.len()
        )));
    }
    // Equal content and equal silence counts are not enough: the k-th silences
    // must also separate the same phonemes.
    let before = |lab: &SegmentSeq| -> Vec<usize> {
        let mut count = 0;
        let mut out = Vec::new();
        for s in &lab.segments {
            if s.is_silence() {
                out.push(count);
            } else {
                count += 1;
            }
        }
        out
    };
    if before(src_lab) != before(tgt_lab) {
        return Err(Error::Alignment(
            "silences fall at different positions in the transcription".into(),
        ));
    }
    Ok(src
        .iter()
        .zip(&tgt)
        .enumerate()
        .map(|(index, (s, t))| AlignmentPoint {
            index,
            src_silence: (s.start_ms, s.end_ms),
            tgt_silence: (t.start_ms, t.end_ms),
        })
        .collect())
}

/// Frame nearest the midpoint of a silence, clamped to frames inside it.
fn cut_frame(span: (u32, u32), hop_ms: f64, frames: usize) -> Option<usize> {
    let seg = Segment {
        start_ms: span.0,
        end_ms: span.1,
        phoneme: 0,
        tone: 0,
    };
    let (first, last) = segment_frames(&seg, hop_ms, frames)?;
    let mid = (seg.mid_ms() / hop_ms).round() as usize;
    Some(mid.clamp(first, last))
}

/// All fragments between two alignment points. Ranges are half-open and
/// include the cut frames at both ends. Returns an empty list for `N < 2`.
pub fn enumerate_fragments(
    points: &[AlignmentPoint],
    src_frames: usize,
    tgt_frames: usize,
    hop_ms: f64,
) -> Vec<FragmentSpec> {
    let cuts: Vec<Option<(usize, usize)>> = points
        .iter()
        .map(|p| {
            Some((
                cut_frame(p.src_silence, hop_ms, src_frames)?,
                cut_frame(p.tgt_silence, hop_ms, tgt_frames)?,
            ))
        })
        .collect();
    let mut out = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let (Some((s0, t0)), Some((s1, t1))) = (cuts[i], cuts[j]) else {
                continue;
            };
            out.push(FragmentSpec {
                src_range: (s0, s1 + 1),
                tgt_range: (t0, t1 + 1),
                start_point: i,
                end_point: j,
            });
        }
    }
    out
}

/// One training example: aligned slices of the pair plus per-frame labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub id: String,
    pub src: FrameMatrix,
    pub src_bn: FrameMatrix,
    pub tgt: FrameMatrix,
    pub src_labels: Vec<FrameLabel>,
    pub tgt_labels: Vec<FrameLabel>,
}

impl TrainingSample {
    pub fn src_len(&self) -> usize {
        self.src.frames()
    }

    pub fn tgt_len(&self) -> usize {
        self.tgt.frames()
    }
}

/// A pair with its labels, upsampled bottleneck and fragment list precomputed.
#[derive(Clone, Debug)]
pub struct PreparedPair {
    pub id: String,
    pub src: FrameMatrix,
    pub src_bn: FrameMatrix,
    pub tgt: FrameMatrix,
    pub src_labels: Vec<FrameLabel>,
    pub tgt_labels: Vec<FrameLabel>,
    pub hop_ms: f64,
    pub points: usize,
    pub fragments: Vec<FragmentSpec>,
}

impl PreparedPair {
    pub fn new(pair: &UtterancePair) -> Result<Self> {
        let hop = pair.src.hop_ms;
        let (points, fragments) = match alignment_points(&pair.src_lab, &pair.tgt_lab) {
            Ok(points) => {
                let frags = enumerate_fragments(&points, pair.src.len(), pair.tgt.len(), hop);
                (points.len(), frags)
            }
            Err(e) => {
                log::warn!("{}: {e}; using the whole utterance", pair.id);
                (0, Vec::new())
            }
        };
        Ok(PreparedPair {
            id: pair.id.clone(),
            src: pair.src.frames.clone(),
            src_bn: pair.src_bn_upsampled()?,
            tgt: pair.tgt.frames.clone(),
            src_labels: pair.src_labels()?,
            tgt_labels: pair.tgt_labels()?,
            hop_ms: hop,
            points,
            fragments,
        })
    }

    pub fn slice(&self, src_range: (usize, usize), tgt_range: (usize, usize)) -> TrainingSample {
        TrainingSample {
            id: self.id.clone(),
            src: self.src.slice(src_range.0, src_range.1),
            src_bn: self.src_bn.slice(src_range.0, src_range.1),
            tgt: self.tgt.slice(tgt_range.0, tgt_range.1),
            src_labels: self.src_labels[src_range.0..src_range.1].to_vec(),
            tgt_labels: self.tgt_labels[tgt_range.0..tgt_range.1].to_vec(),
        }
    }

    /// The whole utterance, as used without augmentation.
    pub fn whole(&self) -> TrainingSample {
        self.slice((0, self.src.frames()), (0, self.tgt.frames()))
    }

    pub fn fragment(&self, f: &FragmentSpec) -> TrainingSample {
        self.slice(f.src_range, f.tgt_range)
    }
}

/// Draws one fragment uniformly; falls back to the whole utterance when
/// fewer than two alignment points exist.
pub fn sample_fragment(pair: &PreparedPair, rng: &mut Rng) -> TrainingSample {
    match pair.fragments.len() {
        0 => pair.whole(),
        1 => pair.fragment(&pair.fragments[0]),
        n => pair.fragment(&pair.fragments[rng.random_range(0..n)]),
    }
}

/// Non-silence labels of the segments that have a frame inside `range`.
pub fn content_in_range(
    lab: &SegmentSeq,
    hop_ms: f64,
    frames: usize,
    range: (usize, usize),
) -> Vec<FrameLabel> {
    lab.segments
        .iter()
        .filter(|s| !s.is_silence())
        .filter(|s| match segment_frames(s, hop_ms, frames) {
            Some((a, b)) => a < range.1 && b >= range.0,
            None => false,
        })
        .map(Segment::label)
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AugmentStats {
    pub pairs: usize,
    /// Pairs whose silences could not be matched.
    pub unaligned: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub mean_points: f64,
    pub total_fragments: usize,
}

pub fn corpus_stats(pairs: &[UtterancePair]) -> AugmentStats {
    let mut stats = AugmentStats {
        pairs: pairs.len(),
        ..Default::default()
    };
    let mut points_sum = 0;
    for p in pairs {
        match alignment_points(&p.src_lab, &p.tgt_lab) {
            Ok(points) => {
                let n = points.len();
                *stats.histogram.entry(n).or_default() += 1;
                points_sum += n;
                stats.total_fragments +=
                    enumerate_fragments(&points, p.src.len(), p.tgt.len(), p.src.hop_ms).len();
            }
            Err(_) => stats.unaligned += 1,
        }
    }
    let aligned = pairs.len() - stats.unaligned;
    if aligned > 0 {
        stats.mean_points = points_sum as f64 / aligned as f64;
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::labels::{parse_lab, Inventory};
    use crate::features::{SynthConfig, SyntheticVoices};
    use crate::rng::stream;

    fn lab(text: &str, inv: &mut Inventory) -> SegmentSeq {
        parse_lab(text, inv).unwrap()
    }

    #[test]
    fn three_silences_give_three_points() {
        let mut inv = Inventory::default();
        let src = lab(
            "0 50 sil\n50 120 a@1\n120 170 sil\n170 230 b@2\n230 280 sil",
            &mut inv,
        );
        let tgt = lab(
            "0 40 sil\n40 140 a@1\n140 200 sil\n200 240 b@2\n240 300 sil",
            &mut inv,
        );
        let points = alignment_points(&src, &tgt).unwrap();
        assert_eq!(points.len(), 3);
        assert_eq!(points[1].src_silence, (120, 170));
        assert_eq!(points[1].tgt_silence, (140, 200));
        let frags = enumerate_fragments(&points, 28, 30, 10.0);
        assert_eq!(frags.len(), 3);
    }

    #[test]
    fn two_silences_give_one_fragment() {
        let mut inv = Inventory::default();
        let src = lab("0 50 sil\n50 120 a@1\n120 170 sil", &mut inv);
        let points = alignment_points(&src, &src).unwrap();
        assert_eq!(points.len(), 2);
        assert_eq!(enumerate_fragments(&points, 17, 17, 10.0).len(), 1);
    }

    #[test]
    fn silence_count_mismatch_is_an_error() {
        let mut inv = Inventory::default();
        let src = lab(
            "0 50 sil\n50 120 a@1\n120 170 sil\n170 230 b@2\n230 280 sil",
            &mut inv,
        );
        let tgt = lab("0 50 sil\n50 120 a@1\n120 230 b@2\n230 280 sil", &mut inv);
        assert!(matches!(
            alignment_points(&src, &tgt),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn content_mismatch_is_an_error() {
        let mut inv = Inventory::default();
        let src = lab("0 50 sil\n50 120 a@1\n120 170 sil", &mut inv);
        let tgt = lab("0 50 sil\n50 120 a@2\n120 170 sil", &mut inv);
        assert!(alignment_points(&src, &tgt).is_err());
    }

    #[test]
    fn cuts_sit_at_silence_midpoints() {
        let mut inv = Inventory::default();
        let src = lab("0 40 sil\n40 100 a@1\n100 160 sil", &mut inv);
        let points = alignment_points(&src, &src).unwrap();
        let f = enumerate_fragments(&points, 16, 16, 10.0)[0];
        assert_eq!(f.src_range, (2, 14));
    }

    #[test]
    fn single_fragment_is_forced() {
        let mut inv = Inventory::default();
        let v = SyntheticVoices::new(SynthConfig::default()).unwrap();
        let mut pair = v.pair(0).unwrap();
        pair.src_lab = lab("0 50 sil\n50 120 a@1\n120 170 sil", &mut inv);
        pair.tgt_lab = pair.src_lab.clone();
        let frames = crate::features::FrameMatrix::zeros(17, pair.src.dim());
        pair.src = crate::features::FeatureTrack::new(frames.clone(), 10.0).unwrap();
        pair.tgt = crate::features::FeatureTrack::new(frames, 10.0).unwrap();
        let prepared = PreparedPair::new(&pair).unwrap();
        let expect = prepared.fragment(&prepared.fragments[0]);
        let mut rng = stream(&[1]);
        for _ in 0..10 {
            assert_eq!(sample_fragment(&prepared, &mut rng), expect);
        }
    }

    #[test]
    fn whole_fallback_equals_baseline_sample() {
        let v = SyntheticVoices::new(SynthConfig::default()).unwrap();
        let mut pair = v.pair(1).unwrap();
        // Break the silence pairing so no fragments exist.
        pair.tgt_lab
            .segments
            .retain(|s| !s.is_silence() || s.start_ms == 0);
        let mut t = 0;
        for s in &mut pair.tgt_lab.segments {
            let len = s.end_ms - s.start_ms;
            s.start_ms = t;
            s.end_ms = t + len;
            t += len;
        }
        let last = pair.tgt_lab.segments.last_mut().unwrap();
        last.end_ms = (pair.tgt.len() as u32) * 10;
        let prepared = PreparedPair::new(&pair).unwrap();
        assert!(prepared.fragments.is_empty());
        assert_eq!(
            sample_fragment(&prepared, &mut stream(&[3])),
            prepared.whole()
        );
    }
}
