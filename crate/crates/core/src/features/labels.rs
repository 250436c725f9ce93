//! Forced-alignment label sequences.
//!
//! Label files hold one segment per line, `start_ms end_ms label`, where the
//! label is `sil` or `phoneme@tone`. Phoneme id 0 is silence, which carries
//! tone id 0.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const SILENCE: usize = 0;
pub const NO_TONE: usize = 0;
pub const SILENCE_NAME: &str = "sil";
/// Tone ids 1..=5 plus the reserved "no tone" id.
pub const DEFAULT_TONE_COUNT: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FrameLabel {
    pub phoneme: usize,
    pub tone: usize,
}

impl FrameLabel {
    pub const SILENCE: FrameLabel = FrameLabel {
        phoneme: SILENCE,
        tone: NO_TONE,
    };

    pub fn is_silence(self) -> bool {
        self.phoneme == SILENCE
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start_ms: u32,
    pub end_ms: u32,
    pub phoneme: usize,
    pub tone: usize,
}

impl Segment {
    pub fn label(&self) -> FrameLabel {
        FrameLabel {
            phoneme: self.phoneme,
            tone: self.tone,
        }
    }

    pub fn is_silence(&self) -> bool {
        self.phoneme == SILENCE
    }

    pub fn mid_ms(&self) -> f64 {
        (self.start_ms as f64 + self.end_ms as f64) / 2.0
    }
}

/// Maps phoneme names to dense ids; id 0 is always `sil`.
#[derive(Clone, Debug, PartialEq)]
pub struct Inventory {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tone_count: usize,
}

impl Default for Inventory {
    fn default() -> Self {
        Inventory::new(DEFAULT_TONE_COUNT)
    }
}

impl Inventory {
    pub fn new(tone_count: usize) -> Self {
        let mut inv = Inventory {
            names: Vec::new(),
            index: HashMap::new(),
            tone_count,
        };
        inv.id_for(SILENCE_NAME);
        inv
    }

    pub fn from_names(names: &[String], tone_count: usize) -> Result<Self> {
        if names.first().map(String::as_str) != Some(SILENCE_NAME) {
            return Err(Error::Invalid("inventory must start with `sil`".into()));
        }
        let mut inv = Inventory::new(tone_count);
        for n in &names[1..] {
            if inv.index.contains_key(n) {
                return Err(Error::Invalid(format!(
                    "duplicate phoneme `{n}` in inventory"
                )));
            }
            inv.id_for(n);
        }
        Ok(inv)
    }

    /// Id of `name`, assigning a fresh one for unseen names.
    pub fn id_for(&mut self, name: &str) -> usize {
        if let Some(&id) = self.index.get(name) {
            return id;
        }
        let id = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn tone_count(&self) -> usize {
        self.tone_count
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentSeq {
    pub segments: Vec<Segment>,
    pub inventory_size: usize,
    pub tone_count: usize,
}

impl SegmentSeq {
    /// Checks contiguity, start at zero and the silence/tone conventions.
    pub fn new(segments: Vec<Segment>, inventory_size: usize, tone_count: usize) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::EmptyLabels);
        }
        let mut expected_start = 0;
        for (i, s) in segments.iter().enumerate() {
            let line = i + 1;
            if s.start_ms != expected_start {
                let kind = if s.start_ms > expected_start {
                    "gap"
                } else {
                    "overlap"
                };
                return Err(Error::LabelParse {
                    line,
                    msg: kind.into(),
                });
            }
            if s.end_ms <= s.start_ms {
                return Err(Error::LabelParse {
                    line,
                    msg: "empty segment".into(),
                });
            }
            if s.phoneme >= inventory_size || s.tone >= tone_count {
                return Err(Error::LabelParse {
                    line,
                    msg: "label id out of range".into(),
                });
            }
            if s.is_silence() != (s.tone == NO_TONE) {
                return Err(Error::LabelParse {
                    line,
                    msg: "tone 0 is reserved for silence".into(),
                });
            }
            expected_start = s.end_ms;
        }
        Ok(SegmentSeq {
            segments,
            inventory_size,
            tone_count,
        })
    }

    pub fn end_ms(&self) -> u32 {
        self.segments.last().map_or(0, |s| s.end_ms)
    }

    /// Non-silence `(phoneme, tone)` labels in order.
    pub fn content(&self) -> Vec<FrameLabel> {
        self.segments
            .iter()
            .filter(|s| !s.is_silence())
            .map(Segment::label)
            .collect()
    }

    pub fn silences(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.is_silence())
    }
}

fn parse_field<'a>(field: Option<&'a str>, line: usize, what: &str) -> Result<&'a str> {
    field.ok_or_else(|| Error::LabelParse {
        line,
        msg: format!("missing {what}"),
    })
}

fn parse_time(field: &str, line: usize) -> Result<u32> {
    let v: i64 = field.parse().map_err(|_| Error::LabelParse {
        line,
        msg: format!("bad time `{field}`"),
    })?;
    if v < 0 {
        return Err(Error::LabelParse {
            line,
            msg: "negative time".into(),
        });
    }
    u32::try_from(v).map_err(|_| Error::LabelParse {
        line,
        msg: "time out of range".into(),
    })
}

/// Parses a label file. Unknown phoneme names get fresh ids in `inventory`.
pub fn parse_lab(text: &str, inventory: &mut Inventory) -> Result<SegmentSeq> {
    let mut segments = Vec::new();
    let mut expected_start = 0;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let mut fields = raw.split_whitespace();
        let start_ms = parse_time(parse_field(fields.next(), line, "start time")?, line)?;
        let end_ms = parse_time(parse_field(fields.next(), line, "end time")?, line)?;
        let label = parse_field(fields.next(), line, "label")?;
        if fields.next().is_some() {
            return Err(Error::LabelParse {
                line,
                msg: "trailing fields".into(),
            });
        }
        if start_ms > expected_start {
            return Err(Error::LabelParse {
                line,
                msg: "gap".into(),
            });
        }
        if start_ms < expected_start {
            return Err(Error::LabelParse {
                line,
                msg: "overlap".into(),
            });
        }
        if end_ms <= start_ms {
            return Err(Error::LabelParse {
                line,
                msg: "empty segment".into(),
            });
        }
        let (phoneme, tone) = if label == SILENCE_NAME {
            (SILENCE, NO_TONE)
        } else {
            let (name, tone) = label.split_once('@').ok_or_else(|| Error::LabelParse {
                line,
                msg: format!("label `{label}` is not `phoneme@tone`"),
            })?;
            let tone: usize = tone.parse().map_err(|_| Error::LabelParse {
                line,
                msg: format!("bad tone `{tone}`"),
            })?;
            if tone == NO_TONE || tone >= inventory.tone_count() {
                return Err(Error::LabelParse {
                    line,
                    msg: format!("tone {tone} out of range"),
                });
            }
            if name.is_empty() || name == SILENCE_NAME {
                return Err(Error::LabelParse {
                    line,
                    msg: format!("bad phoneme `{name}`"),
                });
            }
            (inventory.id_for(name), tone)
        };
        segments.push(Segment {
            start_ms,
            end_ms,
            phoneme,
            tone,
        });
        expected_start = end_ms;
    }
    if segments.is_empty() {
        return Err(Error::EmptyLabels);
    }
    SegmentSeq::new(segments, inventory.len(), inventory.tone_count())
}

pub fn format_lab(lab: &SegmentSeq, inventory: &Inventory) -> Result<String> {
    let mut out = String::new();
    for s in &lab.segments {
        let name = inventory
            .name(s.phoneme)
            .ok_or_else(|| Error::Invalid(format!("phoneme id {} not in inventory", s.phoneme)))?;
        if s.is_silence() {
            writeln!(out, "{} {} {}", s.start_ms, s.end_ms, SILENCE_NAME).unwrap();
        } else {
            writeln!(out, "{} {} {}@{}", s.start_ms, s.end_ms, name, s.tone).unwrap();
        }
    }
    Ok(out)
}

/// Label of each frame `t`, taken at time `t * hop_ms`. A frame on a segment
/// boundary belongs to the later segment; the final segment's end time is
/// still attributed to it.
pub fn frame_labels(lab: &SegmentSeq, hop_ms: f64, frames: usize) -> Result<Vec<FrameLabel>> {
    if frames == 0 {
        return Ok(Vec::new());
    }
    let needed = (frames - 1) as f64 * hop_ms;
    let covered = lab.end_ms() as f64;
    if covered < needed {
        return Err(Error::LabelsTooShort {
            covered_ms: covered,
            needed_ms: needed,
        });
    }
    let mut out = Vec::with_capacity(frames);
    let mut seg = 0;
    for t in 0..frames {
        let time = t as f64 * hop_ms;
        while seg + 1 < lab.segments.len() && time >= lab.segments[seg].end_ms as f64 {
            seg += 1;
        }
        out.push(lab.segments[seg].label());
    }
    Ok(out)
}

/// Frames `[first, last]` whose sample times fall inside `seg`, if any.
pub fn segment_frames(seg: &Segment, hop_ms: f64, frames: usize) -> Option<(usize, usize)> {
    let first = (seg.start_ms as f64 / hop_ms).ceil() as usize;
    let mut last_excl = (seg.end_ms as f64 / hop_ms).ceil() as usize;
    last_excl = last_excl.min(frames);
    if first >= last_excl {
        return None;
    }
    Some((first, last_excl - 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_silence_and_toned_phonemes() {
        let mut inv = Inventory::default();
        let lab = parse_lab("0 30 sil\n30 90 a@1\n90 120 sil", &mut inv).unwrap();
        assert_eq!(lab.segments.len(), 3);
        let a = inv.id("a").unwrap();
        let labels: Vec<_> = lab.segments.iter().map(|s| (s.phoneme, s.tone)).collect();
        assert_eq!(labels, vec![(0, 0), (a, 1), (0, 0)]);
    }

    #[test]
    fn empty_file_is_an_error() {
        let err = parse_lab("", &mut Inventory::default()).unwrap_err();
        assert_eq!(err.to_string(), "empty label file");
    }

    #[test]
    fn gap_names_the_line() {
        let err = parse_lab("0 30 sil\n40 90 a@1", &mut Inventory::default()).unwrap_err();
        assert!(
            matches!(err, Error::LabelParse { line: 2, ref msg } if msg == "gap"),
            "{err}"
        );
        assert!(err.to_string().contains("gap"));
    }

    #[test]
    fn negative_and_malformed_lines() {
        let mut inv = Inventory::default();
        assert!(matches!(
            parse_lab("-5 30 sil", &mut inv),
            Err(Error::LabelParse { line: 1, .. })
        ));
        assert!(parse_lab("0 30 a", &mut inv).is_err());
        assert!(parse_lab("0 30 a@0", &mut inv).is_err());
        assert!(parse_lab("0 30 sil\n20 40 a@1", &mut inv).is_err());
    }

    #[test]
    fn frame_labels_simple_and_boundary() {
        let mut inv = Inventory::default();
        let lab = parse_lab("0 30 a@1", &mut inv).unwrap();
        let a = FrameLabel {
            phoneme: inv.id("a").unwrap(),
            tone: 1,
        };
        assert_eq!(frame_labels(&lab, 10.0, 3).unwrap(), vec![a, a, a]);

        let lab = parse_lab("0 20 sil\n20 40 a@1", &mut inv).unwrap();
        let s = FrameLabel::SILENCE;
        assert_eq!(frame_labels(&lab, 10.0, 4).unwrap(), vec![s, s, a, a]);
    }

    #[test]
    fn frame_labels_rejects_short_labels() {
        let mut inv = Inventory::default();
        let lab = parse_lab("0 20 sil", &mut inv).unwrap();
        assert!(frame_labels(&lab, 10.0, 3).is_ok());
        assert!(matches!(
            frame_labels(&lab, 10.0, 4),
            Err(Error::LabelsTooShort { .. })
        ));
    }

    #[test]
    fn segment_frame_ranges() {
        let seg = Segment {
            start_ms: 25,
            end_ms: 60,
            phoneme: 0,
            tone: 0,
        };
        assert_eq!(segment_frames(&seg, 10.0, 100), Some((3, 5)));
        let tiny = Segment {
            start_ms: 21,
            end_ms: 29,
            phoneme: 0,
            tone: 0,
        };
        assert_eq!(segment_frames(&tiny, 10.0, 100), None);
    }
}
