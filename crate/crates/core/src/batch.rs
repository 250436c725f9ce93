//! Padding training samples into sample-major batches.

use crate::augment::TrainingSample;
use crate::autodiff::BlockMask;
use crate::error::{Error, Result};
use crate::features::{FrameLabel, FrameMatrix};
use crate::tensor::Tensor;

/// Padded batch. Row `b * T + t` holds frame `t` of sample `b`; padding rows
/// are zero and padding labels are silence.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub src_mask: BlockMask,
    pub tgt_mask: BlockMask,
    pub src: Tensor,
    pub src_bn: Tensor,
    pub tgt: Tensor,
    pub src_labels: Vec<FrameLabel>,
    pub tgt_labels: Vec<FrameLabel>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.ids.len()
    }
}

fn pad(mats: &[&FrameMatrix], steps: usize, dim: usize) -> Tensor {
    let mut out = Tensor::zeros(mats.len() * steps, dim);
    for (b, m) in mats.iter().enumerate() {
        for t in 0..m.frames() {
            for (o, &v) in out.row_mut(b * steps + t).iter_mut().zip(m.row(t)) {
                *o = v as f64;
            }
        }
    }
    out
}

fn pad_labels(labels: &[&[FrameLabel]], steps: usize) -> Vec<FrameLabel> {
    let mut out = vec![FrameLabel::SILENCE; labels.len() * steps];
    for (b, l) in labels.iter().enumerate() {
        out[b * steps..b * steps + l.len()].copy_from_slice(l);
    }
    out
}

pub fn make_batch(samples: &[TrainingSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let (d, db) = (first.src.dim(), first.src_bn.dim());
    for s in samples {
        if s.src_len() == 0 || s.tgt_len() == 0 {
            return Err(Error::Invalid(format!("{}: zero-length sample", s.id)));
        }
        if s.src.dim() != d || s.tgt.dim() != d || s.src_bn.dim() != db {
            return Err(Error::Invalid(format!(
                "{}: feature dimensions differ within batch",
                s.id
            )));
        }
        if s.src_bn.frames() != s.src_len()
            || s.src_labels.len() != s.src_len()
            || s.tgt_labels.len() != s.tgt_len()
        {
            return Err(Error::Invalid(format!(
                "{}: sample streams have different lengths",
                s.id
            )));
        }
    }
    let src_mask = BlockMask::new(samples.iter().map(TrainingSample::src_len).collect());
    let tgt_mask = BlockMask::new(samples.iter().map(TrainingSample::tgt_len).collect());
    let srcs: Vec<&FrameMatrix> = samples.iter().map(|s| &s.src).collect();
    let bns: Vec<&FrameMatrix> = samples.iter().map(|s| &s.src_bn).collect();
    let tgts: Vec<&FrameMatrix> = samples.iter().map(|s| &s.tgt).collect();
    let src_labels: Vec<&[FrameLabel]> = samples.iter().map(|s| s.src_labels.as_slice()).collect();
    let tgt_labels: Vec<&[FrameLabel]> = samples.iter().map(|s| s.tgt_labels.as_slice()).collect();
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        src: pad(&srcs, src_mask.steps, d),
        src_bn: pad(&bns, src_mask.steps, db),
        tgt: pad(&tgts, tgt_mask.steps, d),
        src_labels: pad_labels(&src_labels, src_mask.steps),
        tgt_labels: pad_labels(&tgt_labels, tgt_mask.steps),
        src_mask,
        tgt_mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(id: &str, ts: usize, td: usize) -> TrainingSample {
        let fill = |t: usize, d: usize, off: f32| {
            FrameMatrix::new(t, d, (0..t * d).map(|i| i as f32 + off).collect()).unwrap()
        };
        TrainingSample {
            id: id.into(),
            src: fill(ts, 3, 1.0),
            src_bn: fill(ts, 2, 100.0),
            tgt: fill(td, 3, 7.0),
            src_labels: vec![
                FrameLabel {
                    phoneme: 1,
                    tone: 1
                };
                ts
            ],
            tgt_labels: vec![
                FrameLabel {
                    phoneme: 2,
                    tone: 2
                };
                td
            ],
        }
    }

    #[test]
    fn pads_sample_major() {
        let b = make_batch(&[sample("a", 2, 3), sample("b", 4, 1)]).unwrap();
        assert_eq!(b.src.shape(), (8, 3));
        assert_eq!(b.tgt.shape(), (6, 3));
        assert_eq!(b.src.row(1), &[4.0, 5.0, 6.0]);
        assert_eq!(b.src.row(2), &[0.0; 3]);
        assert_eq!(b.src.row(4), &[1.0, 2.0, 3.0]);
        assert_eq!(b.tgt_labels[3].phoneme, 2);
        assert!(b.tgt_labels[4].is_silence());
        assert_eq!(b.tgt_mask.lens, vec![3, 1]);
    }

    #[test]
    fn rejects_empty_and_zero_length() {
        assert!(make_batch(&[]).is_err());
        assert!(make_batch(&[sample("a", 2, 0)]).is_err());
    }
}
