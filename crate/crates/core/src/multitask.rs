//! Auxiliary phoneme and tone classifiers on the encoder output and the
//! decoder-RNN input.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{BlockMask, Graph, Var};
use crate::error::{Error, Result};
use crate::features::FrameLabel;
use crate::model::{dropout_row, Bound, HeadLayout, Linear, Scent};
use crate::numeric::{argmax, logsumexp};
use crate::rng::stream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub phoneme: f64,
    pub tone: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            phoneme: 0.1,
            tone: 0.05,
        }
    }
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        phoneme: 0.0,
        tone: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.phoneme >= 0.0 && self.tone >= 0.0) {
            return Err(Error::Config(
                "classifier loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassifierHead {
    pub layout: HeadLayout,
    pub dropout: f64,
    /// Keys the dropout stream so the two heads draw different masks.
    pub id: u64,
}

impl ClassifierHead {
    /// The encoder-tap and decoder-tap heads of a model.
    pub fn pair(model: &Scent, dropout: f64) -> Result<[ClassifierHead; 2]> {
        let [enc, dec] = model
            .heads()
            .ok_or_else(|| Error::Model("model has no classifier heads".into()))?;
        Ok([
            ClassifierHead {
                layout: enc,
                dropout,
                id: 1,
            },
            ClassifierHead {
                layout: dec,
                dropout,
                id: 2,
            },
        ])
    }
}

fn project(g: &mut Graph, b: &Bound, l: Linear, x: Var) -> Var {
    let y = g.matmul(x, b.var(l.w));
    g.add_row(y, b.var(l.b))
}

/// Phoneme and tone logits for every row of `hidden`. `training` carries
/// `(seed, step)` and enables dropout.
pub fn classify(
    g: &mut Graph,
    b: &Bound,
    hidden: Var,
    head: &ClassifierHead,
    training: Option<(u64, u64)>,
) -> (Var, Var) {
    let mut h = hidden;
    if let Some((seed, step)) = training {
        if head.dropout > 0.0 {
            let (rows, cols) = g.shape(hidden);
            let mut mask = Tensor::zeros(rows, cols);
            let mut rng = stream(&[seed, step, head.id]);
            for r in 0..rows {
                dropout_row(&mut rng, mask.row_mut(r), head.dropout);
            }
            h = g.mul_const(hidden, Rc::new(mask));
        }
    }
    (
        project(g, b, head.layout.phoneme, h),
        project(g, b, head.layout.tone, h),
    )
}

fn check_targets(rows: usize, classes: usize, targets: &[usize], mask: &[bool]) -> Result<usize> {
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Invalid(
            "targets and mask must have one entry per row".into(),
        ));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Invalid("empty mask".into()));
    }
    if let Some(t) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= classes) {
        return Err(Error::Invalid(format!(
            "target class {} out of range for {classes} classes",
            t.0
        )));
    }
    Ok(count)
}

/// Mean of `-log softmax(logits)[t, target_t]` over rows where `mask` is set.
pub fn masked_cross_entropy(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    let count = check_targets(logits.rows(), logits.cols(), targets, mask)?;
    let total: f64 = (0..logits.rows())
        .filter(|&r| mask[r])
        .map(|r| logsumexp(logits.row(r)) - logits.row(r)[targets[r]])
        .sum();
    Ok(total / count as f64)
}

/// Graph form of [`masked_cross_entropy`].
pub fn masked_cross_entropy_var(
    g: &mut Graph,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let (rows, cols) = g.shape(logits);
    let count = check_targets(rows, cols, targets, mask)?;
    let w = mask
        .iter()
        .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
        .collect();
    let safe = targets
        .iter()
        .zip(mask)
        .map(|(&t, &m)| if m { t } else { 0 })
        .collect();
    Ok(g.cross_entropy(logits, Rc::new(safe), Rc::new(w)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub mel: f64,
    pub stop: f64,
    pub enc_phoneme: f64,
    pub enc_tone: f64,
    pub dec_phoneme: f64,
    pub dec_tone: f64,
}

pub fn total_loss(p: &LossParts, w: &LossWeights) -> f64 {
    p.mel
        + p.stop
        + w.phoneme * (p.enc_phoneme + p.dec_phoneme)
        + w.tone * (p.enc_tone + p.dec_tone)
}

/// Classifier losses of both heads, as graph nodes, plus per-head accuracy counts.
#[derive(Clone, Copy, Debug)]
pub struct HeadLosses {
    pub enc_phoneme: Var,
    pub enc_tone: Var,
    pub dec_phoneme: Var,
    pub dec_tone: Var,
    pub counts: AccuracyCounts,
}

/// Correct predictions and frames seen, per head and task.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCounts {
    pub frames_enc: usize,
    pub frames_dec: usize,
    pub enc_phoneme: usize,
    pub enc_tone: usize,
    pub dec_phoneme: usize,
    pub dec_tone: usize,
}

impl AccuracyCounts {
    pub fn add(&mut self, o: &AccuracyCounts) {
        self.frames_enc += o.frames_enc;
        self.frames_dec += o.frames_dec;
        self.enc_phoneme += o.enc_phoneme;
        self.enc_tone += o.enc_tone;
        self.dec_phoneme += o.dec_phoneme;
        self.dec_tone += o.dec_tone;
    }

    fn ratio(n: usize, d: usize) -> f64 {
        if d == 0 {
            0.0
        } else {
            n as f64 / d as f64
        }
    }

    pub fn enc_phoneme_acc(&self) -> f64 {
        Self::ratio(self.enc_phoneme, self.frames_enc)
    }

    pub fn enc_tone_acc(&self) -> f64 {
        Self::ratio(self.enc_tone, self.frames_enc)
    }

    pub fn dec_phoneme_acc(&self) -> f64 {
        Self::ratio(self.dec_phoneme, self.frames_dec)
    }

    pub fn dec_tone_acc(&self) -> f64 {
        Self::ratio(self.dec_tone, self.frames_dec)
    }
}

fn correct(logits: &Tensor, targets: &[usize], mask: &[bool]) -> usize {
    (0..logits.rows())
        .filter(|&r| mask[r] && argmax(logits.row(r)) == targets[r])
        .count()
}

/// Runs both heads on their taps against source-side (encoder) and
/// target-side (decoder) frame labels.
#[allow(clippy::too_many_arguments)]
pub fn head_losses(
    g: &mut Graph,
    b: &Bound,
    heads: &[ClassifierHead; 2],
    taps: [Var; 2],
    labels: [&[FrameLabel]; 2],
    masks: [&BlockMask; 2],
    training: Option<(u64, u64)>,
) -> Result<HeadLosses> {
    let mut losses = [Var::default(); 4];
    let mut counts = AccuracyCounts::default();
    for side in 0..2 {
        let (ph_logits, tone_logits) = classify(g, b, taps[side], &heads[side], training);
        let flags = masks[side].flags();
        let ph: Vec<usize> = labels[side].iter().map(|l| l.phoneme).collect();
        let tone: Vec<usize> = labels[side].iter().map(|l| l.tone).collect();
        losses[2 * side] = masked_cross_entropy_var(g, ph_logits, &ph, &flags)?;
        losses[2 * side + 1] = masked_cross_entropy_var(g, tone_logits, &tone, &flags)?;
        let frames = flags.iter().filter(|&&f| f).count();
        let c_ph = correct(g.value(ph_logits), &ph, &flags);
        let c_tone = correct(g.value(tone_logits), &tone, &flags);
        if side == 0 {
            counts.frames_enc = frames;
            counts.enc_phoneme = c_ph;
            counts.enc_tone = c_tone;
        } else {
            counts.frames_dec = frames;
            counts.dec_phoneme = c_ph;
            counts.dec_tone = c_tone;
        }
    }
    Ok(HeadLosses {
        enc_phoneme: losses[0],
        enc_tone: losses[1],
        dec_phoneme: losses[2],
        dec_tone: losses[3],
        counts,
    })
}

/// Graph form of [`total_loss`]. Classifier terms are left out entirely when
/// `heads` is `None`.
pub fn total_loss_var(
    g: &mut Graph,
    mel: Var,
    stop: Var,
    heads: Option<&HeadLosses>,
    w: &LossWeights,
) -> Var {
    let mut terms = vec![(mel, 1.0), (stop, 1.0)];
    if let Some(h) = heads {
        terms.extend([
            (h.enc_phoneme, w.phoneme),
            (h.dec_phoneme, w.phoneme),
            (h.enc_tone, w.tone),
            (h.dec_tone, w.tone),
        ]);
    }
    g.combine(&terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_tensor, Init, ModelConfig};
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn uniform_logits_give_log_classes() {
        let l = Tensor::zeros(3, 10);
        let ce = masked_cross_entropy(&l, &[1, 4, 9], &[true, true, false]).unwrap();
        assert!((ce - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logits_give_near_zero() {
        let mut l = Tensor::zeros(2, 5);
        l.set(0, 2, 20.0);
        l.set(1, 0, 20.0);
        assert!(masked_cross_entropy(&l, &[2, 0], &[true, true]).unwrap() < 1e-6);
    }

    #[test]
    fn empty_mask_is_an_error() {
        let err = masked_cross_entropy(&Tensor::zeros(2, 3), &[0, 1], &[false, false]).unwrap_err();
        assert!(err.to_string().contains("empty mask"));
    }

    #[test]
    fn matches_brute_force_and_graph_form() {
        let mut rng = stream(&[3]);
        let l = init_tensor(6, 4, Init::Uniform(3.0), 1, "l");
        let targets: Vec<usize> = (0..6).map(|_| rng.random_range(0..4)).collect();
        let mask = [true, false, true, true, false, true];
        let mut sum = 0.0;
        let mut n = 0.0;
        for r in 0..6 {
            if mask[r] {
                let z: f64 = l.row(r).iter().map(|v| v.exp()).sum();
                sum += -(l.get(r, targets[r]).exp() / z).ln();
                n += 1.0;
            }
        }
        let ce = masked_cross_entropy(&l, &targets, &mask).unwrap();
        assert!((ce - sum / n).abs() < 1e-12);
        let mut g = Graph::new();
        let v = g.constant(l);
        let node = masked_cross_entropy_var(&mut g, v, &targets, &mask).unwrap();
        assert!((g.value(node).item() - ce).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let p = LossParts {
            mel: 2.0,
            stop: 0.0,
            enc_phoneme: 1.0,
            enc_tone: 1.0,
            dec_phoneme: 1.0,
            dec_tone: 1.0,
        };
        assert!((total_loss(&p, &LossWeights::default()) - 2.3).abs() < 1e-12);
        let base = LossParts {
            mel: 1.5,
            stop: 0.25,
            ..Default::default()
        };
        assert_eq!(total_loss(&base, &LossWeights::default()), 1.75);
        let p = LossParts {
            mel: 1.5,
            stop: 0.25,
            enc_phoneme: 3.0,
            ..Default::default()
        };
        assert_eq!(total_loss(&p, &LossWeights::ZERO), 1.75);
    }

    fn setup() -> (Scent, [ClassifierHead; 2]) {
        let m = Scent::new(ModelConfig::tiny(), 3).unwrap();
        let heads = ClassifierHead::pair(&m, 0.5).unwrap();
        (m, heads)
    }

    #[test]
    fn inference_is_deterministic_and_zero_dropout_matches() {
        let (m, heads) = setup();
        let x = init_tensor(5, 8, Init::Uniform(1.0), 2, "x");
        let run = |head: &ClassifierHead, training| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let h = g.constant(x.clone());
            let (p, t) = classify(&mut g, &b, h, head, training);
            (g.value(p).clone(), g.value(t).clone())
        };
        assert_eq!(run(&heads[0], None), run(&heads[0], None));
        assert_ne!(run(&heads[0], Some((1, 1))), run(&heads[0], None));
        let no_drop = ClassifierHead {
            dropout: 0.0,
            ..heads[0]
        };
        assert_eq!(run(&no_drop, Some((1, 1))), run(&no_drop, None));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let (m, heads) = setup();
        let x = init_tensor(5, 8, Init::Uniform(1.0), 2, "x");
        let targets = [0, 1, 4, 2, 3];
        let mask = [true; 5];
        let loss = |x: Tensor| {
            let mut g = Graph::new();
            let b = m.bind(&mut g, false);
            let h = g.param(x);
            let (p, t) = classify(&mut g, &b, h, &heads[0], None);
            let lp = masked_cross_entropy_var(&mut g, p, &targets, &mask).unwrap();
            let lt = masked_cross_entropy_var(&mut g, t, &[0, 1, 2, 1, 0], &mask).unwrap();
            let total = g.combine(&[(lp, 0.1), (lt, 0.05)]);
            (g, h, total)
        };
        let (g, h, total) = loss(x.clone());
        let grads = g.backward(total);
        let analytic = grads.get(h).unwrap();
        let eps = 1e-4;
        for i in (0..x.len()).step_by(2) {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let (gp, _, lp) = loss(xp);
            let (gm, _, lm) = loss(xm);
            let numeric = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (a - numeric).abs() <= 1e-3 * a.abs().max(numeric.abs()) + 1e-8,
                "{i}: {a} vs {numeric}"
            );
        }
    }

    proptest! {
        #[test]
        fn shift_invariant(shift in -50.0f64..50.0, seed in 0u64..1000) {
            let l = init_tensor(4, 3, Init::Uniform(2.0), seed, "l");
            let targets = [0, 2, 1, 2];
            let mask = [true, true, false, true];
            let mut shifted = l.clone();
            for r in 0..4 {
                let s = shift * (r as f64 + 1.0);
                shifted.row_mut(r).iter_mut().for_each(|v| *v += s);
            }
            let a = masked_cross_entropy(&l, &targets, &mask).unwrap();
            let b = masked_cross_entropy(&shifted, &targets, &mask).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
