//! The sequence-to-sequence acoustic model.
//!
//! Encoder: dense ReLU layer over `[features | bottleneck]`, then a
//! bidirectional GRU. Decoder step: PreNet on the previous frame, attention
//! GRU, location-aware additive attention, decoder GRU on
//! `[context | attention state]`, and a projection to mixture parameters plus
//! a stop logit. A residual convolutional PostNet refines the coarse frames.
//!
//! Everything runs on normalised features; the model owns the statistics.

pub mod config;
pub mod params;

use std::path::Path;
use std::rc::Rc;

use rand::Rng as _;
use serde_json::json;

pub use config::ModelConfig;
pub use params::{
    decode_checkpoint, init_tensor, read_checkpoint, write_checkpoint, CheckpointData, Init, Param,
    ParamKind, ParamStore,
};

use crate::autodiff::{BlockMask, Graph, Var};
use crate::batch::Batch;
use crate::error::{Error, Result};
use crate::features::{BottleneckTrack, FeatureTrack, FrameMatrix};
use crate::mdn::row_nll;
use crate::numeric::{argmax, bce_with_logit, sigmoid};
use crate::rng::{stream, Rng};
use crate::tensor::Tensor;

const CHECKPOINT_FORMAT: &str = "scent-model";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Gru {
    w_ih: usize,
    b_ih: usize,
    w_hh: usize,
    b_hh: usize,
    hidden: usize,
}

/// Phoneme and tone projections of one auxiliary classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadLayout {
    pub phoneme: Linear,
    pub tone: Linear,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    enc_pre: Linear,
    enc_fwd: Gru,
    enc_bwd: Gru,
    prenet: [Linear; 2],
    att_rnn: Gru,
    query: usize,
    key: usize,
    att_bias: usize,
    loc_conv: usize,
    loc_proj: usize,
    att_v: usize,
    dec_rnn: Gru,
    out: Linear,
    postnet: Vec<Linear>,
    heads: Option<[HeadLayout; 2]>,
    norm: [usize; 6],
}

struct Spec {
    name: String,
    rows: usize,
    cols: usize,
    kind: ParamKind,
    init: Init,
}

#[derive(Default)]
struct Specs(Vec<Spec>);

impl Specs {
    fn push(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        kind: ParamKind,
        init: Init,
    ) {
        self.0.push(Spec {
            name: name.into(),
            rows,
            cols,
            kind,
            init,
        });
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, kind: ParamKind) {
        self.push(
            format!("{name}.w"),
            i,
            o,
            kind,
            Init::Xavier {
                fan_in: i,
                fan_out: o,
            },
        );
        self.push(format!("{name}.b"), 1, o, kind, Init::Zeros);
    }

    fn gru(&mut self, name: &str, i: usize, h: usize) {
        let a = 1.0 / (h as f64).sqrt();
        let inf = ParamKind::Inference;
        self.push(format!("{name}.w_ih"), i, 3 * h, inf, Init::Uniform(a));
        self.push(format!("{name}.b_ih"), 1, 3 * h, inf, Init::Zeros);
        self.push(format!("{name}.w_hh"), h, 3 * h, inf, Init::Uniform(a));
        self.push(format!("{name}.b_hh"), 1, 3 * h, inf, Init::Zeros);
    }
}

fn param_specs(c: &ModelConfig) -> Vec<Spec> {
    let mut s = Specs::default();
    let inf = ParamKind::Inference;
    let xavier = |i: usize, o: usize| Init::Xavier {
        fan_in: i,
        fan_out: o,
    };
    let d = c.feat_dim;
    let he = c.encoder_hidden;
    s.linear("enc.prenet", d + c.bottleneck_dim, c.encoder_prenet, inf);
    s.gru("enc.fwd", c.encoder_prenet, he / 2);
    s.gru("enc.bwd", c.encoder_prenet, he / 2);
    s.linear("dec.prenet1", d, c.prenet[0], inf);
    s.linear("dec.prenet2", c.prenet[0], c.prenet[1], inf);
    s.gru("dec.att_rnn", c.prenet[1] + he, c.attention_rnn);
    let a = c.attention_dim;
    s.push(
        "att.query.w",
        c.attention_rnn,
        a,
        inf,
        xavier(c.attention_rnn, a),
    );
    s.push("att.key.w", he, a, inf, xavier(he, a));
    s.push("att.bias", 1, a, inf, Init::Zeros);
    let k = c.location_kernel;
    s.push(
        "att.loc_conv.w",
        c.location_filters,
        k,
        inf,
        Init::Uniform(1.0 / (k as f64).sqrt()),
    );
    s.push(
        "att.loc_proj.w",
        c.location_filters,
        a,
        inf,
        xavier(c.location_filters, a),
    );
    s.push("att.v.w", a, 1, inf, xavier(a, 1));
    s.gru("dec.rnn", he + c.attention_rnn, c.decoder_rnn);
    s.linear("dec.out", c.decoder_rnn + he, c.output_width(), inf);
    for l in 0..c.postnet_layers {
        let cin = if l == 0 { d } else { c.postnet_channels };
        let last = l + 1 == c.postnet_layers;
        let cout = if last { d } else { c.postnet_channels };
        let fan = c.postnet_kernel * cin;
        let init = if last { Init::Zeros } else { xavier(fan, cout) };
        s.push(format!("postnet.{l}.w"), cout, fan, inf, init);
        s.push(format!("postnet.{l}.b"), 1, cout, inf, Init::Zeros);
    }
    for (tap, width) in [("enc", he), ("dec", c.decoder_tap_width())] {
        s.linear(
            &format!("cls.{tap}.phoneme"),
            width,
            c.phoneme_classes,
            ParamKind::Classifier,
        );
        s.linear(
            &format!("cls.{tap}.tone"),
            width,
            c.tone_classes,
            ParamKind::Classifier,
        );
    }
    for (name, dim) in [("src", d), ("bn", c.bottleneck_dim), ("tgt", d)] {
        s.push(
            format!("norm.{name}.mean"),
            1,
            dim,
            ParamKind::Statistic,
            Init::Zeros,
        );
        s.push(
            format!("norm.{name}.std"),
            1,
            dim,
            ParamKind::Statistic,
            Init::Const(1.0),
        );
    }
    s.0
}

fn build_layout(c: &ModelConfig, store: &ParamStore) -> Result<Layout> {
    let idx = |name: &str| {
        store
            .find(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))
    };
    let lin = |name: &str| -> Result<Linear> {
        Ok(Linear {
            w: idx(&format!("{name}.w"))?,
            b: idx(&format!("{name}.b"))?,
        })
    };
    let gru = |name: &str, hidden: usize| -> Result<Gru> {
        Ok(Gru {
            w_ih: idx(&format!("{name}.w_ih"))?,
            b_ih: idx(&format!("{name}.b_ih"))?,
            w_hh: idx(&format!("{name}.w_hh"))?,
            b_hh: idx(&format!("{name}.b_hh"))?,
            hidden,
        })
    };
    let heads = if store.find("cls.enc.phoneme.w").is_some() {
        let head = |tap: &str| -> Result<HeadLayout> {
            Ok(HeadLayout {
                phoneme: lin(&format!("cls.{tap}.phoneme"))?,
                tone: lin(&format!("cls.{tap}.tone"))?,
            })
        };
        Some([head("enc")?, head("dec")?])
    } else {
        None
    };
    Ok(Layout {
        enc_pre: lin("enc.prenet")?,
        enc_fwd: gru("enc.fwd", c.encoder_hidden / 2)?,
        enc_bwd: gru("enc.bwd", c.encoder_hidden / 2)?,
        prenet: [lin("dec.prenet1")?, lin("dec.prenet2")?],
        att_rnn: gru("dec.att_rnn", c.attention_rnn)?,
        query: idx("att.query.w")?,
        key: idx("att.key.w")?,
        att_bias: idx("att.bias")?,
        loc_conv: idx("att.loc_conv.w")?,
        loc_proj: idx("att.loc_proj.w")?,
        att_v: idx("att.v.w")?,
        dec_rnn: gru("dec.rnn", c.decoder_rnn)?,
        out: lin("dec.out")?,
        postnet: (0..c.postnet_layers)
            .map(|l| lin(&format!("postnet.{l}")))
            .collect::<Result<_>>()?,
        heads,
        norm: [
            idx("norm.src.mean")?,
            idx("norm.src.std")?,
            idx("norm.bn.mean")?,
            idx("norm.bn.std")?,
            idx("norm.tgt.mean")?,
            idx("norm.tgt.std")?,
        ],
    })
}

/// Per-channel mean and standard deviation of the three input streams.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub src_mean: Vec<f64>,
    pub src_std: Vec<f64>,
    pub bn_mean: Vec<f64>,
    pub bn_std: Vec<f64>,
    pub tgt_mean: Vec<f64>,
    pub tgt_std: Vec<f64>,
}

fn moments<'a>(mats: impl Iterator<Item = &'a FrameMatrix>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut n = 0usize;
    for m in mats {
        for t in 0..m.frames() {
            for (d, &v) in m.row(t).iter().enumerate() {
                sum[d] += v as f64;
                sq[d] += (v as f64) * (v as f64);
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let s = (q / n - m * m).max(0.0).sqrt();
            if s < 1e-6 {
                1.0
            } else {
                s
            }
        })
        .collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity(feat_dim: usize, bn_dim: usize) -> Self {
        Normalizer {
            src_mean: vec![0.0; feat_dim],
            src_std: vec![1.0; feat_dim],
            bn_mean: vec![0.0; bn_dim],
            bn_std: vec![1.0; bn_dim],
            tgt_mean: vec![0.0; feat_dim],
            tgt_std: vec![1.0; feat_dim],
        }
    }

    /// Statistics over `(source, bottleneck, target)` matrices.
    pub fn fit<'a>(data: &[(&'a FrameMatrix, &'a FrameMatrix, &'a FrameMatrix)]) -> Result<Self> {
        let first = data
            .first()
            .ok_or_else(|| Error::Invalid("no data to fit normaliser".into()))?;
        let (src_mean, src_std) = moments(data.iter().map(|x| x.0), first.0.dim());
        let (bn_mean, bn_std) = moments(data.iter().map(|x| x.1), first.1.dim());
        let (tgt_mean, tgt_std) = moments(data.iter().map(|x| x.2), first.2.dim());
        Ok(Normalizer {
            src_mean,
            src_std,
            bn_mean,
            bn_std,
            tgt_mean,
            tgt_std,
        })
    }
}

/// Attention weights of one utterance, `[T_dec x T_enc]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub weights: Tensor,
}

impl AttentionTrace {
    pub fn dec_len(&self) -> usize {
        self.weights.rows()
    }

    pub fn enc_len(&self) -> usize {
        self.weights.cols()
    }

    pub fn rows_are_distributions(&self, tol: f64) -> bool {
        (0..self.weights.rows()).all(|i| {
            let r = self.weights.row(i);
            r.iter().all(|&w| w >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= tol
        })
    }
}

/// Graph handles for every tensor in a [`ParamStore`], by store index.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Debug)]
pub struct EncoderMemory {
    /// `[B*T x H]`, sample-major.
    pub memory: Var,
    keys: Var,
    flags: Rc<Vec<bool>>,
    pub batch: usize,
    pub steps: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub h_att: Var,
    pub h_dec: Var,
    pub context: Var,
    /// Previous attention weights, `[B x T_enc]`.
    pub weights: Var,
    batch: usize,
    enc_steps: usize,
}

impl DecoderState {
    /// A placeholder that every decoder call rejects.
    pub fn uninitialized() -> Self {
        let v = Var::default();
        DecoderState {
            h_att: v,
            h_dec: v,
            context: v,
            weights: v,
            batch: 0,
            enc_steps: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    pub logits: Var,
    pub means: Var,
    pub log_sigmas: Var,
    pub stop: Var,
    pub weights: Var,
    /// Decoder-RNN input `[context | attention state]`.
    pub tap: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleLoss {
    pub mel: f64,
    pub stop: f64,
}

pub struct ForwardOutput {
    pub mel_loss: Var,
    pub stop_loss: Var,
    /// Encoder memory, `[B*T_src x H]`.
    pub enc_tap: Var,
    /// Decoder-RNN inputs, `[B*T_tgt x (H + attention_rnn)]`.
    pub dec_tap: Var,
    pub refined: Var,
    pub attention: Vec<AttentionTrace>,
    pub per_sample: Vec<SampleLoss>,
}

/// Inverted-dropout mask: entries are 0 or `1 / (1 - p)`.
pub fn dropout_row(rng: &mut Rng, out: &mut [f64], p: f64) {
    let keep = 1.0 / (1.0 - p);
    for v in out {
        *v = if rng.random::<f64>() < p { 0.0 } else { keep };
    }
}

const PRENET_STREAM: u64 = 0x9e7;

#[derive(Clone, Debug, PartialEq)]
pub struct Scent {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

impl Scent {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for s in param_specs(&config) {
            let t = init_tensor(s.rows, s.cols, s.init, seed, &s.name);
            params.insert(&s.name, s.kind, t);
        }
        let layout = build_layout(&config, &params)?;
        Ok(Scent {
            config,
            params,
            layout,
        })
    }

    /// Wraps an existing store after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let has_heads = params.find("cls.enc.phoneme.w").is_some();
        for s in param_specs(&config) {
            if s.kind == ParamKind::Classifier && !has_heads {
                continue;
            }
            let t = params
                .get(&s.name)
                .ok_or_else(|| Error::Model(format!("missing parameter {}", s.name)))?;
            if t.shape() != (s.rows, s.cols) {
                return Err(Error::Model(format!(
                    "{}: shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    (s.rows, s.cols)
                )));
            }
            if !t.is_finite() {
                return Err(Error::Model(format!("{}: non-finite values", s.name)));
            }
        }
        let layout = build_layout(&config, &params)?;
        Ok(Scent {
            config,
            params,
            layout,
        })
    }

    pub fn has_classifiers(&self) -> bool {
        self.layout.heads.is_some()
    }

    /// Encoder-tap and decoder-tap classifier layouts.
    pub fn heads(&self) -> Option<[HeadLayout; 2]> {
        self.layout.heads
    }

    /// The same model without auxiliary classifier weights.
    pub fn strip_classifiers(&self) -> Scent {
        let params = self.params.without(ParamKind::Classifier);
        let layout =
            build_layout(&self.config, &params).expect("stripping keeps inference parameters");
        Scent {
            config: self.config.clone(),
            params,
            layout,
        }
    }

    pub fn normalizer(&self) -> Normalizer {
        let v = |i: usize| self.params.param(self.layout.norm[i]).value.data().to_vec();
        Normalizer {
            src_mean: v(0),
            src_std: v(1),
            bn_mean: v(2),
            bn_std: v(3),
            tgt_mean: v(4),
            tgt_std: v(5),
        }
    }

    pub fn set_normalizer(&mut self, n: &Normalizer) -> Result<()> {
        let parts = [
            &n.src_mean,
            &n.src_std,
            &n.bn_mean,
            &n.bn_std,
            &n.tgt_mean,
            &n.tgt_std,
        ];
        for (slot, v) in self.layout.norm.iter().zip(parts) {
            let t = self.params.value_mut(*slot);
            if t.cols() != v.len() {
                return Err(Error::Model("normaliser dimension mismatch".into()));
            }
            t.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    pub fn checkpoint(&self, extra: serde_json::Value) -> Result<CheckpointData> {
        Ok(CheckpointData {
            meta: json!({ "format": CHECKPOINT_FORMAT, "model": self.config, "extra": extra }),
            tensors: self.params.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let data = self.checkpoint(serde_json::Value::Null)?;
        write_checkpoint(path, &data.meta, &data.tensors)
    }

    /// Rebuilds a model from checkpoint data, returning tensors it does not own
    /// (optimizer state) alongside.
    pub fn from_checkpoint(data: CheckpointData) -> Result<(Scent, serde_json::Value, ParamStore)> {
        if data.meta.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Format("checkpoint does not hold a model".into()));
        }
        let config: ModelConfig = serde_json::from_value(data.meta["model"].clone())?;
        let mut own = ParamStore::new();
        let mut rest = ParamStore::new();
        for p in data.tensors.params() {
            let dst = if p.kind == ParamKind::Optimizer {
                &mut rest
            } else {
                &mut own
            };
            dst.insert(&p.name, p.kind, p.value.clone());
        }
        let model = Scent::from_params(config, own)?;
        Ok((model, data.meta["extra"].clone(), rest))
    }

    pub fn load(path: &Path) -> Result<Scent> {
        Ok(Scent::from_checkpoint(read_checkpoint(path)?)?.0)
    }

    /// Adds every tensor to the graph; trainable ones as parameters when
    /// `trainable` is set, everything else as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .params()
            .iter()
            .map(|p| {
                if trainable && p.kind.trainable() {
                    g.param(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn linear(&self, g: &mut Graph, b: &Bound, l: Linear, x: Var) -> Var {
        let y = g.matmul(x, b.var(l.w));
        g.add_row(y, b.var(l.b))
    }

    /// Projects inputs for a GRU: `x W_ih + b_ih`.
    fn gru_input(&self, g: &mut Graph, b: &Bound, cell: Gru, x: Var) -> Var {
        self.linear(
            g,
            b,
            Linear {
                w: cell.w_ih,
                b: cell.b_ih,
            },
            x,
        )
    }

    fn gru_step(&self, g: &mut Graph, b: &Bound, cell: Gru, x_proj: Var, h: Var) -> Var {
        let n = cell.hidden;
        let hh = self.linear(
            g,
            b,
            Linear {
                w: cell.w_hh,
                b: cell.b_hh,
            },
            h,
        );
        let (xr, xz, xn) = (
            g.slice_cols(x_proj, 0, n),
            g.slice_cols(x_proj, n, 2 * n),
            g.slice_cols(x_proj, 2 * n, 3 * n),
        );
        let (hr, hz, hn) = (
            g.slice_cols(hh, 0, n),
            g.slice_cols(hh, n, 2 * n),
            g.slice_cols(hh, 2 * n, 3 * n),
        );
        let r = g.add(xr, hr);
        let r = g.sigmoid(r);
        let z = g.add(xz, hz);
        let z = g.sigmoid(z);
        let rh = g.mul(r, hn);
        let cand = g.add(xn, rh);
        let cand = g.tanh(cand);
        let diff = g.sub(h, cand);
        let keep = g.mul(z, diff);
        g.add(cand, keep)
    }

    /// Normalised `[features | bottleneck]` rows and normalised targets; padding rows stay zero.
    fn normalized(&self, batch: &Batch) -> (Tensor, Tensor) {
        let n = self.normalizer();
        let (d, db) = (self.config.feat_dim, self.config.bottleneck_dim);
        let src_flags = batch.src_mask.flags();
        let mut input = Tensor::zeros(batch.src.rows(), d + db);
        for (i, &valid) in src_flags.iter().enumerate() {
            if !valid {
                continue;
            }
            let row = input.row_mut(i);
            for (k, &v) in batch.src.row(i).iter().enumerate() {
                row[k] = (v - n.src_mean[k]) / n.src_std[k];
            }
            for (k, &v) in batch.src_bn.row(i).iter().enumerate() {
                row[d + k] = (v - n.bn_mean[k]) / n.bn_std[k];
            }
        }
        let mut tgt = Tensor::zeros(batch.tgt.rows(), d);
        for (i, &valid) in batch.tgt_mask.flags().iter().enumerate() {
            if valid {
                for (k, (o, &v)) in tgt.row_mut(i).iter_mut().zip(batch.tgt.row(i)).enumerate() {
                    *o = (v - n.tgt_mean[k]) / n.tgt_std[k];
                }
            }
        }
        (input, tgt)
    }

    /// Runs the encoder over normalised input `[B*T x (D + D_b)]`.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        input: Var,
        mask: &BlockMask,
    ) -> Result<EncoderMemory> {
        let (rows, cols) = g.shape(input);
        if cols != self.config.feat_dim + self.config.bottleneck_dim {
            return Err(Error::Model(format!("encoder input has {cols} columns")));
        }
        if mask.steps == 0 || rows != mask.batch * mask.steps || mask.lens.iter().any(|&l| l == 0) {
            return Err(Error::Model(
                "encoder input must have at least one frame per sample".into(),
            ));
        }
        if !g.value(input).is_finite() {
            return Err(Error::Invalid("non-finite encoder input".into()));
        }
        let l = &self.layout;
        let pre = self.linear(g, b, l.enc_pre, input);
        let pre = g.relu(pre);
        let xf = self.gru_input(g, b, l.enc_fwd, pre);
        let xb = self.gru_input(g, b, l.enc_bwd, pre);
        let half = self.config.encoder_hidden / 2;
        let zero = g.constant(Tensor::zeros(mask.batch, half));
        let rows_at: Vec<Rc<Vec<usize>>> = (0..mask.steps)
            .map(|t| Rc::new(mask.step_rows(t)))
            .collect();
        let mut h = zero;
        let mut fwd = Vec::with_capacity(mask.steps);
        for rows in &rows_at {
            let x = g.gather_rows(xf, rows.clone());
            h = self.gru_step(g, b, l.enc_fwd, x, h);
            fwd.push(h);
        }
        // the backward pass must start from a zero state at each sample's own last frame
        let mut h = zero;
        let mut bwd = vec![zero; mask.steps];
        for t in (0..mask.steps).rev() {
            let x = g.gather_rows(xb, rows_at[t].clone());
            let mut next = self.gru_step(g, b, l.enc_bwd, x, h);
            if mask.lens.iter().any(|&len| t >= len) {
                let keep = mask
                    .lens
                    .iter()
                    .map(|&len| if t < len { 1.0 } else { 0.0 })
                    .collect();
                next = g.scale_rows(next, Rc::new(keep));
            }
            h = next;
            bwd[t] = h;
        }
        let f = g.stack_steps(&fwd);
        let bk = g.stack_steps(&bwd);
        let memory = g.concat_cols(&[f, bk]);
        let keys = g.matmul(memory, b.var(l.key));
        Ok(EncoderMemory {
            memory,
            keys,
            flags: Rc::new(mask.flags()),
            batch: mask.batch,
            steps: mask.steps,
        })
    }

    pub fn init_state(&self, g: &mut Graph, mem: &EncoderMemory) -> DecoderState {
        let bsz = mem.batch;
        let mut w = Tensor::zeros(bsz, mem.steps);
        for i in 0..bsz {
            w.set(i, 0, 1.0);
        }
        DecoderState {
            h_att: g.constant(Tensor::zeros(bsz, self.config.attention_rnn)),
            h_dec: g.constant(Tensor::zeros(bsz, self.config.decoder_rnn)),
            context: g.constant(Tensor::zeros(bsz, self.config.encoder_hidden)),
            weights: g.constant(w),
            batch: bsz,
            enc_steps: mem.steps,
        }
    }

    /// PreNet over `[N x D]` frames with optional dropout masks.
    fn prenet(&self, g: &mut Graph, b: &Bound, x: Var, masks: Option<[Rc<Tensor>; 2]>) -> Var {
        let mut h = x;
        for (i, layer) in self.layout.prenet.iter().enumerate() {
            h = self.linear(g, b, *layer, h);
            h = g.relu(h);
            if let Some(m) = &masks {
                h = g.mul_const(h, m[i].clone());
            }
        }
        h
    }

    /// Dropout masks for PreNet inputs laid out as `rows[t][b]` for
    /// `t in 0..steps`, so batched and stepwise calls draw the same values.
    fn prenet_masks(
        &self,
        seed: u64,
        batch: usize,
        steps: usize,
        step_offset: usize,
    ) -> [Rc<Tensor>; 2] {
        let p = self.config.prenet_dropout;
        let make = |layer: usize, width: usize| {
            let mut m = Tensor::zeros(batch * steps, width);
            for t in 0..steps {
                let mut rng =
                    stream(&[seed, PRENET_STREAM, (step_offset + t) as u64, layer as u64]);
                for bi in 0..batch {
                    dropout_row(&mut rng, m.row_mut(bi * steps + t), p);
                }
            }
            Rc::new(m)
        };
        [
            make(0, self.config.prenet[0]),
            make(1, self.config.prenet[1]),
        ]
    }

    fn check_state(&self, g: &Graph, state: &DecoderState, mem: &EncoderMemory) -> Result<()> {
        if state.batch == 0 || state.batch != mem.batch || state.enc_steps != mem.steps {
            return Err(Error::Model(
                "decoder state was not initialised for this encoder memory".into(),
            ));
        }
        if g.shape(state.weights) != (mem.batch, mem.steps) {
            return Err(Error::Model(
                "decoder state does not belong to this graph".into(),
            ));
        }
        Ok(())
    }

    fn step_from_prenet(
        &self,
        g: &mut Graph,
        b: &Bound,
        pre: Var,
        st: &DecoderState,
        mem: &EncoderMemory,
    ) -> (StepOutput, DecoderState) {
        let l = &self.layout;
        let c = &self.config;
        let att_in = g.concat_cols(&[pre, st.context]);
        let x = self.gru_input(g, b, l.att_rnn, att_in);
        let h_att = self.gru_step(g, b, l.att_rnn, x, st.h_att);

        let q = g.matmul(h_att, b.var(l.query));
        let q = g.repeat_blocks(q, mem.steps);
        let prev = g.reshape(st.weights, mem.batch * mem.steps, 1);
        let loc = g.conv1d_time(prev, b.var(l.loc_conv), mem.batch, c.location_kernel);
        let loc = g.matmul(loc, b.var(l.loc_proj));
        let e = g.add(mem.keys, q);
        let e = g.add(e, loc);
        let e = g.add_row(e, b.var(l.att_bias));
        let e = g.tanh(e);
        let scores = g.matmul(e, b.var(l.att_v));
        let weights = g.masked_softmax_blocks(scores, mem.flags.clone(), mem.batch);
        let context = g.weighted_sum_blocks(weights, mem.memory);

        let tap = g.concat_cols(&[context, h_att]);
        let xd = self.gru_input(g, b, l.dec_rnn, tap);
        let h_dec = self.gru_step(g, b, l.dec_rnn, xd, st.h_dec);
        let out_in = g.concat_cols(&[h_dec, context]);
        let out = self.linear(g, b, l.out, out_in);
        let (k, kd) = (c.mdn_mixtures, c.mdn_mixtures * c.feat_dim);
        let logits = g.slice_cols(out, 0, k);
        let means = g.slice_cols(out, k, k + kd);
        let log_sigmas = g.slice_cols(out, k + kd, k + 2 * kd);
        let stop = g.slice_cols(out, k + 2 * kd, k + 2 * kd + 1);
        let next = DecoderState {
            h_att,
            h_dec,
            context,
            weights,
            batch: st.batch,
            enc_steps: st.enc_steps,
        };
        (
            StepOutput {
                logits,
                means,
                log_sigmas,
                stop,
                weights,
                tap,
            },
            next,
        )
    }

    /// One autoregressive step from the previous normalised frames `[B x D]`.
    /// `dropout` is `(seed, step)` for training-mode PreNet dropout.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        b: &Bound,
        prev_frame: Var,
        state: &DecoderState,
        mem: &EncoderMemory,
        dropout: Option<(u64, usize)>,
    ) -> Result<(StepOutput, DecoderState)> {
        self.check_state(g, state, mem)?;
        if g.shape(prev_frame) != (mem.batch, self.config.feat_dim) {
            return Err(Error::Model("previous frame has the wrong shape".into()));
        }
        if !g.value(prev_frame).is_finite() {
            return Err(Error::Invalid("non-finite previous frame".into()));
        }
        let masks = dropout.map(|(seed, t)| self.prenet_masks(seed, mem.batch, 1, t));
        let pre = self.prenet(g, b, prev_frame, masks);
        Ok(self.step_from_prenet(g, b, pre, state, mem))
    }

    /// Residual PostNet over `[B*T x D]` frames; padding rows are held at zero.
    pub fn postnet(&self, g: &mut Graph, b: &Bound, coarse: Var, mask: &BlockMask) -> Var {
        let k = self.config.postnet_kernel;
        let keep = Rc::new(mask.row_scale());
        let mut h = g.scale_rows(coarse, keep.clone());
        let input = h;
        let n = self.layout.postnet.len();
        for (i, layer) in self.layout.postnet.iter().enumerate() {
            h = g.conv1d_time(h, b.var(layer.w), mask.batch, k);
            h = g.add_row(h, b.var(layer.b));
            if i + 1 < n {
                h = g.tanh(h);
            }
            h = g.scale_rows(h, keep.clone());
        }
        g.add(input, h)
    }

    /// Mean over valid frames of the mixture NLL plus the L1 error of the
    /// PostNet output; the PostNet input is the top-component mean. Returns the
    /// loss and the refined frames.
    pub fn mel_loss(
        &self,
        g: &mut Graph,
        b: &Bound,
        [logits, means, log_sigmas]: [Var; 3],
        target: Rc<Tensor>,
        mask: &BlockMask,
    ) -> (Var, Var) {
        let w = Rc::new(mask.mean_weights());
        let nll = g.mdn_nll(logits, means, log_sigmas, target.clone(), w.clone());
        let coarse = g.mdn_select(logits, means);
        let refined = self.postnet(g, b, coarse, mask);
        let l1 = g.l1(refined, target, w);
        (g.combine(&[(nll, 1.0), (l1, 1.0)]), refined)
    }

    /// Teacher-forced pass over a padded batch. `dropout_seed` enables
    /// training-mode PreNet dropout.
    pub fn forward_teacher_forced(
        &self,
        g: &mut Graph,
        b: &Bound,
        batch: &Batch,
        dropout_seed: Option<u64>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        if batch.tgt_mask.lens.iter().any(|&l| l == 0) || batch.tgt_mask.steps == 0 {
            return Err(Error::Model("zero-length target".into()));
        }
        if batch.src.cols() != c.feat_dim
            || batch.tgt.cols() != c.feat_dim
            || batch.src_bn.cols() != c.bottleneck_dim
        {
            return Err(Error::Model(
                "batch dimensions do not match the model".into(),
            ));
        }
        let (input, tgt) = self.normalized(batch);
        let input = g.constant(input);
        let mem = self.encode(g, b, input, &batch.src_mask)?;
        let tm = &batch.tgt_mask;
        let (bsz, steps, d) = (tm.batch, tm.steps, c.feat_dim);

        let mut prev = Tensor::zeros(bsz * steps, d);
        for bi in 0..bsz {
            for t in 1..steps {
                prev.row_mut(bi * steps + t)
                    .copy_from_slice(tgt.row(bi * steps + t - 1));
            }
        }
        let prev = g.constant(prev);
        let masks = dropout_seed.map(|s| self.prenet_masks(s, bsz, steps, 0));
        let pre = self.prenet(g, b, prev, masks);

        let mut state = self.init_state(g, &mem);
        let mut outs = Vec::with_capacity(steps);
        for t in 0..steps {
            let p = g.gather_rows(pre, Rc::new(tm.step_rows(t)));
            let (o, next) = self.step_from_prenet(g, b, p, &state, &mem);
            outs.push(o);
            state = next;
        }
        let collect = |f: fn(&StepOutput) -> Var| outs.iter().map(f).collect::<Vec<_>>();
        let logits = g.stack_steps(&collect(|o| o.logits));
        let means = g.stack_steps(&collect(|o| o.means));
        let log_sigmas = g.stack_steps(&collect(|o| o.log_sigmas));
        let stop = g.stack_steps(&collect(|o| o.stop));
        let dec_tap = g.stack_steps(&collect(|o| o.tap));

        let target = Rc::new(tgt);
        let w = Rc::new(tm.mean_weights());
        let (mel_loss, refined) =
            self.mel_loss(g, b, [logits, means, log_sigmas], target.clone(), tm);
        let mut stop_target = vec![0.0; bsz * steps];
        for (bi, &len) in tm.lens.iter().enumerate() {
            stop_target[bi * steps + len - 1] = 1.0;
        }
        let stop_target = Rc::new(stop_target);
        let pos = c.stop_pos_weight;
        let stop_w: Vec<f64> = w
            .iter()
            .zip(stop_target.iter())
            .map(|(&w, &y)| if y > 0.0 { w * pos } else { w })
            .collect();
        let stop_loss = g.bce_logits(stop, stop_target.clone(), Rc::new(stop_w));

        let per_sample = (0..bsz)
            .map(|bi| {
                let len = tm.lens[bi];
                let (mut mel, mut st) = (0.0, 0.0);
                for t in 0..len {
                    let r = bi * steps + t;
                    mel += row_nll(
                        g.value(logits).row(r),
                        g.value(means).row(r),
                        g.value(log_sigmas).row(r),
                        target.row(r),
                        None,
                    );
                    mel += g
                        .value(refined)
                        .row(r)
                        .iter()
                        .zip(target.row(r))
                        .map(|(a, b)| (a - b).abs())
                        .sum::<f64>();
                    let wt = if stop_target[r] > 0.0 { pos } else { 1.0 };
                    st += wt * bce_with_logit(g.value(stop).data()[r], stop_target[r]);
                }
                SampleLoss {
                    mel: mel / len as f64,
                    stop: st / len as f64,
                }
            })
            .collect();
        let attention = (0..bsz)
            .map(|bi| {
                let (td, ts) = (tm.lens[bi], batch.src_mask.lens[bi]);
                let mut m = Tensor::zeros(td, ts);
                for (t, o) in outs.iter().take(td).enumerate() {
                    m.row_mut(t)
                        .copy_from_slice(&g.value(o.weights).row(bi)[..ts]);
                }
                AttentionTrace { weights: m }
            })
            .collect();
        Ok(ForwardOutput {
            mel_loss,
            stop_loss,
            enc_tap: mem.memory,
            dec_tap,
            refined,
            attention,
            per_sample,
        })
    }

    /// Autoregressive conversion of one utterance. Deterministic: no dropout,
    /// classifier weights unused.
    pub fn convert(
        &self,
        src: &FeatureTrack,
        bn: &BottleneckTrack,
    ) -> Result<(FeatureTrack, AttentionTrace)> {
        let c = &self.config;
        if src.dim() != c.feat_dim || bn.frames.dim() != c.bottleneck_dim {
            return Err(Error::Model(
                "input dimensions do not match the model".into(),
            ));
        }
        let bn_up = bn.upsample_to(src.len())?;
        self.convert_frames(&src.frames, &bn_up, src.hop_ms)
    }

    /// [`Scent::convert`] on a bottleneck already at the source frame rate.
    pub fn convert_frames(
        &self,
        src: &FrameMatrix,
        bn_up: &FrameMatrix,
        hop_ms: f64,
    ) -> Result<(FeatureTrack, AttentionTrace)> {
        let c = &self.config;
        let ts = src.frames();
        if src.dim() != c.feat_dim || bn_up.dim() != c.bottleneck_dim || bn_up.frames() != ts {
            return Err(Error::Model(
                "input dimensions do not match the model".into(),
            ));
        }
        let n = self.normalizer();
        let d = c.feat_dim;
        let mut input = Tensor::zeros(ts, d + c.bottleneck_dim);
        for t in 0..ts {
            let row = input.row_mut(t);
            for (k, &v) in src.row(t).iter().enumerate() {
                row[k] = (v as f64 - n.src_mean[k]) / n.src_std[k];
            }
            for (k, &v) in bn_up.row(t).iter().enumerate() {
                row[d + k] = (v as f64 - n.bn_mean[k]) / n.bn_std[k];
            }
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let input = g.constant(input);
        let mask = BlockMask::new(vec![ts]);
        let mem = self.encode(&mut g, &b, input, &mask)?;
        let state = self.init_state(&mut g, &mem);
        let mut carry =
            [state.h_att, state.h_dec, state.context, state.weights].map(|v| g.value(v).clone());
        let base = g.len();

        let cap = ((c.max_decode_ratio * ts as f64).floor() as usize).max(1);
        let mut prev = Tensor::zeros(1, d);
        let mut frames: Vec<f64> = Vec::new();
        let mut trace: Vec<f64> = Vec::new();
        for _ in 0..cap {
            // only the encoder and parameters persist between steps
            g.truncate(base);
            let [h_att, h_dec, context, weights] = carry.clone().map(|t| g.constant(t));
            let st = DecoderState {
                h_att,
                h_dec,
                context,
                weights,
                batch: 1,
                enc_steps: ts,
            };
            let p = g.constant(prev.clone());
            let (o, next) = self.decoder_step(&mut g, &b, p, &st, &mem, None)?;
            let logits = g.value(o.logits).row(0);
            let j = argmax(logits);
            let frame = g.value(o.means).row(0)[j * d..(j + 1) * d].to_vec();
            let stop = sigmoid(g.value(o.stop).item());
            frames.extend_from_slice(&frame);
            trace.extend_from_slice(g.value(o.weights).row(0));
            prev = Tensor::from_vec(1, d, frame);
            carry =
                [next.h_att, next.h_dec, next.context, next.weights].map(|v| g.value(v).clone());
            if stop > 0.5 {
                break;
            }
        }
        g.truncate(base);
        let td = frames.len() / d;
        let coarse = g.constant(Tensor::from_vec(td, d, frames));
        let refined = self.postnet(&mut g, &b, coarse, &BlockMask::new(vec![td]));
        let refined = g.value(refined);
        let pitch = d - 1;
        let mut out = FrameMatrix::zeros(td, d);
        for t in 0..td {
            for (j, o) in out.row_mut(t).iter_mut().enumerate() {
                let mut v = refined.get(t, j) * n.tgt_std[j] + n.tgt_mean[j];
                if j == pitch && v < c.voicing_threshold_hz {
                    v = 0.0;
                }
                *o = v as f32;
            }
        }
        let track = FeatureTrack::new(out, hop_ms)?;
        Ok((
            track,
            AttentionTrace {
                weights: Tensor::from_vec(td, ts, trace),
            },
        ))
    }
}
