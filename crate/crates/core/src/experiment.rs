//! The size × mode × seed grid: subset selection, training, conversion of the
//! test split, evaluation and the Table 1-shaped summary.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{attn_diagnostics, compare, AttnDiagnostics};
use crate::features::labels::{frame_labels, DEFAULT_TONE_COUNT};
use crate::features::{
    parse_lab, write_track, Corpus, FeatureTrack, FrameLabel, FrameMatrix, Inventory, SynthConfig,
    UtterancePair,
};
use crate::model::{AttentionTrace, Scent};
use crate::rng::{hash_str, stream};
use crate::training::{fit_model_config, prepare, train, Mode, TrainConfig, TrainOptions};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub mode: Mode,
    pub size: usize,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("{}-n{}-s{}", self.mode, self.size, self.seed)
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub cells: Vec<Cell>,
    /// Template for every cell; mode and seed are overwritten.
    pub train: TrainConfig,
    /// Cell directories go to `out/cells/<name>`; nothing is written without it.
    pub out: Option<PathBuf>,
    /// Load `best.ckpt` of every cell instead of training.
    pub evaluate_only: bool,
    /// Recorded in the report only.
    pub corpus: Option<SynthConfig>,
}

impl ExperimentPlan {
    pub fn grid(modes: &[Mode], sizes: &[usize], seeds: &[u64], train: TrainConfig) -> Self {
        let mut cells = Vec::new();
        for &size in sizes {
            for &mode in modes {
                for &seed in seeds {
                    cells.push(Cell { mode, size, seed });
                }
            }
        }
        ExperimentPlan {
            cells,
            train,
            out: None,
            evaluate_only: false,
            corpus: None,
        }
    }

    pub fn validate(&self, train_pairs: usize) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::Config("experiment has no cells".into()));
        }
        let unique: BTreeSet<_> = self.cells.iter().collect();
        if unique.len() != self.cells.len() {
            return Err(Error::Config("experiment cells must be unique".into()));
        }
        if let Some(c) = self
            .cells
            .iter()
            .find(|c| c.size == 0 || c.size > train_pairs)
        {
            return Err(Error::Config(format!(
                "cell {}: size must be in 1..={train_pairs}",
                c.name()
            )));
        }
        if self.evaluate_only && self.out.is_none() {
            return Err(Error::Config(
                "evaluate-only needs an output directory".into(),
            ));
        }
        self.train.validate()
    }
}

/// First `size` training pairs under a seed-keyed order, so smaller subsets
/// of one seed are nested in larger ones.
pub fn subset(train: &[UtterancePair], size: usize, seed: u64) -> Vec<UtterancePair> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut stream(&[seed, hash_str("subset")]));
    order
        .into_iter()
        .take(size)
        .map(|i| train[i].clone())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: String,
    pub mcd: f64,
    pub f0_rmse: f64,
    pub frames: usize,
    pub reference_frames: usize,
    pub diagnostics: Option<AttnDiagnostics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mcd: f64,
    pub f0_rmse: f64,
    pub diagnostics: Option<AttnDiagnostics>,
}

pub fn summarize(items: &[UtteranceResult]) -> Summary {
    let n = items.len().max(1) as f64;
    let diags: Vec<AttnDiagnostics> = items.iter().filter_map(|u| u.diagnostics).collect();
    Summary {
        mcd: items.iter().map(|u| u.mcd).sum::<f64>() / n,
        f0_rmse: items.iter().map(|u| u.f0_rmse).sum::<f64>() / n,
        diagnostics: (!diags.is_empty()).then(|| AttnDiagnostics::mean(&diags)),
    }
}

pub fn score(
    id: &str,
    converted: &FeatureTrack,
    reference: &FeatureTrack,
    trace: Option<(&AttentionTrace, Option<&[FrameLabel]>)>,
) -> Result<UtteranceResult> {
    let m = compare(converted, reference)?;
    Ok(UtteranceResult {
        id: id.to_string(),
        mcd: m.mcd,
        f0_rmse: m.f0_rmse,
        frames: converted.len(),
        reference_frames: reference.len(),
        diagnostics: trace.map(|(t, labels)| attn_diagnostics(t, labels)),
    })
}

/// Converted track and attention trace of one pair, scored against its target.
pub fn convert_and_score(
    model: &Scent,
    pair: &UtterancePair,
) -> Result<(FeatureTrack, AttentionTrace, UtteranceResult)> {
    let (out, trace) = model.convert(&pair.src, &pair.src_bn)?;
    let labels = pair.src_labels()?;
    let r = score(&pair.id, &out, &pair.tgt, Some((&trace, Some(&labels))))?;
    Ok((out, trace, r))
}

/// Writes `<id>.track`, `<id>.attn.track` and a copy of the source labels.
pub fn write_converted(
    dir: &Path,
    pair: &UtterancePair,
    out: &FeatureTrack,
    trace: &AttentionTrace,
    inventory: &Inventory,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.save(&dir.join(format!("{}.track", pair.id)))?;
    write_trace(&dir.join(format!("{}.attn.track", pair.id)), trace)?;
    let lab = crate::features::format_lab(&pair.src_lab, inventory)?;
    let path = dir.join(format!("{}.src.lab", pair.id));
    fs::write(&path, lab).map_err(|e| Error::io(&path, e))
}

pub fn write_trace(path: &Path, trace: &AttentionTrace) -> Result<()> {
    let (r, c) = trace.weights.shape();
    let frames = FrameMatrix::new(
        r,
        c,
        trace.weights.data().iter().map(|&v| v as f32).collect(),
    )?;
    write_track(path, &frames, 1.0)
}

pub fn read_trace(path: &Path) -> Result<AttentionTrace> {
    let (m, _) = crate::features::read_track(path)?;
    let data = m.data().iter().map(|&v| v as f64).collect();
    Ok(AttentionTrace {
        weights: crate::tensor::Tensor::from_vec(m.frames(), m.dim(), data),
    })
}

fn reference_track(dir: &Path, id: &str) -> Result<FeatureTrack> {
    let flat = dir.join(format!("{id}.track"));
    let corpus = dir.join("data").join(format!("{id}.tgt.track"));
    if flat.exists() {
        FeatureTrack::load(&flat)
    } else if corpus.exists() {
        FeatureTrack::load(&corpus)
    } else {
        Err(Error::Invalid(format!(
            "no reference track for `{id}` in {}",
            dir.display()
        )))
    }
}

/// Scores every `<id>.track` in `converted` against `reference`, which is
/// either a directory of `<id>.track` files or a corpus directory.
pub fn evaluate_dir(converted: &Path, reference: &Path) -> Result<Vec<UtteranceResult>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(converted).map_err(|e| Error::io(converted, e))? {
        let name = entry
            .map_err(|e| Error::io(converted, e))?
            .file_name()
            .to_string_lossy()
            .into_owned();
        if let Some(id) = name.strip_suffix(".track") {
            if !id.ends_with(".attn") {
                ids.push(id.to_string());
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::Invalid(format!(
            "no converted tracks in {}",
            converted.display()
        )));
    }
    ids.sort();
    ids.par_iter()
        .map(|id| {
            let conv = FeatureTrack::load(&converted.join(format!("{id}.track")))?;
            let reference = reference_track(reference, id)?;
            let attn = converted.join(format!("{id}.attn.track"));
            let trace = if attn.exists() {
                Some(read_trace(&attn)?)
            } else {
                None
            };
            let lab = converted.join(format!("{id}.src.lab"));
            let labels = match (&trace, lab.exists()) {
                (Some(t), true) => {
                    let text = fs::read_to_string(&lab).map_err(|e| Error::io(&lab, e))?;
                    let seq = parse_lab(&text, &mut Inventory::new(DEFAULT_TONE_COUNT))?;
                    Some(frame_labels(&seq, conv.hop_ms, t.enc_len())?)
                }
                _ => None,
            };
            score(
                id,
                &conv,
                &reference,
                trace.as_ref().map(|t| (t, labels.as_deref())),
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: Cell,
    pub name: String,
    pub summary: Summary,
    pub best_epoch: Option<usize>,
    pub utterances: Vec<UtteranceResult>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub size: usize,
    pub best_mcd: Mode,
    pub best_f0_rmse: Mode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub train_config: TrainConfig,
    pub corpus: Option<SynthConfig>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub trend: Vec<TrendRow>,
}

impl Report {
    pub fn new(
        train_config: TrainConfig,
        corpus: Option<SynthConfig>,
        cells: Vec<CellResult>,
    ) -> Self {
        let seeds: BTreeSet<u64> = cells.iter().map(|c| c.cell.seed).collect();
        let trend = trend(&cells);
        Report {
            version: VERSION.to_string(),
            train_config,
            corpus,
            seeds: seeds.into_iter().collect(),
            cells,
            trend,
        }
    }

    pub fn cell(&self, mode: Mode, size: usize, seed: u64) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.cell == Cell { mode, size, seed })
    }

    /// Seed-averaged `(mcd, f0_rmse)` per `(size, mode)`.
    pub fn grid(&self) -> BTreeMap<(usize, Mode), (f64, f64)> {
        grid(&self.cells)
    }

    pub fn table_csv(&self) -> String {
        table_csv(&self.cells)
    }
}

fn grid(cells: &[CellResult]) -> BTreeMap<(usize, Mode), (f64, f64)> {
    let mut acc: BTreeMap<(usize, Mode), (f64, f64, usize)> = BTreeMap::new();
    for c in cells {
        let e = acc.entry((c.cell.size, c.cell.mode)).or_default();
        e.0 += c.summary.mcd;
        e.1 += c.summary.f0_rmse;
        e.2 += 1;
    }
    acc.into_iter()
        .map(|(k, (m, f, n))| (k, (m / n as f64, f / n as f64)))
        .collect()
}

fn trend(cells: &[CellResult]) -> Vec<TrendRow> {
    let g = grid(cells);
    let sizes: BTreeSet<usize> = g.keys().map(|k| k.0).collect();
    sizes
        .into_iter()
        .map(|size| {
            let row: Vec<(Mode, (f64, f64))> = g
                .iter()
                .filter(|(k, _)| k.0 == size)
                .map(|(k, v)| (k.1, *v))
                .collect();
            let best = |f: fn(&(f64, f64)) -> f64| {
                row.iter()
                    .min_by(|a, b| f(&a.1).total_cmp(&f(&b.1)))
                    .unwrap()
                    .0
            };
            TrendRow {
                size,
                best_mcd: best(|v| v.0),
                best_f0_rmse: best(|v| v.1),
            }
        })
        .collect()
}

/// Rows are metric × mode, columns are training-set sizes.
pub fn table_csv(cells: &[CellResult]) -> String {
    let g = grid(cells);
    let sizes: BTreeSet<usize> = g.keys().map(|k| k.0).collect();
    let mut out = String::from("metric,mode");
    for s in &sizes {
        out.push_str(&format!(",{s}"));
    }
    out.push('\n');
    for (metric, pick) in [("MCD (dB)", 0), ("F0 RMSE (Hz)", 1)] {
        for mode in Mode::ALL {
            if !g.keys().any(|k| k.1 == mode) {
                continue;
            }
            out.push_str(&format!("{metric},{mode}"));
            for s in &sizes {
                match g.get(&(*s, mode)) {
                    Some(v) => out.push_str(&format!(",{:.3}", if pick == 0 { v.0 } else { v.1 })),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Metadata written next to a cell's checkpoints.
#[derive(Serialize, Deserialize)]
struct CellInfo {
    cell: Cell,
    train_pairs: Vec<String>,
}

fn run_cell(plan: &ExperimentPlan, corpus: &Corpus, cell: Cell) -> Result<CellResult> {
    let name = cell.name();
    let dir = plan.out.as_ref().map(|o| o.join("cells").join(&name));
    let (model, best_epoch) = if plan.evaluate_only {
        let path = dir.as_ref().expect("validated").join("best.ckpt");
        if !path.exists() {
            return Err(Error::MissingCheckpoint(format!(
                "cell {name}: {}",
                path.display()
            )));
        }
        (Scent::load(&path)?, None)
    } else {
        let pairs = subset(&corpus.train, cell.size, cell.seed);
        let mut cfg = plan.train.clone();
        cfg.mode = cell.mode;
        cfg.seed = cell.seed;
        let (src_dim, bn_dim) = (pairs[0].src.dim(), pairs[0].src_bn.frames.dim());
        cfg.model = fit_model_config(
            cfg.model,
            corpus.inventory.len(),
            corpus.inventory.tone_count(),
            src_dim,
            bn_dim,
        );
        log::info!("training cell {name}");
        let outcome = train(
            &cfg,
            &prepare(&pairs)?,
            &prepare(&corpus.valid)?,
            &TrainOptions {
                out: dir.clone(),
                ..Default::default()
            },
        )?;
        if let Some(d) = &dir {
            let info = CellInfo {
                cell,
                train_pairs: pairs.iter().map(|p| p.id.clone()).collect(),
            };
            let path = d.join("cell.json");
            fs::write(&path, serde_json::to_string_pretty(&info)?)
                .map_err(|e| Error::io(&path, e))?;
        }
        (outcome.best, Some(outcome.best_epoch))
    };
    let mut utterances = Vec::with_capacity(corpus.test.len());
    for pair in &corpus.test {
        let (out, trace, r) = convert_and_score(&model, pair)?;
        if let Some(d) = &dir {
            write_converted(&d.join("converted"), pair, &out, &trace, &corpus.inventory)?;
        }
        utterances.push(r);
    }
    Ok(CellResult {
        cell,
        name,
        summary: summarize(&utterances),
        best_epoch,
        utterances,
    })
}

/// Runs every cell (in parallel when threads are available) and merges the
/// results in plan order. Writes `report.json` and `table.csv` under `out`.
pub fn run_experiment(plan: &ExperimentPlan, corpus: &Corpus) -> Result<Report> {
    plan.validate(corpus.train.len())?;
    if corpus.test.is_empty() {
        return Err(Error::Invalid("corpus has no test pairs".into()));
    }
    let cells: Vec<CellResult> = plan
        .cells
        .par_iter()
        .map(|&c| run_cell(plan, corpus, c))
        .collect::<Result<_>>()?;
    let report = Report::new(plan.train.clone(), plan.corpus.clone(), cells);
    if let Some(out) = &plan.out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let path = out.join("report.json");
        fs::write(&path, serde_json::to_string_pretty(&report)?)
            .map_err(|e| Error::io(&path, e))?;
        let path = out.join("table.csv");
        fs::write(&path, report.table_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

/// Cell results rebuilt from the `converted/` folders of an experiment directory.
pub fn evaluate_cells(cells_dir: &Path, reference: &Path) -> Result<Vec<CellResult>> {
    let mut out = Vec::new();
    let mut dirs: Vec<PathBuf> = fs::read_dir(cells_dir)
        .map_err(|e| Error::io(cells_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("cell.json").exists())
        .collect();
    dirs.sort();
    for d in dirs {
        let path = d.join("cell.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let info: CellInfo = serde_json::from_str(&text)?;
        let utterances = evaluate_dir(&d.join("converted"), reference)?;
        out.push(CellResult {
            cell: info.cell,
            name: info.cell.name(),
            summary: summarize(&utterances),
            best_epoch: None,
            utterances,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::SyntheticVoices;
    use crate::model::ModelConfig;

    fn tiny() -> (Corpus, TrainConfig) {
        let sc = SynthConfig {
            feat_dim: 4,
            bottleneck_dim: 3,
            phonemes: 4,
            min_phones: 3,
            max_phones: 4,
            ..Default::default()
        };
        let corpus = SyntheticVoices::new(sc).unwrap().corpus(4, 1, 2).unwrap();
        let cfg = TrainConfig {
            warm_epochs: Some(1),
            extra_epochs: 1,
            batch_size: 2,
            model: ModelConfig::tiny(),
            ..Default::default()
        };
        (corpus, cfg)
    }

    #[test]
    fn subsets_nest() {
        let (corpus, _) = tiny();
        let a = subset(&corpus.train, 2, 5);
        let b = subset(&corpus.train, 4, 5);
        assert_eq!(a[..], b[..2]);
    }

    #[test]
    fn one_cell_one_row_and_rerun_identical() {
        let (corpus, cfg) = tiny();
        let plan = ExperimentPlan::grid(&[Mode::Mt], &[3], &[7], cfg);
        let a = run_experiment(&plan, &corpus).unwrap();
        assert_eq!(a.cells.len(), 1);
        assert_eq!(a.cells[0].utterances.len(), 2);
        assert_eq!(a.trend.len(), 1);
        assert_eq!(a.seeds, vec![7]);
        assert_eq!(a.table_csv().lines().count(), 3);
        assert_eq!(run_experiment(&plan, &corpus).unwrap(), a);
    }

    #[test]
    fn evaluate_only_names_missing_cell() {
        let (corpus, cfg) = tiny();
        let dir = tempfile::tempdir().unwrap();
        let mut plan = ExperimentPlan::grid(&[Mode::Baseline], &[2], &[3], cfg);
        plan.out = Some(dir.path().to_path_buf());
        plan.evaluate_only = true;
        let err = run_experiment(&plan, &corpus).unwrap_err();
        assert!(err.to_string().contains("baseline-n2-s3"), "{err}");
    }

    #[test]
    fn written_cells_reevaluate_to_the_same_numbers() {
        let (corpus, cfg) = tiny();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(&dir.path().join("corpus")).unwrap();
        let mut plan = ExperimentPlan::grid(&[Mode::Baseline, Mode::MtDa], &[2], &[1], cfg);
        plan.out = Some(dir.path().join("exp"));
        let report = run_experiment(&plan, &corpus).unwrap();
        let again =
            evaluate_cells(&dir.path().join("exp/cells"), &dir.path().join("corpus")).unwrap();
        assert_eq!(again.len(), 2);
        for c in &again {
            let orig = report.cell(c.cell.mode, c.cell.size, c.cell.seed).unwrap();
            // tracks are stored as f32
            assert!((orig.summary.mcd - c.summary.mcd).abs() < 1e-3);
            assert!((orig.summary.f0_rmse - c.summary.f0_rmse).abs() < 1e-2);
        }
        plan.evaluate_only = true;
        let reloaded = run_experiment(&plan, &corpus).unwrap();
        assert_eq!(reloaded.cells[0].summary, report.cells[0].summary);
    }

    #[test]
    fn duplicate_and_oversized_cells_are_rejected() {
        let (corpus, cfg) = tiny();
        let mut plan = ExperimentPlan::grid(&[Mode::Mt], &[2], &[1], cfg.clone());
        plan.cells.push(plan.cells[0]);
        assert!(run_experiment(&plan, &corpus).is_err());
        let plan = ExperimentPlan::grid(&[Mode::Mt], &[9], &[1], cfg);
        assert!(run_experiment(&plan, &corpus).is_err());
    }
}
