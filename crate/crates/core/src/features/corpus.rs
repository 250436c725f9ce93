//! Parallel utterance pairs, manifests and on-disk corpus layout.
//!
//! A manifest line is `id<TAB>src_track<TAB>tgt_track<TAB>src_lab<TAB>tgt_lab<TAB>src_bn`;
//! relative paths resolve against the manifest's directory. An optional
//! `inventory.txt` next to the manifest fixes phoneme ids (one name per line,
//! `sil` first).

use std::fs;
use std::path::{Path, PathBuf};

use super::labels::{
    format_lab, frame_labels, parse_lab, FrameLabel, Inventory, SegmentSeq, DEFAULT_TONE_COUNT,
};
use super::track::{BottleneckTrack, FeatureTrack, FrameMatrix};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct UtterancePair {
    pub id: String,
    pub src: FeatureTrack,
    pub tgt: FeatureTrack,
    pub src_lab: SegmentSeq,
    pub tgt_lab: SegmentSeq,
    pub src_bn: BottleneckTrack,
}

impl UtterancePair {
    /// Checks the parallel-content invariant and track/label consistency.
    pub fn validate(&self) -> Result<()> {
        if self.src_lab.content() != self.tgt_lab.content() {
            return Err(Error::Alignment(format!(
                "{}: source and target transcriptions differ",
                self.id
            )));
        }
        if self.src.dim() != self.tgt.dim() {
            return Err(Error::Invalid(format!(
                "{}: source and target dimensions differ",
                self.id
            )));
        }
        if self.src.hop_ms != self.tgt.hop_ms {
            return Err(Error::Invalid(format!(
                "{}: source and target hops differ",
                self.id
            )));
        }
        frame_labels(&self.src_lab, self.src.hop_ms, self.src.len())?;
        frame_labels(&self.tgt_lab, self.tgt.hop_ms, self.tgt.len())?;
        self.src_bn.upsample_to(self.src.len())?;
        Ok(())
    }

    pub fn src_labels(&self) -> Result<Vec<FrameLabel>> {
        frame_labels(&self.src_lab, self.src.hop_ms, self.src.len())
    }

    pub fn tgt_labels(&self) -> Result<Vec<FrameLabel>> {
        frame_labels(&self.tgt_lab, self.tgt.hop_ms, self.tgt.len())
    }

    /// Bottleneck features at the feature-track frame rate.
    pub fn src_bn_upsampled(&self) -> Result<FrameMatrix> {
        self.src_bn.upsample_to(self.src.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub src_track: PathBuf,
    pub tgt_track: PathBuf,
    pub src_lab: PathBuf,
    pub tgt_lab: PathBuf,
    pub src_bn: PathBuf,
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(Error::Manifest {
                line: i + 1,
                msg: format!("expected 6 fields, got {}", f.len()),
            });
        }
        out.push(ManifestEntry {
            id: f[0].to_string(),
            src_track: f[1].into(),
            tgt_track: f[2].into(),
            src_lab: f[3].into(),
            tgt_lab: f[4].into(),
            src_bn: f[5].into(),
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            e.id,
            e.src_track.display(),
            e.tgt_track.display(),
            e.src_lab.display(),
            e.tgt_lab.display(),
            e.src_bn.display()
        ));
    }
    out
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_inventory(path: &Path) -> Result<Inventory> {
    let names: Vec<String> = read_text(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().to_string())
        .collect();
    Inventory::from_names(&names, DEFAULT_TONE_COUNT)
}

pub fn write_inventory(path: &Path, inv: &Inventory) -> Result<()> {
    write_text(path, &(inv.names().join("\n") + "\n"))
}

/// Inventory stored next to `manifest`, or a fresh one.
pub fn inventory_for(manifest: &Path) -> Result<Inventory> {
    let path = manifest
        .parent()
        .unwrap_or(Path::new("."))
        .join("inventory.txt");
    if path.exists() {
        read_inventory(&path)
    } else {
        Ok(Inventory::default())
    }
}

/// Loads every pair listed in a manifest.
pub fn load_pairs(manifest: &Path, inventory: &mut Inventory) -> Result<Vec<UtterancePair>> {
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let entries = parse_manifest(&read_text(manifest)?)?;
    entries
        .iter()
        .map(|e| load_pair(&base, e, inventory))
        .collect()
}

pub fn load_pair(
    base: &Path,
    e: &ManifestEntry,
    inventory: &mut Inventory,
) -> Result<UtterancePair> {
    let src = FeatureTrack::load(&base.join(&e.src_track))?;
    let tgt = FeatureTrack::load(&base.join(&e.tgt_track))?;
    let src_lab = parse_lab(&read_text(&base.join(&e.src_lab))?, inventory)?;
    let tgt_lab = parse_lab(&read_text(&base.join(&e.tgt_lab))?, inventory)?;
    let src_bn = BottleneckTrack::load(&base.join(&e.src_bn), src.hop_ms)?;
    let pair = UtterancePair {
        id: e.id.clone(),
        src,
        tgt,
        src_lab,
        tgt_lab,
        src_bn,
    };
    pair.validate()?;
    Ok(pair)
}

/// Writes a pair's five files under `dir/data` and returns its manifest entry
/// (paths relative to `dir`).
pub fn save_pair(dir: &Path, pair: &UtterancePair, inventory: &Inventory) -> Result<ManifestEntry> {
    let data = dir.join("data");
    fs::create_dir_all(&data).map_err(|e| Error::io(&data, e))?;
    let rel = |suffix: &str| PathBuf::from("data").join(format!("{}.{suffix}", pair.id));
    let entry = ManifestEntry {
        id: pair.id.clone(),
        src_track: rel("src.track"),
        tgt_track: rel("tgt.track"),
        src_lab: rel("src.lab"),
        tgt_lab: rel("tgt.lab"),
        src_bn: rel("src_bn.track"),
    };
    pair.src.save(&dir.join(&entry.src_track))?;
    pair.tgt.save(&dir.join(&entry.tgt_track))?;
    write_text(
        &dir.join(&entry.src_lab),
        &format_lab(&pair.src_lab, inventory)?,
    )?;
    write_text(
        &dir.join(&entry.tgt_lab),
        &format_lab(&pair.tgt_lab, inventory)?,
    )?;
    pair.src_bn
        .save(&dir.join(&entry.src_bn), pair.src.hop_ms)?;
    Ok(entry)
}

/// Train/validation/test splits of a corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub inventory: Inventory,
    pub train: Vec<UtterancePair>,
    pub valid: Vec<UtterancePair>,
    pub test: Vec<UtterancePair>,
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

impl Corpus {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_inventory(&dir.join("inventory.txt"), &self.inventory)?;
        for (name, pairs) in SPLITS.iter().zip([&self.train, &self.valid, &self.test]) {
            let entries = pairs
                .iter()
                .map(|p| save_pair(dir, p, &self.inventory))
                .collect::<Result<Vec<_>>>()?;
            write_text(&dir.join(format!("{name}.tsv")), &format_manifest(&entries))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut inventory = read_inventory(&dir.join("inventory.txt"))?;
        let mut split = |name: &str| load_pairs(&dir.join(format!("{name}.tsv")), &mut inventory);
        let train = split("train")?;
        let valid = split("valid")?;
        let test = split("test")?;
        Ok(Corpus {
            inventory,
            train,
            valid,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_rejects_short_lines() {
        let err = parse_manifest("a\tb\tc\n").unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }));
    }

    #[test]
    fn manifest_round_trip() {
        let e = ManifestEntry {
            id: "u1".into(),
            src_track: "data/u1.src.track".into(),
            tgt_track: "data/u1.tgt.track".into(),
            src_lab: "data/u1.src.lab".into(),
            tgt_lab: "data/u1.tgt.lab".into(),
            src_bn: "data/u1.src_bn.track".into(),
        };
        assert_eq!(
            parse_manifest(&format_manifest(&[e.clone()])).unwrap(),
            vec![e]
        );
    }
}
