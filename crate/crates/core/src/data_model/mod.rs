//! Dataset representation: manifest ingestion, query/gallery splitting and
//! the deterministic synthetic multi-modality generator.

mod synth;

pub use synth::{generate_synthetic, render_record, Blob, Curve, PatientLayout, SynthConfig, SynthOutput};

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

/// Where a record's pixels live: a single image, or an ordered slice stack.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageSource {
    Single(PathBuf),
    Slices(Vec<PathBuf>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub patient_id: String,
    pub modality_label: String,
    pub source: ImageSource,
    pub split: Option<Split>,
}

impl ImageRecord {
    pub fn is_multi_slice(&self) -> bool {
        matches!(self.source, ImageSource::Slices(_))
    }
}

#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub records: Vec<ImageRecord>,
    pub modality_labels: BTreeSet<String>,
    /// patient_id -> indices into `records`
    pub patients: BTreeMap<String, Vec<usize>>,
}

impl DatasetManifest {
    pub fn from_records(records: Vec<ImageRecord>) -> Self {
        let mut m = DatasetManifest {
            records,
            ..Default::default()
        };
        m.rebuild_index();
        m
    }

    pub fn rebuild_index(&mut self) {
        self.modality_labels.clear();
        self.patients.clear();
        for (i, r) in self.records.iter().enumerate() {
            self.modality_labels.insert(r.modality_label.clone());
            self.patients.entry(r.patient_id.clone()).or_default().push(i);
        }
    }

    pub fn records_in_split(&self, split: Split) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(move |r| r.split == Some(split))
    }

    /// Checks the manifest invariants; returns the first violation found.
    pub fn validate(&self) -> Result<()> {
        for (pid, idxs) in &self.patients {
            if idxs.len() < 2 {
                return Err(Error::other(format!("patient `{pid}` has fewer than 2 records")));
            }
        }
        let gallery_patients: BTreeSet<&str> = self
            .records_in_split(Split::Gallery)
            .map(|r| r.patient_id.as_str())
            .collect();
        for r in self.records_in_split(Split::Query) {
            if !gallery_patients.contains(r.patient_id.as_str()) {
                return Err(Error::other(format!(
                    "query patient `{}` has no gallery record",
                    r.patient_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    patient_id: String,
    modality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slice_paths: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Debug)]
pub struct LoadOutcome {
    pub manifest: DatasetManifest,
    /// patients dropped for having fewer than two records
    pub dropped_patients: usize,
}

/// Loads a JSON-Lines manifest. Paths are resolved relative to the manifest's
/// parent directory. Patients with fewer than two records are dropped.
pub fn load_manifest(path: &Path) -> Result<LoadOutcome> {
    let file = std::fs::File::open(path).map_err(|_| Error::ManifestNotFound(path.to_path_buf()))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine =
            serde_json::from_str(&line).map_err(|e| Error::MalformedManifestLine {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        let source = match (parsed.path, parsed.slice_paths) {
            (Some(p), None) => ImageSource::Single(base.join(p)),
            (None, Some(sp)) if !sp.is_empty() => {
                ImageSource::Slices(sp.into_iter().map(|p| base.join(p)).collect())
            }
            _ => {
                return Err(Error::MalformedManifestLine {
                    line: lineno + 1,
                    reason: "record must carry exactly one of `path` / non-empty `slice_paths`".into(),
                })
            }
        };
        records.push(ImageRecord {
            id: parsed.id,
            patient_id: parsed.patient_id,
            modality_label: parsed.modality,
            source,
            split: parsed.split,
        });
    }

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in &records {
        *counts.entry(r.patient_id.as_str()).or_default() += 1;
    }
    let dropped: BTreeSet<String> = counts
        .iter()
        .filter(|(_, &c)| c < 2)
        .map(|(p, _)| p.to_string())
        .collect();
    let dropped_patients = dropped.len();
    records.retain(|r| !dropped.contains(&r.patient_id));

    let manifest = DatasetManifest::from_records(records);
    manifest.validate()?;
    Ok(LoadOutcome {
        manifest,
        dropped_patients,
    })
}

/// Writes the manifest as JSON-Lines with paths relative to `base`.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = std::fs::File::create(path)?;
    for r in &manifest.records {
        let rel = |p: &Path| -> String {
            p.strip_prefix(base)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned()
        };
        let line = ManifestLine {
            id: r.id.clone(),
            patient_id: r.patient_id.clone(),
            modality: r.modality_label.clone(),
            path: match &r.source {
                ImageSource::Single(p) => Some(rel(p)),
                ImageSource::Slices(_) => None,
            },
            slice_paths: match &r.source {
                ImageSource::Single(_) => None,
                ImageSource::Slices(ps) => Some(ps.iter().map(|p| rel(p)).collect()),
            },
            split: r.split,
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| Error::other(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Marks `n_eval` patients (chosen deterministically from `seed`) as
/// evaluation patients; all other patients' records become `train`.
/// Evaluation records are left unsplit for `split_query_gallery`.
pub fn assign_eval_patients(manifest: &mut DatasetManifest, n_eval: usize, seed: u64) -> Result<()> {
    let mut pids: Vec<String> = manifest.patients.keys().cloned().collect();
    if n_eval > pids.len() {
        return Err(Error::Config(format!(
            "requested {n_eval} eval patients but manifest has {}",
            pids.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    pids.shuffle(&mut rng);
    let eval: BTreeSet<&String> = pids.iter().take(n_eval).collect();
    for r in &mut manifest.records {
        r.split = if eval.contains(&r.patient_id) {
            None
        } else {
            Some(Split::Train)
        };
    }
    Ok(())
}

/// For every patient with non-train records: exactly one becomes the query,
/// the rest gallery. Deterministic given `seed`.
pub fn split_query_gallery(manifest: &mut DatasetManifest, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patients = manifest.patients.clone();
    for (_pid, idxs) in patients {
        let eval_idxs: Vec<usize> = idxs
            .iter()
            .copied()
            .filter(|&i| manifest.records[i].split != Some(Split::Train))
            .collect();
        if eval_idxs.is_empty() {
            continue;
        }
        assert!(
            eval_idxs.len() >= 2,
            "evaluation patient `{}` has fewer than 2 records",
            manifest.records[eval_idxs[0]].patient_id
        );
        let query = *eval_idxs.choose(&mut rng).expect("nonempty");
        for i in eval_idxs {
            manifest.records[i].split = Some(if i == query { Split::Query } else { Split::Gallery });
        }
    }
}
