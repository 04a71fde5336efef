//! Modality-homogeneous P x K batch sampling: one modality per batch,
//! P distinct patients, K images each.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data_model::{DatasetManifest, Split};
use crate::error::{Error, Result};

/// Index of train records by modality and patient, built once.
pub struct TrainIndex {
    /// modality -> patient -> train record indices
    by_modality: BTreeMap<String, BTreeMap<String, Vec<usize>>>,
    /// modality -> total train record count (sampling weight)
    counts: BTreeMap<String, usize>,
}

impl TrainIndex {
    pub fn build(manifest: &DatasetManifest) -> Self {
        let mut by_modality: BTreeMap<String, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
        let mut counts = BTreeMap::new();
        for (i, r) in manifest.records.iter().enumerate() {
            if r.split != Some(Split::Train) {
                continue;
            }
            by_modality
                .entry(r.modality_label.clone())
                .or_default()
                .entry(r.patient_id.clone())
                .or_default()
                .push(i);
            *counts.entry(r.modality_label.clone()).or_insert(0) += 1;
        }
        Self { by_modality, counts }
    }

    pub fn modalities(&self) -> Vec<String> {
        self.counts.keys().cloned().collect()
    }
}

/// Samples one batch: all records share a modality (chosen with probability
/// proportional to that modality's record count); P distinct patients, K
/// records each (with replacement within a patient when it has fewer).
pub fn sample_batch(
    index: &TrainIndex,
    p: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(String, Vec<usize>)> {
    // modalities that can field P distinct patients
    let eligible: Vec<(&String, usize)> = index
        .by_modality
        .iter()
        .filter(|(_, pats)| pats.len() >= p)
        .map(|(m, _)| (m, index.counts[m]))
        .collect();
    if eligible.is_empty() {
        return Err(Error::Sampling(format!(
            "no modality has >= {p} distinct train patients"
        )));
    }
    let total: usize = eligible.iter().map(|(_, c)| c).sum();
    let mut pick = rng.random_range(0..total);
    let mut modality = eligible[0].0;
    for (m, c) in &eligible {
        if pick < *c {
            modality = m;
            break;
        }
        pick -= c;
    }

    let patients = &index.by_modality[modality];
    let mut pids: Vec<&String> = patients.keys().collect();
    pids.shuffle(rng);
    let mut batch = Vec::with_capacity(p * k);
    for pid in pids.into_iter().take(p) {
        let recs = &patients[pid];
        if recs.len() >= k {
            let mut pool = recs.clone();
            pool.shuffle(rng);
            batch.extend(pool.into_iter().take(k));
        } else {
            for _ in 0..k {
                batch.push(recs[rng.random_range(0..recs.len())]);
            }
        }
    }
    Ok((modality.clone(), batch))
}
