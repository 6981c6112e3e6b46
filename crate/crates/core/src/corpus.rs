//! Dataset quality control: perceptual-hash deduplication, multi-annotator
//! label reconciliation, and per-species distribution reports.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceTag {
    #[default]
    Crawled,
    Photographed,
}

/// Image pixels prepared for hashing (grayscale, row-major). The inferior
/// flag records a human quality judgment (no-herb content, subject too
/// small, gray image); it is carried, not detected.
#[derive(Debug, Clone)]
pub struct ImageRecord {
    pub id: String,
    pub gray: Vec<f64>,
    pub width: usize,
    pub height: usize,
    pub source: SourceTag,
    pub inferior: bool,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, gray: Vec<f64>, width: usize, height: usize) -> Result<Self> {
        if gray.len() != width * height || gray.is_empty() {
            return Err(Error::Data("image pixels do not match extents".into()));
        }
        Ok(ImageRecord {
            id: id.into(),
            gray,
            width,
            height,
            source: SourceTag::default(),
            inferior: false,
        })
    }

    pub fn with_source(mut self, source: SourceTag) -> Self {
        self.source = source;
        self
    }

    pub fn flagged_inferior(mut self) -> Self {
        self.inferior = true;
        self
    }
}

/// Average hash: area-mean downsample to 8x8, threshold each cell against
/// the 64-cell mean, pack row-major with the first cell in the top bit.
/// Cells equal to the mean hash to 0, so a constant image hashes to 0.
pub fn perceptual_hash(record: &ImageRecord) -> Result<u64> {
    if record.width < 8 || record.height < 8 {
        return Err(Error::Data(format!(
            "image {} is {}x{}, need at least 8x8 for hashing",
            record.id, record.width, record.height
        )));
    }
    let mut cells = [0.0f64; 64];
    for (ci, cell) in cells.iter_mut().enumerate() {
        let (r, c) = (ci / 8, ci % 8);
        let r0 = r * record.height / 8;
        let r1 = (r + 1) * record.height / 8;
        let c0 = c * record.width / 8;
        let c1 = (c + 1) * record.width / 8;
        let mut sum = 0.0;
        for i in r0..r1 {
            for j in c0..c1 {
                sum += record.gray[i * record.width + j];
            }
        }
        *cell = sum / ((r1 - r0) * (c1 - c0)) as f64;
    }
    let mean = cells.iter().sum::<f64>() / 64.0;
    let mut hash = 0u64;
    for &cell in &cells {
        hash <<= 1;
        if cell > mean {
            hash |= 1;
        }
    }
    Ok(hash)
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Hash all records, optionally across `threads` workers. Output order is
/// the input order regardless of scheduling.
pub fn hash_records(records: &[ImageRecord], threads: usize) -> Result<Vec<u64>> {
    let threads = threads.max(1).min(records.len().max(1));
    if threads == 1 {
        return records.iter().map(perceptual_hash).collect();
    }
    let chunk = records.len().div_ceil(threads);
    let mut out = vec![0u64; records.len()];
    let mut first_err = None;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (worker, (records_chunk, out_chunk)) in
            records.chunks(chunk).zip(out.chunks_mut(chunk)).enumerate()
        {
            let _ = worker;
            handles.push(scope.spawn(move || -> Result<()> {
                for (r, o) in records_chunk.iter().zip(out_chunk.iter_mut()) {
                    *o = perceptual_hash(r)?;
                }
                Ok(())
            }));
        }
        for h in handles {
            if let Err(e) = h.join().expect("hash worker panicked") {
                first_err.get_or_insert(e);
            }
        }
    });
    match first_err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DuplicatePair {
    pub kept_id: String,
    pub removed_id: String,
    pub hamming: u32,
}

#[derive(Debug, Clone)]
pub struct DedupReport {
    pub kept: Vec<String>,
    pub duplicates: Vec<DuplicatePair>,
}

/// Greedy first-wins scan in input order: a record within `threshold` of any
/// already-kept record is flagged as its duplicate.
pub fn dedup(records: &[ImageRecord], hashes: &[u64], threshold: u32) -> Result<DedupReport> {
    if threshold > 64 {
        return Err(Error::Config("hamming threshold must be in [0, 64]".into()));
    }
    if records.len() != hashes.len() {
        return Err(Error::Data("one hash per record required".into()));
    }
    let mut kept: Vec<usize> = Vec::new();
    let mut duplicates = Vec::new();
    for (idx, &hash) in hashes.iter().enumerate() {
        match kept
            .iter()
            .map(|&k| (k, hamming(hashes[k], hash)))
            .find(|&(_, d)| d <= threshold)
        {
            Some((k, d)) => duplicates.push(DuplicatePair {
                kept_id: records[k].id.clone(),
                removed_id: records[idx].id.clone(),
                hamming: d,
            }),
            None => kept.push(idx),
        }
    }
    Ok(DedupReport {
        kept: kept.into_iter().map(|k| records[k].id.clone()).collect(),
        duplicates,
    })
}

pub fn dedup_report_tsv(report: &DedupReport) -> String {
    let mut out = String::from("kept_id\tremoved_id\thamming\n");
    for pair in &report.duplicates {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            pair.kept_id, pair.removed_id, pair.hamming
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReconcileOutcome {
    Accepted(String),
    /// Two annotators disagree and no third label is present yet.
    NeedsThird,
    Dropped,
}

#[derive(Debug, Clone)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub labels: Vec<String>,
}

/// Majority reconciliation: any label with two votes wins; two disagreeing
/// labels defer to a third; three distinct labels drop the image.
pub fn reconcile(record: &AnnotationRecord) -> Result<ReconcileOutcome> {
    match record.labels.len() {
        2 | 3 => {}
        n => {
            return Err(Error::Data(format!(
                "image {}: need 2 or 3 labels, got {n}",
                record.image_id
            )))
        }
    }
    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    for label in &record.labels {
        *votes.entry(label.as_str()).or_insert(0) += 1;
    }
    if let Some((&label, _)) = votes.iter().find(|(_, &count)| count >= 2) {
        return Ok(ReconcileOutcome::Accepted(label.to_string()));
    }
    Ok(if record.labels.len() == 2 {
        ReconcileOutcome::NeedsThird
    } else {
        ReconcileOutcome::Dropped
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub class: String,
    pub species: String,
    pub image_count: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeciesRow {
    pub species: String,
    pub class_count: u64,
    pub image_count: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SpeciesReport {
    pub species: Vec<SpeciesRow>,
    pub flagged_below_floor: Vec<String>,
    pub total_classes: u64,
    pub total_images: u64,
}

/// Tabulate classes and images per species; flag classes under `floor`
/// images. With a known-species set, unknown names are an error.
pub fn species_report(
    rows: &[ManifestRow],
    known_species: Option<&BTreeSet<String>>,
    floor: u64,
) -> Result<SpeciesReport> {
    if let Some(known) = known_species {
        let unknown: Vec<&str> = rows
            .iter()
            .filter(|r| !known.contains(&r.species))
            .map(|r| r.species.as_str())
            .collect();
        if !unknown.is_empty() {
            return Err(Error::Data(format!(
                "unknown species name(s): {}",
                unknown.join(", ")
            )));
        }
    }
    let mut by_species: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    let mut flagged = Vec::new();
    for row in rows {
        let entry = by_species.entry(row.species.as_str()).or_insert((0, 0));
        entry.0 += 1;
        entry.1 += row.image_count;
        if row.image_count < floor {
            flagged.push(row.class.clone());
        }
    }
    Ok(SpeciesReport {
        species: by_species
            .into_iter()
            .map(|(species, (classes, images))| SpeciesRow {
                species: species.to_string(),
                class_count: classes,
                image_count: images,
            })
            .collect(),
        flagged_below_floor: flagged,
        total_classes: rows.len() as u64,
        total_images: rows.iter().map(|r| r.image_count).sum(),
    })
}
