//! On-disk layout: one directory per sample holding `original.png`,
//! `blended.png`, `mask.png` (0/255) and `meta.json`, plus a root
//! `manifest.json` listing every sample with SHA-256 content hashes.

use super::{Caption, ErasureSample, OlrdError, Provenance};
use crate::raster::{decode_png, encode_png, Mask};
use crate::tuning::BackgroundTag;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const FORMAT_VERSION: u32 = 1;
const FILES: [&str; 3] = ["original.png", "blended.png", "mask.png"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: String,
    pub tags: Vec<String>,
    pub tag_stats: Vec<BackgroundTag>,
    pub caption: Caption,
    pub offset: (i64, i64),
    pub seed: u64,
    pub source: String,
    pub object_id: u32,
    pub category: String,
    /// File name to hex SHA-256.
    pub hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub shard: usize,
    pub hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub samples: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_sample(dir: &Path, sample_id: &str, s: &ErasureSample) -> Result<BTreeMap<String, String>, OlrdError> {
    let sdir = dir.join(sample_id);
    std::fs::create_dir_all(&sdir)?;
    let blobs = [encode_png(&s.original)?, encode_png(&s.blended)?, s.shifted_mask.to_png()?];
    let mut hashes = BTreeMap::new();
    for (name, bytes) in FILES.iter().zip(&blobs) {
        std::fs::write(sdir.join(name), bytes)?;
        hashes.insert(name.to_string(), sha256_hex(bytes));
    }
    let meta = SampleMeta {
        sample_id: sample_id.to_string(),
        tags: s.tag_names(),
        tag_stats: s.background_tags.clone(),
        caption: s.caption.clone(),
        offset: s.provenance.offset,
        seed: s.provenance.seed,
        source: s.provenance.source.clone(),
        object_id: s.provenance.object_id,
        category: s.provenance.category.clone(),
        hashes: hashes.clone(),
    };
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    std::fs::write(sdir.join("meta.json"), text)?;
    Ok(hashes)
}

/// Write `samples` under `out_dir`. Shards of `shard_size` samples are
/// written by parallel workers; the manifest is assembled afterwards in
/// sample order.
pub fn write_dataset(samples: &[ErasureSample], out_dir: &Path, shard_size: usize) -> Result<Manifest, OlrdError> {
    std::fs::create_dir_all(out_dir)?;
    let shard_size = shard_size.max(1);
    let results: Vec<Result<Vec<ManifestEntry>, OlrdError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(shard_size)
            .enumerate()
            .map(|(shard, chunk)| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let sample_id = format!("{:06}", shard * shard_size + i);
                            let hashes = write_sample(out_dir, &sample_id, s)?;
                            Ok(ManifestEntry { sample_id, shard, hashes })
                        })
                        .collect()
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("shard writer panicked")).collect()
    });
    let mut entries = Vec::with_capacity(samples.len());
    for r in results {
        entries.extend(r?);
    }
    let manifest = Manifest { format_version: FORMAT_VERSION, samples: entries };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, OlrdError> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| OlrdError::CorruptDataset(format!("{}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| OlrdError::CorruptDataset(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(OlrdError::CorruptDataset(format!("format version {}", manifest.format_version)));
    }
    Ok(manifest)
}

/// Random access to a written dataset with hash verification.
#[derive(Clone, Debug)]
pub struct OlrdReader {
    root: PathBuf,
    manifest: Manifest,
}

impl OlrdReader {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, OlrdError> {
        let root = root.into();
        let manifest = read_manifest(&root)?;
        Ok(Self { root, manifest })
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.samples.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<ErasureSample, OlrdError> {
        let entry = self
            .manifest
            .samples
            .get(index)
            .ok_or_else(|| OlrdError::CorruptDataset(format!("no sample at index {index}")))?;
        let sdir = self.root.join(&entry.sample_id);
        let mut blobs = Vec::with_capacity(FILES.len());
        for name in FILES {
            let bytes = std::fs::read(sdir.join(name))
                .map_err(|e| OlrdError::CorruptDataset(format!("{}/{name}: {e}", entry.sample_id)))?;
            if entry.hashes.get(name).map(String::as_str) != Some(sha256_hex(&bytes).as_str()) {
                return Err(OlrdError::CorruptDataset(format!("{}/{name}: hash mismatch", entry.sample_id)));
            }
            blobs.push(bytes);
        }
        let meta_text = std::fs::read_to_string(sdir.join("meta.json"))
            .map_err(|e| OlrdError::CorruptDataset(format!("{}/meta.json: {e}", entry.sample_id)))?;
        let meta: SampleMeta = serde_json::from_str(&meta_text)
            .map_err(|e| OlrdError::CorruptDataset(format!("{}/meta.json: {e}", entry.sample_id)))?;
        let sample = ErasureSample {
            original: decode_png(&blobs[0])?,
            blended: decode_png(&blobs[1])?,
            shifted_mask: Mask::from_png(&blobs[2])?,
            background_tags: meta.tag_stats,
            caption: meta.caption,
            provenance: Provenance {
                source: meta.source,
                object_id: meta.object_id,
                category: meta.category,
                offset: meta.offset,
                seed: meta.seed,
            },
        };
        sample.check().map_err(|e| OlrdError::CorruptDataset(format!("{}: {e}", entry.sample_id)))?;
        Ok(sample)
    }
}
