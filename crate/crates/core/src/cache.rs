//! On-disk cache of pooled feature vectors and predictions, keyed by
//! `(model identifier, image id)`.
//!
//! Layout under `root/<model_id>/`:
//!
//! * `vectors.f32` - little-endian `f32` feature vectors, back to back;
//! * `index.tsv`   - one line per image: `image_id`, byte offset, predicted
//!   class, logit of the predicted class (tab separated);
//! * `meta.json`   - model identifier and feature count.
//!
//! Feature maps are never cached; they are recomputed when needed.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CacheRecord {
    pub image_id: String,
    pub predicted: usize,
    pub predicted_logit: f32,
    pub vector: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct IndexEntry {
    offset: u64,
    predicted: usize,
    predicted_logit: f32,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheMeta {
    model_id: String,
    feature_count: usize,
}

#[derive(Debug)]
struct Inner {
    /// image id -> entry, plus insertion order for stable iteration.
    index: BTreeMap<String, IndexEntry>,
    order: Vec<String>,
    vectors: File,
    index_file: File,
    next_offset: u64,
}

#[derive(Debug)]
pub struct ActivationCache {
    dir: PathBuf,
    model_id: String,
    feature_count: usize,
    inner: Mutex<Inner>,
}

fn valid_image_id(id: &str) -> bool {
    !id.is_empty() && !id.contains(['\t', '\n', '\r'])
}

impl ActivationCache {
    /// Opens (or creates) the cache for `model_id` under `root`.
    pub fn open(root: &Path, model_id: &str, feature_count: usize) -> Result<Self> {
        if !valid_image_id(model_id) || model_id.contains(['/', '\\']) {
            return Err(Error::InvalidConfig(format!(
                "model identifier `{model_id}` is not usable as a directory name"
            )));
        }
        let dir = root.join(model_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let meta_path = dir.join("meta.json");
        if meta_path.exists() {
            let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
            let meta: CacheMeta = serde_json::from_str(&text)?;
            if meta.feature_count != feature_count || meta.model_id != model_id {
                return Err(Error::format(
                    "activation cache",
                    format!(
                        "{} holds {} features for `{}`, expected {} for `{}`",
                        dir.display(),
                        meta.feature_count,
                        meta.model_id,
                        feature_count,
                        model_id
                    ),
                ));
            }
        } else {
            let meta = CacheMeta {
                model_id: model_id.to_string(),
                feature_count,
            };
            std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
                .map_err(|e| Error::io(&meta_path, e))?;
        }

        let vectors_path = dir.join("vectors.f32");
        let index_path = dir.join("index.tsv");
        let open = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .read(true)
                .append(true)
                .open(p)
                .map_err(|e| Error::io(p, e))
        };
        let vectors = open(&vectors_path)?;
        let index_file = open(&index_path)?;

        let mut index = BTreeMap::new();
        let mut order = Vec::new();
        let reader = BufReader::new(File::open(&index_path).map_err(|e| Error::io(&index_path, e))?);
        let record_len = (feature_count * 4) as u64;
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(&index_path, e))?;
            if line.is_empty() {
                continue;
            }
            let bad = || Error::format("cache index", format!("line {}: `{line}`", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, offset, predicted, logit] = fields[..] else {
                return Err(bad());
            };
            let entry = IndexEntry {
                offset: offset.parse().map_err(|_| bad())?,
                predicted: predicted.parse().map_err(|_| bad())?,
                predicted_logit: logit.parse().map_err(|_| bad())?,
            };
            if entry.offset % record_len != 0 {
                return Err(bad());
            }
            if index.insert(id.to_string(), entry).is_none() {
                order.push(id.to_string());
            }
        }
        let next_offset = vectors.metadata().map_err(|e| Error::io(&vectors_path, e))?.len();
        if index.values().any(|e: &IndexEntry| e.offset + record_len > next_offset) {
            return Err(Error::format("activation cache", "index points past the vector file"));
        }
        Ok(ActivationCache {
            dir,
            model_id: model_id.to_string(),
            feature_count,
            inner: Mutex::new(Inner {
                index,
                order,
                vectors,
                index_file,
                next_offset,
            }),
        })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.inner.lock().unwrap().index.contains_key(image_id)
    }

    /// Appends a record. Rewriting an identical record is a no-op; a different
    /// record for an existing image id is rejected.
    pub fn insert(&self, record: &CacheRecord) -> Result<()> {
        if !valid_image_id(&record.image_id) {
            return Err(Error::format("image id", format!("{:?}", record.image_id)));
        }
        if record.vector.len() != self.feature_count {
            return Err(Error::LengthMismatch {
                left: record.vector.len(),
                right: self.feature_count,
            });
        }
        let mut inner = self.inner.lock().unwrap();
        if let Some(&entry) = inner.index.get(&record.image_id) {
            let existing = read_vector(&mut inner.vectors, entry.offset, self.feature_count)
                .map_err(|e| Error::io(self.dir.join("vectors.f32"), e))?;
            let same = entry.predicted == record.predicted
                && entry.predicted_logit.to_bits() == record.predicted_logit.to_bits()
                && existing
                    .iter()
                    .zip(&record.vector)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            return if same {
                Ok(())
            } else {
                Err(Error::ConflictingWrite {
                    model_id: self.model_id.clone(),
                    image_id: record.image_id.clone(),
                })
            };
        }
        let bytes: Vec<u8> = record.vector.iter().flat_map(|v| v.to_le_bytes()).collect();
        let offset = inner.next_offset;
        inner
            .vectors
            .write_all(&bytes)
            .and_then(|_| inner.vectors.flush())
            .map_err(|e| Error::io(self.dir.join("vectors.f32"), e))?;
        let line = format!(
            "{}\t{}\t{}\t{}\n",
            record.image_id, offset, record.predicted, record.predicted_logit
        );
        inner
            .index_file
            .write_all(line.as_bytes())
            .and_then(|_| inner.index_file.flush())
            .map_err(|e| Error::io(self.dir.join("index.tsv"), e))?;
        inner.next_offset += bytes.len() as u64;
        inner.index.insert(
            record.image_id.clone(),
            IndexEntry {
                offset,
                predicted: record.predicted,
                predicted_logit: record.predicted_logit,
            },
        );
        inner.order.push(record.image_id.clone());
        Ok(())
    }

    pub fn get(&self, image_id: &str) -> Result<CacheRecord> {
        let mut inner = self.inner.lock().unwrap();
        let entry = *inner
            .index
            .get(image_id)
            .ok_or_else(|| Error::UnknownImage(image_id.to_string()))?;
        let vector = read_vector(&mut inner.vectors, entry.offset, self.feature_count)
            .map_err(|e| Error::io(self.dir.join("vectors.f32"), e))?;
        Ok(CacheRecord {
            image_id: image_id.to_string(),
            predicted: entry.predicted,
            predicted_logit: entry.predicted_logit,
            vector,
        })
    }

    /// All records in insertion order.
    pub fn records(&self) -> Result<Vec<CacheRecord>> {
        let inner = self.inner.lock().unwrap();
        let path = self.dir.join("vectors.f32");
        let mut bytes = Vec::new();
        File::open(&path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(&path, e))?;
        let record_len = self.feature_count * 4;
        inner
            .order
            .iter()
            .map(|id| {
                let entry = inner.index[id];
                let start = entry.offset as usize;
                let chunk = bytes
                    .get(start..start + record_len)
                    .ok_or_else(|| Error::format("activation cache", "truncated vector file"))?;
                Ok(CacheRecord {
                    image_id: id.clone(),
                    predicted: entry.predicted,
                    predicted_logit: entry.predicted_logit,
                    vector: chunk
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                })
            })
            .collect()
    }
}

fn read_vector(file: &mut File, offset: u64, len: usize) -> std::io::Result<Vec<f32>> {
    let mut buf = vec![0u8; len * 4];
    file.seek(SeekFrom::Start(offset))?;
    file.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn record(id: &str, seed: f32) -> CacheRecord {
        CacheRecord {
            image_id: id.to_string(),
            predicted: (seed as usize) % 3,
            predicted_logit: seed * 1.5,
            vector: (0..4).map(|k| seed + k as f32 * 0.25).collect(),
        }
    }

    #[test]
    fn persists_and_reopens() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = ActivationCache::open(dir.path(), "m", 4).unwrap();
            cache.insert(&record("a", 1.0)).unwrap();
            cache.insert(&record("b", 2.0)).unwrap();
        }
        let cache = ActivationCache::open(dir.path(), "m", 4).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.get("b").unwrap(), record("b", 2.0));
        let all = cache.records().unwrap();
        assert_eq!(all, vec![record("a", 1.0), record("b", 2.0)]);
        let index = std::fs::read_to_string(dir.path().join("m/index.tsv")).unwrap();
        assert_eq!(index.lines().next().unwrap(), "a\t0\t1\t1.5");
        assert_eq!(index.lines().nth(1).unwrap(), "b\t16\t2\t3");
    }

    #[test]
    fn identical_rewrite_is_accepted_conflict_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ActivationCache::open(dir.path(), "m", 4).unwrap();
        cache.insert(&record("a", 1.0)).unwrap();
        cache.insert(&record("a", 1.0)).unwrap();
        assert_eq!(cache.len(), 1);
        let err = cache.insert(&record("a", 2.0)).unwrap_err();
        assert!(matches!(err, Error::ConflictingWrite { .. }));
    }

    #[test]
    fn wrong_length_and_feature_count_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ActivationCache::open(dir.path(), "m", 3).unwrap();
        assert!(cache.insert(&record("a", 1.0)).is_err());
        drop(cache);
        assert!(ActivationCache::open(dir.path(), "m", 4).is_err());
    }

    #[test]
    fn concurrent_distinct_writers() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ActivationCache::open(dir.path(), "m", 4).unwrap());
        std::thread::scope(|s| {
            for t in 0..8 {
                let cache = Arc::clone(&cache);
                s.spawn(move || {
                    for k in 0..25 {
                        cache.insert(&record(&format!("img-{t}-{k}"), (t * 25 + k) as f32)).unwrap();
                    }
                });
            }
        });
        assert_eq!(cache.len(), 200);
        let reopened = ActivationCache::open(dir.path(), "m", 4).unwrap();
        for t in 0..8 {
            for k in 0..25 {
                let id = format!("img-{t}-{k}");
                assert_eq!(reopened.get(&id).unwrap(), record(&id, (t * 25 + k) as f32));
            }
        }
    }
}
