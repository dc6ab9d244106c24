//! Snapshot files.
//!
//! A snapshot directory holds three UTF-8 files, each headed by a
//! `#sha256:<hex>` line covering the rest of the file:
//!
//! * `documents.jsonl`: one `{"id","vector","fields"}` object per line,
//!   `vector` being the [`VectorKey`] string.
//! * `indices.json`: `{"fields":[...]}`, the registered index names.
//!   Index contents are rebuilt from the documents on load.
//! * `meta.json`: `{"next_id","dim","format_version"}`.
//!
//! Files are written as `<name>.tmp`, synced, then renamed into place.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DocId, Engine, EngineError, Result, VectorKey};
use crate::dsl::Fields;
use crate::Vector;

pub const FORMAT_VERSION: u32 = 1;
pub(super) const DOCUMENTS: &str = "documents.jsonl";
pub(super) const INDICES: &str = "indices.json";
pub(super) const META: &str = "meta.json";
const FILES: [&str; 3] = [DOCUMENTS, INDICES, META];

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(super) struct SnapshotDoc {
    pub id: DocId,
    pub vector: String,
    pub fields: Fields,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndicesFile {
    fields: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaFile {
    next_id: DocId,
    dim: Option<usize>,
    format_version: u32,
}

pub(super) struct LoadedDoc {
    pub id: DocId,
    pub key: VectorKey,
    pub vector: Vector,
    pub fields: Fields,
    pub span: (u64, usize),
}

pub(super) struct Loaded {
    pub dim: Option<usize>,
    pub next_id: DocId,
    pub indices: Vec<String>,
    pub docs: Vec<LoadedDoc>,
}

pub(super) fn exists_any(dir: &Path) -> bool {
    FILES.iter().any(|f| dir.join(f).exists())
}

pub(super) fn open_documents(dir: &Path) -> Result<File> {
    let path = dir.join(DOCUMENTS);
    File::open(&path).map_err(|e| EngineError::io(format!("opening {}", path.display()), e))
}

fn corrupt(file: &str, offset: usize, reason: impl Into<String>) -> EngineError {
    EngineError::CorruptSnapshot {
        file: file.to_string(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn checksum(body: &[u8]) -> String {
    hex::encode(Sha256::digest(body))
}

/// Splits the checksum header off `bytes`, returning the body, its offset,
/// and whether the checksum matches.
fn split_checked<'a>(name: &str, bytes: &'a [u8]) -> Result<(&'a [u8], usize, bool)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| corrupt(name, 0, "missing checksum header"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt(name, 0, "header is not UTF-8"))?;
    let expected = header
        .strip_prefix("#sha256:")
        .ok_or_else(|| corrupt(name, 0, "missing checksum header"))?;
    let body = &bytes[nl + 1..];
    Ok((body, nl + 1, checksum(body) == expected))
}

fn read_file(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| EngineError::io(format!("reading {}", path.display()), e))
}

pub(super) fn read(dir: &Path) -> Result<Loaded> {
    let missing: Vec<String> = FILES
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| f.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(EngineError::MissingFiles {
            dir: dir.display().to_string(),
            missing,
        });
    }

    let bytes = read_file(dir, META)?;
    let (body, start, ok) = split_checked(META, &bytes)?;
    if !ok {
        return Err(corrupt(META, 0, "checksum mismatch"));
    }
    let meta: MetaFile = serde_json::from_slice(body).map_err(|e| corrupt(META, start, e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(corrupt(
            META,
            start,
            format!("unsupported format_version {}", meta.format_version),
        ));
    }

    let bytes = read_file(dir, INDICES)?;
    let (body, start, ok) = split_checked(INDICES, &bytes)?;
    let indices: IndicesFile = serde_json::from_slice(body).map_err(|e| corrupt(INDICES, start, e.to_string()))?;
    if !ok {
        log::warn!("{INDICES}: checksum mismatch; rebuilding indices for the fields it lists");
    }

    let bytes = read_file(dir, DOCUMENTS)?;
    let (body, start, ok) = split_checked(DOCUMENTS, &bytes)?;
    let mut docs = Vec::new();
    let mut seen_keys = HashMap::new();
    let mut offset = start;
    for line in body.split_inclusive(|&b| b == b'\n') {
        let content = line.strip_suffix(b"\n").unwrap_or(line);
        let at = offset;
        offset += line.len();
        if content.is_empty() {
            continue;
        }
        let doc: SnapshotDoc = serde_json::from_slice(content).map_err(|e| corrupt(DOCUMENTS, at, e.to_string()))?;
        let key = VectorKey::parse(&doc.vector)
            .map_err(|_| corrupt(DOCUMENTS, at, format!("bad vector key {:?}", doc.vector)))?;
        let vector = key.decode().expect("parsed key decodes");
        if meta.dim != Some(vector.dim()) {
            return Err(corrupt(
                DOCUMENTS,
                at,
                format!("document {} has dimension {}", doc.id, vector.dim()),
            ));
        }
        if doc.id >= meta.next_id {
            return Err(corrupt(DOCUMENTS, at, format!("document {} not below next_id", doc.id)));
        }
        if docs.last().is_some_and(|d: &LoadedDoc| d.id >= doc.id) {
            return Err(corrupt(DOCUMENTS, at, "ids not strictly increasing"));
        }
        if let Some(fields) = doc.fields.iter().find(|(_, v)| !v.is_valid()) {
            return Err(corrupt(DOCUMENTS, at, format!("invalid value for {:?}", fields.0)));
        }
        if seen_keys.insert(key.clone(), doc.id).is_some() {
            return Err(corrupt(DOCUMENTS, at, "duplicate vector"));
        }
        docs.push(LoadedDoc {
            id: doc.id,
            key,
            vector,
            fields: doc.fields,
            span: (at as u64, content.len()),
        });
    }
    if !ok {
        return Err(corrupt(DOCUMENTS, bytes.len(), "checksum mismatch"));
    }
    Ok(Loaded {
        dim: meta.dim,
        next_id: meta.next_id,
        indices: indices.fields,
        docs,
    })
}

fn write_atomic(dir: &Path, name: &str, body: &[u8]) -> Result<usize> {
    let header = format!("#sha256:{}\n", checksum(body));
    let tmp = dir.join(format!("{name}.tmp"));
    let ctx = |e| EngineError::io(format!("writing {}", tmp.display()), e);
    let mut file = File::create(&tmp).map_err(ctx)?;
    file.write_all(header.as_bytes()).map_err(ctx)?;
    file.write_all(body).map_err(ctx)?;
    file.sync_all().map_err(ctx)?;
    let dest = dir.join(name);
    fs::rename(&tmp, &dest).map_err(|e| EngineError::io(format!("renaming to {}", dest.display()), e))?;
    Ok(header.len())
}

fn sync_dir(dir: &Path) {
    #[cfg(unix)]
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    #[cfg(not(unix))]
    let _ = dir;
}

struct Image {
    generation: u64,
    dim: Option<usize>,
    next_id: DocId,
    indices: Vec<String>,
    docs: Vec<(DocId, VectorKey, Fields)>,
}

impl Engine {
    /// Writes a snapshot to the engine's data directory.
    pub fn save(&self) -> Result<()> {
        let dir = self
            .config
            .data_dir
            .clone()
            .ok_or_else(|| EngineError::InvalidArgument("engine has no data directory".into()))?;
        self.save_inner(&dir, true)
    }

    /// Writes a snapshot to `dir`. Saving anywhere but the engine's own data
    /// directory leaves the dirty flag untouched.
    pub fn save_to(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let home = self.config.data_dir.as_deref().is_some_and(|h| same_dir(h, dir));
        self.save_inner(dir, home)
    }

    fn save_inner(&self, dir: &Path, home: bool) -> Result<()> {
        let _guard = self.save_lock.lock();
        let image = {
            let st = self.state.read();
            let mut docs = Vec::with_capacity(st.vectors.len());
            for (&id, (key, _)) in &st.vectors {
                docs.push((id, key.clone(), st.fields(id)?));
            }
            Image {
                generation: st.generation,
                dim: st.dim,
                next_id: st.next_id,
                indices: st.index.names().map(str::to_string).collect(),
                docs,
            }
        };

        fs::create_dir_all(dir).map_err(|e| EngineError::io(format!("creating {}", dir.display()), e))?;
        let mut body = Vec::new();
        let mut spans = Vec::with_capacity(image.docs.len());
        for (id, key, fields) in image.docs {
            let line = SnapshotDoc {
                id,
                vector: key.as_str().to_string(),
                fields,
            };
            let start = body.len();
            serde_json::to_writer(&mut body, &line).expect("document serializes");
            spans.push((id, start, body.len() - start));
            body.push(b'\n');
        }
        let header_len = write_atomic(dir, DOCUMENTS, &body)?;
        let mut indices = serde_json::to_vec(&IndicesFile { fields: image.indices }).expect("serializes");
        indices.push(b'\n');
        write_atomic(dir, INDICES, &indices)?;
        let mut meta = serde_json::to_vec(&MetaFile {
            next_id: image.next_id,
            dim: image.dim,
            format_version: FORMAT_VERSION,
        })
        .expect("serializes");
        meta.push(b'\n');
        write_atomic(dir, META, &meta)?;
        sync_dir(dir);

        if home {
            let mut st = self.state.write();
            if !st.store.is_cached() {
                let file = open_documents(dir)?;
                let offsets = spans
                    .into_iter()
                    .map(|(id, start, len)| (id, ((header_len + start) as u64, len)))
                    .collect();
                st.store.attach_snapshot(file, offsets, image.generation);
            }
            self.saved_generation.store(image.generation, Ordering::Release);
        }
        Ok(())
    }

    /// Starts a background thread that saves the engine whenever it is
    /// dirty, checking every `interval`.
    pub fn spawn_flusher(self: &Arc<Self>, interval: Duration) -> FlusherHandle {
        let stop = Arc::new(AtomicBool::new(false));
        let engine = Arc::clone(self);
        let flag = Arc::clone(&stop);
        let thread = std::thread::Builder::new()
            .name("bhakti-flusher".into())
            .spawn(move || {
                let tick = interval.min(Duration::from_millis(50));
                let mut last = Instant::now();
                while !flag.load(Ordering::Acquire) {
                    std::thread::sleep(tick);
                    if last.elapsed() < interval {
                        continue;
                    }
                    last = Instant::now();
                    if engine.is_dirty() {
                        if let Err(e) = engine.save() {
                            log::error!("background save failed: {e}");
                        }
                    }
                }
            })
            .expect("spawn flusher thread");
        FlusherHandle {
            stop,
            thread: Some(thread),
        }
    }
}

fn same_dir(a: &Path, b: &Path) -> bool {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| PathBuf::from(p));
    canon(a) == canon(b)
}

/// Stops the background flusher when dropped.
#[derive(Debug)]
pub struct FlusherHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl FlusherHandle {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for FlusherHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}
