//! Document field storage. Either everything is held in memory, or fields
//! are read back from the last snapshot's `documents.jsonl` on demand with
//! only unsaved changes kept resident.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io;
use std::sync::Arc;

use super::snapshot::SnapshotDoc;
use super::DocId;
use crate::dsl::Fields;

#[derive(Debug)]
pub(super) enum FieldStore {
    Memory(BTreeMap<DocId, Fields>),
    Disk(DiskStore),
}

#[derive(Debug, Default)]
pub(super) struct DiskStore {
    file: Option<Arc<File>>,
    /// Byte span of each document line in `file`.
    offsets: HashMap<DocId, (u64, usize)>,
    /// Changes since the snapshot behind `file`, tagged with the generation
    /// at which they were made. `None` is a deletion.
    overlay: BTreeMap<DocId, (u64, Option<Fields>)>,
}

#[cfg(unix)]
fn read_span(file: &File, offset: u64, len: usize) -> io::Result<Vec<u8>> {
    use std::os::unix::fs::FileExt;
    let mut buf = vec![0; len];
    file.read_exact_at(&mut buf, offset)?;
    Ok(buf)
}

#[cfg(windows)]
fn read_span(file: &File, offset: u64, len: usize) -> io::Result<Vec<u8>> {
    use std::os::windows::fs::FileExt;
    let mut buf = vec![0; len];
    let mut done = 0;
    while done < len {
        let n = file.seek_read(&mut buf[done..], offset + done as u64)?;
        if n == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        done += n;
    }
    Ok(buf)
}

impl FieldStore {
    pub fn new(cached: bool) -> Self {
        if cached {
            FieldStore::Memory(BTreeMap::new())
        } else {
            FieldStore::Disk(DiskStore::default())
        }
    }

    pub fn is_cached(&self) -> bool {
        matches!(self, FieldStore::Memory(_))
    }

    pub fn get(&self, id: DocId) -> io::Result<Option<Cow<'_, Fields>>> {
        match self {
            FieldStore::Memory(m) => Ok(m.get(&id).map(Cow::Borrowed)),
            FieldStore::Disk(d) => {
                if let Some((_, entry)) = d.overlay.get(&id) {
                    return Ok(entry.as_ref().map(Cow::Borrowed));
                }
                let (Some(file), Some(&(offset, len))) = (&d.file, d.offsets.get(&id)) else {
                    return Ok(None);
                };
                let line = read_span(file, offset, len)?;
                let doc: SnapshotDoc =
                    serde_json::from_slice(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                Ok(Some(Cow::Owned(doc.fields)))
            }
        }
    }

    pub fn put(&mut self, id: DocId, fields: Fields, generation: u64) {
        match self {
            FieldStore::Memory(m) => {
                m.insert(id, fields);
            }
            FieldStore::Disk(d) => {
                d.overlay.insert(id, (generation, Some(fields)));
            }
        }
    }

    pub fn remove(&mut self, id: DocId, generation: u64) {
        match self {
            FieldStore::Memory(m) => {
                m.remove(&id);
            }
            FieldStore::Disk(d) => {
                d.overlay.insert(id, (generation, None));
            }
        }
    }

    /// Points a disk store at a freshly written snapshot taken at
    /// `generation`, dropping overlay entries that snapshot already covers.
    pub fn attach_snapshot(&mut self, file: File, offsets: HashMap<DocId, (u64, usize)>, generation: u64) {
        if let FieldStore::Disk(d) = self {
            d.file = Some(Arc::new(file));
            d.offsets = offsets;
            d.overlay.retain(|_, (g, _)| *g > generation);
        }
    }

    /// Number of documents whose fields are held in memory.
    pub fn resident(&self) -> usize {
        match self {
            FieldStore::Memory(m) => m.len(),
            FieldStore::Disk(d) => d.overlay.values().filter(|(_, f)| f.is_some()).count(),
        }
    }
}
