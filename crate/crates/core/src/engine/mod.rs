//! The Dipamkara storage engine.
//!
//! Documents are flat field maps keyed by a unique vector and an
//! auto-increment id. Registered fields get an inverted index used to narrow
//! filtered searches. All operations are linearizable: reads share a lock,
//! mutations take it exclusively.

mod index;
mod key;
mod snapshot;
mod store;

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use index::{FieldIndex, InvertedIndex};
pub use key::VectorKey;
pub use snapshot::{FlusherHandle, FORMAT_VERSION};

pub use crate::dsl::Fields;
use crate::dsl::{self, Candidates, IndexView, QueryExpr, ScalarValue};
use crate::metrics::{self, Metric, MetricError};
use crate::{DatasetStats, Vector};
use store::FieldStore;

pub type DocId = u64;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("VectorExists: vector [{0}] is already stored")]
    VectorExists(VectorKey),
    #[error("VectorNotFound: vector [{0}] is not stored")]
    VectorNotFound(VectorKey),
    #[error("DimensionMismatch: engine dimension is {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("ZeroVector: zero-norm query vector is undefined under {0}")]
    ZeroVector(Metric),
    #[error("InvalidFieldValue: field {field:?}: {reason}")]
    InvalidFieldValue { field: String, reason: String },
    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),
    #[error("IoError: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
    #[error("CorruptSnapshot: {file} at byte {offset}: {reason}")]
    CorruptSnapshot { file: String, offset: u64, reason: String },
    #[error("MissingFiles: snapshot in {dir} lacks {missing:?}")]
    MissingFiles { dir: String, missing: Vec<String> },
}

impl EngineError {
    /// Stable name used as the prefix of the display message.
    pub fn kind(&self) -> &'static str {
        match self {
            EngineError::VectorExists(_) => "VectorExists",
            EngineError::VectorNotFound(_) => "VectorNotFound",
            EngineError::DimensionMismatch { .. } => "DimensionMismatch",
            EngineError::ZeroVector(_) => "ZeroVector",
            EngineError::InvalidFieldValue { .. } => "InvalidFieldValue",
            EngineError::InvalidArgument(_) => "InvalidArgument",
            EngineError::Io { .. } => "IoError",
            EngineError::CorruptSnapshot { .. } => "CorruptSnapshot",
            EngineError::MissingFiles { .. } => "MissingFiles",
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: io::Error) -> Self {
        EngineError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: DocId,
    pub vector: Vector,
    pub fields: Fields,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnHit {
    #[serde(flatten)]
    pub document: Document,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KnnResult {
    pub hits: Vec<KnnHit>,
    /// The filter referenced an unindexed field and was resolved by scanning.
    pub full_scan: bool,
}

/// How a knn filter is resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FilterStrategy {
    /// Use inverted indices where available.
    #[default]
    Indexed,
    /// Evaluate the filter against every document.
    Scan,
}

/// A state-changing operation, as reported to the commit hook and accepted
/// by [`Engine::apply`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    Create {
        vector: Vector,
        fields: Fields,
        indices: Vec<String>,
    },
    CreateIndex {
        field: String,
    },
    ModDoc {
        vector: Vector,
        field: String,
        value: ScalarValue,
    },
    RemoveByVector {
        vector: Vector,
    },
    RemoveByQuery {
        filter: String,
    },
}

/// A mutation in commit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Commit {
    pub seq: u64,
    #[serde(flatten)]
    pub mutation: Mutation,
}

pub type CommitHook = Arc<dyn Fn(&Commit) + Send + Sync>;

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Snapshot directory. Required when `cached` is false.
    pub data_dir: Option<PathBuf>,
    /// Hold document fields in memory; otherwise read them from the snapshot.
    pub cached: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            cached: true,
        }
    }
}

struct State {
    dim: Option<usize>,
    next_id: DocId,
    vectors: BTreeMap<DocId, (VectorKey, Vector)>,
    by_key: HashMap<VectorKey, DocId>,
    store: FieldStore,
    index: InvertedIndex,
    /// Bumped on every mutation.
    generation: u64,
    /// Bumped when the set of live vectors changes.
    vector_generation: u64,
    commit_seq: u64,
    hook: Option<CommitHook>,
}

impl State {
    fn empty(cached: bool) -> Self {
        State {
            dim: None,
            next_id: 0,
            vectors: BTreeMap::new(),
            by_key: HashMap::new(),
            store: FieldStore::new(cached),
            index: InvertedIndex::default(),
            generation: 0,
            vector_generation: 0,
            commit_seq: 0,
            hook: None,
        }
    }

    fn fields(&self, id: DocId) -> Result<Fields> {
        match self.store.get(id) {
            Ok(Some(f)) => Ok(f.into_owned()),
            Ok(None) => Ok(Fields::new()),
            Err(e) => Err(EngineError::io(format!("reading document {id}"), e)),
        }
    }

    fn document(&self, id: DocId) -> Result<Option<Document>> {
        let Some((_, vector)) = self.vectors.get(&id) else {
            return Ok(None);
        };
        Ok(Some(Document {
            id,
            vector: vector.clone(),
            fields: self.fields(id)?,
        }))
    }

    fn check_dim(&self, v: &Vector) -> Result<()> {
        match self.dim {
            Some(expected) if expected != v.dim() => Err(EngineError::DimensionMismatch {
                expected,
                found: v.dim(),
            }),
            _ => Ok(()),
        }
    }

    fn touch(&mut self) {
        self.generation += 1;
    }

    fn commit(&mut self, mutation: Mutation) {
        self.commit_seq += 1;
        if let Some(hook) = &self.hook {
            hook(&Commit {
                seq: self.commit_seq,
                mutation,
            });
        }
    }

    fn register_index(&mut self, field: &str) -> Result<bool> {
        if self.index.is_registered(field) {
            return Ok(false);
        }
        let mut docs = Vec::with_capacity(self.vectors.len());
        for (&id, (key, _)) in &self.vectors {
            docs.push((id, key.clone(), self.fields(id)?));
        }
        self.index.register(field, docs.iter().map(|(id, k, f)| (*id, k, f)));
        Ok(true)
    }

    fn remove(&mut self, id: DocId) -> Result<()> {
        let fields = self.fields(id)?;
        let (key, _) = self.vectors.remove(&id).expect("live id");
        self.by_key.remove(&key);
        self.index.remove_doc(id, &key, &fields);
        self.touch();
        self.vector_generation += 1;
        let generation = self.generation;
        self.store.remove(id, generation);
        Ok(())
    }

    fn candidates(&self, filter: &QueryExpr, strategy: FilterStrategy) -> Result<Candidates> {
        let view = StateView {
            state: self,
            scan: strategy == FilterStrategy::Scan,
            error: RefCell::new(None),
        };
        let out = dsl::candidates(filter, &view);
        match view.error.into_inner() {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }
}

struct StateView<'a> {
    state: &'a State,
    scan: bool,
    error: RefCell<Option<EngineError>>,
}

impl IndexView for StateView<'_> {
    fn is_indexed(&self, field: &str) -> bool {
        !self.scan && self.state.index.is_registered(field)
    }

    fn ids_with_field(&self, field: &str) -> Option<BTreeSet<DocId>> {
        if self.scan {
            return None;
        }
        self.state.index.get(field).map(FieldIndex::ids)
    }

    fn ids_with_value(&self, field: &str, value: &ScalarValue) -> Option<BTreeSet<DocId>> {
        if self.scan {
            return None;
        }
        self.state.index.get(field).map(|i| i.ids_with_value(value))
    }

    fn all_ids(&self) -> BTreeSet<DocId> {
        self.state.vectors.keys().copied().collect()
    }

    fn with_fields(&self, id: DocId, f: &mut dyn FnMut(&Fields) -> bool) -> Option<bool> {
        if !self.state.vectors.contains_key(&id) {
            return None;
        }
        match self.state.store.get(id) {
            Ok(Some(fields)) => Some(f(&fields)),
            Ok(None) => Some(f(&Fields::new())),
            Err(e) => {
                self.error
                    .borrow_mut()
                    .get_or_insert(EngineError::io(format!("reading document {id}"), e));
                None
            }
        }
    }
}

fn validate_fields(fields: &Fields) -> Result<()> {
    for (name, value) in fields {
        if !value.is_valid() {
            return Err(EngineError::InvalidFieldValue {
                field: name.clone(),
                reason: "numbers must be finite".into(),
            });
        }
    }
    Ok(())
}

/// Thread-safe document store with exact vector search.
pub struct Engine {
    state: RwLock<State>,
    config: EngineConfig,
    stats: Mutex<Option<(u64, Arc<DatasetStats>)>>,
    save_lock: Mutex<()>,
    saved_generation: AtomicU64,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("config", &self.config)
            .field("len", &self.len())
            .finish()
    }
}

impl Engine {
    /// An empty in-memory engine with no snapshot directory.
    pub fn new() -> Self {
        Self::with_state(State::empty(true), EngineConfig::default())
    }

    fn with_state(state: State, config: EngineConfig) -> Self {
        let generation = state.generation;
        Engine {
            state: RwLock::new(state),
            config,
            stats: Mutex::new(None),
            save_lock: Mutex::new(()),
            saved_generation: AtomicU64::new(generation),
        }
    }

    /// Loads the snapshot in `config.data_dir` if one exists, otherwise
    /// starts empty. The directory is created if needed.
    pub fn open(config: EngineConfig) -> Result<Self> {
        let Some(dir) = config.data_dir.clone() else {
            if !config.cached {
                return Err(EngineError::InvalidArgument(
                    "uncached mode needs a data directory".into(),
                ));
            }
            return Ok(Self::with_state(State::empty(true), config));
        };
        std::fs::create_dir_all(&dir).map_err(|e| EngineError::io(format!("creating {}", dir.display()), e))?;
        if snapshot::exists_any(&dir) {
            Self::load_with(&dir, config)
        } else {
            Ok(Self::with_state(State::empty(config.cached), config))
        }
    }

    /// Loads a snapshot; every snapshot file must be present.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        Self::load_with(
            dir,
            EngineConfig {
                data_dir: Some(dir.to_path_buf()),
                cached: true,
            },
        )
    }

    fn load_with(dir: &Path, config: EngineConfig) -> Result<Self> {
        let loaded = snapshot::read(dir)?;
        let mut state = State::empty(config.cached);
        state.dim = loaded.dim;
        state.next_id = loaded.next_id;
        let mut offsets = HashMap::with_capacity(loaded.docs.len());
        for doc in loaded.docs {
            state.by_key.insert(doc.key.clone(), doc.id);
            state.vectors.insert(doc.id, (doc.key, doc.vector));
            offsets.insert(doc.id, doc.span);
            if config.cached {
                state.store.put(doc.id, doc.fields, 0);
            }
        }
        if !config.cached {
            let file = snapshot::open_documents(dir)?;
            state.store.attach_snapshot(file, offsets, 0);
        }
        for field in &loaded.indices {
            state.register_index(field)?;
        }
        Ok(Self::with_state(state, config))
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// Installs a callback invoked, under the write lock, for every
    /// committed mutation in commit order.
    pub fn set_commit_hook(&self, hook: Option<CommitHook>) {
        self.state.write().hook = hook;
    }

    pub fn len(&self) -> usize {
        self.state.read().vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> Option<usize> {
        self.state.read().dim
    }

    pub fn next_id(&self) -> DocId {
        self.state.read().next_id
    }

    pub fn is_dirty(&self) -> bool {
        self.state.read().generation != self.saved_generation.load(Ordering::Acquire)
    }

    /// Number of documents whose fields are resident in memory.
    pub fn resident_documents(&self) -> usize {
        self.state.read().store.resident()
    }

    pub fn create(&self, vector: Vector, fields: Fields, indices: &[String]) -> Result<Document> {
        validate_fields(&fields)?;
        if let Some(bad) = indices.iter().find(|f| f.is_empty()) {
            return Err(EngineError::InvalidArgument(format!("invalid index name {bad:?}")));
        }
        let mut st = self.state.write();
        st.check_dim(&vector)?;
        let key = VectorKey::encode(&vector);
        if st.by_key.contains_key(&key) {
            return Err(EngineError::VectorExists(key));
        }
        for field in indices {
            st.register_index(field)?;
        }
        let id = st.next_id;
        st.next_id += 1;
        st.dim = Some(vector.dim());
        st.index.insert_doc(id, &key, &fields);
        st.by_key.insert(key.clone(), id);
        st.vectors.insert(id, (key, vector.clone()));
        st.touch();
        st.vector_generation += 1;
        let generation = st.generation;
        st.store.put(id, fields.clone(), generation);
        st.commit(Mutation::Create {
            vector: vector.clone(),
            fields: fields.clone(),
            indices: indices.to_vec(),
        });
        Ok(Document { id, vector, fields })
    }

    /// Registers an inverted index on `field`, backfilled over existing
    /// documents. Idempotent; always returns true.
    pub fn create_index(&self, field: &str) -> Result<bool> {
        if field.is_empty() {
            return Err(EngineError::InvalidArgument("index name must not be empty".into()));
        }
        let mut st = self.state.write();
        if st.register_index(field)? {
            st.touch();
            st.commit(Mutation::CreateIndex {
                field: field.to_string(),
            });
        }
        Ok(true)
    }

    pub fn indices(&self) -> Vec<String> {
        self.state.read().index.names().map(str::to_string).collect()
    }

    /// Entries of the index on `field`, if registered.
    pub fn index_entries(&self, field: &str) -> Option<BTreeMap<VectorKey, DocId>> {
        self.state.read().index.get(field).map(|i| i.entries().clone())
    }

    pub fn find_doc_by_vector(&self, vector: &Vector) -> Result<Option<Document>> {
        let st = self.state.read();
        match st.by_key.get(&VectorKey::encode(vector)) {
            Some(&id) => st.document(id),
            None => Ok(None),
        }
    }

    pub fn get(&self, id: DocId) -> Result<Option<Document>> {
        self.state.read().document(id)
    }

    /// Every live document in id order.
    pub fn documents(&self) -> Result<Vec<Document>> {
        let st = self.state.read();
        st.vectors
            .keys()
            .map(|&id| st.document(id).map(|d| d.expect("live id")))
            .collect()
    }

    /// Upserts one field of the document stored under `vector`.
    pub fn mod_doc_by_vector(&self, vector: &Vector, field: &str, value: ScalarValue) -> Result<Document> {
        if !value.is_valid() {
            return Err(EngineError::InvalidFieldValue {
                field: field.to_string(),
                reason: "numbers must be finite".into(),
            });
        }
        let mut st = self.state.write();
        let key = VectorKey::encode(vector);
        let Some(&id) = st.by_key.get(&key) else {
            return Err(EngineError::VectorNotFound(key));
        };
        let mut fields = st.fields(id)?;
        let old = fields.insert(field.to_string(), value.clone());
        st.index.update_field(id, &key, field, old.as_ref(), &value);
        st.touch();
        let generation = st.generation;
        st.store.put(id, fields.clone(), generation);
        st.commit(Mutation::ModDoc {
            vector: vector.clone(),
            field: field.to_string(),
            value,
        });
        Ok(Document {
            id,
            vector: vector.clone(),
            fields,
        })
    }

    pub fn remove_by_vector(&self, vector: &Vector) -> Result<bool> {
        let mut st = self.state.write();
        let Some(&id) = st.by_key.get(&VectorKey::encode(vector)) else {
            return Ok(false);
        };
        st.remove(id)?;
        st.commit(Mutation::RemoveByVector { vector: vector.clone() });
        Ok(true)
    }

    /// Removes every document matching `filter`; returns how many.
    pub fn remove_by_query(&self, filter: &QueryExpr) -> Result<usize> {
        let mut st = self.state.write();
        let ids = st.candidates(filter, FilterStrategy::Indexed)?.ids;
        for &id in &ids {
            st.remove(id)?;
        }
        if !ids.is_empty() {
            st.commit(Mutation::RemoveByQuery {
                filter: dsl::print(filter),
            });
        }
        Ok(ids.len())
    }

    /// Ids of all documents matching `filter`.
    pub fn candidates(&self, filter: &QueryExpr) -> Result<Candidates> {
        self.state.read().candidates(filter, FilterStrategy::Indexed)
    }

    fn dataset_stats(&self, st: &State) -> Result<Option<Arc<DatasetStats>>> {
        let mut cache = self.stats.lock();
        if let Some((generation, stats)) = cache.as_ref() {
            if *generation == st.vector_generation {
                return Ok(Some(stats.clone()));
            }
        }
        let stats = match metrics::compute_stats(st.vectors.values().map(|(_, v)| v)) {
            Ok(s) => Arc::new(s),
            Err(MetricError::EmptyDataset) => return Ok(None),
            Err(e) => return Err(EngineError::InvalidArgument(e.to_string())),
        };
        *cache = Some((st.vector_generation, stats.clone()));
        Ok(Some(stats))
    }

    /// Exact k nearest neighbours of `query`, optionally restricted to
    /// documents matching `filter`. Results are ordered by ascending
    /// distance, ties by ascending id.
    pub fn knn_search(
        &self,
        query: &Vector,
        metric: Metric,
        k: usize,
        filter: Option<&QueryExpr>,
    ) -> Result<KnnResult> {
        self.knn_search_with(query, metric, k, filter, FilterStrategy::Indexed)
    }

    pub fn knn_search_with(
        &self,
        query: &Vector,
        metric: Metric,
        k: usize,
        filter: Option<&QueryExpr>,
        strategy: FilterStrategy,
    ) -> Result<KnnResult> {
        if k == 0 {
            return Err(EngineError::InvalidArgument("k must be at least 1".into()));
        }
        let st = self.state.read();
        st.check_dim(query)?;
        if metric.needs_nonzero() && query.norm() == 0.0 {
            return Err(EngineError::ZeroVector(metric));
        }
        let stats = match metric {
            Metric::EuclideanZScore => match self.dataset_stats(&st)? {
                Some(s) => Some(s),
                None => return Ok(KnnResult::default()),
            },
            _ => None,
        };
        let stats = stats.as_deref();

        let (pool, full_scan) = match filter {
            Some(f) => {
                let c = st.candidates(f, strategy)?;
                (Some(c.ids), c.full_scan)
            }
            None => (None, false),
        };
        let score = |id: DocId, v: &Vector| -> Option<(f64, DocId)> {
            // Zero-norm stored vectors have no cosine/L2 distance; skip them.
            metric.distance(query, v, stats).ok().map(|d| (d, id))
        };
        let mut scored: Vec<(f64, DocId)> = match &pool {
            Some(ids) => ids
                .iter()
                .filter_map(|id| st.vectors.get(id).and_then(|(_, v)| score(*id, v)))
                .collect(),
            None => st.vectors.iter().filter_map(|(id, (_, v))| score(*id, v)).collect(),
        };
        let by_distance = |a: &(f64, DocId), b: &(f64, DocId)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if scored.len() > k {
            scored.select_nth_unstable_by(k - 1, by_distance);
            scored.truncate(k);
        }
        scored.sort_unstable_by(by_distance);
        let hits = scored
            .into_iter()
            .map(|(distance, id)| {
                Ok(KnnHit {
                    document: st.document(id)?.expect("live id"),
                    distance,
                })
            })
            .collect::<Result<_>>()?;
        Ok(KnnResult { hits, full_scan })
    }

    /// Replays a mutation, e.g. from a commit log.
    pub fn apply(&self, mutation: &Mutation) -> Result<()> {
        match mutation {
            Mutation::Create {
                vector,
                fields,
                indices,
            } => self.create(vector.clone(), fields.clone(), indices).map(drop),
            Mutation::CreateIndex { field } => self.create_index(field).map(drop),
            Mutation::ModDoc { vector, field, value } => self.mod_doc_by_vector(vector, field, value.clone()).map(drop),
            Mutation::RemoveByVector { vector } => self.remove_by_vector(vector).map(drop),
            Mutation::RemoveByQuery { filter } => {
                let expr = dsl::parse(filter).map_err(|e| EngineError::InvalidArgument(e.to_string()))?;
                self.remove_by_query(&expr).map(drop)
            }
        }
    }

    /// Verifies the internal invariants: vector and id maps agree, every
    /// inverted index equals one rebuilt from the documents, and `next_id`
    /// exceeds every live id.
    pub fn check_consistency(&self) -> std::result::Result<(), String> {
        let st = self.state.read();
        if st.by_key.len() != st.vectors.len() {
            return Err(format!(
                "{} vector keys for {} documents",
                st.by_key.len(),
                st.vectors.len()
            ));
        }
        for (&id, (key, vector)) in &st.vectors {
            if st.by_key.get(key) != Some(&id) {
                return Err(format!("vector index does not map {key} to {id}"));
            }
            if &VectorKey::encode(vector) != key {
                return Err(format!("document {id} key does not match its vector"));
            }
            if st.dim != Some(vector.dim()) {
                return Err(format!("document {id} has dimension {}", vector.dim()));
            }
            if id >= st.next_id {
                return Err(format!("document {id} not below next_id {}", st.next_id));
            }
        }
        let docs: Vec<(DocId, VectorKey, Fields)> = st
            .vectors
            .iter()
            .map(|(&id, (key, _))| st.fields(id).map(|f| (id, key.clone(), f)))
            .collect::<Result<_>>()
            .map_err(|e| e.to_string())?;
        let rebuilt = st.index.rebuilt(docs.iter().map(|(id, k, f)| (*id, k, f)));
        if rebuilt != st.index {
            return Err("inverted index differs from a rebuild".into());
        }
        Ok(())
    }
}
