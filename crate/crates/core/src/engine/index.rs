use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::key::VectorKey;
use super::DocId;
use crate::dsl::{Fields, ScalarValue};

/// Equality key for a field value. `-0.0` and `0.0` share a key since they
/// compare equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
enum ValueKey {
    Bool(bool),
    Number(u64),
    String(String),
}

impl From<&ScalarValue> for ValueKey {
    fn from(v: &ScalarValue) -> Self {
        match v {
            ScalarValue::Bool(b) => ValueKey::Bool(*b),
            ScalarValue::Number(n) => ValueKey::Number(if *n == 0.0 { 0 } else { n.to_bits() }),
            ScalarValue::String(s) => ValueKey::String(s.clone()),
        }
    }
}

/// Index over one field: every document holding the field, keyed by vector,
/// plus equality postings by value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FieldIndex {
    by_vector: BTreeMap<VectorKey, DocId>,
    by_value: HashMap<ValueKey, BTreeSet<DocId>>,
}

impl FieldIndex {
    fn insert(&mut self, id: DocId, key: &VectorKey, value: &ScalarValue) {
        self.by_vector.insert(key.clone(), id);
        self.by_value.entry(value.into()).or_default().insert(id);
    }

    fn remove(&mut self, id: DocId, key: &VectorKey, value: &ScalarValue) {
        self.by_vector.remove(key);
        let vk = ValueKey::from(value);
        if let Some(ids) = self.by_value.get_mut(&vk) {
            ids.remove(&id);
            if ids.is_empty() {
                self.by_value.remove(&vk);
            }
        }
    }

    pub fn entries(&self) -> &BTreeMap<VectorKey, DocId> {
        &self.by_vector
    }

    pub fn len(&self) -> usize {
        self.by_vector.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_vector.is_empty()
    }

    pub fn ids(&self) -> BTreeSet<DocId> {
        self.by_vector.values().copied().collect()
    }

    pub fn ids_with_value(&self, value: &ScalarValue) -> BTreeSet<DocId> {
        self.by_value.get(&value.into()).cloned().unwrap_or_default()
    }
}

/// Field name → [`FieldIndex`] for every registered field.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InvertedIndex {
    fields: BTreeMap<String, FieldIndex>,
}

impl InvertedIndex {
    pub fn is_registered(&self, field: &str) -> bool {
        self.fields.contains_key(field)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.fields.keys().map(String::as_str)
    }

    pub fn get(&self, field: &str) -> Option<&FieldIndex> {
        self.fields.get(field)
    }

    /// Registers `field` and backfills it from `docs`. Returns false if the
    /// field was already registered (nothing changes then).
    pub fn register<'a, I>(&mut self, field: &str, docs: I) -> bool
    where
        I: IntoIterator<Item = (DocId, &'a VectorKey, &'a Fields)>,
    {
        if self.fields.contains_key(field) {
            return false;
        }
        let mut idx = FieldIndex::default();
        for (id, key, fields) in docs {
            if let Some(v) = fields.get(field) {
                idx.insert(id, key, v);
            }
        }
        self.fields.insert(field.to_string(), idx);
        true
    }

    pub fn insert_doc(&mut self, id: DocId, key: &VectorKey, fields: &Fields) {
        for (name, idx) in &mut self.fields {
            if let Some(v) = fields.get(name) {
                idx.insert(id, key, v);
            }
        }
    }

    pub fn remove_doc(&mut self, id: DocId, key: &VectorKey, fields: &Fields) {
        for (name, idx) in &mut self.fields {
            if let Some(v) = fields.get(name) {
                idx.remove(id, key, v);
            }
        }
    }

    pub fn update_field(
        &mut self,
        id: DocId,
        key: &VectorKey,
        field: &str,
        old: Option<&ScalarValue>,
        new: &ScalarValue,
    ) {
        if let Some(idx) = self.fields.get_mut(field) {
            if let Some(old) = old {
                idx.remove(id, key, old);
            }
            idx.insert(id, key, new);
        }
    }

    /// Rebuilds an index with the same registered fields from scratch.
    pub fn rebuilt<'a, I>(&self, docs: I) -> InvertedIndex
    where
        I: IntoIterator<Item = (DocId, &'a VectorKey, &'a Fields)> + Clone,
    {
        let mut out = InvertedIndex::default();
        for name in self.fields.keys() {
            out.register(name, docs.clone());
        }
        out
    }
}
