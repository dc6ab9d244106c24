use std::fmt;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricError;
use crate::Vector;

/// String form of a vector used as its identity in the store.
///
/// Components are written with the shortest decimal that parses back to the
/// same `f64`, joined by commas with no whitespace (`"1,0.5,-2.25"`). Two
/// keys are equal exactly when the vectors are bit-for-bit equal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VectorKey(String);

impl VectorKey {
    pub fn encode(vector: &Vector) -> Self {
        let mut out = String::with_capacity(vector.dim() * 8);
        for (i, x) in vector.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            // `Display` for f64 is shortest-round-trip and never uses an exponent.
            out.push_str(&x.to_string());
        }
        VectorKey(out)
    }

    pub fn decode(&self) -> Result<Vector, MetricError> {
        Self::decode_str(&self.0)
    }

    pub fn decode_str(s: &str) -> Result<Vector, MetricError> {
        let values = s
            .split(',')
            .enumerate()
            .map(|(index, part)| {
                part.parse::<f64>()
                    .ok()
                    .filter(|_| !part.is_empty() && part.trim() == part)
                    .ok_or(MetricError::NonFinite { index })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Vector::new(values)
    }

    pub fn parse(s: &str) -> Result<Self, MetricError> {
        let v = Self::decode_str(s)?;
        let key = Self::encode(&v);
        if key.0 != s {
            // Non-canonical spelling (e.g. "1.0") would break key equality.
            return Err(MetricError::NonFinite { index: 0 });
        }
        Ok(key)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for VectorKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}
