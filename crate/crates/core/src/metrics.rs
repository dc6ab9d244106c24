//! Exact distance functions.
//!
//! Every metric returns a non-negative distance where smaller means more
//! similar. All functions are generic over [`Scalar`] so they work for both
//! `f32` and `f64`; the engine itself stores `f64`.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use num_traits::{Float, FromPrimitive};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Floating point type the metrics are defined over.
pub trait Scalar: Float + FromPrimitive + fmt::Debug + fmt::Display + Default + Send + Sync + 'static {
    /// Floor applied to per-dimension variance by the standardized metric.
    fn variance_floor() -> Self {
        Self::from_f64(1e-12).expect("variance floor representable")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetricError {
    #[error("DimensionMismatch: expected dimension {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("ZeroVector: vector has zero norm")]
    ZeroVector,
    #[error("EmptyVector: vector must have at least one component")]
    EmptyVector,
    #[error("NonFinite: component {index} is NaN or infinite")]
    NonFinite { index: usize },
    #[error("EmptyDataset: statistics need at least one vector")]
    EmptyDataset,
    #[error("MissingStats: standardized euclidean distance needs dataset statistics")]
    MissingStats,
    #[error("UnknownMetric: unknown metric {0:?}")]
    UnknownMetric(String),
}

/// A non-empty vector of finite components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<T>", into = "Vec<T>")]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct Vector<T: Scalar> {
    values: Vec<T>,
}

impl<T: Scalar> Vector<T> {
    pub fn new(values: Vec<T>) -> Result<Self, MetricError> {
        if values.is_empty() {
            return Err(MetricError::EmptyVector);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite { index });
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<T> {
        self.values
    }

    /// Euclidean norm.
    pub fn norm(&self) -> T {
        norm(&self.values)
    }
}

impl<T: Scalar> Deref for Vector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.values
    }
}

impl<T: Scalar> TryFrom<Vec<T>> for Vector<T> {
    type Error = MetricError;

    fn try_from(values: Vec<T>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl<T: Scalar> From<Vector<T>> for Vec<T> {
    fn from(v: Vector<T>) -> Self {
        v.values
    }
}

/// Distance function selector. The wire names are part of the protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
    #[serde(rename = "euclidean_l2")]
    EuclideanL2,
    #[serde(rename = "euclidean_z_score")]
    EuclideanZScore,
    Chebyshev,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Cosine,
        Metric::Euclidean,
        Metric::EuclideanL2,
        Metric::EuclideanZScore,
        Metric::Chebyshev,
    ];

    pub fn wire_name(self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::Euclidean => "euclidean",
            Metric::EuclideanL2 => "euclidean_l2",
            Metric::EuclideanZScore => "euclidean_z_score",
            Metric::Chebyshev => "chebyshev",
        }
    }

    /// Whether the metric is undefined for zero-norm inputs.
    pub fn needs_nonzero(self) -> bool {
        matches!(self, Metric::Cosine | Metric::EuclideanL2)
    }

    /// Computes the distance between `a` and `b`. `stats` is required for
    /// [`Metric::EuclideanZScore`] and ignored otherwise.
    pub fn distance<T: Scalar>(
        self,
        a: &Vector<T>,
        b: &Vector<T>,
        stats: Option<&DatasetStats<T>>,
    ) -> Result<T, MetricError> {
        match self {
            Metric::Cosine => cosine_distance(a, b),
            Metric::Euclidean => euclidean_distance(a, b),
            Metric::EuclideanL2 => euclidean_l2_distance(a, b),
            Metric::EuclideanZScore => standardized_euclidean_distance(a, b, stats.ok_or(MetricError::MissingStats)?),
            Metric::Chebyshev => chebyshev_distance(a, b),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.wire_name())
    }
}

impl FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.wire_name() == s)
            .ok_or_else(|| MetricError::UnknownMetric(s.to_string()))
    }
}

/// Population mean and variance per dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats<T: Scalar> {
    pub mean: Vec<T>,
    pub variance: Vec<T>,
    pub count: usize,
}

impl<T: Scalar> DatasetStats<T> {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn check_dims(a: &[impl Copy], b: &[impl Copy]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(())
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// `1 - a·b / (‖a‖‖b‖)`, clamped below at zero.
pub fn cosine_distance<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Result<T, MetricError> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(MetricError::ZeroVector);
    }
    let d = T::one() - dot(a, b) / (na * nb);
    Ok(d.max(T::zero()))
}

pub fn euclidean_distance<T: Scalar>(p: &Vector<T>, q: &Vector<T>) -> Result<T, MetricError> {
    check_dims(p, q)?;
    let sum = p.iter().zip(q.iter()).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    });
    Ok(sum.sqrt())
}

/// Euclidean distance between the unit-normalized inputs.
pub fn euclidean_l2_distance<T: Scalar>(a: &Vector<T>, b: &Vector<T>) -> Result<T, MetricError> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(MetricError::ZeroVector);
    }
    let sum = a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| {
        let d = x / na - y / nb;
        acc + d * d
    });
    Ok(sum.sqrt())
}

/// Euclidean distance with each squared difference divided by that
/// dimension's variance (floored at [`Scalar::variance_floor`]).
pub fn standardized_euclidean_distance<T: Scalar>(
    p: &Vector<T>,
    q: &Vector<T>,
    stats: &DatasetStats<T>,
) -> Result<T, MetricError> {
    check_dims(p, q)?;
    check_dims(p, &stats.variance)?;
    let floor = T::variance_floor();
    let sum = p
        .iter()
        .zip(q.iter())
        .zip(&stats.variance)
        .fold(T::zero(), |acc, ((&x, &y), &var)| {
            let d = x - y;
            acc + d * d / var.max(floor)
        });
    Ok(sum.sqrt())
}

pub fn chebyshev_distance<T: Scalar>(p: &Vector<T>, q: &Vector<T>) -> Result<T, MetricError> {
    check_dims(p, q)?;
    Ok(p.iter()
        .zip(q.iter())
        .fold(T::zero(), |acc, (&x, &y)| acc.max((x - y).abs())))
}

/// Population mean and variance (divide by N) of `vectors`, single pass.
pub fn compute_stats<'a, T, I>(vectors: I) -> Result<DatasetStats<T>, MetricError>
where
    T: Scalar,
    I: IntoIterator<Item = &'a Vector<T>>,
{
    let mut iter = vectors.into_iter();
    let first = iter.next().ok_or(MetricError::EmptyDataset)?;
    let dim = first.dim();
    let mut mean = first.as_slice().to_vec();
    let mut m2 = vec![T::zero(); dim];
    let mut count = 1usize;
    for v in iter {
        check_dims(&mean, v)?;
        count += 1;
        let n = T::from_usize(count).expect("count representable");
        for ((m, s), &x) in mean.iter_mut().zip(m2.iter_mut()).zip(v.iter()) {
            let delta = x - *m;
            *m = *m + delta / n;
            *s = *s + delta * (x - *m);
        }
    }
    let n = T::from_usize(count).expect("count representable");
    let variance = m2.into_iter().map(|s| (s / n).max(T::zero())).collect();
    Ok(DatasetStats { mean, variance, count })
}
