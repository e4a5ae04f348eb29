//! Shared numeric and cache types: head vectors, the KV cache, selection masks.

use std::ops::Deref;

use crate::error::{Error, Result};

/// A single d_h-dimensional vector: a query, a key/value row or a centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadVector(Vec<f32>);

impl HeadVector {
    /// Wraps `components`, rejecting empty or non-finite input.
    pub fn new(components: Vec<f32>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyInput("head vector"));
        }
        check_finite(&components)?;
        Ok(Self(components))
    }

    pub fn zeros(d_h: usize) -> Self {
        Self(vec![0.0; d_h.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }
}

impl Deref for HeadVector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for HeadVector {
    type Error = Error;

    fn try_from(v: Vec<f32>) -> Result<Self> {
        Self::new(v)
    }
}

pub(crate) fn check_finite(v: &[f32]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

fn check_dims(a: &[f32], b: &[f32]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Σ a_i·b_i, summed left to right in f32.
///
/// Every scoring path in the crate goes through [`dot_unchecked`], so equal
/// inputs always produce bit-equal scores.
pub fn dot(a: &[f32], b: &[f32]) -> Result<f32> {
    check_dims(a, b)?;
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f32]) -> f32 {
    a.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt() as f32
}

pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    check_dims(a, b)?;
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    Ok((num / (f64::from(na) * f64::from(nb))).clamp(-1.0, 1.0) as f32)
}

/// Unit-length copy of `a`. Fails on a zero vector.
pub fn normalized(a: &[f32]) -> Result<Vec<f32>> {
    let n = norm(a);
    if n == 0.0 {
        return Err(Error::DegenerateVector(
            "cannot normalize zero vector".into(),
        ));
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// Cached key and value rows for one attention head.
///
/// Rows are stored row-major in two flat buffers. Row `i` of `keys` and row
/// `i` of `values` always belong to token `i`; the only mutation is a paired
/// append.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    d_h: usize,
    prefill_len: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl KvCache {
    pub fn new(d_h: usize) -> Result<Self> {
        if d_h == 0 {
            return Err(Error::Parameter("head dimension must be >= 1".into()));
        }
        Ok(Self {
            d_h,
            prefill_len: 0,
            keys: Vec::new(),
            values: Vec::new(),
        })
    }

    /// Builds a cache whose rows all count as prefill tokens.
    pub fn from_prefill(d_h: usize, keys: Vec<f32>, values: Vec<f32>) -> Result<Self> {
        let mut cache = Self::new(d_h)?;
        if keys.len() != values.len() || !keys.len().is_multiple_of(d_h) {
            return Err(Error::Parameter(format!(
                "prefill buffers of {} and {} floats do not form rows of {d_h}",
                keys.len(),
                values.len()
            )));
        }
        check_finite(&keys)?;
        check_finite(&values)?;
        cache.prefill_len = keys.len() / d_h;
        cache.keys = keys;
        cache.values = values;
        Ok(cache)
    }

    /// Appends a key/value pair and returns the new token's index.
    pub fn push(&mut self, key: &[f32], value: &[f32]) -> Result<usize> {
        for row in [key, value] {
            if row.len() != self.d_h {
                return Err(Error::Dimension {
                    expected: self.d_h,
                    actual: row.len(),
                });
            }
            check_finite(row)?;
        }
        self.keys.extend_from_slice(key);
        self.values.extend_from_slice(value);
        Ok(self.len() - 1)
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill_len
    }

    /// Total number of cached tokens (L).
    pub fn len(&self) -> usize {
        self.keys.len() / self.d_h
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn key(&self, i: usize) -> &[f32] {
        &self.keys[i * self.d_h..(i + 1) * self.d_h]
    }

    pub fn value(&self, i: usize) -> &[f32] {
        &self.values[i * self.d_h..(i + 1) * self.d_h]
    }

    pub fn keys(&self) -> impl ExactSizeIterator<Item = &[f32]> {
        self.keys.chunks_exact(self.d_h)
    }

    pub fn keys_flat(&self) -> &[f32] {
        &self.keys
    }

    pub fn values_flat(&self) -> &[f32] {
        &self.values
    }
}

/// The set of token indices retrieved at one decoding step, kept sorted and
/// free of duplicates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct SelectionMask {
    selected: Vec<usize>,
}

impl SelectionMask {
    pub fn from_indices(indices: impl IntoIterator<Item = usize>) -> Self {
        let mut selected: Vec<usize> = indices.into_iter().collect();
        selected.sort_unstable();
        selected.dedup();
        Self { selected }
    }

    /// Every index in `0..len`.
    pub fn all(len: usize) -> Self {
        Self {
            selected: (0..len).collect(),
        }
    }

    /// Checks that every index addresses a token of a cache holding `len` rows.
    pub fn validate(&self, len: usize) -> Result<()> {
        match self.selected.last() {
            Some(&index) if index >= len => Err(Error::OutOfRange { index, len }),
            _ => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.selected.binary_search(&index).is_ok()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.selected
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = usize> + '_ {
        self.selected.iter().copied()
    }

    pub fn union(&self, other: &Self) -> Self {
        Self::from_indices(self.iter().chain(other.iter()))
    }

    pub fn intersection_len(&self, other: &Self) -> usize {
        let (small, large) = if self.len() <= other.len() {
            (self, other)
        } else {
            (other, self)
        };
        small.iter().filter(|&i| large.contains(i)).count()
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.iter().all(|i| other.contains(i))
    }
}

impl FromIterator<usize> for SelectionMask {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        Self::from_indices(iter)
    }
}
