//! Nearest-neighbor retrieval of a distribution-aligned training subset.
//!
//! Each unlabeled test input pulls its k nearest training records under
//! Euclidean distance on standardized features; the deduplicated union over
//! all queries forms the local manifold, whose label-1 members form the
//! extreme subset. Search is an exact brute-force scan with a deterministic
//! tie-break (smaller distance first, then smaller training index).

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{Dataset, Record};
use crate::error::{EapoError, Result};

/// Deduplicated union of retrieved training records.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalManifold {
    records: Vec<Record>,
    source_indices: Vec<usize>,
    query_count: usize,
}

impl LocalManifold {
    /// Reassemble a manifold from records whose `index` fields are the
    /// training-dataset indices, e.g. when re-importing an audit export.
    /// Records must be sorted by training index without duplicates.
    pub fn from_records(records: Vec<Record>, query_count: usize) -> Result<Self> {
        let source_indices: Vec<usize> = records.iter().map(|r| r.index).collect();
        if source_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EapoError::InvalidConfig(
                "manifold records must be sorted by training index, without duplicates".into(),
            ));
        }
        Ok(Self {
            records,
            source_indices,
            query_count,
        })
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Sorted training-dataset indices of the retrieved records.
    pub fn source_indices(&self) -> &[usize] {
        &self.source_indices
    }

    pub fn query_count(&self) -> usize {
        self.query_count
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Write the manifold in the table format with a leading `source_index`
    /// column, for audit and reproducibility.
    pub fn export_table(&self, path: &Path, delimiter: char) -> Result<()> {
        export_records(&self.records, path, delimiter)
    }
}

/// The label-1 members of a manifold: rare extreme events in the
/// target-aligned region.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtremeSubset {
    records: Vec<Record>,
}

impl ExtremeSubset {
    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn export_table(&self, path: &Path, delimiter: char) -> Result<()> {
        export_records(&self.records, path, delimiter)
    }
}

/// An input with a preferred and a rejected label; the preferred label is
/// the ground truth, the rejected one its complement.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub features: Vec<f64>,
    pub y_plus: u8,
    pub y_minus: u8,
}

/// Indices of the `min(k, n)` training records closest to `query`, sorted by
/// (distance, index) ascending. Ties resolve to the lower index.
pub fn neighborhood(query: &[f64], train: &Dataset, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(EapoError::ZeroK);
    }
    if train.is_empty() {
        return Err(EapoError::EmptyDataset);
    }
    if query.len() != train.dim() {
        return Err(EapoError::DimensionMismatch {
            expected: train.dim(),
            got: query.len(),
        });
    }

    // Max-heap of the best k candidates; the root is the current worst.
    // Comparing (distance², index) keeps ordering identical to distance.
    let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k);
    let worse = |a: (f64, usize), b: (f64, usize)| a.0 > b.0 || (a.0 == b.0 && a.1 > b.1);

    for (idx, rec) in train.records().iter().enumerate() {
        let mut d2 = 0.0;
        for (q, v) in query.iter().zip(&rec.features) {
            let diff = q - v;
            d2 += diff * diff;
        }
        let cand = (d2, idx);
        if heap.len() < k {
            heap.push(cand);
            let last = heap.len() - 1;
            sift_up(&mut heap, last, worse);
        } else if worse(heap[0], cand) {
            heap[0] = cand;
            sift_down(&mut heap, 0, worse);
        }
    }

    let mut out: Vec<(f64, usize)> = heap;
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    Ok(out.into_iter().map(|(_, i)| i).collect())
}

fn sift_up(heap: &mut [(f64, usize)], mut i: usize, worse: impl Fn((f64, usize), (f64, usize)) -> bool) {
    while i > 0 {
        let parent = (i - 1) / 2;
        if worse(heap[i], heap[parent]) {
            heap.swap(i, parent);
            i = parent;
        } else {
            break;
        }
    }
}

fn sift_down(heap: &mut [(f64, usize)], mut i: usize, worse: impl Fn((f64, usize), (f64, usize)) -> bool) {
    loop {
        let (l, r) = (2 * i + 1, 2 * i + 2);
        let mut largest = i;
        if l < heap.len() && worse(heap[l], heap[largest]) {
            largest = l;
        }
        if r < heap.len() && worse(heap[r], heap[largest]) {
            largest = r;
        }
        if largest == i {
            return;
        }
        heap.swap(i, largest);
        i = largest;
    }
}

/// Deduplicated union of the k-neighborhoods of every query. Records are
/// exact copies of training records, ordered by training index, so the
/// result is independent of query order.
pub fn build_local_manifold(
    queries: &[Vec<f64>],
    train: &Dataset,
    k: usize,
) -> Result<LocalManifold> {
    if queries.is_empty() {
        return Err(EapoError::EmptyQuerySet);
    }
    let mut indices = BTreeSet::new();
    for query in queries {
        indices.extend(neighborhood(query, train, k)?);
    }
    let source_indices: Vec<usize> = indices.into_iter().collect();
    let records: Vec<Record> = source_indices
        .iter()
        .map(|&i| train.records()[i].clone())
        .collect();
    Ok(LocalManifold {
        records,
        source_indices,
        query_count: queries.len(),
    })
}

/// The label-1 records of a manifold, in manifold order. May be empty;
/// callers decide how to treat that.
pub fn extract_extreme(manifold: &LocalManifold) -> ExtremeSubset {
    ExtremeSubset {
        records: manifold
            .records
            .iter()
            .filter(|r| r.label == 1)
            .cloned()
            .collect(),
    }
}

/// One preference pair per record, order preserved: the true label is
/// preferred, its complement rejected.
pub fn make_preference_pairs(records: &[Record]) -> Vec<PreferencePair> {
    records
        .iter()
        .map(|r| PreferencePair {
            features: r.features.clone(),
            y_plus: r.label,
            y_minus: 1 - r.label,
        })
        .collect()
}

fn export_records(records: &[Record], path: &Path, delimiter: char) -> Result<()> {
    let dim = records.first().map_or(0, |r| r.features.len());
    let has_intensity = records.iter().any(|r| r.intensity.is_some());
    let mut out = String::from("source_index");
    for i in 0..dim {
        out.push(delimiter);
        let _ = write!(out, "f{i}");
    }
    out.push(delimiter);
    out.push_str(if has_intensity { "dm" } else { "label" });
    out.push('\n');
    for rec in records {
        let _ = write!(out, "{}", rec.index);
        for v in &rec.features {
            out.push(delimiter);
            let _ = write!(out, "{v}");
        }
        out.push(delimiter);
        if has_intensity {
            let _ = write!(out, "{}", rec.intensity.unwrap_or(0.0));
        } else {
            let _ = write!(out, "{}", rec.label);
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| EapoError::Io {
        path: path.display().to_string(),
        source: e,
    })
}
