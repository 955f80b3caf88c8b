//! Candidate pools: tabulated molecules with one or more objective values,
//! plus optional cached feature vectors.
//!
//! A pool is loaded from a CSV file with header `id,smiles,y0[,y1,...]`.
//! Objectives keep their file values; each objective carries a direction, and
//! everything downstream of the pool works in maximization convention
//! (minimized objectives are negated on the way in and reported in file
//! convention on the way out). Feature vectors can be attached from a binary
//! feature file: magic `MBOF`, two little-endian u32 counts (rows, columns),
//! then row-major f32 values.

use std::collections::{BTreeSet, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("bad header: expected `id,smiles,y0[,y1,...]`, found `{found}`")]
    Header { found: String },
    #[error("row {row}: {reason}")]
    Row { row: usize, reason: String },
    #[error("row {row}: duplicate id {id:?}")]
    DuplicateId { row: usize, id: String },
    #[error("pool is empty")]
    EmptyPool,
    #[error("{count} direction(s) supplied for {objectives} objective(s)")]
    DirectionCount { count: usize, objectives: usize },
    #[error("initial design of {m} requested but only {available} candidates remain")]
    InitialTooLarge { m: usize, available: usize },
    #[error("initial design size must be at least 1")]
    InitialEmpty,
    #[error("subsample of {k} requested from a pool of {n}")]
    SubsampleTooLarge { k: usize, n: usize },
    #[error("candidate {index} is not in the remaining pool")]
    NotRemaining { index: usize },
    #[error("feature file {path}: {reason}")]
    FeatureFile { path: String, reason: String },
    #[error("feature matrix has {rows} rows but the pool has {pool} entries")]
    FeatureRowMismatch { rows: usize, pool: usize },
}

/// Optimization direction of one objective column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

impl Direction {
    /// Sign applied to file values to obtain internal (maximize) values.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }
}

/// One pool row: identifier, structure, objective values in file convention.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: String,
    pub smiles: String,
    pub objectives: Vec<f64>,
}

/// Dense feature matrix, row i holding the feature vector of pool entry i.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), n * d, "feature data length mismatch");
        FeatureMatrix { n, d, data }
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Rows `indices` stacked into an nalgebra matrix.
    pub fn gather(&self, indices: &[usize]) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(indices.len(), self.d, |r, c| self.row(indices[r])[c])
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"MBOF";

/// Read a binary feature file (`MBOF` header, u32 LE rows, u32 LE columns,
/// row-major f32 values). Non-finite values are rejected.
pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix, PoolError> {
    let display = path.display().to_string();
    let io_err = |source| PoolError::Io {
        path: display.clone(),
        source,
    };
    let bad = |reason: String| PoolError::FeatureFile {
        path: display.clone(),
        reason,
    };

    let mut file = std::fs::File::open(path).map_err(io_err)?;
    let mut header = [0u8; 12];
    file.read_exact(&mut header)
        .map_err(|_| bad("truncated header".to_string()))?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(bad(format!(
            "bad magic {:?}, expected {:?}",
            &header[0..4],
            FEATURE_MAGIC
        )));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload).map_err(io_err)?;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| bad(format!("dimensions {n}x{d} overflow")))?;
    if payload.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, expected {} for {}x{} f32 values",
            payload.len(),
            expected,
            n,
            d
        )));
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(bad(format!("non-finite value at flat index {i}")));
        }
        data.push(f64::from(v));
    }
    Ok(FeatureMatrix::new(n, d, data))
}

/// Write a feature matrix in the binary format read by [`read_feature_file`].
/// Values are stored as f32.
pub fn write_feature_file(path: &Path, features: &FeatureMatrix) -> Result<(), PoolError> {
    let display = path.display().to_string();
    let io_err = |source| PoolError::Io {
        path: display.clone(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    out.write_all(FEATURE_MAGIC).map_err(io_err)?;
    out.write_all(&(features.n as u32).to_le_bytes()).map_err(io_err)?;
    out.write_all(&(features.d as u32).to_le_bytes()).map_err(io_err)?;
    for v in &features.data {
        out.write_all(&(*v as f32).to_le_bytes()).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// A finite candidate pool with selection bookkeeping.
///
/// `remaining` tracks candidates not yet observed by the running campaign;
/// the entry list itself never shrinks, so indices are stable identifiers
/// throughout a run.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    entries: Vec<PoolEntry>,
    directions: Vec<Direction>,
    remaining: BTreeSet<usize>,
    features: Option<FeatureMatrix>,
}

impl CandidatePool {
    /// Build a pool from rows already in memory, validating ids and values.
    pub fn from_entries(
        entries: Vec<PoolEntry>,
        directions: Vec<Direction>,
    ) -> Result<Self, PoolError> {
        if entries.is_empty() {
            return Err(PoolError::EmptyPool);
        }
        let width = entries[0].objectives.len();
        if width == 0 {
            return Err(PoolError::Row {
                row: 2,
                reason: "no objective columns".to_string(),
            });
        }
        if directions.len() != width {
            return Err(PoolError::DirectionCount {
                count: directions.len(),
                objectives: width,
            });
        }
        let mut seen = HashSet::new();
        for (i, entry) in entries.iter().enumerate() {
            // Rows are reported in file numbering: 1-based plus header line.
            let row = i + 2;
            if entry.objectives.len() != width {
                return Err(PoolError::Row {
                    row,
                    reason: format!(
                        "expected {} objective value(s), found {}",
                        width,
                        entry.objectives.len()
                    ),
                });
            }
            if entry.objectives.iter().any(|v| !v.is_finite()) {
                return Err(PoolError::Row {
                    row,
                    reason: "non-finite objective value".to_string(),
                });
            }
            if entry.id.is_empty() {
                return Err(PoolError::Row {
                    row,
                    reason: "empty id".to_string(),
                });
            }
            if !seen.insert(entry.id.clone()) {
                return Err(PoolError::DuplicateId {
                    row,
                    id: entry.id.clone(),
                });
            }
        }
        let remaining = (0..entries.len()).collect();
        Ok(CandidatePool {
            entries,
            directions,
            remaining,
            features: None,
        })
    }

    /// Load a pool CSV (`id,smiles,y0[,y1,...]`). `directions` must supply
    /// one direction per objective column; pass an empty slice to maximize
    /// everything.
    pub fn load_csv(path: &Path, directions: &[Direction]) -> Result<Self, PoolError> {
        let display = path.display().to_string();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .flexible(false)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| match e.kind() {
                csv::ErrorKind::Io(_) => PoolError::Io {
                    path: display.clone(),
                    source: std::io::Error::other(e.to_string()),
                },
                _ => PoolError::Csv {
                    path: display.clone(),
                    source: e,
                },
            })?;

        let headers = reader
            .headers()
            .map_err(|e| PoolError::Csv {
                path: display.clone(),
                source: e,
            })?
            .clone();
        let fields: Vec<&str> = headers.iter().collect();
        let header_ok = fields.len() >= 3
            && fields[0] == "id"
            && fields[1] == "smiles"
            && fields[2..]
                .iter()
                .enumerate()
                .all(|(i, f)| *f == format!("y{i}"));
        if !header_ok {
            return Err(PoolError::Header {
                found: fields.join(","),
            });
        }
        let objectives = fields.len() - 2;

        let mut entries = Vec::new();
        for (i, record) in reader.records().enumerate() {
            let row = i + 2;
            let record = record.map_err(|e| PoolError::Csv {
                path: display.clone(),
                source: e,
            })?;
            let mut values = Vec::with_capacity(objectives);
            for c in 0..objectives {
                let raw = &record[c + 2];
                let v: f64 = raw.parse().map_err(|_| PoolError::Row {
                    row,
                    reason: format!("objective y{c} is not a number: {raw:?}"),
                })?;
                values.push(v);
            }
            entries.push(PoolEntry {
                id: record[0].to_string(),
                smiles: record[1].to_string(),
                objectives: values,
            });
        }

        let directions = if directions.is_empty() {
            vec![Direction::Maximize; objectives]
        } else {
            directions.to_vec()
        };
        Self::from_entries(entries, directions)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn objective_count(&self) -> usize {
        self.directions.len()
    }

    pub fn directions(&self) -> &[Direction] {
        &self.directions
    }

    pub fn entry(&self, index: usize) -> &PoolEntry {
        &self.entries[index]
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn features(&self) -> Option<&FeatureMatrix> {
        self.features.as_ref()
    }

    /// Attach a feature matrix whose row count must equal the pool size.
    pub fn attach_features(&mut self, features: FeatureMatrix) -> Result<(), PoolError> {
        if features.rows() != self.entries.len() {
            return Err(PoolError::FeatureRowMismatch {
                rows: features.rows(),
                pool: self.entries.len(),
            });
        }
        self.features = Some(features);
        Ok(())
    }

    /// Objective values of entry `index` in internal (maximize) convention.
    pub fn internal_objectives(&self, index: usize) -> Vec<f64> {
        self.entries[index]
            .objectives
            .iter()
            .zip(&self.directions)
            .map(|(v, d)| v * d.sign())
            .collect()
    }

    /// Componentwise maximum of internal objectives over the whole pool.
    pub fn internal_optimum(&self) -> Vec<f64> {
        let mut best = vec![f64::NEG_INFINITY; self.objective_count()];
        for i in 0..self.entries.len() {
            for (b, v) in best.iter_mut().zip(self.internal_objectives(i)) {
                *b = b.max(v);
            }
        }
        best
    }

    /// Componentwise minimum of internal objectives over the whole pool.
    pub fn internal_minimum(&self) -> Vec<f64> {
        let mut worst = vec![f64::INFINITY; self.objective_count()];
        for i in 0..self.entries.len() {
            for (w, v) in worst.iter_mut().zip(self.internal_objectives(i)) {
                *w = w.min(v);
            }
        }
        worst
    }

    /// Indices not yet selected, ascending.
    pub fn remaining_indices(&self) -> Vec<usize> {
        self.remaining.iter().copied().collect()
    }

    pub fn remaining_count(&self) -> usize {
        self.remaining.len()
    }

    pub fn is_remaining(&self, index: usize) -> bool {
        self.remaining.contains(&index)
    }

    /// Remove a candidate from the remaining pool (it has been observed).
    pub fn mark_selected(&mut self, index: usize) -> Result<(), PoolError> {
        if self.remaining.remove(&index) {
            Ok(())
        } else {
            Err(PoolError::NotRemaining { index })
        }
    }

    /// Draw an initial design of `m` distinct candidates without replacement
    /// and mark them selected. Returns (index, file-convention objectives).
    pub fn sample_initial(
        &mut self,
        m: usize,
        seed: u64,
    ) -> Result<Vec<(usize, Vec<f64>)>, PoolError> {
        if m == 0 {
            return Err(PoolError::InitialEmpty);
        }
        if m > self.remaining.len() {
            return Err(PoolError::InitialTooLarge {
                m,
                available: self.remaining.len(),
            });
        }
        let candidates = self.remaining_indices();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, candidates.len(), m);
        let mut chosen: Vec<usize> = picks.iter().map(|i| candidates[i]).collect();
        chosen.sort_unstable();
        let mut out = Vec::with_capacity(m);
        for idx in chosen {
            self.mark_selected(idx)?;
            out.push((idx, self.entries[idx].objectives.clone()));
        }
        Ok(out)
    }

    /// A fresh pool containing `k` entries drawn without replacement (feature
    /// rows follow their entries). Selection bookkeeping starts over.
    pub fn subsample(&self, k: usize, seed: u64) -> Result<CandidatePool, PoolError> {
        if k == 0 || k > self.entries.len() {
            return Err(PoolError::SubsampleTooLarge {
                k,
                n: self.entries.len(),
            });
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let picks = rand::seq::index::sample(&mut rng, self.entries.len(), k);
        let mut chosen: Vec<usize> = picks.iter().collect();
        chosen.sort_unstable();
        let entries: Vec<PoolEntry> = chosen.iter().map(|&i| self.entries[i].clone()).collect();
        let mut pool = CandidatePool::from_entries(entries, self.directions.clone())?;
        if let Some(features) = &self.features {
            let data: Vec<f64> = chosen
                .iter()
                .flat_map(|&i| features.row(i).iter().copied())
                .collect();
            pool.features = Some(FeatureMatrix::new(k, features.dim(), data));
        }
        Ok(pool)
    }
}
