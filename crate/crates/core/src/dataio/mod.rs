//! Dataset, embedding and peak ingestion (JSON Lines), checkpoints, and
//! atomic file output.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ModelCheckpoint, TrainingMeta, CHECKPOINT_VERSION};

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::molgraph::{elements, featurize, parse_smiles_with, FeaturizedGraph, MolError, MolecularGraph, ParseOptions};
use crate::similarity::{Modality, Peak, PeakTable};
use crate::trainer::BatchRecord;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: malformed record: {msg}")]
    Json { line: usize, msg: String },
    #[error("line {line}: cannot parse SMILES {smiles:?}: {source}")]
    Parse { line: usize, smiles: String, source: MolError },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("line {line}: vector has dimension {actual}, expected {expected}")]
    DimensionMismatch { line: usize, expected: usize, actual: usize },
    #[error("line {line}: unknown molecule {id:?}")]
    UnknownMolecule { line: usize, id: String },
    #[error("line {line}: molecule {id:?} has no carbon atom {atom}")]
    BadAtomIndex { line: usize, id: String, atom: usize },
    #[error("line {line}: non-finite value")]
    NonFinite { line: usize },
    #[error("bad checkpoint magic")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
}

impl DataError {
    pub(crate) fn io(path: &Path, source: io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

type Result<T> = std::result::Result<T, DataError>;

/// One dataset record, parsed and featurized.
#[derive(Debug, Clone, PartialEq)]
pub struct Molecule {
    pub id: String,
    pub smiles: String,
    /// `None` marks a missing task value.
    pub labels: Vec<Option<f64>>,
    pub graph: MolecularGraph,
    pub features: FeaturizedGraph,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MoleculePool {
    pub molecules: Vec<Molecule>,
}

impl MoleculePool {
    pub fn len(&self) -> usize {
        self.molecules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.molecules.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.molecules.iter().map(|m| m.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&Molecule> {
        self.molecules.iter().find(|m| m.id == id)
    }

    /// Builds a pool from `(id, smiles)` pairs without labels.
    pub fn from_smiles<'a>(items: impl IntoIterator<Item = (&'a str, &'a str)>, opts: ParseOptions) -> Result<Self> {
        let mut pool = MoleculePool::default();
        let mut seen = HashMap::new();
        for (k, (id, smiles)) in items.into_iter().enumerate() {
            pool.push(k + 1, id.to_string(), smiles.to_string(), Vec::new(), opts, &mut seen)?;
        }
        if pool.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        Ok(pool)
    }

    fn push(
        &mut self,
        line: usize,
        id: String,
        smiles: String,
        labels: Vec<Option<f64>>,
        opts: ParseOptions,
        seen: &mut HashMap<String, usize>,
    ) -> Result<()> {
        if seen.insert(id.clone(), line).is_some() {
            return Err(DataError::DuplicateId { line, id });
        }
        let graph = parse_smiles_with(&smiles, opts).map_err(|source| DataError::Parse {
            line,
            smiles: smiles.clone(),
            source,
        })?;
        let features = featurize(&graph);
        self.molecules.push(Molecule { id, smiles, labels, graph, features });
        Ok(())
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| DataError::io(path, e))
}

/// Non-blank lines with 1-based line numbers.
fn records<R: BufRead, T: for<'de> Deserialize<'de>>(reader: R) -> impl Iterator<Item = Result<(usize, T)>> {
    reader.lines().enumerate().filter_map(|(k, line)| {
        let line_no = k + 1;
        match line {
            Err(e) => Some(Err(DataError::Json { line: line_no, msg: e.to_string() })),
            Ok(s) if s.trim().is_empty() => None,
            Ok(s) => Some(
                serde_json::from_str(&s)
                    .map(|r| (line_no, r))
                    .map_err(|e| DataError::Json { line: line_no, msg: e.to_string() }),
            ),
        }
    })
}

#[derive(Deserialize)]
struct MoleculeRecord {
    id: String,
    smiles: String,
    #[serde(default)]
    labels: Vec<Option<f64>>,
}

pub fn read_molecules<R: BufRead>(reader: R, opts: ParseOptions) -> Result<MoleculePool> {
    let mut pool = MoleculePool::default();
    let mut seen = HashMap::new();
    for rec in records::<_, MoleculeRecord>(reader) {
        let (line, r) = rec?;
        pool.push(line, r.id, r.smiles, r.labels, opts, &mut seen)?;
    }
    if pool.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(pool)
}

pub fn load_molecules(path: &Path, opts: ParseOptions) -> Result<MoleculePool> {
    read_molecules(open(path)?, opts)
}

/// Precomputed per-molecule vectors of one modality, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    modality: Modality,
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    index: HashMap<String, usize>,
}

impl EmbeddingTable {
    /// Fails on an empty table, ragged vectors, or repeated ids. Line
    /// numbers in errors are 1-based positions in `rows`.
    pub fn new(modality: Modality, rows: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let mut table = EmbeddingTable { modality, dim: 0, ids: Vec::new(), vectors: Vec::new(), index: HashMap::new() };
        for (k, (id, v)) in rows.into_iter().enumerate() {
            table.insert(k + 1, id, v)?;
        }
        if table.ids.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        Ok(table)
    }

    fn insert(&mut self, line: usize, id: String, v: Vec<f64>) -> Result<()> {
        if self.ids.is_empty() {
            self.dim = v.len();
        }
        if v.len() != self.dim || v.is_empty() {
            return Err(DataError::DimensionMismatch { line, expected: self.dim.max(1), actual: v.len() });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DataError::NonFinite { line });
        }
        if self.index.contains_key(&id) {
            return Err(DataError::DuplicateId { line, id });
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.vectors.push(v);
        Ok(())
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&k| self.vectors[k].as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.ids.iter().map(String::as_str).zip(self.vectors.iter().map(Vec::as_slice))
    }
}

#[derive(Deserialize)]
struct EmbeddingRecord {
    id: String,
    vector: Vec<f64>,
}

pub fn read_embeddings<R: BufRead>(reader: R, modality: Modality) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable { modality, dim: 0, ids: Vec::new(), vectors: Vec::new(), index: HashMap::new() };
    for rec in records::<_, EmbeddingRecord>(reader) {
        let (line, r) = rec?;
        table.insert(line, r.id, r.vector)?;
    }
    if table.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(table)
}

pub fn load_embeddings(path: &Path, modality: Modality) -> Result<EmbeddingTable> {
    read_embeddings(open(path)?, modality)
}

/// Chemical shifts outside this range are accepted but reported.
pub const PPM_SOFT_RANGE: (f64, f64) = (-20.0, 250.0);

#[derive(Deserialize)]
struct PeakRecord {
    id: String,
    peaks: Vec<Peak>,
}

/// Reads a peak table. With a pool, ids must exist and every peak must sit
/// on a carbon atom of that molecule. Out-of-range shifts are returned as
/// warnings (and logged).
pub fn read_peaks<R: BufRead>(reader: R, pool: Option<&MoleculePool>) -> Result<(PeakTable, Vec<String>)> {
    let index: Option<HashMap<&str, &Molecule>> =
        pool.map(|p| p.molecules.iter().map(|m| (m.id.as_str(), m)).collect());
    let mut peaks = BTreeMap::new();
    let mut warnings = Vec::new();
    for rec in records::<_, PeakRecord>(reader) {
        let (line, r) = rec?;
        if let Some(index) = &index {
            let mol = index
                .get(r.id.as_str())
                .ok_or_else(|| DataError::UnknownMolecule { line, id: r.id.clone() })?;
            for p in &r.peaks {
                let ok = mol.graph.atoms().get(p.atom).is_some_and(|a| a.element == elements::CARBON);
                if !ok {
                    return Err(DataError::BadAtomIndex { line, id: r.id.clone(), atom: p.atom });
                }
            }
        }
        for p in &r.peaks {
            if !p.ppm.is_finite() {
                return Err(DataError::NonFinite { line });
            }
            if p.ppm < PPM_SOFT_RANGE.0 || p.ppm > PPM_SOFT_RANGE.1 {
                let msg = format!("line {line}: {} atom {} has unusual shift {} ppm", r.id, p.atom, p.ppm);
                log::warn!("{msg}");
                warnings.push(msg);
            }
        }
        if peaks.insert(r.id.clone(), r.peaks).is_some() {
            return Err(DataError::DuplicateId { line, id: r.id });
        }
    }
    Ok((PeakTable { peaks }, warnings))
}

pub fn load_peaks(path: &Path, pool: Option<&MoleculePool>) -> Result<(PeakTable, Vec<String>)> {
    read_peaks(open(path)?, pool)
}

/// Writes `bytes` to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| DataError::io(path, io::ErrorKind::InvalidInput.into()))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(|e| DataError::io(path, e))
}

/// `epoch,batch,loss,grad_norm` with round-trip float formatting.
pub fn loss_history_csv(history: &[BatchRecord]) -> String {
    let mut out = String::from("epoch,batch,loss,grad_norm\n");
    for r in history {
        out.push_str(&format!("{},{},{:?},{:?}\n", r.epoch, r.batch, r.loss, r.grad_norm));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn mols(text: &str) -> Result<MoleculePool> {
        read_molecules(Cursor::new(text), ParseOptions::default())
    }

    #[test]
    fn loads_in_file_order() {
        let pool = mols(
            "{\"id\":\"a\",\"smiles\":\"C\"}\n{\"id\":\"b\",\"smiles\":\"CCO\",\"labels\":[1,null]}\n\n{\"id\":\"c\",\"smiles\":\"c1ccccc1\"}\n",
        )
        .unwrap();
        assert_eq!(pool.ids(), ["a", "b", "c"]);
        assert_eq!(pool.molecules[1].labels, vec![Some(1.0), None]);
        assert_eq!(pool.molecules[2].graph.heavy_atom_count(), 6);
    }

    #[test]
    fn bad_smiles_names_line() {
        let err = mols("{\"id\":\"a\",\"smiles\":\"C\"}\n{\"id\":\"b\",\"smiles\":\"C1CC\"}\n").unwrap_err();
        assert!(matches!(err, DataError::Parse { line: 2, .. }), "{err}");
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn duplicate_and_empty() {
        let err = mols("{\"id\":\"a\",\"smiles\":\"C\"}\n{\"id\":\"a\",\"smiles\":\"CC\"}\n").unwrap_err();
        assert!(matches!(err, DataError::DuplicateId { line: 2, .. }));
        assert!(matches!(mols(""), Err(DataError::EmptyDataset)));
        assert!(matches!(mols("not json\n"), Err(DataError::Json { line: 1, .. })));
    }

    #[test]
    fn embeddings_enforce_dimension() {
        let ok = "{\"id\":\"a\",\"vector\":[1,2,3,4]}\n{\"id\":\"b\",\"vector\":[0,0,1,0]}\n";
        let t = read_embeddings(Cursor::new(ok), Modality::Smiles).unwrap();
        assert_eq!(t.dim(), 4);
        assert_eq!(t.get("b"), Some(&[0.0, 0.0, 1.0, 0.0][..]));
        let bad = "{\"id\":\"a\",\"vector\":[1,2,3,4]}\n{\"id\":\"b\",\"vector\":[1,2,3]}\n";
        match read_embeddings(Cursor::new(bad), Modality::Smiles) {
            Err(DataError::DimensionMismatch { line: 2, expected: 4, actual: 3 }) => {}
            other => panic!("{other:?}"),
        }
        let dup = "{\"id\":\"a\",\"vector\":[1]}\n{\"id\":\"a\",\"vector\":[2]}\n";
        assert!(matches!(read_embeddings(Cursor::new(dup), Modality::Nmr), Err(DataError::DuplicateId { .. })));
    }

    #[test]
    fn peaks_validate_against_pool() {
        let pool = mols("{\"id\":\"m\",\"smiles\":\"C\"}\n{\"id\":\"e\",\"smiles\":\"CO\"}\n").unwrap();
        let read = |s: &str| read_peaks(Cursor::new(s.to_string()), Some(&pool));
        let (t, w) = read("{\"id\":\"m\",\"peaks\":[{\"atom\":0,\"ppm\":-2.3}]}\n").unwrap();
        assert_eq!(t.get("m"), &[Peak { atom: 0, ppm: -2.3 }]);
        assert!(w.is_empty());
        assert!(matches!(
            read("{\"id\":\"m\",\"peaks\":[{\"atom\":5,\"ppm\":1.0}]}\n"),
            Err(DataError::BadAtomIndex { atom: 5, .. })
        ));
        assert!(matches!(
            read("{\"id\":\"e\",\"peaks\":[{\"atom\":1,\"ppm\":50.0}]}\n"),
            Err(DataError::BadAtomIndex { atom: 1, .. })
        ));
        assert!(matches!(read("{\"id\":\"x\",\"peaks\":[]}\n"), Err(DataError::UnknownMolecule { .. })));
        let (_, w) = read("{\"id\":\"m\",\"peaks\":[{\"atom\":0,\"ppm\":300}]}\n").unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn history_csv_round_trips_floats() {
        let h = [BatchRecord { epoch: 0, batch: 1, loss: 0.1 + 0.2, grad_norm: 1e-300 }];
        let csv = loss_history_csv(&h);
        let line = csv.lines().nth(1).unwrap();
        let loss: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(loss, 0.1 + 0.2);
    }
}
