//! Self-similarity metrics, softmax pair weighting, and multimodal fusion.
//!
//! A [`SelfSimilarityMatrix`] holds raw pairwise similarities within one
//! modality. [`pair_weight`] turns each row into a softmax distribution
//! over the pool, giving a row-stochastic [`TargetSimilarityMatrix`] that
//! encodes both the pair's own similarity and how it ranks against the
//! anchor's other pairs. [`fuse`] blends per-modality targets with convex
//! weights, which keeps rows summing to one.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{self, BufRead, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{dot, softmax_in_place};
use crate::fingerprint::{tanimoto, Fingerprint};
use crate::par;

#[derive(Debug, Error)]
pub enum SimilarityError {
    #[error("vector {index} has zero norm")]
    ZeroNorm { index: usize },
    #[error("vector {index} has dimension {actual}, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, actual: usize },
    #[error("temperatures must be positive (tau1 = {tau1}, tau2 = {tau2})")]
    NonPositiveTemperature { tau1: f64, tau2: f64 },
    #[error("matrices disagree on molecule ids or order")]
    IdMismatch,
    #[error("fusion weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("fusion weight {0} is negative or not finite")]
    BadWeight(f64),
    #[error("unknown fusion preset '{0}'")]
    UnknownPreset(String),
    #[error("empty similarity pool")]
    EmptyPool,
    #[error("missing modality: {0}")]
    MissingModality(String),
    #[error("fingerprint widths differ")]
    WidthMismatch,
    #[error("non-finite similarity value")]
    NonFinite,
    #[error("matrix format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

type Result<T> = std::result::Result<T, SimilarityError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Smiles,
    Nmr,
    Image,
    Fingerprint,
    Ppm,
    /// Output of multimodal fusion.
    Fused,
}

impl Modality {
    /// The four molecule-level modalities in fusion-weight order.
    pub const GRAPH_LEVEL: [Modality; 4] =
        [Modality::Smiles, Modality::Nmr, Modality::Image, Modality::Fingerprint];

    pub fn tag(self) -> u8 {
        match self {
            Modality::Smiles => 0,
            Modality::Nmr => 1,
            Modality::Image => 2,
            Modality::Fingerprint => 3,
            Modality::Ppm => 4,
            Modality::Fused => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        [
            Modality::Smiles,
            Modality::Nmr,
            Modality::Image,
            Modality::Fingerprint,
            Modality::Ppm,
            Modality::Fused,
        ]
        .into_iter()
        .find(|m| m.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Smiles => "smiles",
            Modality::Nmr => "nmr",
            Modality::Image => "image",
            Modality::Fingerprint => "fingerprint",
            Modality::Ppm => "ppm",
            Modality::Fused => "fused",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "smiles" => Ok(Modality::Smiles),
            "nmr" => Ok(Modality::Nmr),
            "image" => Ok(Modality::Image),
            "fingerprint" => Ok(Modality::Fingerprint),
            "ppm" => Ok(Modality::Ppm),
            "fused" => Ok(Modality::Fused),
            _ => Err(format!("unknown modality '{s}'")),
        }
    }
}

/// Square row-major matrix with identifiers for its rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    values: Vec<f64>,
    ids: Vec<String>,
}

impl SquareMatrix {
    pub fn new(ids: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let n = ids.len();
        if values.len() != n * n {
            return Err(SimilarityError::Format(format!("{} values for {n} ids", values.len())));
        }
        Ok(SquareMatrix { n, values, ids })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    fn from_rows(ids: Vec<String>, rows: Vec<Vec<f64>>) -> Self {
        let n = ids.len();
        SquareMatrix { n, values: rows.concat(), ids }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfSimilarityMatrix {
    pub matrix: SquareMatrix,
    pub modality: Modality,
}

impl SelfSimilarityMatrix {
    pub fn n(&self) -> usize {
        self.matrix.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn ids(&self) -> &[String] {
        &self.matrix.ids
    }
}

/// Row-stochastic matrix of generalized multi-similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSimilarityMatrix {
    pub matrix: SquareMatrix,
}

impl TargetSimilarityMatrix {
    pub fn n(&self) -> usize {
        self.matrix.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.matrix.row(i)
    }

    pub fn values(&self) -> &[f64] {
        &self.matrix.values
    }

    pub fn ids(&self) -> &[String] {
        &self.matrix.ids
    }

    /// Largest `|row sum - 1|` over all rows.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n())
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Uniform target over `n` members.
    pub fn uniform(ids: Vec<String>) -> Self {
        let n = ids.len();
        TargetSimilarityMatrix { matrix: SquareMatrix { n, values: vec![1.0 / n as f64; n * n], ids } }
    }
}

/// Pairwise cosine similarity of the given vectors; the diagonal is exactly 1.
pub fn cosine_self_similarity(
    vectors: &[&[f64]],
    ids: Vec<String>,
    modality: Modality,
) -> Result<SelfSimilarityMatrix> {
    if vectors.len() != ids.len() {
        return Err(SimilarityError::IdMismatch);
    }
    let dim = vectors.first().map_or(0, |v| v.len());
    let mut norms = Vec::with_capacity(vectors.len());
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != dim {
            return Err(SimilarityError::DimensionMismatch { index, expected: dim, actual: v.len() });
        }
        let norm = dot(v, v).sqrt();
        if norm == 0.0 {
            return Err(SimilarityError::ZeroNorm { index });
        }
        if !norm.is_finite() {
            return Err(SimilarityError::NonFinite);
        }
        norms.push(norm);
    }
    let n = vectors.len();
    let rows = par::map_range(n, |i| {
        (0..n)
            .map(|j| if i == j { 1.0 } else { dot(vectors[i], vectors[j]) / (norms[i] * norms[j]) })
            .collect::<Vec<f64>>()
    });
    Ok(SelfSimilarityMatrix { matrix: SquareMatrix::from_rows(ids, rows), modality })
}

/// Pairwise Tanimoto similarity.
pub fn fingerprint_self_similarity(fps: &[&Fingerprint], ids: Vec<String>) -> Result<SelfSimilarityMatrix> {
    if fps.len() != ids.len() {
        return Err(SimilarityError::IdMismatch);
    }
    if fps.windows(2).any(|w| w[0].n_bits() != w[1].n_bits()) {
        return Err(SimilarityError::WidthMismatch);
    }
    let n = fps.len();
    let rows = par::map_range(n, |i| {
        (0..n)
            .map(|j| tanimoto(fps[i], fps[j]).expect("widths checked"))
            .collect::<Vec<f64>>()
    });
    Ok(SelfSimilarityMatrix {
        matrix: SquareMatrix::from_rows(ids, rows),
        modality: Modality::Fingerprint,
    })
}

/// `tau2 / (|pl - pm| + tau1)`.
pub fn ppm_self_similarity(pl: f64, pm: f64, tau1: f64, tau2: f64) -> Result<f64> {
    if !(tau1 > 0.0 && tau2 > 0.0) {
        return Err(SimilarityError::NonPositiveTemperature { tau1, tau2 });
    }
    Ok(tau2 / ((pl - pm).abs() + tau1))
}

pub fn ppm_self_similarity_matrix(
    ppms: &[f64],
    ids: Vec<String>,
    tau1: f64,
    tau2: f64,
) -> Result<SelfSimilarityMatrix> {
    ppm_self_similarity(0.0, 0.0, tau1, tau2)?;
    if ppms.len() != ids.len() {
        return Err(SimilarityError::IdMismatch);
    }
    if ppms.iter().any(|p| !p.is_finite()) {
        return Err(SimilarityError::NonFinite);
    }
    let n = ppms.len();
    let rows = par::map_range(n, |i| {
        (0..n).map(|j| tau2 / ((ppms[i] - ppms[j]).abs() + tau1)).collect::<Vec<f64>>()
    });
    Ok(SelfSimilarityMatrix { matrix: SquareMatrix::from_rows(ids, rows), modality: Modality::Ppm })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfPair {
    /// Softmax denominator runs over the whole pool, anchor included.
    #[default]
    Include,
    /// Drop the anchor from its own row; the diagonal target becomes 0.
    Exclude,
}

/// Row-wise softmax of a self-similarity matrix.
pub fn pair_weight(s: &SelfSimilarityMatrix) -> Result<TargetSimilarityMatrix> {
    pair_weight_with(s, SelfPair::Include)
}

pub fn pair_weight_with(s: &SelfSimilarityMatrix, self_pair: SelfPair) -> Result<TargetSimilarityMatrix> {
    if s.matrix.values.iter().any(|x| !x.is_finite()) {
        return Err(SimilarityError::NonFinite);
    }
    let n = s.n();
    let rows = par::map_range(n, |i| {
        let mut row = s.matrix.row(i).to_vec();
        if self_pair == SelfPair::Exclude && n > 1 {
            row[i] = f64::NEG_INFINITY;
        }
        softmax_in_place(&mut row);
        row
    });
    Ok(TargetSimilarityMatrix { matrix: SquareMatrix::from_rows(s.ids().to_vec(), rows) })
}

/// Pre-defined per-modality fusion weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub smiles: f64,
    pub nmr: f64,
    pub image: f64,
    pub fingerprint: f64,
}

pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// Named weight configurations: `(name, [smiles, nmr, image, fingerprint])`.
pub const FUSION_PRESETS: [(&str, [f64; 4]); 9] = [
    ("smiles", [1.0, 0.0, 0.0, 0.0]),
    ("nmr", [0.0, 1.0, 0.0, 0.0]),
    ("image", [0.0, 0.0, 1.0, 0.0]),
    ("fingerprint", [0.0, 0.0, 0.0, 1.0]),
    ("fusion-smiles", [0.7, 0.1, 0.1, 0.1]),
    ("fusion-nmr", [0.1, 0.7, 0.1, 0.1]),
    ("fusion-image", [0.1, 0.1, 0.7, 0.1]),
    ("fusion-fingerprint", [0.1, 0.1, 0.1, 0.7]),
    ("fusion-average", [0.25, 0.25, 0.25, 0.25]),
];

impl FusionWeights {
    pub fn new(smiles: f64, nmr: f64, image: f64, fingerprint: f64) -> Result<Self> {
        Self::from_array([smiles, nmr, image, fingerprint])
    }

    pub fn from_array(w: [f64; 4]) -> Result<Self> {
        if let Some(&bad) = w.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(SimilarityError::BadWeight(bad));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(SimilarityError::WeightSum(sum));
        }
        Ok(FusionWeights { smiles: w[0], nmr: w[1], image: w[2], fingerprint: w[3] })
    }

    pub fn preset(name: &str) -> Result<Self> {
        FUSION_PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, w)| Self::from_array(*w).expect("presets are valid"))
            .ok_or_else(|| SimilarityError::UnknownPreset(name.to_string()))
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.smiles, self.nmr, self.image, self.fingerprint]
    }

    pub fn weight(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Smiles => self.smiles,
            Modality::Nmr => self.nmr,
            Modality::Image => self.image,
            Modality::Fingerprint => self.fingerprint,
            Modality::Ppm | Modality::Fused => 0.0,
        }
    }

    /// Modalities with a non-zero weight, in weight order.
    pub fn active(&self) -> Vec<Modality> {
        Modality::GRAPH_LEVEL.into_iter().filter(|m| self.weight(*m) > 0.0).collect()
    }
}

/// Linear combination `sum_R w_R t^R` of same-pool target matrices.
pub fn fuse_weighted(mats: &[&TargetSimilarityMatrix], weights: &[f64]) -> Result<TargetSimilarityMatrix> {
    let Some(first) = mats.first() else {
        return Err(SimilarityError::EmptyPool);
    };
    if mats.len() != weights.len() {
        return Err(SimilarityError::Format(format!("{} matrices, {} weights", mats.len(), weights.len())));
    }
    if let Some(&bad) = weights.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(SimilarityError::BadWeight(bad));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(SimilarityError::WeightSum(sum));
    }
    if mats.iter().any(|m| m.ids() != first.ids()) {
        return Err(SimilarityError::IdMismatch);
    }
    let n = first.n();
    let rows = par::map_range(n, |i| {
        (0..n)
            .map(|j| mats.iter().zip(weights).map(|(m, w)| w * m.get(i, j)).sum())
            .collect::<Vec<f64>>()
    });
    Ok(TargetSimilarityMatrix { matrix: SquareMatrix::from_rows(first.ids().to_vec(), rows) })
}

/// Fuses per-modality targets. Every modality with non-zero weight must be
/// supplied; zero-weight modalities may be omitted.
pub fn fuse(inputs: &[(Modality, &TargetSimilarityMatrix)], w: &FusionWeights) -> Result<TargetSimilarityMatrix> {
    FusionWeights::from_array(w.as_array())?;
    let mut seen = HashSet::new();
    for (m, _) in inputs {
        if !seen.insert(*m) {
            return Err(SimilarityError::Format(format!("modality {m} supplied twice")));
        }
        if !Modality::GRAPH_LEVEL.contains(m) {
            return Err(SimilarityError::Format(format!("modality {m} has no fusion weight")));
        }
    }
    for m in w.active() {
        if !seen.contains(&m) {
            return Err(SimilarityError::MissingModality(m.to_string()));
        }
    }
    let mats: Vec<&TargetSimilarityMatrix> = inputs.iter().map(|(_, t)| *t).collect();
    let weights: Vec<f64> = inputs.iter().map(|(m, _)| w.weight(*m)).collect();
    fuse_weighted(&mats, &weights)
}

/// One modality's target over the subset of a pool that has data for it.
pub struct PartialTarget<'a> {
    pub weight: f64,
    /// Pool positions of the target's rows, in row order.
    pub members: &'a [usize],
    pub target: &'a TargetSimilarityMatrix,
}

/// Permissive fusion for pools with missing modalities: each pair combines
/// only the modalities available for both molecules, then every row is
/// renormalized to sum to one. Fails if some pair shares no modality.
pub fn fuse_available(ids: Vec<String>, parts: &[PartialTarget<'_>]) -> Result<TargetSimilarityMatrix> {
    let n = ids.len();
    if n == 0 {
        return Err(SimilarityError::EmptyPool);
    }
    let mut raw = vec![0.0; n * n];
    for part in parts {
        if part.target.n() != part.members.len() {
            return Err(SimilarityError::IdMismatch);
        }
        for (a, &i) in part.members.iter().enumerate() {
            for (b, &j) in part.members.iter().enumerate() {
                raw[i * n + j] += part.weight * part.target.get(a, b);
            }
        }
    }
    for (i, row) in raw.chunks_mut(n).enumerate() {
        if let Some(j) = row.iter().position(|&x| x <= 0.0) {
            return Err(SimilarityError::MissingModality(format!(
                "no weighted modality covers both {} and {}",
                ids[i], ids[j]
            )));
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    Ok(TargetSimilarityMatrix { matrix: SquareMatrix { n, values: raw, ids } })
}

/// Node-level target over a pool of annotated atoms.
pub fn node_target_matrix(ppms: &[f64], ids: Vec<String>, tau1: f64, tau2: f64) -> Result<TargetSimilarityMatrix> {
    if ppms.is_empty() {
        return Err(SimilarityError::EmptyPool);
    }
    pair_weight(&ppm_self_similarity_matrix(ppms, ids, tau1, tau2)?)
}

/// Per-molecule ¹³C peak assignments: `(atom index, chemical shift in ppm)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PeakTable {
    pub peaks: BTreeMap<String, Vec<Peak>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub atom: usize,
    pub ppm: f64,
}

impl PeakTable {
    pub fn get(&self, id: &str) -> &[Peak] {
        self.peaks.get(id).map_or(&[], |v| v.as_slice())
    }
}

const MATRIX_MAGIC: &[u8; 4] = b"GMSM";
const MATRIX_VERSION: u32 = 1;

/// CSV: header row of ids, then `n` rows of `n` values with 17 significant digits.
pub fn write_matrix_csv<W: Write>(mut w: W, m: &SquareMatrix) -> Result<()> {
    writeln!(w, "{}", m.ids.join(","))?;
    for i in 0..m.n {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:.16e}")).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

pub fn read_matrix_csv<R: BufRead>(r: R) -> Result<SquareMatrix> {
    let mut lines = r.lines();
    let header = lines.next().ok_or_else(|| SimilarityError::Format("empty CSV".into()))??;
    let ids: Vec<String> = header.split(',').map(str::to_string).collect();
    let n = ids.len();
    let mut values = Vec::with_capacity(n * n);
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let before = values.len();
        for cell in line.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| SimilarityError::Format(format!("row {}: bad value '{cell}'", row + 1)))?;
            values.push(v);
        }
        if values.len() - before != n {
            return Err(SimilarityError::Format(format!("row {} has {} values, expected {n}", row + 1, values.len() - before)));
        }
    }
    SquareMatrix::new(ids, values)
}

/// Binary: magic, version u32, n u32, modality tag u8, then `n^2` f64, all
/// little-endian, row-major. Ids are not stored.
pub fn write_matrix_bin<W: Write>(mut w: W, m: &SquareMatrix, modality: Modality) -> Result<()> {
    w.write_all(MATRIX_MAGIC)?;
    w.write_all(&MATRIX_VERSION.to_le_bytes())?;
    w.write_all(&(m.n as u32).to_le_bytes())?;
    w.write_all(&[modality.tag()])?;
    for x in &m.values {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a binary matrix; ids default to the row indices.
pub fn read_matrix_bin<R: Read>(mut r: R) -> Result<(SquareMatrix, Modality)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 13 || &bytes[..4] != MATRIX_MAGIC {
        return Err(SimilarityError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != MATRIX_VERSION {
        return Err(SimilarityError::Format(format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let modality = Modality::from_tag(bytes[12])
        .ok_or_else(|| SimilarityError::Format(format!("unknown modality tag {}", bytes[12])))?;
    let body = &bytes[13..];
    if body.len() != n * n * 8 {
        return Err(SimilarityError::Format(format!("expected {} value bytes, found {}", n * n * 8, body.len())));
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let ids = (0..n).map(|i| i.to_string()).collect();
    Ok((SquareMatrix { n, values, ids }, modality))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("m{i}")).collect()
    }

    fn self_sim(rows: Vec<Vec<f64>>) -> SelfSimilarityMatrix {
        let n = rows.len();
        SelfSimilarityMatrix { matrix: SquareMatrix::from_rows(ids(n), rows), modality: Modality::Smiles }
    }

    #[test]
    fn cosine_examples() {
        let a = [1.0, 0.0];
        let b = [1.0, 1.0];
        let c = [0.0, 3.0];
        let s = cosine_self_similarity(&[&a, &b, &c, &a], ids(4), Modality::Nmr).unwrap();
        assert!((s.get(0, 1) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-8);
        assert_eq!(s.get(0, 2), 0.0);
        assert_eq!(s.get(0, 3), 1.0);
        for i in 0..4 {
            assert_eq!(s.get(i, i), 1.0);
            for j in 0..4 {
                assert_eq!(s.get(i, j), s.get(j, i));
            }
        }
        let z = [0.0, 0.0];
        assert!(matches!(
            cosine_self_similarity(&[&a, &z], ids(2), Modality::Nmr),
            Err(SimilarityError::ZeroNorm { index: 1 })
        ));
        let short = [1.0];
        assert!(matches!(
            cosine_self_similarity(&[&a, &short], ids(2), Modality::Nmr),
            Err(SimilarityError::DimensionMismatch { index: 1, expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn fingerprint_matrix() {
        let a = Fingerprint::from_indices(512, 2, [1, 2, 3]);
        let b = Fingerprint::from_indices(512, 2, [2, 3, 4]);
        let c = Fingerprint::from_indices(512, 2, [100]);
        let s = fingerprint_self_similarity(&[&a, &b, &c], ids(3)).unwrap();
        let all = [&a, &b, &c];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.get(i, j), tanimoto(all[i], all[j]).unwrap());
            }
        }
        assert_eq!(s.get(0, 2), 0.0);
        let same = fingerprint_self_similarity(&[&a, &a, &a], ids(3)).unwrap();
        assert!(same.matrix.values().iter().all(|&x| x == 1.0));
        let wide = Fingerprint::from_indices(1024, 2, [1]);
        assert!(fingerprint_self_similarity(&[&a, &wide], ids(2)).is_err());
    }

    #[test]
    fn ppm_examples() {
        assert_eq!(ppm_self_similarity(5.0, 5.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(ppm_self_similarity(10.0, 1.0, 1.0, 1.0).unwrap(), 0.1);
        assert_eq!(ppm_self_similarity(3.0, 3.0, 0.5, 2.0).unwrap(), 4.0);
        assert!(ppm_self_similarity(1.0, 2.0, 0.0, 1.0).is_err());
        assert!(ppm_self_similarity(1.0, 2.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn pair_weight_examples() {
        let t = pair_weight(&self_sim(vec![vec![0.3; 4]; 4])).unwrap();
        assert!(t.values().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let t = pair_weight(&self_sim(vec![vec![2f64.ln(), 0.0], vec![0.0, 2f64.ln()]])).unwrap();
        assert!((t.get(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pair_weight_excluding_self() {
        let s = self_sim(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let t = pair_weight_with(&s, SelfPair::Exclude).unwrap();
        assert_eq!(t.get(0, 0), 0.0);
        assert!((t.get(0, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn presets_and_weights() {
        assert_eq!(FusionWeights::preset("fusion-smiles").unwrap().as_array(), [0.7, 0.1, 0.1, 0.1]);
        assert_eq!(FusionWeights::preset("fusion-average").unwrap().as_array(), [0.25; 4]);
        assert!(FusionWeights::preset("bogus").is_err());
        assert!(matches!(FusionWeights::new(0.7, 0.1, 0.1, 0.2), Err(SimilarityError::WeightSum(_))));
        assert!(matches!(FusionWeights::new(1.1, -0.1, 0.0, 0.0), Err(SimilarityError::BadWeight(_))));
        assert_eq!(FusionWeights::preset("nmr").unwrap().active(), vec![Modality::Nmr]);
    }

    #[test]
    fn fuse_examples() {
        let a = pair_weight(&self_sim(vec![vec![1.0, 0.2, 0.5], vec![0.2, 1.0, 0.1], vec![0.5, 0.1, 1.0]])).unwrap();
        let b = pair_weight(&self_sim(vec![vec![1.0, 0.9, 0.0], vec![0.9, 1.0, 0.3], vec![0.0, 0.3, 1.0]])).unwrap();
        let only = fuse(&[(Modality::Smiles, &a)], &FusionWeights::preset("smiles").unwrap()).unwrap();
        assert_eq!(only.values(), a.values());
        let w = FusionWeights::preset("fusion-image").unwrap();
        let same = fuse(
            &[(Modality::Smiles, &a), (Modality::Nmr, &a), (Modality::Image, &a), (Modality::Fingerprint, &a)],
            &w,
        )
        .unwrap();
        for (x, y) in same.values().iter().zip(a.values()) {
            assert!((x - y).abs() < 1e-15);
        }
        let mixed = fuse(
            &[(Modality::Smiles, &a), (Modality::Nmr, &b), (Modality::Image, &a), (Modality::Fingerprint, &b)],
            &FusionWeights::preset("fusion-nmr").unwrap(),
        )
        .unwrap();
        assert!(mixed.max_row_sum_error() < 1e-9);
        assert!(matches!(
            fuse(&[(Modality::Smiles, &a)], &w),
            Err(SimilarityError::MissingModality(_))
        ));
        let mut other = b.clone();
        other.matrix.ids[0] = "x".into();
        assert!(matches!(fuse_weighted(&[&a, &other], &[0.5, 0.5]), Err(SimilarityError::IdMismatch)));
    }

    #[test]
    fn partial_fusion_renormalizes_rows() {
        let full = pair_weight(&self_sim(vec![vec![1.0, 0.5, 0.2], vec![0.5, 1.0, 0.4], vec![0.2, 0.4, 1.0]])).unwrap();
        let sub = pair_weight(&self_sim(vec![vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let t = fuse_available(
            ids(3),
            &[
                PartialTarget { weight: 0.5, members: &[0, 1, 2], target: &full },
                PartialTarget { weight: 0.5, members: &[0, 2], target: &sub },
            ],
        )
        .unwrap();
        assert!(t.max_row_sum_error() < 1e-12);
        assert!(t.values().iter().all(|&x| x > 0.0));
        let gap = fuse_available(ids(3), &[PartialTarget { weight: 1.0, members: &[0, 2], target: &sub }]);
        assert!(matches!(gap, Err(SimilarityError::MissingModality(_))));
    }

    #[test]
    fn node_targets() {
        let t = node_target_matrix(&[42.0, 42.0], ids(2), 1.0, 1.0).unwrap();
        assert_eq!(t.row(0), &[0.5, 0.5]);
        let t = node_target_matrix(&[0.0, 10.0, 200.0], ids(3), 1.0, 1.0).unwrap();
        assert!(t.get(0, 0) > t.get(0, 1) && t.get(0, 1) > t.get(0, 2));
        assert!(t.max_row_sum_error() < 1e-9);
        assert!(matches!(node_target_matrix(&[], vec![], 1.0, 1.0), Err(SimilarityError::EmptyPool)));
    }

    #[test]
    fn csv_and_binary_round_trip() {
        let t = pair_weight(&self_sim(vec![vec![1.0, 0.3], vec![0.3, 1.0]])).unwrap();
        let mut csv = Vec::new();
        write_matrix_csv(&mut csv, &t.matrix).unwrap();
        let text = String::from_utf8(csv.clone()).unwrap();
        assert!(text.starts_with("m0,m1\n"));
        assert_eq!(read_matrix_csv(&csv[..]).unwrap(), t.matrix);

        let mut bin = Vec::new();
        write_matrix_bin(&mut bin, &t.matrix, Modality::Fused).unwrap();
        assert_eq!(bin.len(), 13 + 4 * 8);
        let (back, m) = read_matrix_bin(&bin[..]).unwrap();
        assert_eq!(m, Modality::Fused);
        assert_eq!(back.values(), t.values());
        assert!(read_matrix_bin(&bin[..bin.len() - 1]).is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..12).prop_flat_map(|n| proptest::collection::vec(proptest::collection::vec(-20.0f64..20.0, n), n))
    }

    proptest! {
        #[test]
        fn pair_weight_is_row_stochastic_positive_and_order_preserving(rows in arb_matrix()) {
            let t = pair_weight(&self_sim(rows.clone())).unwrap();
            prop_assert!(t.max_row_sum_error() < 1e-9);
            prop_assert!(t.values().iter().all(|&x| x > 0.0));
            for (i, row) in rows.iter().enumerate() {
                for j in 0..row.len() {
                    for k in 0..row.len() {
                        if row[j] > row[k] {
                            prop_assert!(t.get(i, j) > t.get(i, k));
                        }
                    }
                }
            }
        }

        #[test]
        fn pair_weight_is_shift_invariant(rows in arb_matrix(), shift in -100.0f64..100.0) {
            let shifted: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
            let a = pair_weight(&self_sim(rows)).unwrap();
            let b = pair_weight(&self_sim(shifted)).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn ppm_similarity_is_symmetric_and_decreasing(a in 0.0f64..200.0, b in 0.0f64..200.0, d in 0.01f64..50.0) {
            let s = ppm_self_similarity(a, b, 1.0, 1.0).unwrap();
            prop_assert_eq!(s, ppm_self_similarity(b, a, 1.0, 1.0).unwrap());
            prop_assert!(ppm_self_similarity(a, a + (b - a).abs() + d, 1.0, 1.0).unwrap() < s);
            prop_assert!(s <= 1.0);
        }
    }

    #[test]
    fn pair_weight_is_not_symmetric_in_general() {
        let s = self_sim(vec![vec![1.0, 0.9, 0.1], vec![0.9, 1.0, 0.8], vec![0.1, 0.8, 1.0]]);
        let t = pair_weight(&s).unwrap();
        assert!((0..3).any(|i| (0..3).any(|j| (t.get(i, j) - t.get(j, i)).abs() > 1e-6)));
    }
}
