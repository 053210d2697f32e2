//! Circular (ECFP-style) substructure fingerprints and Tanimoto similarity.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::molgraph::MolecularGraph;
use crate::par;

#[derive(Debug, Error)]
pub enum FingerprintError {
    #[error("fingerprint widths differ: {0} vs {1} bits")]
    WidthMismatch(usize, usize),
    #[error("invalid fingerprint parameters: {0}")]
    InvalidParams(String),
    #[error("bad fingerprint cache magic")]
    Magic,
    #[error("unsupported fingerprint cache version {0}")]
    Version(u32),
    #[error("corrupt fingerprint cache: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const DEFAULT_RADIUS: u32 = 2;
pub const DEFAULT_BITS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FingerprintParams {
    radius: u32,
    n_bits: usize,
}

impl FingerprintParams {
    pub fn new(radius: u32, n_bits: usize) -> Result<Self, FingerprintError> {
        if radius > 5 {
            return Err(FingerprintError::InvalidParams(format!("radius {radius} > 5")));
        }
        if ![512, 1024, 2048, 4096].contains(&n_bits) {
            return Err(FingerprintError::InvalidParams(format!(
                "n_bits {n_bits} not in {{512, 1024, 2048, 4096}}"
            )));
        }
        Ok(FingerprintParams { radius, n_bits })
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }
}

impl Default for FingerprintParams {
    fn default() -> Self {
        FingerprintParams { radius: DEFAULT_RADIUS, n_bits: DEFAULT_BITS }
    }
}

/// Fixed-width binary fingerprint.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    n_bits: usize,
    radius: u32,
}

impl Fingerprint {
    pub fn empty(n_bits: usize, radius: u32) -> Self {
        Fingerprint { words: vec![0; n_bits.div_ceil(64)], n_bits, radius }
    }

    /// Builds a fingerprint with the given bit indices set.
    pub fn from_indices(n_bits: usize, radius: u32, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut fp = Fingerprint::empty(n_bits, radius);
        for i in indices {
            fp.set(i);
        }
        fp
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn radius(&self) -> u32 {
        self.radius
    }

    pub fn set(&mut self, bit: usize) {
        let bit = bit % self.n_bits;
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        bit < self.n_bits && (self.words[bit / 64] >> (bit % 64)) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.n_bits).filter(|&i| self.get(i)).collect()
    }

    /// `n_bits / 8` bytes; bit `i` lives in byte `i / 8` at position `i % 8`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.n_bits / 8);
        for w in &self.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out.truncate(self.n_bits / 8);
        out
    }

    pub fn from_bytes(bytes: &[u8], n_bits: usize, radius: u32) -> Self {
        let mut fp = Fingerprint::empty(n_bits, radius);
        for (i, chunk) in bytes.chunks(8).enumerate() {
            let mut buf = [0u8; 8];
            buf[..chunk.len()].copy_from_slice(chunk);
            fp.words[i] = u64::from_le_bytes(buf);
        }
        fp
    }

    /// Bits as reals (0.0 / 1.0), e.g. for use as an embedding.
    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.n_bits).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a sequence of little-endian words.
fn fnv1a(words: &[u64]) -> u64 {
    let mut h = FNV_OFFSET;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(FNV_PRIME);
        }
    }
    h
}

fn initial_identifiers(g: &MolecularGraph) -> Vec<u64> {
    g.atoms()
        .iter()
        .enumerate()
        .map(|(i, a)| {
            fnv1a(&[
                a.element as u64,
                g.degree(i) as u64,
                a.formal_charge as i64 as u64,
                a.total_h() as u64,
                a.aromatic as u64,
            ])
        })
        .collect()
}

pub fn ecfp(g: &MolecularGraph, params: FingerprintParams) -> Fingerprint {
    let mask = params.n_bits - 1;
    let mut fp = Fingerprint::empty(params.n_bits, params.radius);
    let mut ids = initial_identifiers(g);
    ids.iter().for_each(|&id| fp.set(id as usize & mask));

    let mut neighbors: Vec<Vec<(u64, usize)>> = vec![Vec::new(); g.atoms().len()];
    for bond in g.bonds() {
        let order = bond.order.index() as u64;
        neighbors[bond.a].push((order, bond.b));
        neighbors[bond.b].push((order, bond.a));
    }

    let mut buf = Vec::new();
    for iteration in 1..=params.radius {
        let next: Vec<u64> = (0..ids.len())
            .map(|i| {
                let mut env: Vec<(u64, u64)> =
                    neighbors[i].iter().map(|&(order, j)| (order, ids[j])).collect();
                env.sort_unstable();
                buf.clear();
                buf.push(iteration as u64);
                buf.push(ids[i]);
                for (order, id) in env {
                    buf.push(order);
                    buf.push(id);
                }
                fnv1a(&buf)
            })
            .collect();
        ids = next;
        ids.iter().for_each(|&id| fp.set(id as usize & mask));
    }
    fp
}

/// Fingerprints many graphs, in parallel when enabled; same output as serial.
pub fn ecfp_batch(graphs: &[MolecularGraph], params: FingerprintParams) -> Vec<Fingerprint> {
    par::map_slice(graphs, |g| ecfp(g, params))
}

/// `|A ∩ B| / |A ∪ B|` over set bits; 1.0 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, FingerprintError> {
    if a.n_bits != b.n_bits {
        return Err(FingerprintError::WidthMismatch(a.n_bits, b.n_bits));
    }
    let (mut inter, mut union) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        inter += (x & y).count_ones();
        union += (x | y).count_ones();
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

const CACHE_MAGIC: &[u8; 4] = b"GMFP";
const CACHE_VERSION: u32 = 1;

/// Writes a fingerprint cache: magic, version, n_bits, radius, then
/// `(u16 id length, id bytes, n_bits / 8 raw bytes)` per record.
pub fn write_cache<W: Write>(
    mut w: W,
    params: FingerprintParams,
    records: &[(String, Fingerprint)],
) -> Result<(), FingerprintError> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&(params.n_bits as u32).to_le_bytes())?;
    w.write_all(&params.radius.to_le_bytes())?;
    for (id, fp) in records {
        if fp.n_bits != params.n_bits {
            return Err(FingerprintError::WidthMismatch(params.n_bits, fp.n_bits));
        }
        let len = u16::try_from(id.len())
            .map_err(|_| FingerprintError::InvalidParams(format!("id longer than 65535 bytes: {id}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        w.write_all(&fp.to_bytes())?;
    }
    Ok(())
}

pub fn read_cache<R: Read>(
    mut r: R,
) -> Result<(FingerprintParams, Vec<(String, Fingerprint)>), FingerprintError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != CACHE_MAGIC {
        return Err(FingerprintError::Magic);
    }
    let header = |offset: usize| -> Result<u32, FingerprintError> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
            .ok_or_else(|| FingerprintError::Corrupt("truncated header".into()))
    };
    let version = header(4)?;
    if version != CACHE_VERSION {
        return Err(FingerprintError::Version(version));
    }
    let params = FingerprintParams::new(header(12)?, header(8)? as usize)
        .map_err(|e| FingerprintError::Corrupt(e.to_string()))?;
    let width = params.n_bits / 8;
    let mut pos = 16;
    let mut records = Vec::new();
    while pos < bytes.len() {
        let len_bytes = bytes
            .get(pos..pos + 2)
            .ok_or_else(|| FingerprintError::Corrupt(format!("truncated record at byte {pos}")))?;
        let len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
        pos += 2;
        let id = bytes
            .get(pos..pos + len)
            .ok_or_else(|| FingerprintError::Corrupt(format!("truncated id at byte {pos}")))?;
        let id = String::from_utf8(id.to_vec())
            .map_err(|_| FingerprintError::Corrupt(format!("id at byte {pos} is not UTF-8")))?;
        pos += len;
        let raw = bytes
            .get(pos..pos + width)
            .ok_or_else(|| FingerprintError::Corrupt(format!("truncated bits for {id}")))?;
        pos += width;
        records.push((id, Fingerprint::from_bytes(raw, params.n_bits, params.radius)));
    }
    Ok((params, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::parse_smiles;
    use proptest::prelude::*;

    fn fp(s: &str, radius: u32) -> Fingerprint {
        ecfp(&parse_smiles(s).unwrap(), FingerprintParams::new(radius, 2048).unwrap())
    }

    #[test]
    fn methane_radius_zero_sets_one_bit() {
        assert_eq!(fp("C", 0).count_ones(), 1);
    }

    #[test]
    fn ethanol_differs_from_methane() {
        assert_ne!(fp("CCO", 2), fp("C", 2));
    }

    #[test]
    fn equivalent_smiles_give_identical_bits() {
        // Same molecule written from different starting atoms.
        let a = fp("CC(=O)Oc1ccccc1C(=O)O", 2);
        let b = fp("OC(=O)c1ccccc1OC(C)=O", 2);
        assert_eq!(a, b);
    }

    #[test]
    fn tanimoto_examples() {
        let a = Fingerprint::from_indices(512, 2, [1, 2, 3]);
        let b = Fingerprint::from_indices(512, 2, [2, 3, 4]);
        assert_eq!(tanimoto(&a, &b).unwrap(), 0.5);
        assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        let c = Fingerprint::from_indices(512, 2, [10, 11]);
        assert_eq!(tanimoto(&a, &c).unwrap(), 0.0);
        let e = Fingerprint::empty(512, 2);
        assert_eq!(tanimoto(&e, &e).unwrap(), 1.0);
        let wide = Fingerprint::empty(1024, 2);
        assert!(matches!(tanimoto(&a, &wide), Err(FingerprintError::WidthMismatch(512, 1024))));
    }

    #[test]
    fn params_validation() {
        assert!(FingerprintParams::new(6, 2048).is_err());
        assert!(FingerprintParams::new(2, 1000).is_err());
        assert!(FingerprintParams::new(0, 512).is_ok());
    }

    #[test]
    fn cache_round_trip_and_errors() {
        let params = FingerprintParams::new(2, 512).unwrap();
        let records: Vec<(String, Fingerprint)> = ["C", "CCO", "c1ccccc1"]
            .iter()
            .map(|s| (s.to_string(), ecfp(&parse_smiles(s).unwrap(), params)))
            .collect();
        let mut buf = Vec::new();
        write_cache(&mut buf, params, &records).unwrap();
        assert_eq!(&buf[..4], b"GMFP");
        assert_eq!(buf.len(), 16 + records.iter().map(|(id, _)| 2 + id.len() + 64).sum::<usize>());
        let (p2, back) = read_cache(&buf[..]).unwrap();
        assert_eq!(p2, params);
        assert_eq!(back, records);

        assert!(matches!(read_cache(&buf[..buf.len() - 3]), Err(FingerprintError::Corrupt(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_cache(&bad[..]), Err(FingerprintError::Magic)));
        let mut v2 = buf.clone();
        v2[4] = 9;
        assert!(matches!(read_cache(&v2[..]), Err(FingerprintError::Version(9))));
    }

    proptest! {
        #[test]
        fn tanimoto_is_bounded_and_symmetric(
            a in proptest::collection::btree_set(0usize..512, 1..64),
            b in proptest::collection::btree_set(0usize..512, 0..64),
        ) {
            let fa = Fingerprint::from_indices(512, 2, a.iter().copied());
            let fb = Fingerprint::from_indices(512, 2, b.iter().copied());
            let ab = tanimoto(&fa, &fb).unwrap();
            prop_assert_eq!(ab, tanimoto(&fb, &fa).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(tanimoto(&fa, &fa).unwrap(), 1.0);
        }
    }
}
