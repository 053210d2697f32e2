//! Fixed atom and bond feature layout for the message passing encoder.
//!
//! Atom row (28 columns):
//!
//! | columns | segment |
//! |---------|---------|
//! | 0..11   | element one-hot: B C N O F P S Cl Br I, other |
//! | 11..17  | heavy-atom degree 0..=5 (clamped) |
//! | 17..22  | formal charge -2..=2 (clamped) |
//! | 22      | aromatic flag |
//! | 23..28  | hydrogen count 0..=4 (clamped) |
//!
//! Bond row (5 columns): order one-hot (single, double, triple, aromatic), in-ring flag.

use super::elements::ORGANIC_SUBSET;
use super::{DirectedEdge, MolecularGraph};

pub const FEATURE_SCHEME_VERSION: u32 = 1;
pub const ATOM_FEATURES: usize = 28;
pub const BOND_FEATURES: usize = 5;

const ELEMENT_OFFSET: usize = 0;
const DEGREE_OFFSET: usize = 11;
const CHARGE_OFFSET: usize = 17;
const AROMATIC_OFFSET: usize = 22;
const HCOUNT_OFFSET: usize = 23;

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizedGraph {
    /// Row-major, `n_atoms x ATOM_FEATURES`.
    pub atom_features: Vec<f64>,
    /// Row-major, `n_bonds x BOND_FEATURES`.
    pub bond_features: Vec<f64>,
    pub edges: Vec<DirectedEdge>,
    /// Incoming directed-edge indices per atom.
    pub incidence: Vec<Vec<usize>>,
    pub scheme_version: u32,
}

impl FeaturizedGraph {
    pub fn n_atoms(&self) -> usize {
        self.incidence.len()
    }

    pub fn n_bonds(&self) -> usize {
        self.edges.len() / 2
    }

    pub fn atom_row(&self, atom: usize) -> &[f64] {
        &self.atom_features[atom * ATOM_FEATURES..(atom + 1) * ATOM_FEATURES]
    }

    pub fn bond_row(&self, bond: usize) -> &[f64] {
        &self.bond_features[bond * BOND_FEATURES..(bond + 1) * BOND_FEATURES]
    }
}

pub fn featurize(g: &MolecularGraph) -> FeaturizedGraph {
    let n = g.atoms().len();
    let mut degree = vec![0usize; n];
    for bond in g.bonds() {
        degree[bond.a] += 1;
        degree[bond.b] += 1;
    }

    let mut atom_features = vec![0.0; n * ATOM_FEATURES];
    for (i, atom) in g.atoms().iter().enumerate() {
        let row = &mut atom_features[i * ATOM_FEATURES..(i + 1) * ATOM_FEATURES];
        let element_slot = ORGANIC_SUBSET
            .iter()
            .position(|&e| e == atom.element)
            .unwrap_or(ORGANIC_SUBSET.len());
        row[ELEMENT_OFFSET + element_slot] = 1.0;
        row[DEGREE_OFFSET + degree[i].min(5)] = 1.0;
        row[CHARGE_OFFSET + (atom.formal_charge.clamp(-2, 2) + 2) as usize] = 1.0;
        if atom.aromatic {
            row[AROMATIC_OFFSET] = 1.0;
        }
        row[HCOUNT_OFFSET + atom.total_h().min(4) as usize] = 1.0;
    }

    let ring = g.ring_bonds();
    let mut bond_features = vec![0.0; g.bonds().len() * BOND_FEATURES];
    for (k, bond) in g.bonds().iter().enumerate() {
        let row = &mut bond_features[k * BOND_FEATURES..(k + 1) * BOND_FEATURES];
        row[bond.order.index()] = 1.0;
        if ring[k] {
            row[4] = 1.0;
        }
    }

    FeaturizedGraph {
        atom_features,
        bond_features,
        edges: g.directed_edges().to_vec(),
        incidence: g.incoming_edges(),
        scheme_version: FEATURE_SCHEME_VERSION,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::parse_smiles;

    #[test]
    fn methane_row() {
        let f = featurize(&parse_smiles("C").unwrap());
        assert_eq!(f.atom_features.len(), ATOM_FEATURES);
        let row = f.atom_row(0);
        assert_eq!(row[1], 1.0);
        assert_eq!(row[..11].iter().sum::<f64>(), 1.0);
        assert_eq!(row[DEGREE_OFFSET], 1.0);
        assert_eq!(row[CHARGE_OFFSET + 2], 1.0);
        assert_eq!(row[HCOUNT_OFFSET + 4], 1.0);
        assert!(f.bond_features.is_empty());
    }

    #[test]
    fn ethanol_bonds() {
        let f = featurize(&parse_smiles("CCO").unwrap());
        assert_eq!(f.bond_features.len(), 2 * BOND_FEATURES);
        assert_eq!(f.bond_row(1), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_hot_segments_sum_to_one() {
        for s in ["c1ccccc1O", "[NH4+]", "CC(=O)[O-]", "C1CC1Br", "[Fe+3]"] {
            let f = featurize(&parse_smiles(s).unwrap());
            for a in 0..f.n_atoms() {
                let r = f.atom_row(a);
                for (lo, hi) in [(0, 11), (11, 17), (17, 22), (23, 28)] {
                    assert_eq!(r[lo..hi].iter().sum::<f64>(), 1.0, "{s} atom {a}");
                }
            }
            for b in 0..f.n_bonds() {
                assert_eq!(f.bond_row(b)[..4].iter().sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn benzene_bonds_are_aromatic_ring_bonds() {
        let f = featurize(&parse_smiles("c1ccccc1").unwrap());
        for b in 0..6 {
            assert_eq!(f.bond_row(b), &[0.0, 0.0, 0.0, 1.0, 1.0]);
        }
    }

    #[test]
    fn deterministic() {
        let a = featurize(&parse_smiles("CC(C)Cc1ccc(cc1)C(C)C(=O)O").unwrap());
        let b = featurize(&parse_smiles("CC(C)Cc1ccc(cc1)C(C)C(=O)O").unwrap());
        assert_eq!(a, b);
    }
}
