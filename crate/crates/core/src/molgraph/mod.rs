//! Molecular graphs: SMILES parsing, directed-edge structure, featurization.

pub mod elements;
mod featurize;
mod smiles;

pub use featurize::{featurize, FeaturizedGraph, ATOM_FEATURES, BOND_FEATURES, FEATURE_SCHEME_VERSION};
pub use smiles::{parse_smiles, parse_smiles_with, ParseOptions};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MolError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("unmatched ring closure {digit}")]
    RingClosure { digit: u16 },
    #[error("unknown element '{symbol}' at byte {pos}")]
    UnknownElement { symbol: String, pos: usize },
    #[error("atom {atom} ({symbol}) exceeds its allowed valence")]
    Valence { atom: usize, symbol: String },
    #[error("SMILES contains {count} disconnected fragments")]
    MultiFragment { count: usize },
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Valence contribution used for implicit hydrogen counting.
    pub fn valence(self) -> u32 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    pub fn index(self) -> usize {
        match self {
            BondOrder::Single => 0,
            BondOrder::Double => 1,
            BondOrder::Triple => 2,
            BondOrder::Aromatic => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Atom {
    /// Atomic number, 1..=118.
    pub element: u8,
    pub aromatic: bool,
    pub formal_charge: i8,
    /// Hydrogens written inside a bracket atom.
    pub explicit_h: u8,
    /// Hydrogens implied by the valence model for organic-subset atoms.
    pub implicit_h: u8,
    pub isotope: Option<u16>,
}

impl Atom {
    pub fn new(element: u8) -> Self {
        Atom {
            element,
            aromatic: false,
            formal_charge: 0,
            explicit_h: 0,
            implicit_h: 0,
            isotope: None,
        }
    }

    pub fn symbol(&self) -> &'static str {
        elements::symbol(self.element)
    }

    pub fn total_h(&self) -> u32 {
        self.explicit_h as u32 + self.implicit_h as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

/// One direction of a bond. Directed edge `2k` runs `a -> b` of bond `k`
/// and `2k + 1` runs `b -> a`, so `reverse` is always `index ^ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DirectedEdge {
    pub source: usize,
    pub target: usize,
    pub reverse: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolecularGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    directed_edges: Vec<DirectedEdge>,
    /// Fragments discarded when parsing with `keep_largest_fragment`.
    pub dropped_fragments: usize,
}

impl MolecularGraph {
    /// Builds a graph from atoms and bonds, validating bond endpoints.
    pub fn from_parts(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, MolError> {
        let n = atoms.len();
        for atom in &atoms {
            if atom.element == 0 || atom.element > 118 {
                return Err(MolError::InvalidGraph(format!("element {}", atom.element)));
            }
            if atom.explicit_h > 8 {
                return Err(MolError::InvalidGraph(format!(
                    "explicit H count {}",
                    atom.explicit_h
                )));
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(bonds.len());
        for bond in &bonds {
            if bond.a == bond.b || bond.a >= n || bond.b >= n {
                return Err(MolError::InvalidGraph(format!(
                    "bond {}-{} with {n} atoms",
                    bond.a, bond.b
                )));
            }
            if !seen.insert((bond.a.min(bond.b), bond.a.max(bond.b))) {
                return Err(MolError::InvalidGraph(format!(
                    "duplicate bond {}-{}",
                    bond.a, bond.b
                )));
            }
        }
        let directed_edges = bonds
            .iter()
            .enumerate()
            .flat_map(|(k, bond)| {
                [
                    DirectedEdge { source: bond.a, target: bond.b, reverse: 2 * k + 1 },
                    DirectedEdge { source: bond.b, target: bond.a, reverse: 2 * k },
                ]
            })
            .collect();
        Ok(MolecularGraph { atoms, bonds, directed_edges, dropped_fragments: 0 })
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn directed_edges(&self) -> &[DirectedEdge] {
        &self.directed_edges
    }

    pub fn heavy_atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn degree(&self, atom: usize) -> usize {
        self.bonds.iter().filter(|b| b.a == atom || b.b == atom).count()
    }

    /// Indices of directed edges whose target is each atom.
    pub fn incoming_edges(&self) -> Vec<Vec<usize>> {
        let mut incoming = vec![Vec::new(); self.atoms.len()];
        for (e, edge) in self.directed_edges.iter().enumerate() {
            incoming[edge.target].push(e);
        }
        incoming
    }

    /// Marks each bond that lies on a cycle (i.e. is not a bridge).
    pub fn ring_bonds(&self) -> Vec<bool> {
        let n = self.atoms.len();
        let incoming = self.incoming_edges();
        let mut disc = vec![usize::MAX; n];
        let mut low = vec![0usize; n];
        let mut in_ring = vec![true; self.bonds.len()];
        let mut timer = 0;
        for root in 0..n {
            if disc[root] != usize::MAX {
                continue;
            }
            // Iterative Tarjan bridge search: (atom, edge used to enter, next neighbor cursor).
            let mut stack: Vec<(usize, Option<usize>, usize)> = vec![(root, None, 0)];
            disc[root] = timer;
            low[root] = timer;
            timer += 1;
            while let Some(&mut (v, parent_edge, ref mut cursor)) = stack.last_mut() {
                if *cursor < incoming[v].len() {
                    // Outgoing edge from v is the reverse of an incoming one.
                    let out = self.directed_edges[incoming[v][*cursor]].reverse;
                    *cursor += 1;
                    if Some(self.directed_edges[out].reverse) == parent_edge {
                        continue;
                    }
                    let w = self.directed_edges[out].target;
                    if disc[w] == usize::MAX {
                        disc[w] = timer;
                        low[w] = timer;
                        timer += 1;
                        stack.push((w, Some(out), 0));
                    } else {
                        low[v] = low[v].min(disc[w]);
                    }
                } else {
                    stack.pop();
                    if let (Some(edge), Some(&(u, _, _))) = (parent_edge, stack.last()) {
                        low[u] = low[u].min(low[v]);
                        if low[v] > disc[u] {
                            in_ring[edge / 2] = false;
                        }
                    }
                }
            }
        }
        in_ring
    }

    /// Connected components as sorted atom index lists, ordered by first atom.
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.atoms.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for bond in &self.bonds {
            let (ra, rb) = (find(&mut parent, bond.a), find(&mut parent, bond.b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        }
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; n];
        for atom in 0..n {
            let root = find(&mut parent, atom);
            if slot[root] == usize::MAX {
                slot[root] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[root]].push(atom);
        }
        groups
    }

    /// Keeps only the given atoms (in the given order) and the bonds among them.
    pub fn subgraph(&self, keep: &[usize]) -> MolecularGraph {
        let mut map = vec![usize::MAX; self.atoms.len()];
        for (new, &old) in keep.iter().enumerate() {
            map[old] = new;
        }
        let atoms = keep.iter().map(|&i| self.atoms[i].clone()).collect();
        let bonds = self
            .bonds
            .iter()
            .filter(|b| map[b.a] != usize::MAX && map[b.b] != usize::MAX)
            .map(|b| Bond { a: map[b.a], b: map[b.b], order: b.order })
            .collect();
        MolecularGraph::from_parts(atoms, bonds).expect("subgraph of a valid graph is valid")
    }

    /// Relabels atoms so that old atom `i` becomes new atom `perm[i]`.
    /// Bonds keep their relative order.
    pub fn permute_atoms(&self, perm: &[usize]) -> Result<MolecularGraph, MolError> {
        let n = self.atoms.len();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(MolError::InvalidGraph("not a permutation".into()));
        }
        let mut atoms = vec![Atom::new(1); n];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old].clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond { a: perm[b.a], b: perm[b.b], order: b.order })
            .collect();
        MolecularGraph::from_parts(atoms, bonds)
    }
}

pub fn heavy_atom_count(g: &MolecularGraph) -> usize {
    g.heavy_atom_count()
}
