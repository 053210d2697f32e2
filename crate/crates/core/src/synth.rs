//! Seeded generator of small drug-like SMILES for demos and tests.
//!
//! Molecules are an optional aliphatic chain, one or two ring scaffolds
//! joined by a short linker, and random substituents on ring carbons.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::molgraph::parse_smiles;

/// `(atom, ring digits, accepts a substituent)`; digits are rewritten per use.
type Token = (&'static str, &'static [u8], bool);

const SCAFFOLDS: &[&[Token]] = &[
    &[("c", &[1], false), ("c", &[], true), ("c", &[], true), ("c", &[], true), ("c", &[], true), ("c", &[1], true)],
    &[("c", &[1], false), ("c", &[], true), ("c", &[], true), ("n", &[], false), ("c", &[], true), ("c", &[1], true)],
    &[("C", &[1], false), ("C", &[], true), ("C", &[], true), ("C", &[], true), ("C", &[], true), ("C", &[1], true)],
    &[("C", &[1], false), ("C", &[], true), ("C", &[], true), ("O", &[], false), ("C", &[1], true)],
    &[("C", &[1], false), ("C", &[], true), ("N", &[], false), ("C", &[], true), ("C", &[1], true)],
    &[("c", &[1], false), ("c", &[], true), ("c", &[], true), ("s", &[], false), ("c", &[1], false)],
    &[
        ("c", &[1], false),
        ("c", &[], true),
        ("c", &[], true),
        ("c", &[2], false),
        ("c", &[], true),
        ("c", &[], true),
        ("c", &[], true),
        ("c", &[], true),
        ("c", &[2], false),
        ("c", &[1], true),
    ],
];

const SUBSTITUENTS: &[&str] = &[
    "C", "C", "CC", "O", "OC", "N", "F", "Cl", "Br", "C(=O)O", "C(=O)N", "C#N", "CO", "N(C)C", "C(F)(F)F", "S",
    "[N+](=O)[O-]", "C(C)C", "OCC", "NC(=O)C",
];

const CHAIN_ATOMS: &[&str] = &["C", "C", "C", "C", "O", "N", "C(C)", "C(=O)", "S"];

const LINKERS: &[&str] = &["", "C", "CC", "O", "N", "C(=O)N", "OC", "S"];

fn chain(rng: &mut ChaCha8Rng, len: usize) -> String {
    let mut out = String::new();
    let mut last_hetero = true;
    for _ in 0..len {
        let a = loop {
            let a = *CHAIN_ATOMS.choose(rng).unwrap();
            // Avoid O-O, N-O style hetero-hetero runs.
            let hetero = matches!(a, "O" | "N" | "S");
            if !(hetero && last_hetero) {
                last_hetero = hetero;
                break a;
            }
        };
        out.push_str(a);
    }
    out
}

fn scaffold(rng: &mut ChaCha8Rng, digit_offset: u8, sub_prob: f64) -> String {
    let tokens = SCAFFOLDS.choose(rng).unwrap();
    let mut out = String::new();
    for &(atom, digits, substitutable) in tokens.iter() {
        out.push_str(atom);
        for d in digits {
            out.push(char::from(b'0' + d + digit_offset));
        }
        if substitutable && rng.gen_bool(sub_prob) {
            out.push('(');
            out.push_str(SUBSTITUENTS.choose(rng).unwrap());
            out.push(')');
        }
    }
    out
}

fn one(rng: &mut ChaCha8Rng) -> String {
    let mut s = String::new();
    let lead = rng.gen_range(0..=4);
    if lead > 0 {
        s.push_str(&chain(rng, lead));
        if s.ends_with(')') {
            s.push('C');
        }
    }
    s.push_str(&scaffold(rng, 0, 0.3));
    if rng.gen_bool(0.45) {
        // Second ring hangs off the first ring's last atom.
        let linker = *LINKERS.choose(rng).unwrap();
        s.push_str(linker);
        s.push_str(&scaffold(rng, 2, 0.2));
    }
    if s.ends_with(['c', 'C', 'N', 'O', '1', '2', '3', '4']) && rng.gen_bool(0.3) {
        s.push_str(SUBSTITUENTS.choose(rng).unwrap());
    }
    s
}

/// `n` distinct SMILES that parse, deterministic in `seed`.
pub fn synthetic_smiles(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while out.len() < n {
        attempts += 1;
        assert!(attempts < 1000 * (n + 10), "synthetic generator stalled");
        let s = one(&mut rng);
        if parse_smiles(&s).is_ok() && seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// JSON Lines dataset text with ids `mol0000`, `mol0001`, ...
pub fn synthetic_dataset_jsonl(n: usize, seed: u64) -> String {
    synthetic_smiles(n, seed)
        .iter()
        .enumerate()
        .map(|(i, s)| serde_json::json!({ "id": format!("mol{i:04}"), "smiles": s }).to_string() + "\n")
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_distinct() {
        let a = synthetic_smiles(200, 1);
        assert_eq!(a, synthetic_smiles(200, 1));
        assert_ne!(a, synthetic_smiles(200, 2));
        let set: HashSet<_> = a.iter().collect();
        assert_eq!(set.len(), 200);
    }

    #[test]
    fn all_parse_with_reasonable_size() {
        for s in synthetic_smiles(512, 7) {
            let g = parse_smiles(&s).unwrap();
            assert!((4..=40).contains(&g.heavy_atom_count()), "{s}");
        }
    }
}
