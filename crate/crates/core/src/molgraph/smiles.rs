//! A SMILES reader for the organic subset plus bracket atoms.
//!
//! Stereo markers (`/`, `\`, `@`) are consumed and discarded. Hydrogens are
//! counted on their heavy atom, never added as graph nodes.

use std::collections::BTreeMap;

use super::elements::{self, aromatic_number, atomic_number, default_valences};
use super::{Atom, Bond, BondOrder, MolError, MolecularGraph};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ParseOptions {
    /// Reject organic-subset atoms whose bonds exceed every allowed valence.
    pub strict_valence: bool,
    /// Keep the largest fragment of a dotted SMILES instead of failing.
    pub keep_largest_fragment: bool,
}

pub fn parse_smiles(text: &str) -> Result<MolecularGraph, MolError> {
    parse_smiles_with(text, ParseOptions::default())
}

pub fn parse_smiles_with(text: &str, opts: ParseOptions) -> Result<MolecularGraph, MolError> {
    if text.is_empty() {
        return Err(MolError::Syntax { pos: 0, msg: "empty SMILES".into() });
    }
    if let Some(pos) = text.bytes().position(|b| !b.is_ascii() || b.is_ascii_whitespace()) {
        return Err(MolError::Syntax { pos, msg: "non-ASCII or whitespace byte".into() });
    }
    let parsed = Parser::new(text.as_bytes()).run()?;
    let mut atoms = parsed.atoms;
    assign_implicit_h(&mut atoms, &parsed.bonds, &parsed.bracket, opts.strict_valence)?;
    let graph = MolecularGraph::from_parts(atoms, parsed.bonds)
        .map_err(|e| MolError::Syntax { pos: text.len(), msg: e.to_string() })?;

    let components = graph.components();
    if components.len() <= 1 {
        return Ok(graph);
    }
    if !opts.keep_largest_fragment {
        return Err(MolError::MultiFragment { count: components.len() });
    }
    // Ties resolve to the fragment that appears first.
    let mut best = &components[0];
    for comp in &components[1..] {
        if comp.len() > best.len() {
            best = comp;
        }
    }
    let mut kept = graph.subgraph(best);
    kept.dropped_fragments = components.len() - 1;
    Ok(kept)
}

struct Parsed {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    bracket: Vec<bool>,
}

struct Parser<'a> {
    s: &'a [u8],
    pos: usize,
    atoms: Vec<Atom>,
    bracket: Vec<bool>,
    bonds: Vec<Bond>,
    prev: Option<usize>,
    pending: Option<(BondOrder, usize)>,
    branches: Vec<(usize, usize)>,
    rings: BTreeMap<u16, (usize, Option<BondOrder>, usize)>,
}

impl<'a> Parser<'a> {
    fn new(s: &'a [u8]) -> Self {
        Parser {
            s,
            pos: 0,
            atoms: Vec::new(),
            bracket: Vec::new(),
            bonds: Vec::new(),
            prev: None,
            pending: None,
            branches: Vec::new(),
            rings: BTreeMap::new(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.s.get(self.pos).copied()
    }

    fn syntax<T>(&self, pos: usize, msg: &str) -> Result<T, MolError> {
        Err(MolError::Syntax { pos, msg: msg.to_string() })
    }

    fn run(mut self) -> Result<Parsed, MolError> {
        while let Some(c) = self.peek() {
            let start = self.pos;
            match c {
                b'(' => {
                    let Some(prev) = self.prev else {
                        return self.syntax(start, "branch without a preceding atom");
                    };
                    if self.pending.is_some() {
                        return self.syntax(start, "bond symbol before '('");
                    }
                    self.branches.push((prev, start));
                    self.pos += 1;
                }
                b')' => {
                    let Some((atom, _)) = self.branches.pop() else {
                        return self.syntax(start, "unbalanced ')'");
                    };
                    if self.pending.is_some() {
                        return self.syntax(start, "dangling bond before ')'");
                    }
                    self.prev = Some(atom);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' | b':' | b'/' | b'\\' => {
                    if self.prev.is_none() {
                        return self.syntax(start, "bond without a preceding atom");
                    }
                    if self.pending.is_some() {
                        return self.syntax(start, "two consecutive bond symbols");
                    }
                    let order = match c {
                        b'=' => BondOrder::Double,
                        b'#' => BondOrder::Triple,
                        b':' => BondOrder::Aromatic,
                        _ => BondOrder::Single,
                    };
                    self.pending = Some((order, start));
                    self.pos += 1;
                }
                b'.' => {
                    if self.prev.is_none() || self.pending.is_some() {
                        return self.syntax(start, "misplaced '.'");
                    }
                    self.prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => self.ring_closure()?,
                b'[' => {
                    let atom = self.bracket_atom()?;
                    self.add_atom(atom, true);
                }
                _ => {
                    let atom = self.organic_atom()?;
                    self.add_atom(atom, false);
                }
            }
        }
        if let Some(&(_, pos)) = self.branches.last() {
            return self.syntax(pos, "unbalanced '('");
        }
        if let Some((_, pos)) = self.pending {
            return self.syntax(pos, "dangling bond at end of input");
        }
        if let Some((&digit, _)) = self.rings.iter().next() {
            return Err(MolError::RingClosure { digit });
        }
        if self.atoms.is_empty() {
            return self.syntax(0, "no atoms");
        }
        Ok(Parsed { atoms: self.atoms, bonds: self.bonds, bracket: self.bracket })
    }

    fn default_order(&self, a: usize, b: usize) -> BondOrder {
        if self.atoms[a].aromatic && self.atoms[b].aromatic {
            BondOrder::Aromatic
        } else {
            BondOrder::Single
        }
    }

    fn add_bond(&mut self, a: usize, b: usize, order: BondOrder, pos: usize) -> Result<(), MolError> {
        if a == b {
            return self.syntax(pos, "bond from an atom to itself");
        }
        let key = (a.min(b), a.max(b));
        if self.bonds.iter().any(|bd| (bd.a.min(bd.b), bd.a.max(bd.b)) == key) {
            return self.syntax(pos, "duplicate bond between the same atoms");
        }
        self.bonds.push(Bond { a, b, order });
        Ok(())
    }

    fn add_atom(&mut self, atom: Atom, bracket: bool) {
        let idx = self.atoms.len();
        self.atoms.push(atom);
        self.bracket.push(bracket);
        if let Some(prev) = self.prev {
            let order = match self.pending.take() {
                Some((order, _)) => order,
                None => self.default_order(prev, idx),
            };
            // idx is new, so this is neither a self-loop nor a duplicate.
            self.bonds.push(Bond { a: prev, b: idx, order });
        }
        self.prev = Some(idx);
    }

    fn ring_closure(&mut self) -> Result<(), MolError> {
        let start = self.pos;
        let digit = if self.s[self.pos] == b'%' {
            let hi = self.s.get(self.pos + 1).copied();
            let lo = self.s.get(self.pos + 2).copied();
            match (hi, lo) {
                (Some(h), Some(l)) if h.is_ascii_digit() && l.is_ascii_digit() => {
                    self.pos += 3;
                    ((h - b'0') * 10 + (l - b'0')) as u16
                }
                _ => return self.syntax(start, "'%' must be followed by two digits"),
            }
        } else {
            self.pos += 1;
            (self.s[start] - b'0') as u16
        };
        let Some(atom) = self.prev else {
            return self.syntax(start, "ring closure without a preceding atom");
        };
        let pending = self.pending.take().map(|(order, _)| order);
        match self.rings.remove(&digit) {
            None => {
                self.rings.insert(digit, (atom, pending, start));
            }
            Some((other, open_order, _)) => {
                let order = match (open_order, pending) {
                    (Some(a), Some(b)) if a != b => {
                        return self.syntax(start, "conflicting ring closure bond orders");
                    }
                    (Some(a), _) | (None, Some(a)) => a,
                    (None, None) => self.default_order(other, atom),
                };
                self.add_bond(other, atom, order, start)?;
            }
        }
        Ok(())
    }

    fn organic_atom(&mut self) -> Result<Atom, MolError> {
        let start = self.pos;
        let rest = &self.s[self.pos..];
        let (number, aromatic, len) = if rest.starts_with(b"Cl") {
            (elements::CHLORINE, false, 2)
        } else if rest.starts_with(b"Br") {
            (elements::BROMINE, false, 2)
        } else {
            let c = rest[0];
            let sym = (c as char).to_string();
            match c {
                b'B' | b'C' | b'N' | b'O' | b'F' | b'P' | b'S' | b'I' => {
                    (atomic_number(&sym).expect("organic subset symbol"), false, 1)
                }
                b'b' | b'c' | b'n' | b'o' | b'p' | b's' => {
                    (aromatic_number(&sym).expect("aromatic symbol"), true, 1)
                }
                _ if c.is_ascii_alphabetic() || c == b'*' => {
                    return Err(MolError::UnknownElement { symbol: sym, pos: start });
                }
                _ => return self.syntax(start, "unexpected character"),
            }
        };
        self.pos += len;
        let mut atom = Atom::new(number);
        atom.aromatic = aromatic;
        Ok(atom)
    }

    fn read_number(&mut self) -> Option<u32> {
        let start = self.pos;
        while self.peek().is_some_and(|c| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if self.pos == start {
            return None;
        }
        std::str::from_utf8(&self.s[start..self.pos]).ok()?.parse().ok()
    }

    fn bracket_atom(&mut self) -> Result<Atom, MolError> {
        let open = self.pos;
        self.pos += 1;
        let isotope = self.read_number();
        if isotope.is_some_and(|i| i > u16::MAX as u32) {
            return self.syntax(open, "isotope out of range");
        }

        let sym_start = self.pos;
        let Some(first) = self.peek() else {
            return self.syntax(open, "unterminated bracket atom");
        };
        let second = self.s.get(self.pos + 1).copied();
        let (number, aromatic) = if first.is_ascii_uppercase() {
            let two = second
                .filter(|c| c.is_ascii_lowercase())
                .map(|c| [first as char, c as char].iter().collect::<String>());
            match two.as_deref().and_then(atomic_number) {
                Some(n) => {
                    self.pos += 2;
                    (n, false)
                }
                None => match atomic_number(&(first as char).to_string()) {
                    Some(n) => {
                        self.pos += 1;
                        (n, false)
                    }
                    None => {
                        return Err(MolError::UnknownElement {
                            symbol: (first as char).to_string(),
                            pos: sym_start,
                        })
                    }
                },
            }
        } else if first.is_ascii_lowercase() {
            let two = second.map(|c| [first as char, c as char].iter().collect::<String>());
            match two.as_deref().and_then(aromatic_number) {
                Some(n) => {
                    self.pos += 2;
                    (n, true)
                }
                None => match aromatic_number(&(first as char).to_string()) {
                    Some(n) => {
                        self.pos += 1;
                        (n, true)
                    }
                    None => {
                        return Err(MolError::UnknownElement {
                            symbol: (first as char).to_string(),
                            pos: sym_start,
                        })
                    }
                },
            }
        } else if first == b'*' {
            return Err(MolError::UnknownElement { symbol: "*".into(), pos: sym_start });
        } else {
            return self.syntax(sym_start, "expected element symbol in bracket atom");
        };

        // Chirality: @, @@, or @TH1-style classes. Parsed and dropped.
        while self.peek() == Some(b'@') {
            self.pos += 1;
        }
        for class in [&b"TH"[..], b"AL", b"SP", b"TB", b"OH"] {
            if self.s[self.pos..].starts_with(class) {
                self.pos += 2;
                self.read_number();
                break;
            }
        }

        let mut explicit_h = 0u32;
        if self.peek() == Some(b'H') {
            self.pos += 1;
            explicit_h = self.read_number().unwrap_or(1);
        }

        let mut charge: i32 = 0;
        if let Some(sign @ (b'+' | b'-')) = self.peek() {
            let unit = if sign == b'+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(n) = self.read_number() {
                charge = unit * n as i32;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
        }

        if self.peek() == Some(b':') {
            self.pos += 1;
            if self.read_number().is_none() {
                return self.syntax(self.pos, "atom class needs a number");
            }
        }

        if self.peek() != Some(b']') {
            return self.syntax(open, "unterminated bracket atom");
        }
        self.pos += 1;

        if explicit_h > 8 {
            return self.syntax(open, "more than 8 explicit hydrogens");
        }
        if !(-15..=15).contains(&charge) {
            return self.syntax(open, "formal charge out of range");
        }
        let mut atom = Atom::new(number);
        atom.aromatic = aromatic;
        atom.explicit_h = explicit_h as u8;
        atom.formal_charge = charge as i8;
        atom.isotope = isotope.map(|i| i as u16);
        Ok(atom)
    }
}

fn assign_implicit_h(
    atoms: &mut [Atom],
    bonds: &[Bond],
    bracket: &[bool],
    strict: bool,
) -> Result<(), MolError> {
    let mut used = vec![0u32; atoms.len()];
    let mut aromatic_bonds = vec![0u32; atoms.len()];
    for bond in bonds {
        for end in [bond.a, bond.b] {
            used[end] += bond.order.valence();
            if bond.order == BondOrder::Aromatic {
                aromatic_bonds[end] += 1;
            }
        }
    }
    for (i, atom) in atoms.iter_mut().enumerate() {
        if bracket[i] {
            continue;
        }
        // An aromatic atom contributes one extra electron to the pi system.
        let load = used[i] + u32::from(atom.aromatic && aromatic_bonds[i] > 0);
        match default_valences(atom.element).iter().find(|&&v| v >= load) {
            Some(&v) => atom.implicit_h = (v - load) as u8,
            None => {
                if strict && !atom.aromatic {
                    return Err(MolError::Valence { atom: i, symbol: atom.symbol().to_string() });
                }
                atom.implicit_h = 0;
            }
        }
    }
    Ok(())
}
