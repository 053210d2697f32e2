//! Periodic table lookups and default valences.

const SYMBOLS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

pub const BORON: u8 = 5;
pub const CARBON: u8 = 6;
pub const NITROGEN: u8 = 7;
pub const OXYGEN: u8 = 8;
pub const FLUORINE: u8 = 9;
pub const PHOSPHORUS: u8 = 15;
pub const SULFUR: u8 = 16;
pub const CHLORINE: u8 = 17;
pub const BROMINE: u8 = 35;
pub const IODINE: u8 = 53;

/// Elements allowed outside brackets, in featurization order.
pub const ORGANIC_SUBSET: [u8; 10] = [
    BORON, CARBON, NITROGEN, OXYGEN, FLUORINE, PHOSPHORUS, SULFUR, CHLORINE, BROMINE, IODINE,
];

/// Atomic number for a symbol with standard capitalization.
pub fn atomic_number(symbol: &str) -> Option<u8> {
    SYMBOLS
        .iter()
        .position(|s| *s == symbol)
        .map(|i| (i + 1) as u8)
}

pub fn symbol(number: u8) -> &'static str {
    SYMBOLS
        .get(number.wrapping_sub(1) as usize)
        .copied()
        .unwrap_or("?")
}

/// Allowed valences for implicit-hydrogen assignment, ascending.
pub fn default_valences(number: u8) -> &'static [u32] {
    match number {
        BORON => &[3],
        CARBON => &[4],
        NITROGEN => &[3, 5],
        OXYGEN => &[2],
        PHOSPHORUS => &[3, 5],
        SULFUR => &[2, 4, 6],
        FLUORINE | CHLORINE | BROMINE | IODINE => &[1],
        _ => &[],
    }
}

/// Lowercase aromatic symbols accepted by the parser.
pub fn aromatic_number(symbol: &str) -> Option<u8> {
    match symbol {
        "b" => Some(BORON),
        "c" => Some(CARBON),
        "n" => Some(NITROGEN),
        "o" => Some(OXYGEN),
        "p" => Some(PHOSPHORUS),
        "s" => Some(SULFUR),
        "se" => Some(34),
        "as" => Some(33),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symbol_lookup_round_trips() {
        for n in 1..=118u8 {
            assert_eq!(atomic_number(symbol(n)), Some(n));
        }
        assert_eq!(atomic_number("Cl"), Some(17));
        assert_eq!(atomic_number("Xx"), None);
    }
}
