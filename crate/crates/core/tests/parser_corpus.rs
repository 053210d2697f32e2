use graphmsl::molgraph::{featurize, parse_smiles, parse_smiles_with, ParseOptions};

const VALID: [&str; 50] = [
    "C", "CC", "CCO", "C=O", "C#N", "CC(=O)O", "c1ccccc1", "c1ccncc1", "C1CCCCC1", "C1CC1",
    "CC(C)C", "CC(C)(C)C", "OC(=O)c1ccccc1O", "CN1C=NC2=C1C(=O)N(C(=O)N2C)C", "c1ccc2ccccc2c1",
    "C1=CC=CC=C1", "[NH4+]", "[O-]C(=O)C", "[Na+].[Cl-]", "Cl", "Br", "FC(F)(F)F", "C(Cl)(Cl)Cl",
    "N#N", "O=C=O", "CCN(CC)CC", "c1ccoc1", "c1ccsc1", "c1cc[nH]c1", "C1CC2CCC1C2", "C%10CCCCC%10",
    "CC(=O)Nc1ccc(O)cc1", "CC(C)Cc1ccc(cc1)C(C)C(=O)O", "OCC(O)CO", "C[C@H](N)C(=O)O",
    "C/C=C/C", "C\\C=C/C", "[13CH4]", "[2H]C([2H])([2H])[2H]", "S(=O)(=O)(O)O", "P(=O)(O)(O)O",
    "B(O)(O)O", "I", "[Se]", "c1ccc(-c2ccccc2)cc1", "C1CCC2(CC1)CCCC2", "N1CCNCC1", "O1CCOCC1",
    "C=CC=C", "CC#CC",
];

const INVALID: [&str; 50] = [
    "", " ", "(", ")", "C(", "C)", "C1CC", "1CC", "C==C", "C=#C", "[C", "C]", "[]", "[Xx]", "Xx",
    "c1cccc1c", "C%", "C%1", "()", "C(C", "CC)", "C(=)C", "=C", "C=", "#", "C#", "[NH4+", "[+]",
    "[C@@@@@@H]", "C.", ".C", "C..C", "C1C1", "%10", "C%1a", "[C+a]", "Q", "Ccc(", "C(C)(", "c", "n",
    "[12]", "C-", "C/", "C\\", "*X", "C[", "C1CCCCC2", "&", "C C",
];

#[test]
fn parser_is_total_over_corpus() {
    let mut ok = 0;
    for s in VALID.iter().chain(INVALID.iter()) {
        let strict = parse_smiles(s);
        let largest = parse_smiles_with(s, ParseOptions { keep_largest_fragment: true, ..ParseOptions::default() });
        if let Ok(g) = &strict {
            let f = featurize(g);
            assert_eq!(f.n_atoms(), g.atoms().len(), "{s}");
            assert_eq!(f.edges.len(), 2 * g.bonds().len(), "{s}");
            ok += 1;
        }
        if let Ok(g) = &largest {
            assert!(!g.atoms().is_empty(), "{s}");
        }
    }
    assert!(ok >= 40, "only {ok} strings parsed");
}

#[test]
fn valid_corpus_parses() {
    for s in VALID {
        let opts = ParseOptions { keep_largest_fragment: true, ..ParseOptions::default() };
        assert!(parse_smiles_with(s, opts).is_ok(), "{s} should parse");
    }
}

#[test]
fn clearly_malformed_strings_are_rejected() {
    for s in ["", "(", "C(", "C1CC", "C==C", "[C", "[Xx]", "C%", "=C", "C1CCCCC2", "C C"] {
        assert!(parse_smiles(s).is_err(), "{s:?} should fail");
    }
}

#[test]
fn reverse_edges_pair_up() {
    for s in VALID {
        let opts = ParseOptions { keep_largest_fragment: true, ..ParseOptions::default() };
        let g = parse_smiles_with(s, opts).unwrap();
        for (i, e) in g.directed_edges().iter().enumerate() {
            assert_eq!(e.reverse, i ^ 1);
            let r = g.directed_edges()[e.reverse];
            assert_eq!((r.source, r.target), (e.target, e.source));
        }
    }
}
