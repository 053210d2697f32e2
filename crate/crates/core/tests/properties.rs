use graphmsl::fingerprint::{ecfp, tanimoto, FingerprintParams};
use graphmsl::molgraph::parse_smiles;
use graphmsl::similarity::{
    fuse, pair_weight, FusionWeights, Modality, SelfSimilarityMatrix, SquareMatrix, TargetSimilarityMatrix,
};
use graphmsl::synth::synthetic_smiles;
use proptest::prelude::*;

fn self_sim(n: usize, values: Vec<f64>) -> SelfSimilarityMatrix {
    let ids = (0..n).map(|i| i.to_string()).collect();
    SelfSimilarityMatrix { matrix: SquareMatrix::new(ids, values).unwrap(), modality: Modality::Smiles }
}

fn square(max: usize) -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1..=max).prop_flat_map(|n| (Just(n), prop::collection::vec(-5.0f64..5.0, n * n)))
}

proptest! {
    #[test]
    fn pair_weight_is_positive_and_stochastic((n, v) in square(24)) {
        let t = pair_weight(&self_sim(n, v)).unwrap();
        prop_assert!(t.values().iter().all(|&x| x > 0.0));
        prop_assert!(t.max_row_sum_error() <= 1e-12);
    }

    #[test]
    fn pair_weight_preserves_row_order((n, v) in square(16)) {
        let t = pair_weight(&self_sim(n, v.clone())).unwrap();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if v[i * n + j] > v[i * n + k] {
                        prop_assert!(t.get(i, j) >= t.get(i, k));
                    }
                }
            }
        }
    }

    #[test]
    fn fuse_stays_between_inputs((n, a) in square(12), seed in any::<u64>(), w in 0.0f64..=1.0) {
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| (x * 1.7 + (seed % 13) as f64 + i as f64).sin()).collect();
        let (ta, tb): (TargetSimilarityMatrix, TargetSimilarityMatrix) =
            (pair_weight(&self_sim(n, a)).unwrap(), pair_weight(&self_sim(n, b)).unwrap());
        let weights = FusionWeights::new(w, 0.0, 0.0, 1.0 - w).unwrap();
        let f = fuse(&[(Modality::Smiles, &ta), (Modality::Fingerprint, &tb)], &weights).unwrap();
        for k in 0..n * n {
            let (lo, hi) = (ta.values()[k].min(tb.values()[k]), ta.values()[k].max(tb.values()[k]));
            prop_assert!(f.values()[k] >= lo - 1e-15 && f.values()[k] <= hi + 1e-15);
        }
    }

    #[test]
    fn tanimoto_is_symmetric_and_bounded(i in 0usize..60, j in 0usize..60) {
        let smiles = synthetic_smiles(60, 8);
        let p = FingerprintParams::default();
        let a = ecfp(&parse_smiles(&smiles[i]).unwrap(), p);
        let b = ecfp(&parse_smiles(&smiles[j]).unwrap(), p);
        let ab = tanimoto(&a, &b).unwrap();
        prop_assert_eq!(ab, tanimoto(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
    }
}
