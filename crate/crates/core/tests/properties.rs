use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use structrans::autodiff::Tape;
use structrans::checks::random_grammar;
use structrans::fertility::{length_distribution, marginal_fertility, marginal_fertility_counted, FertilityTable};
use structrans::grammar::viterbi_cyk;
use structrans::oracle::{brute_force_grammatical_argmax, derives, enumerate_trees};
use structrans::reordering::{expected_permutation, SpanScores};
use structrans::Array;

fn table() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..=5, 1usize..=3).prop_flat_map(|(n, d)| {
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, d + 1), n).prop_map(|rows| {
            rows.into_iter()
                .map(|r| {
                    let s: f64 = r.iter().sum();
                    r.into_iter().map(|x| x / s).collect()
                })
                .collect()
        })
    })
}

fn chart() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..=12).prop_flat_map(|l| (Just(l), prop::collection::vec(-4.0f64..4.0, l * l * 2)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fertility_columns_sum_to_one(rows in table()) {
        let ft = FertilityTable::from_rows(&rows).unwrap();
        let (n, d) = (ft.n(), ft.max_fertility());
        let dist = length_distribution(&ft);
        prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for l in 1..=n * d {
            let m = marginal_fertility(&ft, l).unwrap();
            for j in 0..l {
                let col: f64 = (0..n).flat_map(|i| (0..d).map(move |u| (i, u))).map(|(i, u)| m.tensor.get(&[i, j, u])).sum();
                prop_assert!((col - 1.0).abs() < 1e-6, "l={l} j={j} col={col}");
            }
            prop_assert!(m.tensor.data().iter().all(|&x| (-1e-12..=1.0 + 1e-9).contains(&x)));
            let total: f64 = m.expected_fertilities().iter().sum();
            prop_assert!((total - l as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn expected_permutation_is_doubly_stochastic((l, raw) in chart()) {
        let scores = SpanScores::from_fn(l, |i, j, o| raw[(i * l + j - 1) * 2 + o as usize]);
        let r = expected_permutation(&scores).matrix;
        for a in 0..l {
            let row: f64 = (0..l).map(|b| r.get(&[a, b])).sum();
            let col: f64 = (0..l).map(|b| r.get(&[b, a])).sum();
            prop_assert!((row - 1.0).abs() < 1e-6 && (col - 1.0).abs() < 1e-6);
        }
        prop_assert!(r.data().iter().all(|&x| x >= -1e-12));
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>(), t in 0.1f64..4.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rand::Rng::gen_range(&mut rng, -30.0..30.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Array::new([rows, cols], data).unwrap());
        let s = tape.softmax(x, t).unwrap();
        let v = tape.value(s);
        for r in 0..rows {
            prop_assert!((v.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(v.row_slice(r).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn viterbi_output_is_grammatical_and_optimal(seed in any::<u64>(), terminals in 1usize..=4, l in 1usize..=4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grammar = random_grammar(&mut rng, terminals);
        let data: Vec<f64> = (0..l * terminals).map(|_| rand::Rng::gen_range(&mut rng, 0.01..1.0)).collect();
        let dist = Array::new([l, terminals], data).unwrap();
        match (viterbi_cyk(&dist, &grammar), brute_force_grammatical_argmax(&dist, &grammar).unwrap()) {
            (Ok((y, s)), Some((_, best))) => {
                prop_assert!(derives(&grammar, &y));
                prop_assert!(s >= best - 1e-9 && s <= best + 1e-9);
            }
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "viterbi {a:?} vs brute force {b:?}"),
        }
    }
}

#[test]
fn non_separable_permutations_are_unreachable() {
    let trees = enumerate_trees(0, 4, &|_, _, _| 0.0);
    assert_eq!(trees.len(), 40);
    let mut orders: Vec<Vec<usize>> = trees.into_iter().map(|t| t.order).collect();
    orders.sort();
    orders.dedup();
    // the separable permutations of four elements
    assert_eq!(orders.len(), 22);
    for bad in [[2, 0, 3, 1], [1, 3, 0, 2]] {
        assert!(!orders.contains(&bad.to_vec()));
    }
}

proptest! {
    #[test]
    fn marginal_cost_is_bounded(rows in table()) {
        let ft = FertilityTable::from_rows(&rows).unwrap();
        let (n, d) = (ft.n(), ft.max_fertility());
        for l in 1..=n * d {
            let (_, ops) = marginal_fertility_counted(&ft, l).unwrap();
            prop_assert!(ops as usize <= n * l * d * d, "n={n} l={l} d={d} ops={ops}");
        }
    }
}
