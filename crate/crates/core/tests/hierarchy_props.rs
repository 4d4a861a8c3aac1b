use hiergraph::hierarchy::{
    aggregate_series, build_c, connect, lift, parse_selections, reduce, selections_to_text, Hierarchy,
    SelectionMatrix,
};
use hiergraph::ndiff::Tensor;
use proptest::prelude::*;

/// Random chain of selections over `n` bottom nodes, `depth` levels.
fn chain() -> impl Strategy<Value = (usize, Vec<SelectionMatrix>, Vec<f64>)> {
    (2usize..=30, 1usize..=3).prop_flat_map(|(n, depth)| {
        let sizes = proptest::collection::vec(1usize..=6, depth);
        (Just(n), sizes, proptest::collection::vec(0u64..u64::MAX, 64), proptest::collection::vec(-50i32..50, n * 4))
            .prop_map(|(n, sizes, seeds, xs)| {
                let mut prev = n;
                let mut sel = Vec::new();
                let mut seed_iter = seeds.into_iter().cycle();
                for &size in &sizes {
                    let size = size.min(prev);
                    let assignment = (0..prev).map(|_| (seed_iter.next().unwrap() % size as u64) as usize).collect();
                    sel.push(SelectionMatrix::new(assignment, size).unwrap());
                    prev = size;
                }
                (n, sel, xs.into_iter().map(f64::from).collect())
            })
    })
}

proptest! {
    #[test]
    fn c_times_x_is_recursive_reduce((n, sel, xs) in chain()) {
        let x = Tensor::from_rows(n, 4, xs);
        let c = build_c(&sel).unwrap();
        let direct = c.matmul(&x);
        let h = Hierarchy::new(Tensor::zeros(n, n), sel.clone()).unwrap();
        let stack = aggregate_series(&x, &h).unwrap();
        let aggregates = direct.rows();
        prop_assert_eq!(&stack.values.data()[..aggregates * 4], direct.data());
        prop_assert_eq!(stack.bottom(), x);
        // Recursive reduce as an independent oracle.
        let mut level = stack.bottom();
        for (k, s) in sel.iter().enumerate() {
            level = reduce(&level, s).unwrap();
            prop_assert_eq!(&stack.level(k + 1), &level);
        }
    }

    #[test]
    fn q_annihilates_aggregates((n, sel, xs) in chain()) {
        let x = Tensor::from_rows(n, 4, xs);
        let h = Hierarchy::new(Tensor::zeros(n, n), sel).unwrap();
        let stack = aggregate_series(&x, &h).unwrap();
        let qy = h.constraint_matrix().matmul(&stack.values);
        prop_assert!(qy.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduce_lift_scales_by_cluster_size((_n, sel, xs) in chain()) {
        let s = &sel[0];
        let z = Tensor::from_rows(s.clusters(), 1, xs.iter().cycle().take(s.clusters()).copied().collect());
        let round = reduce(&lift(&z, s).unwrap(), s).unwrap();
        let sizes = s.cluster_sizes();
        for (c, &size) in sizes.iter().enumerate() {
            prop_assert_eq!(round.get(c, 0), size as f64 * z.get(c, 0));
        }
    }

    #[test]
    fn lift_rows_come_from_input((_n, sel, xs) in chain()) {
        let s = &sel[0];
        let z = Tensor::from_rows(s.clusters(), 1, xs.iter().cycle().take(s.clusters()).copied().collect());
        let up = lift(&z, s).unwrap();
        for i in 0..up.rows() {
            prop_assert!((0..z.rows()).any(|c| z.row_slice(c) == up.row_slice(i)));
        }
    }

    #[test]
    fn connect_preserves_weight((n, sel, xs) in chain()) {
        let a = Tensor::from_rows(n, n, (0..n * n).map(|i| xs[i % xs.len()].abs()).collect());
        let coarse = connect(&sel[0], &a).unwrap();
        prop_assert_eq!(coarse.sum(), a.sum());
        let sd = sel[0].to_dense();
        prop_assert_eq!(coarse, sd.transpose().matmul(&a).matmul(&sd));
    }

    #[test]
    fn selection_text_round_trip((_n, sel, _xs) in chain()) {
        let text = selections_to_text(&sel);
        let back = parse_selections(&text).unwrap();
        for (a, b) in sel.iter().zip(&back) {
            prop_assert_eq!(a.assignment(), b.assignment());
            // Trailing empty clusters of the last level are not recoverable from text.
            prop_assert!(b.clusters() <= a.clusters());
        }
    }
}

#[test]
fn hierarchy_adjacencies_follow_connect() {
    let mut a = Tensor::zeros(5, 5);
    for i in 0..4 {
        a.set(i, i + 1, 1.0);
    }
    let sel = vec![
        SelectionMatrix::new(vec![0, 0, 0, 1, 1], 2).unwrap(),
        SelectionMatrix::total(2),
    ];
    let h = Hierarchy::new(a.clone(), sel.clone()).unwrap();
    assert_eq!(h.level_sizes(), &[5, 2, 1]);
    assert_eq!(h.total_size(), 8);
    assert_eq!(h.adjacency(1), &connect(&sel[0], &a).unwrap());
    assert_eq!(h.adjacency(2).data(), &[4.0]);
    assert_eq!(h.bottom_to_level(1), vec![0, 0, 0, 1, 1]);
    assert_eq!(h.bottom_to_level(2), vec![0; 5]);
}
