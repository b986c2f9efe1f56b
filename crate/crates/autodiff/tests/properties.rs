use megl_autodiff::sparse::{bilinear, im2col, permute};
use megl_autodiff::{backward, finite_difference, grad, max_relative_error, no_grad, SparseMap, Tensor};
use proptest::prelude::*;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn adjoint_gap(map: &SparseMap, x: &[f64], y: &[f64]) -> f64 {
    let lhs = dot(&map.apply(x), y);
    let rhs = dot(x, &map.transposed().apply(y));
    (lhs - rhs).abs() / (1.0 + lhs.abs())
}

fn sparse_rows(in_len: usize, out_len: usize, seed: &[f64]) -> Vec<Vec<(usize, f64)>> {
    (0..out_len)
        .map(|r| {
            (0..in_len)
                .filter(|c| (r * 7 + c * 3) % 4 != 0)
                .map(|c| (c, seed[(r * in_len + c) % seed.len()]))
                .collect()
        })
        .collect()
}

/// A smooth scalar function touching matmul, broadcasting, softmax and reductions.
fn composite(x: &Tensor, w: &Tensor) -> Tensor {
    let h = x.matmul(w).add(&w.narrow(0, 0, 1)).exp().ln().scale(0.5);
    let p = h.softmax();
    p.mul(&h).sum_axis(1).square().mean().add(&w.square().sum().scale(0.01))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sparse_maps_are_adjoint_to_their_transpose(
        seed in proptest::collection::vec(-2.0f64..2.0, 12),
        x in proptest::collection::vec(-1.0f64..1.0, 5),
        y in proptest::collection::vec(-1.0f64..1.0, 4),
    ) {
        let map = SparseMap::from_rows(5, sparse_rows(5, 4, &seed));
        prop_assert!(adjoint_gap(&map, &x, &y) < 1e-12);
        let back = map.transposed().transposed();
        prop_assert_eq!(back.apply(&x), map.apply(&x));
    }

    #[test]
    fn structural_maps_are_adjoint(
        x in proptest::collection::vec(-1.0f64..1.0, 2 * 3 * 4 * 4),
        y in proptest::collection::vec(-1.0f64..1.0, 2 * 3 * 9 * 16),
        z in proptest::collection::vec(-1.0f64..1.0, 6 * 7 * 5),
    ) {
        let cols = im2col(2, 3, 4, 4, 3, 1);
        prop_assert!(adjoint_gap(&cols, &x, &y) < 1e-12);
        let up = bilinear(6, 4, 4, 7, 5);
        prop_assert!(adjoint_gap(&up, &x[..96], &z) < 1e-12);
        let perm = permute(&[2, 3, 16], &[2, 0, 1]);
        prop_assert!(adjoint_gap(&perm, &x, &x.iter().rev().copied().collect::<Vec<_>>()) < 1e-12);
    }

    #[test]
    fn first_order_gradients_match_finite_differences(
        xs in proptest::collection::vec(-1.0f64..1.0, 6),
        ws in proptest::collection::vec(-1.0f64..1.0, 12),
    ) {
        let x = Tensor::new(xs, &[2, 3]);
        let w = Tensor::param(ws.clone(), &[3, 4]);
        let g = backward(&composite(&x, &w), &[w.clone()])[0].clone().unwrap();
        let fd = finite_difference(&ws, 1e-6, |v| no_grad(|| composite(&x, &Tensor::new(v.to_vec(), &[3, 4])).item()));
        prop_assert!(max_relative_error(g.data(), &fd, 1e-6) < 1e-5);
    }

    #[test]
    fn gradients_of_gradients_match_finite_differences(
        xs in proptest::collection::vec(-1.0f64..1.0, 6),
        ws in proptest::collection::vec(-1.0f64..1.0, 12),
        probe in proptest::collection::vec(-1.0f64..1.0, 12),
    ) {
        // d/dw <grad_w f(w), v> against central differences of the same inner product.
        let x = Tensor::new(xs, &[2, 3]);
        let v = Tensor::new(probe.clone(), &[3, 4]);
        let inner = |w: &Tensor, create: bool| {
            let g = grad(&[composite(&x, w)], &[Tensor::scalar(1.0)], std::slice::from_ref(w), create)[0].clone().unwrap();
            g.mul(&v).sum()
        };
        let w = Tensor::param(ws.clone(), &[3, 4]);
        let hv = backward(&inner(&w, true), &[w.clone()])[0].clone().unwrap();
        let fd = finite_difference(&ws, 1e-5, |p| inner(&Tensor::param(p.to_vec(), &[3, 4]), false).item());
        prop_assert!(max_relative_error(hv.data(), &fd, 1e-5) < 1e-4);
    }

    #[test]
    fn expand_and_sum_to_are_adjoint(
        a in proptest::collection::vec(-1.0f64..1.0, 3),
        b in proptest::collection::vec(-1.0f64..1.0, 2 * 4 * 3),
    ) {
        let small = Tensor::new(a.clone(), &[1, 3]);
        let big = Tensor::new(b.clone(), &[2, 4, 3]);
        let lhs = dot(small.expand(&[2, 4, 3]).data(), &b);
        let rhs = dot(&a, big.sum_to(&[1, 3]).data());
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_are_distributions(v in proptest::collection::vec(-30.0f64..30.0, 12)) {
        let p = Tensor::new(v, &[3, 4]).softmax();
        for row in p.data().chunks(4) {
            prop_assert!(row.iter().all(|x| *x >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn no_grad_results_are_detached() {
    let w = Tensor::param(vec![1.0, 2.0], &[2]);
    let y = no_grad(|| w.square().sum());
    assert!(!y.requires_grad());
    let z = w.square().sum();
    assert!(z.requires_grad());
    assert_eq!(backward(&z, &[w.clone()])[0].as_ref().unwrap().data(), &[2.0, 4.0]);
}
