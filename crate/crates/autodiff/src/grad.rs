//! Reverse-mode differentiation.
//!
//! Backward rules are written with the same differentiable tensor operations
//! as the forward pass. With `create_graph` set, the returned gradients carry
//! their own graph and can be differentiated again.

use std::collections::{HashMap, HashSet};

use crate::tensor::{NoGradGuard, Op, Tensor};

fn backward_rule(op: &Op, out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let need = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Leaf => vec![],
        Op::Add(_, _) => vec![need(0).then(|| g.clone()), need(1).then(|| g.clone())],
        Op::Sub(_, _) => vec![need(0).then(|| g.clone()), need(1).then(|| g.neg())],
        Op::Mul(a, b) => vec![need(0).then(|| g.mul(b)), need(1).then(|| g.mul(a))],
        Op::Div(_, b) => vec![
            need(0).then(|| g.div(b)),
            need(1).then(|| g.mul(out).div(b).neg()),
        ],
        Op::Neg(_) => vec![Some(g.neg())],
        Op::Scale(_, s) => vec![Some(g.scale(*s))],
        Op::Offset(_) => vec![Some(g.clone())],
        Op::Exp(_) => vec![Some(g.mul(out))],
        Op::Log(a) => vec![Some(g.div(a))],
        Op::Sqrt(_) => vec![Some(g.div(out).scale(0.5))],
        Op::Relu(a) => {
            let mask: Vec<f64> = a.data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect();
            vec![Some(g.mul(&Tensor::new(mask, a.shape())))]
        }
        Op::Abs(a) => {
            let sign: Vec<f64> = a
                .data()
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
                .collect();
            vec![Some(g.mul(&Tensor::new(sign, a.shape())))]
        }
        Op::MatMul { a, b, ta, tb } => {
            let (ta, tb) = (*ta, *tb);
            let ga = need(0).then(|| {
                if ta {
                    b.matmul_t(g, tb, true)
                } else {
                    g.matmul_t(b, false, !tb)
                }
            });
            let gb = need(1).then(|| {
                if tb {
                    g.matmul_t(a, true, ta)
                } else {
                    a.matmul_t(g, !ta, false)
                }
            });
            vec![ga, gb]
        }
        Op::Expand(a) => vec![Some(g.sum_to(a.shape()))],
        Op::SumTo(a) => vec![Some(g.expand(a.shape()))],
        Op::Reshape(a) => vec![Some(g.reshape(a.shape()))],
        Op::Sparse(a, map) => vec![Some(g.sparse(&map.transposed(), a.shape()))],
    }
}

/// Gradients of `sum_i <seeds[i], outputs[i]>` with respect to each tensor in `wrt`.
///
/// `seeds` may be empty when every output is a single element (seed 1).
/// Entries of the result are `None` when the corresponding `wrt` tensor is not
/// connected to any output. With `create_graph`, results are differentiable.
pub fn grad(
    outputs: &[Tensor],
    seeds: &[Tensor],
    wrt: &[Tensor],
    create_graph: bool,
) -> Vec<Option<Tensor>> {
    let _guard = (!create_graph).then(NoGradGuard::new);

    let wrt_ids: HashSet<u64> = wrt.iter().map(Tensor::id).collect();

    // Post-order DFS: parents appear before children.
    let mut order: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = outputs
        .iter()
        .filter(|o| o.requires_grad())
        .map(|o| (o.clone(), false))
        .collect();
    while let Some((t, expanded)) = stack.pop() {
        if expanded {
            order.push(t);
            continue;
        }
        if !seen.insert(t.id()) {
            continue;
        }
        stack.push((t.clone(), true));
        for p in t.op().parents() {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }

    let mut relevant: HashSet<u64> = HashSet::new();
    for t in &order {
        if wrt_ids.contains(&t.id()) || t.op().parents().iter().any(|p| relevant.contains(&p.id())) {
            relevant.insert(t.id());
        }
    }

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    for (i, o) in outputs.iter().enumerate() {
        if !o.requires_grad() && !wrt_ids.contains(&o.id()) {
            continue;
        }
        let seed = match seeds.get(i) {
            Some(s) => {
                assert_eq!(s.shape(), o.shape(), "seed shape must match output");
                s.clone()
            }
            None => {
                assert_eq!(o.numel(), 1, "non-scalar output needs an explicit seed");
                Tensor::ones(o.shape())
            }
        };
        accumulate(&mut grads, o.id(), seed);
    }

    for t in order.iter().rev() {
        if !relevant.contains(&t.id()) {
            continue;
        }
        let g = if wrt_ids.contains(&t.id()) {
            grads.get(&t.id()).cloned()
        } else {
            grads.remove(&t.id())
        };
        let Some(g) = g else { continue };
        let parents = t.op().parents();
        if parents.is_empty() {
            continue;
        }
        let needs: Vec<bool> = parents
            .iter()
            .map(|p| p.requires_grad() && relevant.contains(&p.id()))
            .collect();
        if !needs.iter().any(|&n| n) {
            continue;
        }
        let pg = backward_rule(t.op(), t, &g, &needs);
        for ((p, gp), &n) in parents.iter().zip(pg).zip(&needs) {
            if let (true, Some(gp)) = (n, gp) {
                debug_assert_eq!(gp.shape(), p.shape(), "gradient shape for parent");
                accumulate(&mut grads, p.id(), gp);
            }
        }
    }

    wrt.iter().map(|w| grads.get(&w.id()).cloned()).collect()
}

fn accumulate(grads: &mut HashMap<u64, Tensor>, id: u64, g: Tensor) {
    match grads.remove(&id) {
        Some(prev) => {
            grads.insert(id, prev.add(&g));
        }
        None => {
            grads.insert(id, g);
        }
    }
}

/// First-order gradients of a scalar `loss` with respect to `params`.
pub fn backward(loss: &Tensor, params: &[Tensor]) -> Vec<Option<Tensor>> {
    grad(std::slice::from_ref(loss), &[], params, false)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error `|a - b| / max(|a|, |b|, floor)` across two gradients.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let x = Tensor::param(vec![3.0], &[1]);
        let y = x.mul(&x).mul(&x).sum();
        let g = backward(&y, &[x.clone()]);
        assert_eq!(g[0].as_ref().unwrap().data(), &[27.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Tensor::param(vec![2.0], &[1]);
        let y = x.mul(&x).mul(&x).sum();
        let dy = grad(&[y], &[], &[x.clone()], true)[0].clone().unwrap();
        assert!(dy.requires_grad());
        let d2 = backward(&dy.sum(), &[x])[0].clone().unwrap();
        assert_eq!(d2.data(), &[12.0]);
    }

    #[test]
    fn disconnected_input_is_none() {
        let x = Tensor::param(vec![1.0], &[1]);
        let z = Tensor::param(vec![1.0], &[1]);
        let y = x.scale(2.0).sum();
        let g = backward(&y, &[x, z]);
        assert!(g[0].is_some());
        assert!(g[1].is_none());
    }

    #[test]
    fn gradient_through_non_leaf() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]);
        let h = x.scale(3.0);
        let y = h.square().sum();
        let g = grad(&[y], &[], &[h], false)[0].clone().unwrap();
        assert_eq!(g.data(), &[6.0, 12.0]);
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let a0 = vec![0.3, -1.2, 0.7, 2.0, 0.1, -0.4];
        let b0 = vec![1.1, 0.2, -0.5, 0.9, 0.4, -1.3];
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let (sa, sb) = match (ta, tb) {
                (false, false) => ([2, 3], [3, 2]),
                (true, false) => ([3, 2], [3, 2]),
                (false, true) => ([2, 3], [2, 3]),
                (true, true) => ([3, 2], [2, 3]),
            };
            let f = |a: &[f64], b: &[f64]| {
                let at = Tensor::new(a.to_vec(), &sa);
                let bt = Tensor::new(b.to_vec(), &sb);
                at.matmul_t(&bt, ta, tb).square().sum().item()
            };
            let a = Tensor::param(a0.clone(), &sa);
            let b = Tensor::param(b0.clone(), &sb);
            let loss = a.matmul_t(&b, ta, tb).square().sum();
            let g = backward(&loss, &[a, b]);
            let fa = finite_difference(&a0, 1e-6, |x| f(x, &b0));
            let fb = finite_difference(&b0, 1e-6, |x| f(&a0, x));
            assert!(max_relative_error(g[0].as_ref().unwrap().data(), &fa, 1e-8) < 1e-6);
            assert!(max_relative_error(g[1].as_ref().unwrap().data(), &fb, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn double_backward_through_matmul_matches_finite_differences() {
        // h(w) = sum((d/dx sum((x w)^2))) evaluated at fixed x.
        let x0 = vec![0.5, -0.3, 0.8, 0.2];
        let w0 = vec![0.7, -0.1, 0.4, 1.2];
        let h = |w: &[f64]| {
            let x = Tensor::param(x0.clone(), &[2, 2]);
            let wt = Tensor::new(w.to_vec(), &[2, 2]);
            let y = x.matmul(&wt).square().sum();
            let gx = grad(&[y], &[], &[x], true)[0].clone().unwrap();
            gx.square().sum().item()
        };
        let x = Tensor::param(x0.clone(), &[2, 2]);
        let w = Tensor::param(w0.clone(), &[2, 2]);
        let y = x.matmul(&w).square().sum();
        let gx = grad(&[y], &[], &[x], true)[0].clone().unwrap();
        let g = backward(&gx.square().sum(), &[w])[0].clone().unwrap();
        let fd = finite_difference(&w0, 1e-6, h);
        assert!(max_relative_error(g.data(), &fd, 1e-8) < 1e-6);
    }
}
