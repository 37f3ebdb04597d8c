//! Slow reference solvers used to check the closed forms: exhaustive mask
//! enumeration, a projected-gradient minimizer for the layer energy problem,
//! and central finite differences. The pruning path never calls into here.

use crate::allocation::ClosedFormContext;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Largest unit count [`enumerate_masks`] accepts.
pub const MAX_ENUM_UNITS: usize = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct EnumResult {
    pub best: Vec<bool>,
    pub best_loss: f64,
    /// Every `k`-subset in lexicographic order of kept indices, with its loss.
    pub table: Vec<(Vec<bool>, f64)>,
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        // rightmost position that can still advance
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Loss of every binary mask that keeps exactly `k` units. The minimum goes
/// to the first mask in lexicographic order among equal losses.
pub fn enumerate_masks(ctx: &ClosedFormContext, k: usize) -> Result<EnumResult> {
    let n = ctx.len();
    if n > MAX_ENUM_UNITS {
        return Err(Error::Size {
            op: "enumerate_masks",
            size: n,
            limit: MAX_ENUM_UNITS,
        });
    }
    if k > n {
        return Err(Error::param("k", format!("budget {k} exceeds {n} units")));
    }
    let mut table = Vec::new();
    let mut best: Option<(Vec<bool>, f64)> = None;
    for subset in combinations(n, k) {
        let mut bits = vec![false; n];
        for j in subset {
            bits[j] = true;
        }
        let loss = ctx.loss_bits(&bits);
        if best.as_ref().is_none_or(|(_, b)| loss < *b) {
            best = Some((bits.clone(), loss));
        }
        table.push((bits, loss));
    }
    let (best, best_loss) = best.expect("at least one subset");
    Ok(EnumResult { best, best_loss, table })
}

/// Euclidean projection onto `{r : Σ r = total, lo ≤ r ≤ hi}` by bisection on
/// the shift `μ` in `clip(v − μ, lo, hi)`.
pub fn project_box_sum(v: &[f64], total: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    let n = v.len() as f64;
    if total < lo * n - 1e-12 || total > hi * n + 1e-12 {
        return Err(Error::param(
            "budget",
            format!("{total} is outside [{}, {}]", lo * n, hi * n),
        ));
    }
    let sum_at = |mu: f64| v.iter().map(|x| (x - mu).clamp(lo, hi)).sum::<f64>();
    let mut a = v.iter().copied().fold(f64::INFINITY, f64::min) - hi;
    let mut b = v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - lo;
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if sum_at(mid) > total {
            a = mid;
        } else {
            b = mid;
        }
        if b - a <= f64::EPSILON * (a.abs() + b.abs()) {
            break;
        }
    }
    let mu = 0.5 * (a + b);
    let mut r: Vec<f64> = v.iter().map(|x| (x - mu).clamp(lo, hi)).collect();
    // spread the last rounding residue over coordinates strictly inside the box
    let resid = total - r.iter().sum::<f64>();
    let free: Vec<usize> = (0..r.len()).filter(|&i| r[i] > lo && r[i] < hi).collect();
    if !free.is_empty() {
        let share = resid / free.len() as f64;
        for i in free {
            r[i] = (r[i] + share).clamp(lo, hi);
        }
    }
    Ok(r)
}

/// Total energy `Σ_ℓ −e^{−I_ℓ/T} log r_ℓ`.
pub fn layer_energy(importance: &[f64], temperature: f64, r: &[f64]) -> f64 {
    importance
        .iter()
        .zip(r)
        .map(|(i, x)| -(-i / temperature).exp() * x.ln())
        .sum()
}

/// Minimizes the layer energy subject to `Σ r = r̄ L`, `1e-6 ≤ r ≤ 1`, by
/// projected gradient descent with backtracking, starting from the uniform
/// allocation.
pub fn energy_minimize_projected(
    importance: &[f64],
    r_bar: f64,
    temperature: f64,
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    const LO: f64 = 1e-6;
    let l = importance.len();
    if l == 0 {
        return Err(Error::param("importance", "no layers"));
    }
    if !(temperature > 0.0) {
        return Err(Error::param("temperature", "must be positive"));
    }
    let total = r_bar * l as f64;
    if !(total > LO * l as f64 && total < l as f64) {
        return Err(Error::param(
            "r_bar",
            format!("budget r̄L = {total} has no feasible interior"),
        ));
    }
    // rescaling the weights leaves the minimizer unchanged and keeps the
    // gradient well scaled for any temperature
    let shift = importance.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = importance.iter().map(|i| (-(i - shift) / temperature).exp()).collect();
    let energy = |r: &[f64]| -> f64 { w.iter().zip(r).map(|(wi, x)| -wi * x.ln()).sum() };
    let mut r = vec![r_bar; l];
    let mut f = energy(&r);
    let mut eta = lr;
    for _ in 0..steps {
        let g: Vec<f64> = w.iter().zip(&r).map(|(wi, x)| -wi / x).collect();
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = r.iter().zip(&g).map(|(x, gi)| x - eta * gi).collect();
            let next = project_box_sum(&trial, total, LO, 1.0)?;
            let decrease: f64 = g.iter().zip(r.iter().zip(&next)).map(|(gi, (a, b))| gi * (a - b)).sum();
            let fn_next = energy(&next);
            if fn_next <= f - 1e-4 * decrease {
                let moved: f64 = r.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
                r = next;
                f = fn_next;
                accepted = moved > 0.0;
                eta *= 1.5;
                break;
            }
            eta *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Ok(r)
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(f: F, x: &DenseMatrix, h: f64) -> Result<DenseMatrix>
where
    F: Fn(&DenseMatrix) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::param("h", "step must be positive"));
    }
    let mut g = DenseMatrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for idx in 0..x.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let up = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let down = f(&probe);
        probe.data_mut()[idx] = orig;
        g.data_mut()[idx] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subsets_recursive(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for j in start..n {
            cur.push(j);
            subsets_recursive(n, k, j + 1, cur, out);
            cur.pop();
        }
    }

    #[test]
    fn combinations_match_recursive_generator() {
        for n in 0..=4 {
            for k in 0..=n {
                let mut want = Vec::new();
                subsets_recursive(n, k, 0, &mut Vec::new(), &mut want);
                assert_eq!(combinations(n, k), want, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn enumeration_cases() {
        let ctx = ClosedFormContext::separable(vec![2.0, 0.0], vec![1.0, 1.0]).unwrap();
        let r = enumerate_masks(&ctx, 1).unwrap();
        assert_eq!(r.best, vec![true, false]);
        assert!(r.table.iter().all(|(_, l)| r.best_loss <= *l));
        let full = enumerate_masks(&ctx, 2).unwrap();
        assert_eq!(full.table.len(), 1);
        let big = ClosedFormContext::separable(vec![0.0; 13], vec![1.0; 13]).unwrap();
        assert!(matches!(enumerate_masks(&big, 2), Err(Error::Size { .. })));
    }

    #[test]
    fn projection_respects_constraints() {
        let r = project_box_sum(&[3.0, -1.0, 0.2, 0.9], 1.6, 1e-6, 1.0).unwrap();
        assert!((r.iter().sum::<f64>() - 1.6).abs() < 1e-12);
        assert!(r.iter().all(|&x| (1e-6..=1.0).contains(&x)));
    }

    #[test]
    fn energy_minimizer_cases() {
        let r = energy_minimize_projected(&[0.4; 5], 0.3, 1.0, 10_000, 0.1).unwrap();
        assert!(r.iter().all(|x| (x - 0.3).abs() < 1e-6));
        let imp = [0.0, 3f64.ln()];
        let r = energy_minimize_projected(&imp, 0.5, 1.0, 10_000, 0.1).unwrap();
        assert!((r[0] - 0.75).abs() < 1e-4 && (r[1] - 0.25).abs() < 1e-4, "{r:?}");
        assert!(layer_energy(&imp, 1.0, &r) <= layer_energy(&imp, 1.0, &[0.5, 0.5]));
        assert!(energy_minimize_projected(&imp, 1.0, 1.0, 10, 0.1).is_err());
    }

    #[test]
    fn finite_differences_cases() {
        let x = DenseMatrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let g = finite_diff_grad(|m| 0.5 * m.frobenius_sq(), &x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&x) < 1e-8);
        let g = finite_diff_grad(|_| 4.0, &x, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
}
