//! Independent reference implementations used to cross-check the exact
//! breakpoint algorithms, plus shared random-instance helpers. Everything
//! here is deliberately written by a different route than the library code:
//! bisection instead of breakpoint walks, exhaustive enumeration instead of
//! greedy fills.

use agora::balance::CommodityBox;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Projects `z` onto the balanced box set by bisecting the monotone dual
/// function `h(lambda) = sum_i clip(z_i - lambda)`.
pub fn bisect_project(z: &[f64], bx: &CommodityBox) -> (Vec<f64>, f64) {
    let clip = |lambda: f64| -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &v)| (v - lambda).clamp(bx.lower[i], bx.upper[i]))
            .collect()
    };
    let h = |lambda: f64| clip(lambda).iter().sum::<f64>();

    let mut lo = z
        .iter()
        .zip(&bx.upper)
        .map(|(&zi, &ui)| zi - ui)
        .fold(f64::INFINITY, f64::min)
        - 1.0;
    let mut hi = z
        .iter()
        .zip(&bx.lower)
        .map(|(&zi, &li)| zi - li)
        .fold(f64::NEG_INFINITY, f64::max)
        + 1.0;
    debug_assert!(h(lo) >= 0.0 && h(hi) <= 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) >= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    (clip(lambda), lambda)
}

/// Every vertex of `{l <= y <= u, sum y = 0}`: all coordinates at a bound
/// except at most one, which absorbs the balance. Candidates outside their
/// own bound are discarded.
pub fn enumerate_balanced_vertices(bx: &CommodityBox) -> Vec<Vec<f64>> {
    let m = bx.len();
    let mut vertices = Vec::new();
    for free in 0..m {
        let others: Vec<usize> = (0..m).filter(|&i| i != free).collect();
        for mask in 0..(1u32 << others.len()) {
            let mut y = vec![0.0; m];
            let mut sum = 0.0;
            for (bit, &i) in others.iter().enumerate() {
                y[i] = if mask >> bit & 1 == 1 {
                    bx.upper[i]
                } else {
                    bx.lower[i]
                };
                sum += y[i];
            }
            let v = -sum;
            if v >= bx.lower[free] - 1e-12 && v <= bx.upper[free] + 1e-12 {
                y[free] = v.clamp(bx.lower[free], bx.upper[free]);
                vertices.push(y);
            }
        }
    }
    vertices
}

/// Random box with `sum lower <= 0 <= sum upper`, so the balanced set is
/// nonempty. Some per-coordinate intervals deliberately exclude zero.
pub fn random_feasible_box(rng: &mut ChaCha8Rng, m: usize) -> CommodityBox {
    loop {
        let lower: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..1.0)).collect();
        let upper: Vec<f64> = lower
            .iter()
            .map(|&l| l + rng.gen_range(0.1..3.0))
            .collect();
        if lower.iter().sum::<f64>() <= 0.0 && upper.iter().sum::<f64>() >= 0.0 {
            return CommodityBox::new(lower, upper).unwrap();
        }
    }
}

/// Price vector with deliberate exact ties (values snapped to one decimal).
pub fn random_prices(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m)
        .map(|_| {
            let p: f64 = rng.gen_range(-3.0..3.0);
            if rng.gen_bool(0.3) {
                (p * 10.0).round() / 10.0
            } else {
                p
            }
        })
        .collect()
}
