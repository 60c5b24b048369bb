//! Randomized structural invariants of the balance oracles: the projection's
//! KKT form, and the two symmetries of the stationarity gap (agent
//! relabeling and per-commodity price shifts).

use agora::balance::{self, CommodityBox};
use agora::{ExecPolicy, MarketState};
use ndarray::Array2;
use proptest::prelude::*;

fn feasible_box() -> impl Strategy<Value = (CommodityBox, Vec<f64>)> {
    (1usize..8)
        .prop_flat_map(|m| {
            (
                prop::collection::vec(-2.0..1.0f64, m),
                prop::collection::vec(0.1..3.0f64, m),
                prop::collection::vec(-5.0..5.0f64, m),
            )
        })
        .prop_filter_map("balanced set must be nonempty", |(lower, width, z)| {
            let upper: Vec<f64> = lower.iter().zip(&width).map(|(l, w)| l + w).collect();
            if lower.iter().sum::<f64>() <= 0.0 && upper.iter().sum::<f64>() >= 0.0 {
                Some((CommodityBox::new(lower, upper).unwrap(), z))
            } else {
                None
            }
        })
}

proptest! {
    /// The projection is the multiplier-shifted clip of its input, balances
    /// to rounding, and projecting a projected point changes nothing.
    #[test]
    fn projection_has_kkt_form_and_is_idempotent((bx, z) in feasible_box()) {
        let (y, lambda) = balance::project_balanced(&z, &bx).unwrap();
        for i in 0..z.len() {
            let kkt = (z[i] - lambda).clamp(bx.lower[i], bx.upper[i]);
            prop_assert!((y[i] - kkt).abs() <= 1e-12);
        }
        let scale = z.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        prop_assert!(y.iter().sum::<f64>().abs() <= 1e-10 * scale);

        let (again, _) = balance::project_balanced(&y, &bx).unwrap();
        for i in 0..y.len() {
            prop_assert!((again[i] - y[i]).abs() <= 1e-12);
        }
    }
}

fn market_instance() -> impl Strategy<Value = (Vec<CommodityBox>, MarketState, MarketState, Vec<f64>)>
{
    (2usize..6, 1usize..4)
        .prop_flat_map(|(m, n)| {
            (
                Just((m, n)),
                prop::collection::vec(-2.0..1.0f64, m * n),
                prop::collection::vec(0.1..3.0f64, m * n),
                prop::collection::vec(-4.0..4.0f64, m * n),
                prop::collection::vec(-3.0..3.0f64, m * n),
                prop::collection::vec(-5.0..5.0f64, n),
            )
        })
        .prop_filter_map(
            "balanced sets must be nonempty",
            |((m, n), lower, width, z, prices, shift)| {
                let lower = Array2::from_shape_vec((m, n), lower).unwrap();
                let width = Array2::from_shape_vec((m, n), width).unwrap();
                let upper = &lower + &width;
                let mut boxes = Vec::with_capacity(n);
                for j in 0..n {
                    let l: Vec<f64> = lower.column(j).to_vec();
                    let u: Vec<f64> = upper.column(j).to_vec();
                    if l.iter().sum::<f64>() > 0.0 || u.iter().sum::<f64>() < 0.0 {
                        return None;
                    }
                    boxes.push(CommodityBox::new(l, u).unwrap());
                }
                let z = Array2::from_shape_vec((m, n), z).unwrap();
                let prices = Array2::from_shape_vec((m, n), prices).unwrap();
                Some((boxes, z, prices, shift))
            },
        )
}

fn stationarity_gap(p: &MarketState, x: &MarketState, boxes: &[CommodityBox]) -> f64 {
    let lmo = balance::lmo_market(p, boxes, ExecPolicy::Sequential).unwrap();
    (p * x).sum() - lmo.value
}

proptest! {
    /// At a balanced state the gap ignores per-commodity constant price
    /// shifts, and relabeling the agents relabels nothing that matters.
    #[test]
    fn gap_is_invariant_under_price_shifts_and_relabeling(
        (boxes, z, prices, shift) in market_instance()
    ) {
        let (x, _) = balance::project_market(&z, &boxes, ExecPolicy::Sequential).unwrap();
        let gap = stationarity_gap(&prices, &x, &boxes);
        prop_assert!(gap >= -1e-10);

        let (m, n) = x.dim();
        let shifted = Array2::from_shape_fn((m, n), |(i, j)| prices[(i, j)] + shift[j]);
        let scale = 1.0 + gap.abs();
        prop_assert!((stationarity_gap(&shifted, &x, &boxes) - gap).abs() <= 1e-10 * scale);

        // Rotate the agent indexing by one.
        let rot = |a: &MarketState| Array2::from_shape_fn((m, n), |(i, j)| a[((i + 1) % m, j)]);
        let rot_boxes: Vec<CommodityBox> = (0..n)
            .map(|j| {
                let mut lower = boxes[j].lower.clone();
                let mut upper = boxes[j].upper.clone();
                lower.rotate_left(1);
                upper.rotate_left(1);
                CommodityBox::new(lower, upper).unwrap()
            })
            .collect();
        let relabeled = stationarity_gap(&rot(&prices), &rot(&x), &rot_boxes);
        prop_assert!((relabeled - gap).abs() <= 1e-10 * scale);
    }
}
