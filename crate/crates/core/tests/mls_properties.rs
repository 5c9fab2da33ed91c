mod common;

use proptest::prelude::*;
use tryon_core::geometry_warp::{build_deformation_field, mls_affine_eval, ControlPointSet, Point2};

fn distinct_points(n: usize) -> impl Strategy<Value = Vec<Point2>> {
    prop::collection::vec((0.0..63.0f64, 0.0..63.0f64), n).prop_filter("distinct and spread", |pts| {
        pts.iter().enumerate().all(|(i, a)| {
            pts[i + 1..]
                .iter()
                .all(|b| (a.0 - b.0).hypot(a.1 - b.1) > 2.0)
        })
    })
    .prop_map(|v| v.into_iter().map(|(x, y)| Point2::new(x, y)).collect())
}

fn invertible_affine() -> impl Strategy<Value = [f64; 6]> {
    (
        -1.5..1.5f64,
        -1.5..1.5f64,
        -1.5..1.5f64,
        -1.5..1.5f64,
        -10.0..10.0f64,
        -10.0..10.0f64,
    )
        .prop_map(|(a, b, c, d, e, f)| [a, b, c, d, e, f])
        .prop_filter("well conditioned", |m| (m[0] * m[3] - m[1] * m[2]).abs() > 0.3)
}

fn apply(m: &[f64; 6], p: Point2) -> Point2 {
    Point2::new(m[0] * p.x + m[1] * p.y + m[4], m[2] * p.x + m[3] * p.y + m[5])
}

fn non_collinear(pts: &[Point2]) -> bool {
    let (a, b, c) = (pts[0], pts[1], pts[2]);
    ((b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)).abs() > 20.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn affine_maps_are_reproduced(m in invertible_affine(), src in distinct_points(6)) {
        prop_assume!(non_collinear(&src));
        let dst: Vec<Point2> = src.iter().map(|&p| apply(&m, p)).collect();
        let cps = ControlPointSet::new(src, dst).unwrap();
        for &(x, y) in &[(0.0, 0.0), (17.3, 40.1), (63.0, 63.0), (31.5, 2.25)] {
            let got = mls_affine_eval(Point2::new(x, y), &cps, 1.0).unwrap();
            let want = apply(&m, Point2::new(x, y));
            prop_assert!(got.dist(want) < 1e-6, "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn control_points_are_interpolated(src in distinct_points(5), dst in distinct_points(5), alpha in 0.5..2.0f64) {
        let cps = ControlPointSet::new(src.clone(), dst.clone()).unwrap();
        for (p, q) in src.iter().zip(&dst) {
            prop_assert_eq!(mls_affine_eval(*p, &cps, alpha).unwrap(), *q);
        }
    }

    #[test]
    fn dense_field_matches_closed_form_oracle(
        src in distinct_points(7),
        dst in distinct_points(7),
        pixels in prop::collection::vec((0usize..48, 0usize..40), 25),
    ) {
        let cps = ControlPointSet::new(src.clone(), dst.clone()).unwrap();
        let field = build_deformation_field(&cps, 48, 40, 1.0).unwrap();
        for &(x, y) in &pixels {
            let want = common::mls_oracle(Point2::new(x as f64, y as f64), &dst, &src, 1.0);
            let got = field.location(x, y);
            prop_assert!(got.dist(want) < 1e-6, "pixel ({x}, {y}): {got:?} vs {want:?}");
        }
    }
}

#[test]
fn oracle_agrees_with_rational_example() {
    let src = [Point2::new(0.0, 0.0), Point2::new(10.0, 0.0), Point2::new(0.0, 10.0), Point2::new(10.0, 10.0)];
    let dst = [Point2::new(0.0, 0.0), Point2::new(11.0, 1.0), Point2::new(-1.0, 9.0), Point2::new(12.0, 12.0)];
    let got = common::mls_oracle(Point2::new(5.0, 5.0), &src, &dst, 1.0);
    assert!(got.dist(Point2::new(5.5, 5.5)) < 1e-12);
    let got = common::mls_oracle(Point2::new(2.0, 7.0), &src, &dst, 1.0);
    assert!(got.dist(Point2::new(359.0 / 210.0, 1409.0 / 210.0)) < 1e-12);
}
