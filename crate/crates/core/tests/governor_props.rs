use cwbc_core::governor::{
    build_moas, query_governor, Axis, AxisConstraints, AxisDynamics, BuildConfig, GovernorQuery, GridDim, GridSpec,
    Interval, Margins, SimSettings, Verdict,
};
use proptest::prelude::*;

fn constraints() -> AxisConstraints {
    AxisConstraints {
        position: Interval::new(-0.2, 0.2),
        velocity: Interval::new(-0.5, 0.5),
        wrench: Interval::new(-30.0, 30.0),
        kinematic: Interval::new(-0.3, 0.3),
    }
}

fn config(c: AxisConstraints, stiffness: f64) -> BuildConfig {
    BuildConfig {
        axis: Axis::X,
        dynamics: AxisDynamics { stiffness, damping: 20.0, saturation: 1.0 },
        constraints: c,
        margins: Margins::default(),
        grid: GridSpec {
            dims: [
                GridDim::new(-0.25, 0.25, 4),
                GridDim::new(-0.35, 0.35, 4),
                GridDim::new(-0.6, 0.6, 4),
                GridDim::new(-40.0, 40.0, 4),
                GridDim::new(-40.0, 40.0, 4),
            ],
        },
        sim: SimSettings::default(),
    }
}

fn query() -> impl Strategy<Value = GovernorQuery> {
    (-0.2..0.2f64, -1.0..1.0f64, -0.5..0.5f64, -25.0..25.0f64, -60.0..60.0f64)
        .prop_map(|(x, x_ref, v, wrench, wrench_ref)| GovernorQuery { x, x_ref, v, wrench, wrench_ref })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn governed_references_are_fixed_points(q in query(), k in prop::sample::select(vec![0.0, 100.0])) {
        let (set, _) = build_moas(&config(constraints(), k)).unwrap();
        let r = query_governor(&set, &q).unwrap();
        prop_assert!(r.x_ref.is_finite() && r.wrench_ref.is_finite());
        if r.verdict != Verdict::Infeasible {
            let again = GovernorQuery { x_ref: r.x_ref, wrench_ref: r.wrench_ref, ..q };
            let r2 = query_governor(&set, &again).unwrap();
            prop_assert_eq!(r2.verdict, Verdict::Admissible);
            prop_assert_eq!((r2.x_ref, r2.wrench_ref), (r.x_ref, r.wrench_ref));
        }
        prop_assert_eq!(query_governor(&set, &q).unwrap(), r);
    }

    #[test]
    fn stored_points_pass_unchanged(pick in 0usize..10_000) {
        let (set, _) = build_moas(&config(constraints(), 100.0)).unwrap();
        let p = set.points()[pick % set.len()];
        let q = GovernorQuery { x: p[0], x_ref: p[1], v: p[2], wrench: p[3], wrench_ref: p[4] };
        let r = query_governor(&set, &q).unwrap();
        prop_assert_eq!(r.verdict, Verdict::Admissible);
        prop_assert_eq!((r.x_ref, r.wrench_ref), (p[1], p[4]));
    }

    #[test]
    fn shrinking_a_constraint_never_adds_points(
        which in 0usize..4,
        lo in 0.0..0.4f64,
        hi in 0.0..0.4f64,
        k in prop::sample::select(vec![0.0, 100.0]),
    ) {
        let wide = constraints();
        let mut narrow = wide;
        let iv = match which {
            0 => &mut narrow.position,
            1 => &mut narrow.velocity,
            2 => &mut narrow.wrench,
            _ => &mut narrow.kinematic,
        };
        let w = iv.width();
        *iv = Interval::new(iv.lo + lo * w, iv.hi - hi * w);
        let (full, _) = build_moas(&config(wide, k)).unwrap();
        if let Ok((small, _)) = build_moas(&config(narrow, k)) {
            prop_assert!(small.len() <= full.len());
            prop_assert!(small.points().iter().all(|p| full.points().contains(p)));
        }
    }
}
