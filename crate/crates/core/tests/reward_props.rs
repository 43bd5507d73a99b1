use cwbc_core::sim::{FootState, RewardContext, RewardParams, RewardSuite, TermKind, TERM_NAMES};
use cwbc_core::sim::reward_registry;
use cwbc_core::spatial::Vec3;
use proptest::prelude::*;

fn arr12(r: std::ops::Range<f64>) -> impl Strategy<Value = [f64; 12]> {
    prop::array::uniform12(r)
}

fn vec3(r: f64) -> impl Strategy<Value = Vec3> {
    (-r..r, -r..r, -r..r).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn foot() -> impl Strategy<Value = FootState> {
    (any::<bool>(), any::<bool>(), 0.0..0.5f64, 0.0..0.2f64, 0.0..0.2f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(
        |(contact, first_contact, air_time, height, peak_height, vx, vy)| FootState {
            contact,
            first_contact,
            air_time,
            height,
            peak_height,
            velocity_xy: [vx, vy],
        },
    )
}

prop_compose! {
    fn context()(
        q_leg in arr12(-2.0..2.0),
        q_default in arr12(-2.0..2.0),
        qdot_leg in arr12(-10.0..10.0),
        torque in arr12(-40.0..40.0),
        alpha in arr12(-3.0..3.0),
        alpha_prev in arr12(-3.0..3.0),
        feet in prop::array::uniform4(foot()),
        base_linear in vec3(2.0),
        base_angular in vec3(2.0),
        ee_linear_cmd in vec3(2.0),
        ee_linear in vec3(2.0),
        ee_angular_cmd in vec3(2.0),
        ee_angular in vec3(2.0),
        up in vec3(1.0),
    ) -> RewardContext {
        RewardContext {
            q_leg, q_default, qdot_leg, torque, alpha, alpha_prev, feet,
            base_linear, base_angular, ee_linear_cmd, ee_linear, ee_angular_cmd, ee_angular,
            base_z_axis: up,
        }
    }
}

proptest! {
    #[test]
    fn penalties_non_negative_and_tracking_in_unit_interval(
        c in context(),
        sigma in 0.05..1.0f64,
        h_max in 0.02..0.2f64,
        k_a in 0.1..1.0f64,
    ) {
        let p = RewardParams { sigma, h_max, k_a };
        let suite = RewardSuite::new(p);
        let reg = reward_registry();
        let values = suite.eval(&c);
        for (name, v) in TERM_NAMES.iter().zip(values) {
            prop_assert!(v.is_finite(), "{name} = {v}");
            let kind = reg.create(name, &()).unwrap().kind();
            if kind == TermKind::Penalty {
                prop_assert!(v >= 0.0, "{name} = {v}");
            }
            if name.ends_with("_tracking") || *name == "pose_deviation" {
                prop_assert!(v > 0.0 && v <= 1.0, "{name} = {v}");
            }
        }
    }
}
