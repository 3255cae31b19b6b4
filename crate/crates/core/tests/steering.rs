// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use circuitprint::datasets::Task;
use circuitprint::fingerprint::answer_representation;
use circuitprint::model::Site;
use circuitprint::steering::{
    build_basis, default_alphas, generate_steered, outcome, project_prototype, site_for, steer_known_target,
    steer_style, steering_sweep, write_sweep_csv, Method, SteerSpace, SteeringSpec,
};
use circuitprint::toy::{random_model, toy_config};
use circuitprint::{ops, ComponentId, Error};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_reps(k: usize, d: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn basis_is_orthonormal() {
    let b = build_basis(&random_reps(10, 16, 0)).unwrap();
    assert!(!b.basis.is_empty() && b.basis.len() <= 9);
    for (i, u) in b.basis.iter().enumerate() {
        for (j, v) in b.basis.iter().enumerate() {
            let g = ops::dot(u, v);
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-5, "G[{i}][{j}] = {g}");
        }
    }
}

#[test]
fn reps_on_a_plane_give_two_directions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reps: Vec<Vec<f32>> = (0..8)
        .map(|_| {
            let (a, b): (f32, f32) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            vec![a, b, 0.0, a - b, 0.0]
        })
        .collect();
    assert_eq!(build_basis(&reps).unwrap().basis.len(), 2);
}

#[test]
fn out_of_span_reps_contract() {
    let reps = random_reps(3, 12, 5);
    let b = build_basis(&reps).unwrap();
    for x in random_reps(20, 12, 6) {
        let centred = ops::sub(&x, &b.mean);
        assert!(ops::norm(&project_prototype(&b, &x)) <= ops::norm(&centred) * (1.0 + 1e-5));
    }
}

#[test]
fn fixed_points_are_exact() {
    let x = vec![0.3f32, -1.25, 2.0, 0.0];
    let ds = vec![1.0f32, 0.5, 0.0, 2.0];
    let dt = vec![-0.5f32, 1.0, 3.0, 0.25];
    assert_eq!(steer_known_target(&x, &ds, &dt, 0.0).unwrap(), x);
    assert_eq!(steer_known_target(&x, &ds, &ds, 0.7).unwrap(), x);
    assert_eq!(steer_style(&x, &ds, &ds).unwrap(), x);
}

#[test]
fn style_swaps_orthogonal_unit_directions() {
    let out = steer_style(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).unwrap();
    assert_eq!(out, vec![0.0, 1.0]);
}

#[test]
fn known_target_at_full_strength_moves_by_the_prototype_gap() {
    let x = vec![0.0f32; 3];
    let ds = vec![2.0f32, 0.0, 0.0];
    let dt = vec![0.0f32, 2.0, 0.0];
    let out = steer_known_target(&x, &ds, &dt, 1.0).unwrap();
    let m = 8f32.sqrt();
    assert!((out[0] + m).abs() < 1e-6 && (out[1] - m).abs() < 1e-6 && out[2] == 0.0);
}

#[test]
fn zero_source_direction_is_an_error() {
    let z = vec![0.0f32; 3];
    let d = vec![1.0f32, 0.0, 0.0];
    assert!(matches!(steer_known_target(&d, &z, &d, 0.5), Err(Error::ZeroDirection)));
    assert!(matches!(steer_style(&d, &z, &d), Err(Error::ZeroDirection)));
}

#[test]
fn site_mapping() {
    let h = ComponentId::head(1, 2);
    assert_eq!(site_for(h, SteerSpace::Head).unwrap(), Site::Head { layer: 1, head: 2 });
    assert_eq!(site_for(h, SteerSpace::Residual).unwrap(), Site::Residual { layer: 2 });
    assert!(site_for(ComponentId::mlp(0), SteerSpace::Head).is_err());
}

#[test]
fn zero_alpha_sweep_row_equals_the_clean_run() {
    let (model, _) = common::toy_fixture();
    let pairs = common::toy_pairs(Task::Capitals, 4, 3);
    let sites = [Site::Head { layer: 0, head: 1 }, Site::Head { layer: 1, head: 2 }];
    let rows = steering_sweep(&model, &pairs, &sites, &default_alphas()).unwrap();
    assert_eq!(rows.len(), 22);
    let clean: Vec<f64> = pairs
        .iter()
        .map(|p| outcome(&model, &p.clean, &[], p.a_plus, p.a_minus).unwrap().1)
        .collect();
    let (mean, _) = ops::mean_sd(&clean);
    for row in rows.iter().filter(|r| r.alpha == 0.0) {
        assert!((row.logit_diff_mean - mean).abs() < 1e-5, "{:?}", row.method);
    }
    assert!(rows.iter().any(|r| r.method == Method::Patching));
    assert_eq!(rows, steering_sweep(&model, &pairs, &sites, &default_alphas()).unwrap());

    let mut buf = Vec::new();
    write_sweep_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 23);
    assert!(text.starts_with("method,alpha,p_correct_mean"));
}

#[test]
fn sweep_rejects_bad_alphas() {
    let (model, _) = common::toy_fixture();
    let pairs = common::toy_pairs(Task::Capitals, 2, 3);
    let sites = [Site::Head { layer: 0, head: 0 }];
    assert!(steering_sweep(&model, &pairs, &sites, &[]).is_err());
    assert!(steering_sweep(&model, &pairs, &sites, &[0.5, 0.2]).is_err());
    assert!(steering_sweep(&model, &pairs, &sites, &[-0.1]).is_err());
}

#[test]
fn generation_at_zero_alpha_is_unsteered_and_deterministic() {
    let model = random_model(&toy_config(), 8);
    let reps: Vec<_> = (10..16).map(|t| answer_representation(&model, t).unwrap()).collect();
    let protos: Vec<_> = reps.iter().collect();
    let sites = [Site::Head { layer: 1, head: 0 }, Site::Residual { layer: 1 }];
    let spec = SteeringSpec::known_target(&sites, &protos, &[&reps[0]], &[&reps[1]], 0.0).unwrap();
    assert!(spec.interventions().unwrap().is_empty());
    let prompt = [1u32, 2, 3, 4];
    let plain = SteeringSpec { sites: vec![], ..spec.clone() };
    assert_eq!(
        generate_steered(&model, &prompt, &spec, 6).unwrap(),
        generate_steered(&model, &prompt, &plain, 6).unwrap()
    );
    let strong = spec.with_alpha(1.0);
    assert_eq!(strong.interventions().unwrap().len(), 2);
    assert_eq!(
        generate_steered(&model, &prompt, &strong, 6).unwrap(),
        generate_steered(&model, &prompt, &strong, 6).unwrap()
    );
    assert!(generate_steered(&model, &prompt, &strong, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn projection_is_idempotent(seed in any::<u64>(), k in 2usize..8) {
        let reps = random_reps(k, 10, seed);
        let b = build_basis(&reps).unwrap();
        let x = &random_reps(1, 10, seed ^ 1)[0];
        let p = project_prototype(&b, x);
        let shifted: Vec<f32> = p.iter().zip(&b.mean).map(|(a, m)| a + m).collect();
        let pp = project_prototype(&b, &shifted);
        prop_assert!(common::rel_err(&pp, &p) < 1e-4);
    }

    #[test]
    fn gram_matrix_is_identity(seed in any::<u64>(), k in 2usize..12) {
        let b = build_basis(&random_reps(k, 16, seed)).unwrap();
        for (i, u) in b.basis.iter().enumerate() {
            for (j, v) in b.basis.iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                prop_assert!((ops::dot(u, v) - want).abs() < 1e-5);
            }
        }
    }
}
