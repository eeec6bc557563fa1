use nleig::c64;
use nleig::gridfn::GridFunction;
use nleig::models::{build_model, dnls_exact_spectrum, DiscretizedProblem, ModelSpec};
use nleig::nonlinearity::{homogeneity_check, NonlinearitySpec};
use nleig::spectra::{
    compute_eigentriple, projector_symmetry_residual, symmetrize_eigenvector, SpectralProjector, Which,
};
use nleig::symmetry::{nonlinearity_equivariance_residual, operator_commutation_residual, probe_vectors};
use proptest::prelude::*;

fn small_model() -> impl Strategy<Value = ModelSpec> {
    prop_oneof![
        (0.1..1.5f64).prop_map(|a| ModelSpec::new("toy_robin").param("alpha", a).resolution(64)),
        (0.0..3.0f64).prop_map(|g| ModelSpec::new("sho6_2d").param("gamma", g).resolution(17)),
        (0.0..0.5f64).prop_map(|g| ModelSpec::new("gauss9_2d").param("gamma", g).resolution(17)),
        (1..=6usize, 0.0..1.0f64)
            .prop_map(|(n, g)| ModelSpec::new("dnls").param("N", n as f64).param("gamma", g)),
        (1.0..3.0f64, 0.0..0.5f64).prop_map(|(t, g)| ModelSpec::new("two_delta")
            .param("tau", t)
            .param("gamma", g)
            .resolution(201)),
        (0.0..2.0f64).prop_map(|i| ModelSpec::new("wire").param("I", i).resolution(63)),
        (0.0..0.5f64, -0.5..0.5f64).prop_map(|(g, k)| ModelSpec::new("per_bloch")
            .param("gamma", g)
            .param("k", k)
            .resolution(64)),
    ]
}

fn probes(p: &DiscretizedProblem, seed: u64) -> (GridFunction, GridFunction) {
    let mut v = probe_vectors(&p.grid, 2, seed);
    let b = v.pop().unwrap();
    (v.pop().unwrap(), b)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjoint_is_consistent_with_the_weighted_product(spec in small_model(), seed in any::<u64>()) {
        let p = build_model(&spec).unwrap();
        let (u, v) = probes(&p, seed);
        let lhs = p.operator.apply(&u).unwrap().inner(&v).unwrap();
        let rhs = u.inner(&p.operator.adjoint().apply(&v).unwrap()).unwrap();
        prop_assert!((lhs - rhs).norm() <= 1e-12 * p.operator.norm1() * u.norm() * v.norm());
    }

    #[test]
    fn inner_product_is_hermitian_and_sesquilinear(spec in small_model(), seed in any::<u64>(), re in -2.0..2.0f64, im in -2.0..2.0f64) {
        let p = build_model(&spec).unwrap();
        let (u, v) = probes(&p, seed);
        let a = c64::new(re, im);
        let uv = u.inner(&v).unwrap();
        prop_assert!((uv - v.inner(&u).unwrap().conj()).norm() <= 1e-14 * u.norm() * v.norm());
        prop_assert!((u.scale(a).inner(&v).unwrap() - a * uv).norm() <= 1e-13 * u.norm() * v.norm());
        prop_assert!((u.inner(&v.scale(a)).unwrap() - a.conj() * uv).norm() <= 1e-13 * u.norm() * v.norm());
    }

    #[test]
    fn symmetries_are_isometric_involutions(spec in small_model(), seed in any::<u64>(), re in -2.0..2.0f64, im in -2.0..2.0f64) {
        let p = build_model(&spec).unwrap();
        let (u, v) = probes(&p, seed);
        let a = c64::new(re, im);
        let tol = 1e-13 * u.norm() * v.norm();
        for op in &p.symmetries {
            prop_assert!(op.apply(&op.apply(&u).unwrap()).unwrap().sub(&u).norm() <= 1e-15 * u.norm());
            let cu = op.apply(&u).unwrap();
            let cv = op.apply(&v).unwrap();
            let uv = u.inner(&v).unwrap();
            let image = op.apply(&u.scale(a)).unwrap();
            if op.is_antilinear() {
                prop_assert!((cu.inner(&cv).unwrap() - uv.conj()).norm() <= tol, "{}", op.name());
                prop_assert!(image.sub(&cu.scale(a.conj())).norm() <= 1e-14 * u.norm() * a.norm());
            } else {
                prop_assert!((cu.inner(&cv).unwrap() - uv).norm() <= tol, "{}", op.name());
                prop_assert!(image.sub(&cu.scale(a)).norm() <= 1e-14 * u.norm() * a.norm());
            }
        }
    }

    #[test]
    fn declared_symmetries_commute_with_the_operator(spec in small_model()) {
        let p = build_model(&spec).unwrap();
        for op in &p.symmetries {
            let r = operator_commutation_residual(op, &p.operator).unwrap();
            prop_assert!(r <= 1e-10, "{} {}: {r:e}", spec.model, op.name());
        }
    }

    #[test]
    fn nonlinearity_is_equivariant(spec in small_model(), seed in any::<u64>()) {
        let p = build_model(&spec).unwrap();
        for op in &p.symmetries {
            let r = nonlinearity_equivariance_residual(op, &p.nonlinearity, &p.grid, 4, seed).unwrap();
            prop_assert!(r <= 1e-12, "{} {}: {r:e}", spec.model, op.name());
        }
    }

    #[test]
    fn cubic_nonlinearity_is_homogeneous(spec in small_model(), seed in any::<u64>(), a in 0.1..10.0f64) {
        let p = build_model(&spec).unwrap();
        let (u, _) = probes(&p, seed);
        let r = homogeneity_check(&NonlinearitySpec::Cubic, &u, a).unwrap();
        prop_assert!(r <= 1e-12, "{r:e}");
    }

    #[test]
    fn grid_function_json_round_trips(spec in small_model(), seed in any::<u64>()) {
        let p = build_model(&spec).unwrap();
        let (u, _) = probes(&p, seed);
        let text = serde_json::to_string(&u.to_json()).unwrap();
        let back = GridFunction::from_json(p.grid.clone(), &serde_json::from_str(&text).unwrap()).unwrap();
        prop_assert_eq!(back.values(), u.values());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Riesz projection algebra on chains with a real simple eigenvalue.
    #[test]
    fn riesz_projection_algebra(n in 1..=6usize, gamma in 0.0..0.9f64, pick in any::<prop::sample::Index>(), seed in any::<u64>()) {
        let p = build_model(&ModelSpec::new("dnls").param("N", n as f64).param("gamma", gamma)).unwrap();
        let real: Vec<f64> = dnls_exact_spectrum(n, gamma)
            .into_iter()
            .filter(|m| m.im == 0.0 && m.re.abs() > 1e-3)
            .map(|m| m.re)
            .collect();
        prop_assume!(!real.is_empty());
        let mu = real[pick.index(real.len())];
        let t = compute_eigentriple(&p, c64::new(mu, 0.0)).unwrap();
        let t = symmetrize_eigenvector(&t, p.primary_antilinear().unwrap(), Some(p.phase_node)).unwrap();
        prop_assert!((t.psi0.inner(&t.psi0_star).unwrap() - 1.0).norm() <= 1e-12);
        let proj = SpectralProjector::new(t);
        let (u, _) = probes(&p, seed);
        let p0 = proj.project(&u, Which::P0).unwrap();
        let q0 = proj.project(&u, Which::Q0).unwrap();
        let scale = u.norm() * proj.norm_p0();
        prop_assert!(proj.project(&p0, Which::P0).unwrap().sub(&p0).norm() <= 1e-12 * scale);
        prop_assert!(proj.project(&q0, Which::P0).unwrap().norm() <= 1e-12 * scale);
        prop_assert!(p0.add(&q0).sub(&u).norm() <= 1e-14 * (u.norm() + scale));
        prop_assert!(projector_symmetry_residual(&proj, p.primary_antilinear().unwrap()).unwrap() <= 1e-9);
    }
}
