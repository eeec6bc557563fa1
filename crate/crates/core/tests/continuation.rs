use nleig::c64;
use nleig::continuation::*;
use nleig::ls_solver::{ls_solve, rescale_unit_norm, LSConfig};
use nleig::models::{build_model, dnls_exact_spectrum, DiscretizedProblem, ModelSpec};
use nleig::spectra::{compute_eigentriple, symmetrize_eigenvector};
use proptest::prelude::*;

fn toy(n: usize) -> DiscretizedProblem {
    build_model(&ModelSpec::new("toy_robin").param("alpha", 0.5).resolution(n)).unwrap()
}

fn symmetric_seed(p: &DiscretizedProblem, target: f64) -> BranchPoint {
    let t = compute_eigentriple(p, c64::new(target, 0.0)).unwrap();
    let t = symmetrize_eigenvector(&t, p.primary_antilinear().unwrap(), Some(p.phase_node)).unwrap();
    seed_from_triple(p, &t).unwrap()
}

fn eps_cfg(mode: ContinuationMode) -> ContinuationConfig {
    ContinuationConfig {
        mode,
        step: 0.05,
        max_step: 0.1,
        ..Default::default()
    }
}

#[test]
fn snapshots_verify_after_a_json_round_trip() {
    let p = build_model(&ModelSpec::new("dnls").param("N", 2.0).param("gamma", 0.4)).unwrap();
    let seed = symmetric_seed(&p, 1.5);
    let b = continue_branch(&p, &seed, &eps_cfg(ContinuationMode::Arclength), "eps", 1.0).unwrap();
    for k in labeled_points(&b) {
        let text = serde_json::to_string(&b.points[k].to_json()).unwrap();
        let json: BranchPointJson = serde_json::from_str(&text).unwrap();
        let back = BranchPoint::from_json(&p, &json).unwrap();
        assert_eq!(back.mu, b.points[k].mu);
        verify_point(&p, &b, &back, 1e-10).unwrap();
    }
    // A perturbed point is rejected.
    let mut json = b.points[1].to_json();
    json.mu += c64::new(1e-6, 0.0);
    let bad = BranchPoint::from_json(&p, &json).unwrap();
    assert!(matches!(
        verify_point(&p, &b, &bad, 1e-10),
        Err(nleig::Error::ResidualCheckFailed { .. })
    ));
}

#[test]
fn natural_and_arclength_branches_coincide() {
    let p = build_model(&ModelSpec::new("dnls").param("N", 3.0).param("gamma", 0.5)).unwrap();
    let target = dnls_exact_spectrum(3, 0.5)
        .into_iter()
        .filter(|m| m.im == 0.0)
        .map(|m| m.re)
        .fold(f64::NEG_INFINITY, f64::max);
    let seed = symmetric_seed(&p, target);
    let nat = continue_branch(&p, &seed, &eps_cfg(ContinuationMode::Natural), "eps", 1.0).unwrap();
    let arc = continue_branch(&p, &seed, &eps_cfg(ContinuationMode::Arclength), "eps", 1.0).unwrap();
    assert!(nat.bifurcation_markers.is_empty() && arc.bifurcation_markers.is_empty());
    let constraints = NewtonConstraints::default();
    for q in arc.points.iter().filter(|q| q.eps <= 1.0) {
        let nearest = nat
            .points
            .iter()
            .min_by(|a, b| (a.eps - q.eps).abs().total_cmp(&(b.eps - q.eps).abs()))
            .unwrap();
        let mut pred = nearest.clone();
        pred.eps = q.eps;
        let c = newton_correct(&p, &pred, &constraints).unwrap();
        assert!((c.mu - q.mu).norm() <= 1e-8, "eps {}: {} vs {}", q.eps, c.mu, q.mu);
        assert!(c.psi.sub(&q.psi).norm() <= 1e-8);
    }
}

#[test]
fn toy_ground_branch_has_no_bifurcation() {
    let p = toy(256);
    let seed = symmetric_seed(&p, 0.25);
    let b = continue_branch(&p, &seed, &eps_cfg(ContinuationMode::Arclength), "eps", 1.0).unwrap();
    assert!(detect_bifurcation(&b).unwrap().is_empty());
    assert!(b.max_relative_imag_before_markers() <= 1e-10);
}

#[test]
fn detection_needs_three_points() {
    let p = toy(64);
    let seed = symmetric_seed(&p, 0.25);
    let cfg = ContinuationConfig {
        step: 0.2,
        max_step: 0.2,
        ..Default::default()
    };
    let b = continue_branch(&p, &seed, &cfg, "eps", 0.2).unwrap();
    assert_eq!(b.points.len(), 2);
    assert!(matches!(detect_bifurcation(&b), Err(nleig::Error::InvalidSpec(_))));
}

#[test]
fn fixed_point_and_newton_agree_on_the_toy_branch() {
    let p = toy(1024);
    let t = compute_eigentriple(&p, c64::new(1.0, 0.0)).unwrap();
    let t = symmetrize_eigenvector(&t, p.primary_antilinear().unwrap(), Some(p.phase_node)).unwrap();
    let ls = ls_solve(&p, &t, &LSConfig::new(0.05)).unwrap();
    let r = rescale_unit_norm(&p, &ls).unwrap();
    let seed = seed_from_triple(&p, &t).unwrap();
    let cfg = ContinuationConfig {
        step: 0.01,
        ..Default::default()
    };
    let b = continue_branch(&p, &seed, &cfg, "eps", r.eps).unwrap();
    let last = b.points.last().unwrap();
    assert_eq!(last.eps, r.eps);
    assert!((last.mu - ls.mu).norm() <= 1e-8, "{} vs {}", last.mu, ls.mu);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Branches seeded from symmetric real simple eigenpairs stay real and
    /// symmetric up to the first marker.
    #[test]
    fn chain_branches_stay_real_and_symmetric(n in 1..=4usize, gamma in 0.0..0.8f64, pick in any::<prop::sample::Index>(), end in 0.2..1.5f64) {
        let p = build_model(&ModelSpec::new("dnls").param("N", n as f64).param("gamma", gamma)).unwrap();
        let real: Vec<f64> = dnls_exact_spectrum(n, gamma)
            .into_iter()
            .filter(|m| m.im == 0.0 && m.re.abs() > 1e-2)
            .map(|m| m.re)
            .collect();
        prop_assume!(!real.is_empty());
        let seed = symmetric_seed(&p, real[pick.index(real.len())]);
        let b = match continue_branch(&p, &seed, &eps_cfg(ContinuationMode::Arclength), "eps", end) {
            Ok(b) => b,
            Err(f) => f.partial,
        };
        prop_assert!(b.points.len() >= 2);
        let stop = b.bifurcation_markers.first().map_or(b.points.len(), |m| m.point);
        for q in &b.points[..stop] {
            prop_assert!(q.mu.im.abs() / (1.0 + q.mu.norm()) <= 1e-8);
            prop_assert!(q.symmetry_residual("lattice-PT").unwrap().residual <= 1e-7);
        }
    }
}

#[test]
fn sho6_third_branch_spawns_a_p1t_child() {
    let p = build_model(&ModelSpec::new("sho6_2d").param("gamma", 2.0).resolution(81)).unwrap();
    let seed = symmetric_seed(&p, 3.15);
    let cfg = ContinuationConfig {
        mode: ContinuationMode::Arclength,
        step: 0.1,
        max_step: 0.5,
        ..Default::default()
    };
    let b = continue_branch(&p, &seed, &cfg, "eps", 4.0).unwrap();
    assert!(b.max_relative_imag_before_markers() <= 1e-8);
    let marker = b
        .bifurcation_markers
        .iter()
        .find(|m| m.kind == MarkerKind::Bifurcation)
        .expect("a bifurcation marker on the third branch");
    let child = switch_branch(&p, &b, marker, &cfg).unwrap();
    assert_eq!(child.parent_id, Some(b.branch_id));
    for q in child.points.iter().skip(1) {
        assert!(q.symmetry_residual("PT").unwrap().residual > 1e-2);
        assert!(q.symmetry_residual("P1T").unwrap().residual <= 1e-6);
        assert!(q.mu.im.abs() <= 1e-8 * (1.0 + q.mu.norm()));
    }
}
