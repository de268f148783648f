use granular_core::analytics::{self, MaxwellianParams};
use granular_core::dsmc::{init_ensemble, Engine, InitSpec, SimConfig, TauMode, VelocityEnsemble};
use granular_core::kinematics::{kernel_constants, CrossSection};
use granular_core::observables::{
    ckp_slack, dissipation_de_hat, matched_maxwellian, moments, relative_entropy, weighted_l1_distance,
    RadialHistogram,
};
use granular_core::rng::stream;
use proptest::prelude::*;

fn ensemble_strategy() -> impl Strategy<Value = VelocityEnsemble> {
    (4usize..60, 0.2f64..3.0).prop_flat_map(|(np, rho)| {
        prop::collection::vec(-3.0f64..3.0, np * 3)
            .prop_map(move |v| VelocityEnsemble::new(3, rho, v).unwrap())
    })
}

/// Orthogonal matrix from Gram-Schmidt on three generic vectors.
fn rotation(raw: &[f64]) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = raw.chunks(3).map(|c| c.to_vec()).collect();
    for i in 0..3 {
        for j in 0..i {
            let d: f64 = (0..3).map(|k| rows[i][k] * rows[j][k]).sum();
            for k in 0..3 {
                rows[i][k] -= d * rows[j][k];
            }
        }
        let n = rows[i].iter().map(|c| c * c).sum::<f64>().sqrt();
        rows[i].iter_mut().for_each(|c| *c /= n);
    }
    rows.concat()
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b { 0.0 } else { (a - b).abs() / a.abs().max(b.abs()) }
}

fn b1() -> f64 {
    kernel_constants(&CrossSection::constant(1.0), 3).unwrap().b1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn observables_are_rotation_invariant(
        e in ensemble_strategy(),
        raw in prop::collection::vec(0.5f64..2.0, 9),
        flips in prop::collection::vec(any::<bool>(), 9),
    ) {
        let raw: Vec<f64> = raw.iter().zip(&flips).map(|(x, f)| if *f { -x } else { *x }).collect();
        let q = rotation(&raw);
        let r = e.transformed(&q);
        let (a, b) = (moments(&e), moments(&r));
        prop_assert!(rel(a.m1, b.m1) < 1e-12);
        prop_assert!(rel(a.m2, b.m2) < 1e-12);
        prop_assert!(rel(a.theta, b.theta) < 1e-12);
        let mut rng = stream(0, &[]);
        let da = dissipation_de_hat(&e, b1(), 1, &mut rng).unwrap();
        let db = dissipation_de_hat(&r, b1(), 1, &mut rng).unwrap();
        prop_assert!(rel(da.value, db.value) < 1e-11);
    }

    #[test]
    fn observables_are_relabel_invariant(e in ensemble_strategy(), seed in any::<u64>()) {
        let np = e.np();
        let mut order: Vec<usize> = (0..np).collect();
        let mut rng = stream(seed, &[]);
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let v: Vec<f64> = order.iter().flat_map(|&i| e.velocity(i).to_vec()).collect();
        let p = VelocityEnsemble::new(3, e.rho(), v).unwrap();
        let (a, b) = (moments(&e), moments(&p));
        prop_assert!(rel(a.m1, b.m1) < 1e-12);
        prop_assert!(rel(a.m4, b.m4) < 1e-12);
        let ha = RadialHistogram::from_ensemble(&e, 16, Some(6.0)).unwrap();
        let hb = RadialHistogram::from_ensemble(&p, 16, Some(6.0)).unwrap();
        for (x, y) in ha.masses().iter().zip(hb.masses()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn discrete_ckp_holds(e in ensemble_strategy(), bins in 8usize..64) {
        let m = matched_maxwellian(&e).unwrap();
        let h = RadialHistogram::from_ensemble(&e, bins, None).unwrap();
        let ent = relative_entropy(&h, &m).unwrap();
        prop_assume!(ent.excluded == 0);
        let l1 = weighted_l1_distance(&h, &m, 0).unwrap().value;
        prop_assert!(ckp_slack(e.rho(), ent.value, l1) >= -1e-12 * e.rho());
    }

    #[test]
    fn doubling_the_mass(e in ensemble_strategy()) {
        let d = VelocityEnsemble::new(3, 2.0 * e.rho(), e.velocities().to_vec()).unwrap();
        let (a, b) = (moments(&e), moments(&d));
        prop_assert!(rel(2.0 * a.m1, b.m1) < 1e-12);
        prop_assert!(rel(a.theta, b.theta) < 1e-12);
        let mut rng = stream(0, &[]);
        let da = dissipation_de_hat(&e, b1(), 1, &mut rng).unwrap().value;
        let db = dissipation_de_hat(&d, b1(), 1, &mut rng).unwrap().value;
        prop_assert!(rel(4.0 * da, db) < 1e-12);
        let (ma, mb) = (matched_maxwellian(&e).unwrap(), matched_maxwellian(&d).unwrap());
        let ha = RadialHistogram::from_ensemble(&e, 16, None).unwrap();
        let hb = RadialHistogram::from_ensemble(&d, 16, None).unwrap();
        let (ea, eb) = (relative_entropy(&ha, &ma).unwrap().value, relative_entropy(&hb, &mb).unwrap().value);
        prop_assert!((2.0 * ea - eb).abs() <= 1e-10 * (1.0 + eb.abs()));
        let (la, lb) = (weighted_l1_distance(&ha, &ma, 2).unwrap().value, weighted_l1_distance(&hb, &mb, 2).unwrap().value);
        prop_assert!(rel(2.0 * la, lb) < 1e-12);
    }
}

fn kurtosis(e: &VelocityEnsemble) -> f64 {
    let m = moments(e);
    m.rho * m.m2 / (m.m1 * m.m1)
}

#[test]
fn elastic_gas_maxwellizes() {
    let mut cfg = SimConfig::new(1.0, 6000, 11);
    cfg.tau_mode = TauMode::Explicit(0.0);
    let start = init_ensemble(InitSpec::UniformBall { radius: 1.5 }, 3, 1.0, None, cfg.np, 11).unwrap();
    // <|v|^4> / <|v|^2>^2 is 25/21 for the ball and (N + 2) / N for a Maxwellian.
    assert!((kurtosis(&start) - 25.0 / 21.0).abs() < 0.03);
    let e0 = start.energy();
    let mut engine = Engine::new(&cfg).unwrap();
    let mut state = engine.start(start, 11).unwrap();
    engine.run(&mut state, 6.0, |_| ()).unwrap();
    assert!(((state.ensemble.energy() - e0) / e0).abs() < 1e-10);
    assert!((kurtosis(&state.ensemble) / (5.0 / 3.0) - 1.0).abs() < 0.03);
    let h = RadialHistogram::from_ensemble(&state.ensemble, 32, None).unwrap();
    let m = matched_maxwellian(&state.ensemble).unwrap();
    assert!(relative_entropy(&h, &m).unwrap().value < 5.0 * h.bias_floor());
}

#[test]
fn free_cooling_follows_the_maxwellian_closure() {
    // Under the Maxwellian closure D_E = N rho^2 (theta / theta_bar1)^{3/2}, so
    // theta^{-1/2} grows linearly at rate (1 - alpha^2) rho / (2 theta_bar1^{3/2}).
    let (alpha, rho, theta0, t_end) = (0.95, 1.0, 1.0, 4.0);
    let mut cfg = SimConfig::new(alpha, 8000, 13);
    cfg.tau_mode = TauMode::Explicit(0.0);
    let tb = analytics::theta_bar1(b1(), 3);
    let rate = (1.0 - alpha * alpha) * rho / (2.0 * tb.powf(1.5));
    let start = init_ensemble(InitSpec::Maxwellian { theta: theta0 }, 3, rho, Some(3.0 * rho * theta0), cfg.np, 13)
        .unwrap();
    let mut engine = Engine::new(&cfg).unwrap();
    let mut state = engine.start(start, 13).unwrap();
    let trace = engine.run(&mut state, t_end, |s| (s.time, s.ensemble.temperature())).unwrap();
    let (t, theta) = *trace.last().unwrap();
    let predicted = (theta0.powf(-0.5) + rate * t).powi(-2);
    assert!(predicted < 0.75 * theta0, "the run must cool appreciably");
    assert!((theta / predicted - 1.0).abs() < 0.02, "theta {theta} vs {predicted}");
}

#[test]
fn dissipation_estimate_of_sampled_maxwellian() {
    let theta = 0.4;
    let e = init_ensemble(InitSpec::Maxwellian { theta }, 3, 1.0, None, 3000, 17).unwrap();
    let mut rng = stream(17, &[]);
    let d = dissipation_de_hat(&e, b1(), 1, &mut rng).unwrap();
    let exact = analytics::dissipation_de_maxwellian(theta, 1.0, b1(), 3);
    assert!((d.value - exact).abs() < 4.0 * d.stderr + 0.02 * exact, "{d:?} vs {exact}");
    let m = MaxwellianParams::centred(1.0, theta, 3).unwrap();
    let h = RadialHistogram::from_ensemble(&e, 32, Some(8.0 * theta.sqrt())).unwrap();
    assert!(weighted_l1_distance(&h, &m, 0).unwrap().value < 0.1);
}
