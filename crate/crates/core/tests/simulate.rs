use fpdiff::eval::empirical_moments;
use fpdiff::par::Execution;
use fpdiff::rng::RngSpec;
use fpdiff::score::{MixtureScore, MixtureSpec, ScoreFunction, StationaryScore};
use fpdiff::sde::{ForwardModel, TimeSchedule, T_EPS};
use fpdiff::simulate::{
    euler_maruyama_forward, euler_maruyama_reverse, integrate_flow, integrate_flow_batch, integrate_probability_flow,
    probability_flow_field, sample_reverse, simulate_batch, FixedStart, FlowDirection, FnField, GaussianStart,
    ProbabilityFlow, TimeGrid, Trajectory,
};
use nalgebra::{DMatrix, DVector};

fn vp(dim: usize) -> ForwardModel {
    ForwardModel::vp(dim, TimeSchedule::default()).unwrap()
}

#[test]
fn forward_paths_are_reproducible() {
    let model = vp(2);
    let x0 = DVector::from_vec(vec![0.3, -1.0]);
    let spec = RngSpec::for_purpose(7, "simulate/forward");
    let a = euler_maruyama_forward(&model, &x0, 200, spec).unwrap();
    let b = euler_maruyama_forward(&model, &x0, 200, spec).unwrap();
    assert_eq!(a, b);
    let c = euler_maruyama_forward(&model, &x0, 200, RngSpec::for_purpose(8, "simulate/forward")).unwrap();
    assert_ne!(a.states(), c.states());
    assert_eq!(a.len(), 201);
    assert_eq!(a.times()[0], 0.0);
    assert_eq!(*a.times().last().unwrap(), 1.0);
}

#[test]
fn parallel_and_sequential_batches_agree_bitwise() {
    let model = vp(3);
    let grid = TimeGrid::forward(&model, 100).unwrap();
    let run = |exec| {
        simulate_batch(
            &model,
            None,
            &GaussianStart { std: 0.5 },
            1000,
            grid,
            &[0, 50, 100],
            RngSpec::for_purpose(1, "simulate/batch"),
            exec,
        )
        .unwrap()
    };
    assert_eq!(run(Execution::Sequential), run(Execution::Parallel));
}

#[test]
fn single_path_matches_batch_row() {
    let model = vp(2);
    let spec = RngSpec::for_purpose(3, "simulate/row");
    let x0 = vec![1.0, 2.0];
    let snaps = simulate_batch(
        &model,
        None,
        &FixedStart(x0.clone()),
        4,
        TimeGrid::forward(&model, 50).unwrap(),
        &[50],
        spec,
        Execution::Sequential,
    )
    .unwrap();
    let single = euler_maruyama_forward(&model, &DVector::from_vec(x0), 50, spec.path_spec(2)).unwrap();
    assert_eq!(&snaps[0][4..6], single.state(50));
}

#[test]
fn vp_terminal_mean_matches_kernel() {
    let model = vp(1);
    let n = 50_000;
    let snaps = simulate_batch(
        &model,
        None,
        &FixedStart(vec![1.0]),
        n,
        TimeGrid::forward(&model, 1000).unwrap(),
        &[1000],
        RngSpec::for_purpose(11, "simulate/vp-mean"),
        Execution::default(),
    )
    .unwrap();
    let rep = empirical_moments(&snaps[0], 1).unwrap();
    let expected = (-0.5 * 10.05f64).exp();
    assert!(
        (rep.mean[0] - expected).abs() < 3.0 * rep.mean_se[0],
        "{} vs {expected}",
        rep.mean[0]
    );
}

#[test]
fn reverse_from_stationary_law_stays_stationary() {
    let model = vp(2);
    let score = StationaryScore::new(2, 1.0);
    let out = sample_reverse(
        &model,
        &score,
        &GaussianStart { std: 1.0 },
        20_000,
        1000,
        RngSpec::for_purpose(2, "simulate/reverse-stationary"),
        Execution::default(),
    )
    .unwrap();
    let rep = empirical_moments(&out, 2).unwrap();
    assert!(rep.max_cov_dev < 0.05, "{}", rep.cov);
    assert!(rep.max_mean_dev < 0.05);
}

#[test]
fn reverse_recovers_gaussian_data_mean() {
    let model = vp(1);
    let (mu, var) = (1.5, 0.2);
    let mix = MixtureSpec::gaussian(DVector::from_vec(vec![mu]), DMatrix::from_element(1, 1, var)).unwrap();
    let score = MixtureScore::new(mix, model.clone()).unwrap();
    let out = sample_reverse(
        &model,
        &score,
        &GaussianStart { std: 1.0 },
        20_000,
        1000,
        RngSpec::for_purpose(4, "simulate/reverse-gaussian"),
        Execution::default(),
    )
    .unwrap();
    let rep = empirical_moments(&out, 1).unwrap();
    assert!((rep.mean[0] - mu).abs() < 3.0 * rep.mean_se[0], "mean {}", rep.mean[0]);
    assert!((rep.cov[(0, 0)] - var).abs() < 0.02, "var {}", rep.cov[(0, 0)]);
}

#[test]
fn reverse_trajectory_is_ascending() {
    let model = vp(2);
    let score = StationaryScore::new(2, 1.0);
    let tr = euler_maruyama_reverse(
        &model,
        &score,
        &DVector::from_vec(vec![0.1, 0.2]),
        20,
        RngSpec::for_purpose(0, "simulate/reverse-order"),
    )
    .unwrap();
    assert!((tr.times()[0] - T_EPS).abs() < 1e-15);
    assert_eq!(*tr.times().last().unwrap(), 1.0);
    assert_eq!(tr.state(20), &[0.1, 0.2]);
    assert!(tr.times().windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn stationary_flow_vanishes() {
    let model = vp(3);
    let score = StationaryScore::new(3, 1.0);
    for t in [0.01, 0.3, 1.0] {
        let v = probability_flow_field(&model, &score, &DVector::from_vec(vec![0.4, -1.2, 2.0]), t).unwrap();
        assert!(v.amax() < 1e-14, "{v}");
    }
}

#[test]
fn zero_field_keeps_state() {
    let field = FnField {
        dim: 2,
        f: |_x: &[f64], _t: f64, out: &mut [f64]| out.fill(0.0),
    };
    let tr = integrate_flow(&field, &DVector::from_vec(vec![1.0, -2.0]), 0.0, 1.0, 10, true).unwrap();
    for k in 0..tr.len() {
        assert_eq!(tr.state(k), &[1.0, -2.0]);
        assert_eq!(tr.logdet().unwrap()[k], 0.0);
    }
}

#[test]
fn contracting_field_logdet() {
    let field = FnField {
        dim: 3,
        f: |x: &[f64], _t: f64, out: &mut [f64]| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = -v;
            }
        },
    };
    let tr = integrate_flow(&field, &DVector::from_vec(vec![1.0, 0.5, -0.5]), 0.0, 1.0, 100, true).unwrap();
    let last = *tr.logdet().unwrap().last().unwrap();
    assert!((last + 3.0).abs() < 1e-6, "{last}");
    assert!((tr.state(100)[0] - (-1.0f64).exp()).abs() < 1e-8);
}

#[test]
fn symplectic_flow_conserves_energy() {
    let field = FnField {
        dim: 2,
        f: |x: &[f64], _t: f64, out: &mut [f64]| {
            out[0] = x[1];
            out[1] = -x[0];
        },
    };
    let tr = integrate_flow(&field, &DVector::from_vec(vec![1.0, 0.5]), 0.0, 1.0, 1000, false).unwrap();
    let energy = |s: &[f64]| 0.5 * (s[0] * s[0] + s[1] * s[1]);
    let e0 = energy(tr.state(0));
    for k in 0..tr.len() {
        assert!((energy(tr.state(k)) - e0).abs() / e0 < 1e-6);
    }
}

#[test]
fn flow_marginals_match_sde_marginals() {
    let model = vp(2);
    let mean = DVector::from_vec(vec![0.8, -0.4]);
    let cov = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.5]);
    let mix = MixtureSpec::gaussian(mean.clone(), cov.clone()).unwrap();
    let score = MixtureScore::new(mix, model.clone()).unwrap();
    let flow = ProbabilityFlow::new(&model, &score).unwrap();
    let mut rng = RngSpec::for_purpose(5, "simulate/flow-marginals").rng();
    let n = 4000;
    let starts: Vec<f64> = (0..2 * n).map(|_| fpdiff::rng::normal(&mut rng)).collect();
    let (ends, _) = integrate_flow_batch(&flow, &starts, 1.0, 0.2, 200, Execution::default()).unwrap();
    let rep = empirical_moments(&ends, 2).unwrap();
    let kern = model.transition_kernel(0.2).unwrap();
    let m_t = &kern.mean_map * &mean;
    let c_t = &kern.mean_map * &cov * kern.mean_map.transpose() + &kern.cov;
    assert!((&rep.mean - &m_t).amax() < 0.05, "{} vs {}", rep.mean, m_t);
    assert!((&rep.cov - &c_t).amax() < 0.05, "{} vs {}", rep.cov, c_t);
}

#[test]
fn probability_flow_directions() {
    let model = vp(2);
    let score = StationaryScore::new(2, 1.0);
    let x = DVector::from_vec(vec![0.5, 0.5]);
    let fwd = integrate_probability_flow(&model, &score, &x, FlowDirection::Forward, 10, true).unwrap();
    let rev = integrate_probability_flow(&model, &score, &x, FlowDirection::Reverse, 10, true).unwrap();
    assert!((fwd.times()[0] - T_EPS).abs() < 1e-15);
    assert!(rev.times().windows(2).all(|w| w[0] < w[1]));
    assert_eq!(fwd.csv_header(), "t,x0,x1,logdet");
}

#[test]
fn csv_rows_roundtrip_exactly() {
    let tr = Trajectory::new(
        vec![0.0, 0.1],
        2,
        vec![1.0 / 3.0, -2.0, 1e-300, 7.5],
        Some(vec![0.0, -0.25]),
    )
    .unwrap();
    let mut buf = Vec::new();
    tr.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "t,x0,x1,logdet");
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, vec![0.0, 1.0 / 3.0, -2.0, 0.0]);
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row, vec![0.1, 1e-300, 7.5, -0.25]);
}

#[test]
fn invalid_inputs_are_rejected() {
    let model = vp(2);
    assert!(euler_maruyama_forward(&model, &DVector::from_vec(vec![1.0]), 10, RngSpec::new(0, 0)).is_err());
    assert!(euler_maruyama_forward(&model, &DVector::from_vec(vec![f64::NAN, 0.0]), 10, RngSpec::new(0, 0)).is_err());
    assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    assert!(Trajectory::new(vec![0.0, 0.0], 1, vec![0.0, 0.0], None).is_err());
    let wide = FnField {
        dim: 17,
        f: |_x: &[f64], _t: f64, out: &mut [f64]| out.fill(0.0),
    };
    assert!(integrate_flow(&wide, &DVector::zeros(17), 0.0, 1.0, 2, true).is_err());
    let score = StationaryScore::new(3, 1.0);
    assert!(score.dim() != model.dim());
    assert!(ProbabilityFlow::new(&model, &score).is_err());
}
