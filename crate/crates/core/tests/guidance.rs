use hctl_core::densities::{GmrfParams, GmrfSpec};
use hctl_core::flowmodel::{GaussianModel, Mlp, MlpConfig, VelocityModel};
use hctl_core::guidance::{
    dps_correction, inner_gibbs, sample, GuidanceSpec, HControlConfig, InnerHooks, InnerRecon, InnerStep,
    JacobianMode, NfeCounter, Observation, OuterMode, Readout, TfgConfig, Variant,
};
use hctl_core::rng::{stream, SamplerStreams, Stream};
use hctl_core::schedule::{
    partition_complement, NoiseSchedule, PatchSizes, ScheduleKind, Shape, SiteMask, StateBatch, StateTensor,
};

fn gmrf(shape: (usize, usize, usize)) -> GmrfSpec {
    GmrfSpec::build(GmrfParams { shape, beta1: 0.12, beta2: 0.04, tau_d: 1.0 }).unwrap()
}

fn half_mask(shape: Shape) -> SiteMask {
    SiteMask::from_fn(shape.lattice(), |_, h, _| h < shape.h / 2)
}

fn observation(spec: &GmrfSpec, mask: SiteMask, tau: Option<f64>, seed: u64) -> Observation {
    let truth = spec.sample(1, &mut stream(seed, Stream::Observation, 0)).remove(0);
    Observation::new(mask, truth, tau).unwrap()
}

fn toy_model() -> Mlp {
    let cfg = MlpConfig { hidden: 16, embed_dim: 8, ..Default::default() };
    Mlp::init(cfg, &mut stream(1, Stream::Training, 0)).unwrap()
}

fn toy_obs() -> Observation {
    let mask = SiteMask::new((1, 1, 2), vec![true, false]).unwrap();
    let values = StateTensor::new(Shape::flat(2), vec![0.5, 0.0]).unwrap();
    Observation::new(mask, values, Some(0.2)).unwrap()
}

fn schedule(k: usize) -> NoiseSchedule {
    NoiseSchedule::build(k, ScheduleKind::Linear).unwrap()
}

#[test]
fn frozen_patches_hold_and_pin_is_constant() {
    let spec = gmrf((4, 4, 4));
    let model = GaussianModel::new(&spec);
    let shape = spec.shape();
    let obs = observation(&spec, half_mask(shape), None, 3);
    let cfg = HControlConfig {
        j_max: 30,
        kappa: 0.5,
        nu: 0.99,
        patch_sizes: PatchSizes::new(2, 2, 2),
        ..Default::default()
    };
    let partition = partition_complement(&obs.mask, cfg.patch_sizes).unwrap();
    let patches = partition.patch_coords(shape);
    let observed = obs.mask.observed_coords(shape);
    let rows = 4;
    let start = StateBatch::broadcast(&spec.sample(1, &mut stream(4, Stream::Data, 0))[0], rows);
    let mut counters = vec![NfeCounter::default(); rows];
    let mut prev: Option<StateBatch> = None;
    let mut pin_seen: Option<Vec<Vec<f64>>> = None;
    let mut frozen_checks = 0;
    let mut check = |s: &InnerStep<'_>| {
        for (a, &r) in s.active.iter().enumerate() {
            let pins: Vec<f64> = observed.iter().map(|&i| s.probe.row(a)[i]).collect();
            let seen = pin_seen.get_or_insert_with(|| vec![Vec::new(); rows]);
            if seen[r].is_empty() {
                seen[r] = pins;
            } else {
                assert_eq!(seen[r], pins, "pin changed for chain {r} at j={}", s.j);
            }
            if let Some(p) = &prev {
                for (g, coords) in patches.iter().enumerate() {
                    if s.stable[r][g] {
                        frozen_checks += 1;
                        for &i in coords {
                            assert_eq!(s.iterate.row(r)[i].to_bits(), p.row(r)[i].to_bits());
                        }
                    }
                }
            }
        }
        prev = Some(s.iterate.clone());
    };
    let out = inner_gibbs(
        &model,
        &start,
        &obs,
        0.6,
        &cfg,
        &partition,
        &mut stream(5, Stream::Pin, 0),
        &mut stream(5, Stream::Inner, 0),
        &mut counters,
        InnerHooks { pin: None, observer: Some(&mut check) },
    )
    .unwrap();
    assert!(frozen_checks > 0, "no patch ever froze");
    for (r, c) in counters.iter().enumerate() {
        assert_eq!(c.forward_calls as usize, out.iterations[r]);
    }
}

#[test]
fn polyak_readout_is_the_mean_of_iterates() {
    let spec = gmrf((2, 2, 4));
    let model = GaussianModel::new(&spec);
    let shape = spec.shape();
    let obs = observation(&spec, half_mask(shape), None, 7);
    let cfg = HControlConfig { j_max: 25, freeze: false, ..Default::default() };
    let partition = partition_complement(&obs.mask, cfg.patch_sizes).unwrap();
    let start = StateBatch::broadcast(&spec.sample(1, &mut stream(8, Stream::Data, 0))[0], 3);
    let mut all: Vec<StateBatch> = Vec::new();
    let mut keep = |s: &InnerStep<'_>| all.push(s.iterate.clone());
    let mut counters = vec![NfeCounter::default(); 3];
    let out = inner_gibbs(
        &model,
        &start,
        &obs,
        0.4,
        &cfg,
        &partition,
        &mut stream(9, Stream::Pin, 0),
        &mut stream(9, Stream::Inner, 0),
        &mut counters,
        InnerHooks { pin: None, observer: Some(&mut keep) },
    )
    .unwrap();
    assert_eq!(all.len(), 25);
    for r in 0..3 {
        for i in 0..shape.len() {
            let batch = all.iter().map(|b| b.row(r)[i]).sum::<f64>() / all.len() as f64;
            let got = out.readout.row(r)[i];
            assert!((got - batch).abs() <= 1e-12 * batch.abs().max(1.0), "{got} vs {batch}");
        }
    }
}

#[test]
fn zero_budget_returns_the_outer_prediction() {
    let spec = gmrf((1, 2, 4));
    let model = GaussianModel::new(&spec);
    let obs = observation(&spec, half_mask(spec.shape()), None, 1);
    let cfg = HControlConfig { j_max: 0, ..Default::default() };
    let partition = partition_complement(&obs.mask, cfg.patch_sizes).unwrap();
    let start = StateBatch::broadcast(&spec.sample(1, &mut stream(2, Stream::Data, 0))[0], 2);
    let mut counters = vec![NfeCounter::default(); 2];
    let out = inner_gibbs(
        &model,
        &start,
        &obs,
        0.5,
        &cfg,
        &partition,
        &mut stream(1, Stream::Pin, 0),
        &mut stream(1, Stream::Inner, 0),
        &mut counters,
        InnerHooks::default(),
    )
    .unwrap();
    assert_eq!(out.readout, start);
    assert_eq!(out.iterations, vec![0, 0]);
    assert!(counters.iter().all(|c| c.nfe() == 0));
}

#[test]
fn single_iteration_polyak_equals_last() {
    let spec = gmrf((1, 2, 4));
    let model = GaussianModel::new(&spec);
    let obs = observation(&spec, half_mask(spec.shape()), None, 1);
    let start = StateBatch::broadcast(&spec.sample(1, &mut stream(2, Stream::Data, 0))[0], 2);
    let run = |readout| {
        let cfg = HControlConfig { j_max: 1, readout, ..Default::default() };
        let partition = partition_complement(&obs.mask, cfg.patch_sizes).unwrap();
        let mut counters = vec![NfeCounter::default(); 2];
        inner_gibbs(
            &model,
            &start,
            &obs,
            0.5,
            &cfg,
            &partition,
            &mut stream(1, Stream::Pin, 0),
            &mut stream(1, Stream::Inner, 0),
            &mut counters,
            InnerHooks::default(),
        )
        .unwrap()
        .readout
    };
    assert_eq!(run(Readout::Polyak), run(Readout::Last));
}

#[test]
fn posterior_sampling_needs_an_exact_backend() {
    let model = toy_model();
    let obs = toy_obs();
    let cfg = HControlConfig { inner_recon: InnerRecon::PosteriorSample, ..Default::default() };
    let partition = partition_complement(&obs.mask, cfg.patch_sizes).unwrap();
    let start = StateBatch::zeros(Shape::flat(2), 1);
    let mut counters = vec![NfeCounter::default(); 1];
    let err = inner_gibbs(
        &model,
        &start,
        &obs,
        0.5,
        &cfg,
        &partition,
        &mut stream(1, Stream::Pin, 0),
        &mut stream(1, Stream::Inner, 0),
        &mut counters,
        InnerHooks::default(),
    );
    assert!(matches!(err, Err(hctl_core::HctlError::Unsupported(_))));
}

fn run(model: &dyn VelocityModel, obs: &Observation, spec: &GuidanceSpec, k: usize, rows: usize, seed: u64) -> hctl_core::guidance::SampleOutput {
    sample(model, &schedule(k), Some(obs), spec, rows, &mut SamplerStreams::new(seed, 0)).unwrap()
}

#[test]
fn call_counts_match_closed_forms() {
    let model = toy_model();
    let obs = toy_obs();
    let dps = GuidanceSpec::new(Variant::Dps { zeta: None, jacobian_mode: JacobianMode::FullVjp });
    let out = run(&model, &obs, &dps, 50, 3, 1);
    assert!(out.nfe.iter().all(|c| c.forward_calls == 50 && c.backward_calls == 50 && c.nfe() == 100));

    let tfg = GuidanceSpec::new(Variant::TfgUgd(TfgConfig::default()));
    let out = run(&model, &obs, &tfg, 50, 3, 1);
    assert!(out.nfe.iter().all(|c| c.nfe() == 250));
    for w in out.diagnostics.windows(2) {
        assert_eq!(w[1].nfe_forward + w[1].nfe_backward - w[0].nfe_forward - w[0].nfe_backward, 5.0);
    }
    for (n_recur, n_iter) in [(1, 0), (3, 2), (6, 1)] {
        let cfg = TfgConfig { n_recur, n_iter, mu: 0.5, rho: 0.5 };
        let out = run(&model, &obs, &GuidanceSpec::new(Variant::TfgUgd(cfg)), 10, 2, 1);
        assert!(out.nfe.iter().all(|c| c.nfe() as usize == 10 * cfg.calls_per_step()));
    }

    let hc = HControlConfig { j_max: 4, outer_mode: OuterMode::Soft, ..Default::default() };
    let out = run(&model, &obs, &GuidanceSpec::new(Variant::HControl(hc)), 50, 3, 1);
    assert!(out.nfe.iter().all(|c| c.forward_calls == 250 && c.backward_calls == 0));
    assert!(out.diagnostics.iter().all(|d| d.inner_iters_used == 4.0));

    let windowed = GuidanceSpec::new(Variant::HControl(hc)).with_window(2, 5);
    let out = run(&model, &obs, &windowed, 50, 2, 1);
    assert!(out.nfe.iter().all(|c| c.forward_calls == 50 + 3 * 4));

    for v in [Variant::None, Variant::HardReplace, Variant::SoftPull { pull_scale: 1.0 }, Variant::WeightedH { alpha: 1.0 }] {
        let out = run(&model, &obs, &GuidanceSpec::new(v), 20, 2, 1);
        assert!(out.nfe.iter().all(|c| c.forward_calls == 20 && c.backward_calls == 0));
    }
}

#[test]
fn empty_window_reproduces_unguided_sampling() {
    let model = toy_model();
    let obs = toy_obs();
    let plain = sample(&model, &schedule(30), None, &GuidanceSpec::new(Variant::None), 8, &mut SamplerStreams::new(4, 0)).unwrap();
    let variants = [
        Variant::HardReplace,
        Variant::SoftPull { pull_scale: 1.0 },
        Variant::Dps { zeta: None, jacobian_mode: JacobianMode::FullVjp },
        Variant::WeightedH { alpha: 1.0 },
        Variant::TfgUgd(TfgConfig::default()),
        Variant::HControl(HControlConfig { j_max: 4, outer_mode: OuterMode::Soft, ..Default::default() }),
    ];
    for v in variants {
        let spec = GuidanceSpec::new(v).with_window(7, 7);
        let out = run(&model, &obs, &spec, 30, 8, 4);
        let a: Vec<u64> = out.samples.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = plain.samples.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b, "{v:?}");
    }
}

#[test]
fn full_mask_hard_replacement_is_exact() {
    let spec = gmrf((1, 2, 4));
    let model = GaussianModel::new(&spec);
    let obs = observation(&spec, SiteMask::filled(spec.shape().lattice(), true), None, 2);
    for v in [Variant::HardReplace, Variant::HControl(HControlConfig::default())] {
        let out = run(&model, &obs, &GuidanceSpec::new(v), 20, 5, 3);
        for r in 0..5 {
            assert_eq!(out.samples.row(r), obs.values.data());
        }
    }
}

#[test]
fn sampling_is_deterministic() {
    let model = toy_model();
    let obs = toy_obs();
    let spec = GuidanceSpec::new(Variant::HControl(HControlConfig { j_max: 3, outer_mode: OuterMode::Soft, ..Default::default() }));
    let a = run(&model, &obs, &spec, 20, 6, 9);
    let b = run(&model, &obs, &spec, 20, 6, 9);
    assert_eq!(a.samples, b.samples);
    assert_eq!(format!("{:?}", a.diagnostics), format!("{:?}", b.diagnostics));
}

#[test]
fn stop_grad_dps_uses_the_identity_jacobian() {
    let spec = gmrf((1, 1, 4));
    let model = GaussianModel::new(&spec);
    let obs = observation(&spec, SiteMask::new((1, 1, 4), vec![true, false, true, false]).unwrap(), Some(0.3), 5);
    let z = StateBatch::new(spec.shape(), 1, vec![0.3, -0.2, 0.9, 0.1]).unwrap();
    let sigma = 0.5;
    let zhat = model.clean_prediction(&z, sigma).unwrap();
    let mut c = vec![NfeCounter::default()];
    let stop = dps_correction(&model, &z, &zhat, sigma, &obs, 2.0, JacobianMode::StopGrad, &mut c).unwrap();
    assert_eq!(c[0].backward_calls, 0);
    let full = dps_correction(&model, &z, &zhat, sigma, &obs, 2.0, JacobianMode::FullVjp, &mut c).unwrap();
    assert_eq!(c[0].backward_calls, 1);
    let k = model.gain(sigma).unwrap();
    let mut r = nalgebra::DVector::zeros(4);
    for i in [0, 2] {
        r[i] = zhat.row(0)[i] - obs.values.data()[i];
        assert!((stop.row(0)[i] - 2.0 * r[i]).abs() < 1e-14);
    }
    assert_eq!(stop.row(0)[1], 0.0);
    let want = k.transpose() * r * 2.0;
    for i in 0..4 {
        assert!((full.row(0)[i] - want[i]).abs() < 1e-12);
    }
    // Agreement on the mask gives no correction.
    let agree = Observation::new(obs.mask.clone(), zhat.tensor(0), Some(0.3)).unwrap();
    let zero = dps_correction(&model, &z, &zhat, sigma, &agree, 2.0, JacobianMode::FullVjp, &mut c).unwrap();
    assert!(zero.data().iter().all(|&x| x == 0.0));
}

/// Output covariance of the linear Euler map started from standard noise.
fn euler_transfer_covariance(model: &GaussianModel, k: usize) -> nalgebra::DMatrix<f64> {
    let sched = schedule(k);
    let d = model.covariance().nrows();
    let mut a = nalgebra::DMatrix::<f64>::identity(d, d);
    for i in 0..k {
        let (s0, s1) = (sched.sigma(i), sched.sigma(i + 1));
        let g = model.gain(s0).unwrap();
        let eye = nalgebra::DMatrix::<f64>::identity(d, d);
        let step = &eye + (&eye - &g) * ((s1 - s0) / s0);
        a = step * a;
    }
    &a * a.transpose()
}

#[test]
fn unguided_gaussian_sampler_matches_the_discrete_flow() {
    let spec = gmrf((1, 1, 4));
    let model = GaussianModel::new(&spec);
    let n = 20_000;
    let out = sample(&model, &schedule(50), None, &GuidanceSpec::new(Variant::None), n, &mut SamplerStreams::new(12, 0)).unwrap();
    let cov = euler_transfer_covariance(&model, 50);
    let d = 4;
    let mean: Vec<f64> = (0..d).map(|i| (0..n).map(|r| out.samples.row(r)[i]).sum::<f64>() / n as f64).collect();
    for i in 0..d {
        for j in 0..d {
            let prods: Vec<f64> =
                (0..n).map(|r| (out.samples.row(r)[i] - mean[i]) * (out.samples.row(r)[j] - mean[j])).collect();
            let c = prods.iter().sum::<f64>() / (n - 1) as f64;
            let v = prods.iter().map(|p| (p - c).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (v / n as f64).sqrt();
            assert!((c - cov[(i, j)]).abs() < 5.0 * se, "cov[{i},{j}] = {c} vs {}", cov[(i, j)]);
        }
    }
}

#[test]
fn discrete_flow_converges_to_the_prior() {
    let spec = gmrf((1, 2, 3));
    let model = GaussianModel::new(&spec);
    let err = |k| (euler_transfer_covariance(&model, k) - spec.covariance()).norm() / spec.covariance().norm();
    let (e50, e400) = (err(50), err(400));
    assert!(e400 < e50 / 4.0, "{e50} -> {e400}");
    assert!(e400 < 0.02, "{e400}");
}
