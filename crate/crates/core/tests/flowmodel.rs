use hctl_core::densities::{Checkerboard, GmrfParams, GmrfSpec};
use hctl_core::flowmodel::{
    loss_and_grad, read_weights, train_mlp, write_weights, GaussianModel, Mlp, MlpConfig, TrainConfig,
    VelocityModel,
};
use hctl_core::rng::{fill_normal, stream, Stream};
use hctl_core::schedule::{Shape, StateBatch};
use rand::Rng;

fn small_model(seed: u64) -> Mlp {
    let cfg = MlpConfig { hidden: 16, embed_dim: 8, ..Default::default() };
    Mlp::init(cfg, &mut stream(seed, Stream::Training, 0)).unwrap()
}

#[test]
fn parameter_gradient_matches_central_differences() {
    let mut model = small_model(7);
    let mut rng = stream(7, Stream::Data, 0);
    let n = 6;
    let z0: Vec<f64> = Checkerboard::new().sample(n, &mut rng).into_iter().flatten().collect();
    let mut eps = vec![0.0; 2 * n];
    fill_normal(&mut rng, &mut eps);
    let sigmas: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();

    let (_, grad) = loss_and_grad(&model, &z0, &eps, &sigmas);
    let base = model.flat_parameters();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        model.set_flat_parameters(&p).unwrap();
        let up = loss_and_grad(&model, &z0, &eps, &sigmas).0;
        p[i] = base[i] - h;
        model.set_flat_parameters(&p).unwrap();
        let down = loss_and_grad(&model, &z0, &eps, &sigmas).0;
        let fd = (up - down) / (2.0 * h);
        // Relative error with an absolute floor for near-zero entries.
        let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-3);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn input_vjp_matches_central_differences() {
    let model = small_model(9);
    let shape = Shape::flat(2);
    let z = StateBatch::new(shape, 2, vec![0.4, -0.7, 1.1, 0.2]).unwrap();
    let v = StateBatch::new(shape, 2, vec![0.3, -1.2, 0.5, 0.9]).unwrap();
    let sigma = 0.45;
    let g = model.input_vjp(&z, sigma, &v).unwrap();
    let h = 1e-6;
    for r in 0..2 {
        for i in 0..2 {
            let mut up = z.clone();
            up.row_mut(r)[i] += h;
            let mut dn = z.clone();
            dn.row_mut(r)[i] -= h;
            let fu = model.clean_prediction(&up, sigma).unwrap();
            let fd = model.clean_prediction(&dn, sigma).unwrap();
            let d: f64 = (0..2).map(|k| v.row(r)[k] * (fu.row(r)[k] - fd.row(r)[k]) / (2.0 * h)).sum();
            assert!((d - g.row(r)[i]).abs() < 1e-7, "row {r} coord {i}: {d} vs {}", g.row(r)[i]);
        }
    }
}

#[test]
fn gaussian_clean_prediction_is_the_posterior_mean() {
    // Monte Carlo oracle: E[z0 | z_σ] equals K z_σ, so the regression of z0 on
    // z_σ over joint draws recovers K.
    let spec = GmrfSpec::build(GmrfParams { shape: (1, 1, 3), beta1: 0.2, beta2: 0.0, tau_d: 1.0 }).unwrap();
    let model = GaussianModel::new(&spec);
    let sigma = 0.6;
    let n = 200_000;
    let mut rng = stream(3, Stream::Oracle, 0);
    let z0 = spec.sample(n, &mut rng);
    let mut xtx = nalgebra::DMatrix::<f64>::zeros(3, 3);
    let mut xty = nalgebra::DMatrix::<f64>::zeros(3, 3);
    for t in &z0 {
        let mut e = [0.0; 3];
        fill_normal(&mut rng, &mut e);
        let zs = nalgebra::DVector::from_fn(3, |i, _| (1.0 - sigma) * t.data()[i] + sigma * e[i]);
        let x0 = nalgebra::DVector::from_column_slice(t.data());
        xtx += &zs * zs.transpose();
        xty += &zs * x0.transpose();
    }
    let k_hat = xtx.lu().solve(&xty).unwrap().transpose();
    let k = model.gain(sigma).unwrap();
    assert!((k_hat - k).abs().max() < 0.01);
}

#[test]
fn training_decreases_loss_and_is_deterministic() {
    let cfg = TrainConfig {
        iterations: 300,
        batch: 64,
        log_every: 1,
        model: MlpConfig { hidden: 32, ..Default::default() },
        ..Default::default()
    };
    let cb = Checkerboard::new();
    let a = train_mlp(&cb, &cfg, &mut stream(1, Stream::Training, 0)).unwrap();
    let b = train_mlp(&cb, &cfg, &mut stream(1, Stream::Training, 0)).unwrap();
    let head: f64 = a.curve[..20].iter().map(|p| p.loss).sum::<f64>() / 20.0;
    let tail: f64 = a.curve[a.curve.len() - 20..].iter().map(|p| p.loss).sum::<f64>() / 20.0;
    assert!(tail < head, "loss {head} -> {tail}");
    assert_eq!(a.curve.last().unwrap().lr, 0.0);
    let (mut wa, mut wb) = (Vec::new(), Vec::new());
    write_weights(&a.model, &mut wa).unwrap();
    write_weights(&b.model, &mut wb).unwrap();
    assert_eq!(wa, wb);
    assert_eq!(read_weights(wa.as_slice()).unwrap(), a.model);
}
