//! Central finite-difference checks of every layer kernel and of the full
//! training objective, in f64. Each check returns the number of coordinates
//! compared, or a description of the first mismatch.

use nnkg_core::kg::Split;
use nnkg_core::ops::{Family, Mode, Model, ModelConfig};
use nnkg_core::query::QueryStructure;
use nnkg_core::sampler::{sample_queries, SamplerConfig};
use nnkg_core::synth::{clustered_triples, split_triples, splits_from};
use nnkg_core::tensor::*;
use nnkg_core::train::{loss, objective, sample_negatives, Batch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;
pub const TRIALS: usize = 100;

pub type Check = Result<usize, String>;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-7)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

/// Compares `d(sum(f(x) * probe))/dx` with the analytic input gradient on
/// `TRIALS` random coordinates. `grad` maps the upstream gradient to dx.
fn check_unary(
    name: &str,
    x: &Tensor<f64>,
    f: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    grad: impl Fn(&Tensor<f64>) -> Tensor<f64>,
    rng: &mut ChaCha8Rng,
) -> Check {
    let y = f(x);
    let probe = rand_tensor(y.shape(), rng);
    let dx = grad(&probe);
    let dot = |t: &Tensor<f64>| t.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum::<f64>();
    for _ in 0..TRIALS {
        let i = rng.random_range(0..x.len());
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let num = (dot(&f(&xp)) - dot(&f(&xm))) / (2.0 * H);
        let e = rel_err(dx.data()[i], num);
        if e > TOL {
            return Err(format!("{name}: coordinate {i}: analytic {} numeric {num} (rel {e})", dx.data()[i]));
        }
    }
    Ok(TRIALS)
}

fn all(checks: impl IntoIterator<Item = Check>) -> Check {
    checks.into_iter().sum()
}

/// Values bounded away from zero so ReLU kinks are not crossed.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = rand_tensor(shape, rng);
    for v in t.data_mut() {
        *v = v.signum() * (0.1 + v.abs());
    }
    t
}

pub fn affine() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&[4, 5], &mut rng);
    let w = rand_tensor(&[5, 3], &mut rng);
    let b = rand_tensor(&[3], &mut rng);
    all([
        check_unary(
            "affine dx",
            &x,
            |x| affine_forward(x, &w, &b).unwrap(),
            |dy| affine_backward(&x, &w, dy).unwrap().0,
            &mut rng,
        ),
        check_unary(
            "affine dw",
            &w,
            |w| affine_forward(&x, w, &b).unwrap(),
            |dy| affine_backward(&x, &w, dy).unwrap().1,
            &mut rng,
        ),
        check_unary(
            "affine db",
            &b,
            |b| affine_forward(&x, &w, b).unwrap(),
            |dy| affine_backward(&x, &w, dy).unwrap().2,
            &mut rng,
        ),
    ])
}

pub fn relu() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = away_from_zero(&[6, 7], &mut rng);
    check_unary("relu", &x, relu_forward, |dy| relu_backward(&relu_forward(&x), dy), &mut rng)
}

pub fn layer_norm() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&[4, 8], &mut rng);
    let g = rand_tensor(&[8], &mut rng);
    let b = rand_tensor(&[8], &mut rng);
    let cache = || layer_norm_forward(&x, &g, &b).unwrap().1;
    all([
        check_unary(
            "layer_norm dx",
            &x,
            |x| layer_norm_forward(x, &g, &b).unwrap().0,
            |dy| layer_norm_backward(&cache(), &g, dy).0,
            &mut rng,
        ),
        check_unary(
            "layer_norm dgain",
            &g,
            |g| layer_norm_forward(&x, g, &b).unwrap().0,
            |dy| layer_norm_backward(&cache(), &g, dy).1,
            &mut rng,
        ),
        check_unary(
            "layer_norm dbias",
            &b,
            |b| layer_norm_forward(&x, &g, b).unwrap().0,
            |dy| layer_norm_backward(&cache(), &g, dy).2,
            &mut rng,
        ),
    ])
}

pub fn dropout() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[5, 6], &mut rng);
    let fwd = |x: &Tensor<f64>| dropout_forward(x, 0.7, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let mask = fwd(&x).1.unwrap();
    check_unary("dropout", &x, |x| fwd(x).0, |dy| dropout_backward(Some(&mask), dy), &mut rng)
}

pub fn softmax_sigmoid_logsigmoid() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&[3, 5], &mut rng).map(|v| 3.0 * v);
    all([
        check_unary(
            "softmax",
            &x,
            softmax_forward,
            |dy| softmax_backward(&softmax_forward(&x), dy),
            &mut rng,
        ),
        check_unary(
            "sigmoid",
            &x,
            sigmoid_forward,
            |dy| sigmoid_backward(&sigmoid_forward(&x), dy),
            &mut rng,
        ),
        check_unary(
            "log_sigmoid",
            &x,
            log_sigmoid_forward,
            |dy| log_sigmoid_backward(&x, dy),
            &mut rng,
        ),
    ])
}

pub fn conv1d() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&[2, 3, 12], &mut rng);
    let w = rand_tensor(&[4, 3, 5], &mut rng);
    let b = rand_tensor(&[4], &mut rng);
    all([
        check_unary(
            "conv1d dx",
            &x,
            |x| conv1d_forward(x, &w, &b).unwrap(),
            |dy| conv1d_backward(&x, &w, dy).0,
            &mut rng,
        ),
        check_unary(
            "conv1d dw",
            &w,
            |w| conv1d_forward(&x, w, &b).unwrap(),
            |dy| conv1d_backward(&x, &w, dy).1,
            &mut rng,
        ),
        check_unary(
            "conv1d db",
            &b,
            |b| conv1d_forward(&x, &w, b).unwrap(),
            |dy| conv1d_backward(&x, &w, dy).2,
            &mut rng,
        ),
    ])
}

pub fn maxpool1d() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // distinct values spaced well beyond H so no window has a near tie
    let mut vals: Vec<f64> = (0..2 * 3 * 12).map(|i| i as f64 * 0.01).collect();
    for i in (1..vals.len()).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    let x = Tensor::from_vec(&[2, 3, 12], vals).unwrap();
    let (_, arg) = maxpool1d_forward(&x, 4).unwrap();
    check_unary(
        "maxpool1d",
        &x,
        |x| maxpool1d_forward(x, 4).unwrap().0,
        |dy| maxpool1d_backward(x.shape(), &arg, dy),
        &mut rng,
    )
}

/// The loss w.r.t. conjunct embeddings, the positive row and negative rows.
pub fn loss_wrt_all_inputs() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 6;
    for trial in 0..TRIALS {
        let c = 1 + trial % 2;
        let q: Vec<Vec<f64>> = (0..c).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let pos: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let negs: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let margin = rng.random_range(0.5..4.0);
        let eval = |q: &[Vec<f64>], pos: &[f64], negs: &[Vec<f64>]| {
            let qr: Vec<&[f64]> = q.iter().map(Vec::as_slice).collect();
            let nr: Vec<&[f64]> = negs.iter().map(Vec::as_slice).collect();
            loss(&qr, pos, &nr, margin).unwrap()
        };
        let base = eval(&q, &pos, &negs);
        let (j, k) = (rng.random_range(0..c), rng.random_range(0..d));
        let mut qp = q.clone();
        qp[j][k] += H;
        let mut qm = q.clone();
        qm[j][k] -= H;
        let num = (eval(&qp, &pos, &negs).value - eval(&qm, &pos, &negs).value) / (2.0 * H);
        if rel_err(base.d_conjuncts[j][k], num) > TOL {
            return Err(format!("loss dq trial {trial}"));
        }
        let mut pp = pos.clone();
        pp[k] += H;
        let mut pm = pos.clone();
        pm[k] -= H;
        let num = (eval(&q, &pp, &negs).value - eval(&q, &pm, &negs).value) / (2.0 * H);
        if rel_err(base.d_positive[k], num) > TOL {
            return Err(format!("loss dpos trial {trial}"));
        }
        let n = rng.random_range(0..negs.len());
        let mut np = negs.clone();
        np[n][k] += H;
        let mut nm = negs.clone();
        nm[n][k] -= H;
        let num = (eval(&q, &pos, &np).value - eval(&q, &pos, &nm).value) / (2.0 * H);
        if rel_err(base.d_negatives[n][k], num) > TOL {
            return Err(format!("loss dneg trial {trial}"));
        }
    }
    Ok(3 * TRIALS)
}

/// A batch covering every structure the family supports on a small graph.
pub fn batch_for(family: Family, rng: &mut ChaCha8Rng) -> (Batch, usize, usize) {
    let triples = clustered_triples(40, 3, 4, 0.6, 2, 11);
    let splits = splits_from(40, 3, &split_triples(triples, 0.1, 0.1, 12)).unwrap();
    let mut batch = Batch::default();
    for (i, s) in QueryStructure::ALL.iter().enumerate() {
        if family == Family::Mixer && s.has_negation() {
            continue;
        }
        let cfg = SamplerConfig::new(*s, 1, 40 + i as u64);
        for sample in sample_queries(&splits, &cfg, Split::Train).samples {
            let dnf = sample.query.root().to_dnf().unwrap();
            let pos = sample.answers_train.as_slice()[0];
            let negs = sample_negatives(&sample.answers_train, 40, 3, rng).unwrap();
            batch.push(&dnf, pos, negs);
        }
    }
    assert!(batch.len() >= 9, "too few sampled structures for {family}");
    (batch, splits.entity_count(), splits.relation_count())
}

/// The whole objective (operators, tables, loss) for one family, checked on
/// random parameter coordinates with a nonzero gradient or numeric slope.
pub fn objective_for(family: Family) -> Check {
    let dim = if family == Family::Cnn { 24 } else { 8 };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (batch, entities, relations) = batch_for(family, &mut rng);
    let mut cfg = ModelConfig::new(family, dim);
    cfg.hidden_dim = 12;
    let mut model = Model::<f64>::new(cfg, entities, relations, 5).unwrap();
    // spread the tables so distances are not tiny relative to the step
    for id in [model.entity_param(), model.relation_param()] {
        let t = model.params().value(id).shape().to_vec();
        *model.params_mut().value_mut(id) = Tensor::uniform(&t, 1.0, &mut rng);
    }
    let margin = 2.0;
    // Train mode with a re-seeded RNG so the dropout mask is fixed
    let eval = |m: &mut Model<f64>| {
        let v = objective(m, &batch, margin, Mode::Train, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap()
            .0;
        m.params_mut().zero_grad();
        v
    };
    model.params_mut().zero_grad();
    objective(&mut model, &batch, margin, Mode::Train, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let grads: Vec<Tensor<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    model.params_mut().zero_grad();
    let ids: Vec<ParamId> = model.params().ids().collect();
    let mut failures = Vec::new();
    let mut checked = 0;
    let mut trial = 0;
    while checked < TRIALS * 2 && trial < TRIALS * 20 {
        trial += 1;
        let p = rng.random_range(0..ids.len());
        let g = &grads[p];
        let i = rng.random_range(0..g.len());
        let orig = model.params().value(ids[p]).data()[i];
        let mut numeric = |h: f64| {
            model.params_mut().value_mut(ids[p]).data_mut()[i] = orig + h;
            let up = eval(&mut model);
            model.params_mut().value_mut(ids[p]).data_mut()[i] = orig - h;
            let down = eval(&mut model);
            model.params_mut().value_mut(ids[p]).data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        };
        let mut num = numeric(H);
        if num == 0.0 && g.data()[i] == 0.0 {
            continue;
        }
        checked += 1;
        if rel_err(g.data()[i], num) > TOL {
            // a ReLU kink or max-pool swap inside ±H: a smaller step avoids it
            num = numeric(H * 1e-2);
        }
        let e = rel_err(g.data()[i], num);
        if e > TOL {
            failures.push(format!(
                "{} [{i}]: analytic {:.6e} numeric {num:.6e}",
                model.params().name(ids[p]),
                g.data()[i]
            ));
        }
    }
    if checked < TRIALS {
        return Err(format!("{family}: only {checked} nonzero coordinates checked"));
    }
    if !failures.is_empty() {
        return Err(format!("{family}: {} failures:\n{}", failures.len(), failures.join("\n")));
    }
    Ok(checked)
}

/// Every kernel check, by name.
pub fn kernel_checks() -> Vec<(&'static str, Check)> {
    vec![
        ("affine", affine()),
        ("relu", relu()),
        ("layer_norm", layer_norm()),
        ("dropout", dropout()),
        ("softmax/sigmoid/log_sigmoid", softmax_sigmoid_logsigmoid()),
        ("conv1d", conv1d()),
        ("maxpool1d", maxpool1d()),
        ("loss", loss_wrt_all_inputs()),
    ]
}
