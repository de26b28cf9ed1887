//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::time::{Duration, Instant};

use heatcast::ga::{fit_ga, GaModel, GaOptions};
use heatcast::grid::{FieldSeries, RegionBox};
use heatcast::harness::{load_data, run_experiment, run_with_data, ExperimentConfig, RawData};
use heatcast::linalg::SampleMatrix;
use heatcast::metrics::{crps_gaussian, GaussianPrediction};
use heatcast::nnet::{
    CheckpointModel, CnnConfig, CnnModel, IinnConfig, IinnModel, OutputInit, OutputTarget, Predictor, ScatNetConfig,
    ScatNetModel, Tape, Tensor, Trainable, Var,
};
use heatcast::rng;
use heatcast::scattering::{build_filter_bank, ScatPath};
use heatcast::synth::{generate_dataset, GeneratorConfig};
use heatcast::xai::{
    expected_gradients, optimal_input, scatnet_feature_importance, ExpectedGradientsConfig, OptimalInputConfig,
};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn normal_rows(n: usize, d: usize, seed: u64) -> SampleMatrix {
    let mut r = rng::stream(seed, &[0xacc]);
    SampleMatrix::new(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect()).unwrap()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

// ------------------------------------------------------------------ 1

/// Composite Simpson rule on `[a, b]` with `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for k in 1..n {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn crps_quadrature() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for mu in [-3.0, -1.0, 0.0, 1.0, 3.0] {
        for sigma in [0.1, 1.0, 5.0] {
            for y in [-3.0, -1.0, 0.0, 1.0, 3.0] {
                let dist = Normal::new(mu, sigma).unwrap();
                let lo = (mu - 12.0 * sigma).min(y);
                let hi = (mu + 12.0 * sigma).max(y);
                // split at the observation where the integrand jumps
                let below = simpson(|x| dist.cdf(x).powi(2), lo, y, 4000);
                let above = simpson(|x| (1.0 - dist.cdf(x)).powi(2), y, hi, 4000);
                let closed = crps_gaussian(GaussianPrediction::new(mu, sigma).unwrap(), y);
                worst = worst.max((closed - (below + above)).abs());
                count += 1;
            }
        }
    }
    let t = start.elapsed();
    Outcome::new(
        worst < 1e-6 && secs(t) < 1.0,
        format!(
            "{count} cases, max |closed - quadrature| = {worst:.2e}, {:.3} s",
            secs(t)
        ),
    )
}

// ------------------------------------------------------------------ 2

fn rel_err(fd: &[f64], an: &[f64]) -> f64 {
    let diff: Vec<f64> = fd.iter().zip(an).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(fd).max(1e-300)
}

/// Scalar `sum(w * op(leaves))` and its gradients with respect to every leaf.
type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn check_primitive(name: &str, leaves: &[Tensor], build: &Build) -> (String, f64) {
    let eval = |vals: &[Tensor], grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let len = tape.value(out).len();
        let w: Vec<f64> = (0..len).map(|k| ((k * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let weighted = tape.mul_const(out, w);
        let loss = tape.mean(weighted);
        let value = tape.value(loss).data[0];
        let grads = grad.then(|| {
            let mut g = tape.backward(loss);
            vars.iter().map(|v| g.take_or_zero(*v, &tape).data).collect::<Vec<_>>()
        });
        (value, grads)
    };
    let (_, analytic) = eval(leaves, true);
    let analytic = analytic.unwrap();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let mut fd = vec![0.0; leaf.len()];
        for k in 0..leaf.len() {
            let mut plus = leaves.to_vec();
            let mut minus = leaves.to_vec();
            plus[li].data[k] += h;
            minus[li].data[k] -= h;
            fd[k] = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
        }
        if norm(&fd) > 0.0 {
            worst = worst.max(rel_err(&fd, &analytic[li]));
        }
    }
    (name.to_string(), worst)
}

fn tensor(shape: &[usize], seed: u64, away_from_zero: bool) -> Tensor {
    let mut r = rng::stream(seed, &[0x7e]);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(-1.0..1.0);
            if away_from_zero {
                v.signum() * (0.1 + v.abs())
            } else {
                v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn primitive_checks() -> Vec<(String, f64)> {
    let targets = [0.3, -1.2, 2.0, 0.1];
    let checks: Vec<(&str, Vec<Tensor>, Box<Build>)> = vec![
        (
            "matmul",
            vec![tensor(&[3, 4], 1, false), tensor(&[4, 2], 2, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.matmul(v[0], v[1])),
        ),
        (
            "add_bias",
            vec![tensor(&[3, 4], 3, false), tensor(&[4], 4, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.add_bias(v[0], v[1])),
        ),
        (
            "add",
            vec![tensor(&[5], 5, false), tensor(&[5], 6, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.add(v[0], v[1])),
        ),
        (
            "scale",
            vec![tensor(&[5], 7, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.scale(v[0], -1.7)),
        ),
        (
            "add_scalar",
            vec![tensor(&[5], 8, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.add_scalar(v[0], 0.4)),
        ),
        (
            "relu",
            vec![tensor(&[8], 9, true)],
            Box::new(|t: &mut Tape, v: &[Var]| t.relu(v[0])),
        ),
        (
            "softplus",
            vec![tensor(&[8], 10, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.softplus(v[0])),
        ),
        (
            "conv2d",
            vec![tensor(&[2, 6, 5, 3], 11, false), tensor(&[27, 4], 12, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.conv2d(v[0], v[1], 3, 2, 1)),
        ),
        (
            "reshape",
            vec![tensor(&[2, 3], 13, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.reshape(v[0], &[3, 2])),
        ),
        (
            "mean",
            vec![tensor(&[6], 14, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.mean(v[0])),
        ),
        (
            "mul_const",
            vec![tensor(&[3, 2], 15, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.mul_const(v[0], vec![0.5, -2.0])),
        ),
        (
            "column",
            vec![tensor(&[4, 3], 16, false)],
            Box::new(|t: &mut Tape, v: &[Var]| t.column(v[0], 1)),
        ),
        (
            "crps_loss",
            vec![tensor(&[4], 17, false), tensor(&[4], 18, false)],
            Box::new(move |t: &mut Tape, v: &[Var]| t.crps_loss(v[0], v[1], &targets)),
        ),
    ];
    checks
        .iter()
        .map(|(n, leaves, b)| check_primitive(n, leaves, b.as_ref()))
        .collect()
}

/// Relative error of parameter gradients of the CRPS loss (plus penalty) on sampled coordinates.
fn parameter_check<M: Trainable>(model: &mut M, inputs: &SampleMatrix, y: &[f64], per_tensor: usize) -> f64 {
    let idx: Vec<usize> = (0..inputs.n()).collect();
    let x = model.batch_tensor(inputs, &idx);
    let loss_of = |m: &M, grad: bool| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = m.parameters().iter().map(|p| tape.leaf(p.clone())).collect();
        let xv = tape.leaf(x.clone());
        let (mu, raw) = m.forward(&mut tape, &vars, xv);
        let loss = tape.crps_loss(mu, raw, y);
        let value = tape.value(loss).data[0];
        let grads = grad.then(|| {
            let mut g = tape.backward(loss);
            let mut out: Vec<Tensor> = vars.iter().map(|v| g.take_or_zero(*v, &tape)).collect();
            let pen = m.penalty(Some(&mut out));
            (out, pen)
        });
        (value + m.penalty(None), grads)
    };
    let (_, g) = loss_of(model, true);
    let (analytic, _) = g.unwrap();
    // small enough that ReLU pre-activations do not cross zero
    let h = 1e-7;
    let mut fd_all = Vec::new();
    let mut an_all = Vec::new();
    let mut r = rng::stream(5, &[0x9a]);
    for t in 0..model.parameters().len() {
        let len = model.parameters()[t].len();
        for _ in 0..per_tensor.min(len) {
            let k = r.random_range(0..len);
            let orig = model.parameters()[t].data[k];
            model.parameters_mut()[t].data[k] = orig + h;
            let fp = loss_of(model, false).0;
            model.parameters_mut()[t].data[k] = orig - h;
            let fm = loss_of(model, false).0;
            model.parameters_mut()[t].data[k] = orig;
            fd_all.push((fp - fm) / (2.0 * h));
            an_all.push(analytic[t].data[k]);
        }
    }
    rel_err(&fd_all, &an_all)
}

/// Relative error of input gradients of every output target on sampled coordinates.
fn input_check(model: &dyn Predictor, x: &SampleMatrix, coords: &[usize]) -> f64 {
    let h = 1e-6;
    let mut fd_all = Vec::new();
    let mut an_all = Vec::new();
    for target in [OutputTarget::Mu, OutputTarget::Sigma, OutputTarget::Exceedance(0.5)] {
        let g = model.input_gradients(x, target).unwrap();
        for i in 0..x.n() {
            for &k in coords {
                let mut plus = x.row(i).to_vec();
                let mut minus = plus.clone();
                plus[k] += h;
                minus[k] -= h;
                let fp = target.evaluate(&model.predict(&plus).unwrap());
                let fm = target.evaluate(&model.predict(&minus).unwrap());
                fd_all.push((fp - fm) / (2.0 * h));
                an_all.push(g.row(i)[k]);
            }
        }
    }
    rel_err(&fd_all, &an_all)
}

fn jitter<M: Trainable>(m: &mut M, seed: u64, amount: f64) {
    let mut r = rng::stream(seed, &[0x6a]);
    for p in m.parameters_mut() {
        for v in &mut p.data {
            *v += amount * r.random_range(-1.0..1.0);
        }
    }
}

fn autodiff_integrity() -> Outcome {
    let start = Instant::now();
    let mut failures = Vec::new();
    let mut worst: f64 = 0.0;
    let mut record = |name: &str, err: f64| {
        worst = worst.max(err);
        if !(err < 1e-4) {
            failures.push(format!("{name} {err:.1e}"));
        }
    };
    for (name, err) in primitive_checks() {
        record(&name, err);
    }

    let (h, w) = (8, 16);
    let d = 2 * h * w;
    let x = normal_rows(6, d, 1);
    let y: Vec<f64> = (0..6).map(|k| k as f64 * 0.4 - 1.0).collect();
    let coords: Vec<usize> = (0..d).step_by(9).collect();
    let init = OutputInit { mean: 0.1, std: 1.1 };

    let cfg = IinnConfig {
        epsilon: 0.05,
        ..IinnConfig::default()
    };
    let mut iinn = IinnModel::new(h, w, vec![1.0, 1.0], cfg, init, &mut rng::stream(2, &[])).unwrap();
    jitter(&mut iinn, 3, 0.2);
    record("iinn params", parameter_check(&mut iinn, &x, &y, 40));
    record("iinn inputs", input_check(&iinn, &x, &coords));

    let sm_cells: Vec<usize> = (0..h * w).filter(|c| (c / w) % 3 == 1).collect();
    let (mut scat, prepared) = ScatNetModel::new(
        h,
        w,
        sm_cells,
        ScatNetConfig::default(),
        &x,
        init,
        &mut rng::stream(4, &[]),
    )
    .unwrap();
    jitter(&mut scat, 5, 0.2);
    record("scatnet head params", parameter_check(&mut scat, &prepared, &y, 60));
    record("scatnet inputs", input_check(&scat, &x, &coords));

    // desk-scale CNN: about 50k trainable parameters on the 32x64 grid
    let (ch, cw) = (32, 64);
    let cnn_cfg = CnnConfig {
        dense: 40,
        ..CnnConfig::default()
    };
    let mut cnn = CnnModel::new(ch, cw, vec![1.0; ch * cw], cnn_cfg, init, &mut rng::stream(6, &[])).unwrap();
    let cx = normal_rows(2, 2 * ch * cw, 7);
    let n_params = cnn.parameter_count().0;
    record("cnn params", parameter_check(&mut cnn, &cx, &y[..2], 40));
    let ccoords: Vec<usize> = (0..2 * ch * cw).step_by(97).collect();
    record("cnn inputs", input_check(&cnn, &cx, &ccoords));

    let t = start.elapsed();
    let pass = failures.is_empty() && secs(t) < 60.0;
    Outcome::new(
        pass,
        format!(
            "13 primitives + 3 models (cnn {n_params} params), max rel err {worst:.1e}{}, {:.1} s",
            if failures.is_empty() {
                String::new()
            } else {
                format!(" [{}]", failures.join(", "))
            },
            secs(t)
        ),
    )
}

// ------------------------------------------------------------------ 3

/// Dense least squares via Gaussian elimination with partial pivoting on the normal equations.
fn dense_ols(x: &SampleMatrix, a: &[f64]) -> Vec<f64> {
    let d = x.d();
    let mut m = vec![0.0; d * (d + 1)];
    for row in x.rows().zip(a) {
        let (r, y) = row;
        for i in 0..d {
            for j in 0..d {
                m[i * (d + 1) + j] += r[i] * r[j];
            }
            m[i * (d + 1) + d] += r[i] * y;
        }
    }
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&p, &q| m[p * (d + 1) + col].abs().total_cmp(&m[q * (d + 1) + col].abs()))
            .unwrap();
        for k in 0..=d {
            m.swap(col * (d + 1) + k, piv * (d + 1) + k);
        }
        for row in 0..d {
            if row != col {
                let f = m[row * (d + 1) + col] / m[col * (d + 1) + col];
                for k in col..=d {
                    m[row * (d + 1) + k] -= f * m[col * (d + 1) + k];
                }
            }
        }
    }
    (0..d).map(|i| m[i * (d + 1) + d] / m[i * (d + 1) + i]).collect()
}

fn sigma_of(x: &SampleMatrix, a: &[f64], m: &[f64]) -> f64 {
    let n = a.len() as f64;
    let f: Vec<f64> = x.rows().map(|r| dot(r, m)).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n;
    let (ma, mf) = (mean(a), mean(&f));
    let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
    let vf = f.iter().map(|v| (v - mf).powi(2)).sum::<f64>() / n;
    (va - (dot(&f, a) / n).powi(2) / vf).sqrt()
}

fn ga_oracle() -> Outcome {
    let cfg = GeneratorConfig {
        n_lat: 10,
        n_lon: 10,
        n_years: 10,
        days_per_season: 64,
        region: RegionBox {
            lat_min: 40.0,
            lat_max: 60.0,
            lon_min: -40.0,
            lon_max: 40.0,
        },
        ..GeneratorConfig::default()
    };
    let ds = generate_dataset(&cfg).unwrap();
    let n = 500;
    let cells = 100;
    let mut data = Vec::with_capacity(n * cells);
    for k in 0..n {
        let t = ds
            .z500
            .position(ds.targets.year[k], ds.targets.day_of_season[k])
            .unwrap();
        data.extend_from_slice(ds.z500.snapshot(t));
    }
    // centre each column
    for c in 0..cells {
        let mean = (0..n).map(|i| data[i * cells + c]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| data[i * cells + c] -= mean);
    }
    let x = SampleMatrix::new(n, cells, data).unwrap();
    let a = &ds.targets.values[..n];
    let model = fit_ga(&x, a, 0.0, GaOptions::new(10, 10, 1)).unwrap();
    let ols = dense_ols(&x, a);
    let diff: Vec<f64> = model.pattern.iter().zip(&ols).map(|(p, q)| p - q).collect();
    let m_err = norm(&diff) / norm(&ols);
    let s_ref = sigma_of(&x, a, &ols);
    let s_err = (model.sigma - s_ref).abs() / s_ref;

    // single pixel: sigma^2 = Var[A] (1 - rho^2)
    let px: Vec<f64> = x.rows().map(|r| r[45]).collect();
    let x1 = SampleMatrix::new(n, 1, px.clone()).unwrap();
    let one = fit_ga(&x1, a, 0.0, GaOptions::new(1, 1, 1)).unwrap();
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / nf;
    let vx = px.iter().map(|v| v * v).sum::<f64>() / nf;
    let cov = px.iter().zip(a).map(|(p, v)| p * (v - ma)).sum::<f64>() / nf;
    let rho2 = cov * cov / (vx * va);
    let uni_err = (one.sigma.powi(2) - va * (1.0 - rho2)).abs();
    let slope_err = (one.pattern[0] - cov / vx).abs();
    Outcome::new(
        m_err < 1e-8 && s_err < 1e-8 && uni_err < 1e-10 && slope_err < 1e-10,
        format!(
            "N={n}, d={cells}: pattern rel err {m_err:.1e}, sigma rel err {s_err:.1e}; one pixel |dsigma^2| {uni_err:.1e}, |dslope| {slope_err:.1e}"
        ),
    )
}

// ------------------------------------------------------------------ 4

fn scattering_contract() -> Outcome {
    let start = Instant::now();
    let (h, w) = (32, 64);
    let bank = build_filter_bank(3, 8, h, w).unwrap();
    let mut notes = Vec::new();
    let channels = bank.channel_count(1);
    let mut pass = channels == 25;
    notes.push(format!("channels {channels}"));

    let zero = bank.scatter(&vec![0.0; h * w], 1).unwrap();
    let zero_ok = zero.values.iter().all(|v| *v == 0.0);
    let c = bank.scatter(&vec![3.0; h * w], 1).unwrap();
    let mut const_err: f64 = 0.0;
    for (k, p) in c.paths.iter().enumerate() {
        for v in c.channel(k) {
            const_err = const_err.max(if p.order() == 0 { (v - 3.0).abs() } else { v.abs() });
        }
    }
    pass &= zero_ok && const_err < 1e-6;
    notes.push(format!(
        "zero {}, constant err {const_err:.1e}",
        if zero_ok { "ok" } else { "FAIL" }
    ));

    let x: Vec<f64> = normal_rows(1, h * w, 40).row(0).to_vec();
    let shift = 8;
    let xs: Vec<f64> = (0..h * w).map(|p| x[(p / w) * w + (p % w + w - shift) % w]).collect();
    let (a, b) = (bank.scatter(&x, 1).unwrap(), bank.scatter(&xs, 1).unwrap());
    let scale = a.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut shift_err: f64 = 0.0;
    for i in 0..a.height {
        for j in 0..a.width {
            for ch in 0..a.channels() {
                shift_err = shift_err.max((b.at(i, (j + 1) % a.width, ch) - a.at(i, j, ch)).abs() / scale);
            }
        }
    }
    pass &= shift_err < 1e-3;
    notes.push(format!("shift err {shift_err:.1e}"));

    let kappa = bank.frame_bound();
    pass &= (0.5..=1.05).contains(&kappa);
    notes.push(format!("frame bound {kappa:.4}"));

    // pooled coefficients rescaled by the 2^J x 2^J subsampling factor
    let pool = (1u64 << (2 * 3)) as f64;
    let mut worst_ratio: f64 = 0.0;
    for k in 0..100 {
        let u = normal_rows(2, h * w, 100 + k);
        let (su, sv) = (bank.scatter(u.row(0), 1).unwrap(), bank.scatter(u.row(1), 1).unwrap());
        let ds: f64 = su
            .values
            .iter()
            .zip(&sv.values)
            .map(|(p, q)| (p - q).powi(2))
            .sum::<f64>()
            * pool;
        let dx: f64 = u.row(0).iter().zip(u.row(1)).map(|(p, q)| (p - q).powi(2)).sum();
        worst_ratio = worst_ratio.max((ds / dx).sqrt());
    }
    pass &= worst_ratio <= kappa;
    notes.push(format!("max |Sx-Sy|/|x-y| {worst_ratio:.3}"));

    let t = start.elapsed();
    pass &= secs(t) < 120.0;
    notes.push(format!("{:.1} s", secs(t)));
    Outcome::new(pass, notes.join(", "))
}

// ------------------------------------------------------------------ 5

fn attribution_completeness() -> Outcome {
    let start = Instant::now();
    let (h, w) = (16, 32);
    let d = 2 * h * w;
    let background = normal_rows(200, d, 50);
    let inputs = normal_rows(5, d, 51);

    // GA: exact
    let pattern: Vec<f64> = (0..d).map(|k| ((k * 13 % 7) as f64 - 3.0) * 0.01).collect();
    let ga = GaModel {
        pattern,
        sigma: 1.0,
        epsilon: 0.0,
        n_lat: h,
        n_lon: w,
        channels: 2,
    };
    let eg = |n: usize| ExpectedGradientsConfig {
        n_samples: n,
        target: OutputTarget::Mu,
        antithetic: false,
    };
    let mut ga_res: f64 = 0.0;
    for i in 0..inputs.n() {
        let m = expected_gradients(
            &ga,
            inputs.row(i),
            &background,
            &eg(256),
            &mut rng::stream(1, &[i as u64]),
        )
        .unwrap();
        ga_res = ga_res.max(m.completeness_residual().abs());
    }

    // CNN fitted by the experiment pipeline; background and inputs from its first fold
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "data": {"synthetic": {"n_lat": 16, "n_lon": 32, "n_years": 30, "nonlinear_gain": 1.0}},
        "n_folds": 2,
        "models": [{"kind": "cnn"}],
        "seed": 5
    }))
    .unwrap();
    let raw = load_data(&cfg.data).unwrap();
    let run = run_with_data(&cfg, &raw, None).unwrap();
    let fold = &run.folds[0];
    let cnn = &run.results[0].folds[0].model;
    let background = fold.train.x.select_rows(
        &(0..fold.train.x.n())
            .step_by((fold.train.x.n() / 512).max(1))
            .collect::<Vec<_>>(),
    );
    let picks: Vec<usize> = (0..5).map(|k| k * fold.test.x.n() / 5).collect();
    let inputs = fold.test.x.select_rows(&picks);
    let cnn = cnn.as_predictor();

    let sizes = [64usize, 256, 1024];
    let seeds = 10;
    let mut rel_at_256 = Vec::new();
    let mut spread = [0.0; 3];
    for i in 0..inputs.n() {
        for (si, &n) in sizes.iter().enumerate() {
            let res: Vec<f64> = (0..seeds)
                .map(|s| {
                    let m = expected_gradients(
                        cnn,
                        inputs.row(i),
                        &background,
                        &eg(n),
                        &mut rng::stream(s, &[i as u64, n as u64]),
                    )
                    .unwrap();
                    if n == 256 {
                        rel_at_256.push(m.completeness_residual().abs() / (m.output - m.baseline_expectation).abs());
                    }
                    m.completeness_residual()
                })
                .collect();
            let mean = res.iter().sum::<f64>() / seeds as f64;
            let sd = (res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (seeds - 1) as f64).sqrt();
            spread[si] += sd / inputs.n() as f64;
        }
    }
    let mean_rel = rel_at_256.iter().sum::<f64>() / rel_at_256.len() as f64;
    // log-log slope of residual spread against sample count
    let lx: Vec<f64> = sizes.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = spread.iter().map(|s| s.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 3.0, ly.iter().sum::<f64>() / 3.0);
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>()
        / lx.iter().map(|a| (a - mx).powi(2)).sum::<f64>();
    let t = start.elapsed();
    Outcome::new(
        ga_res < 1e-10 && mean_rel < 0.02 && (-0.75..=-0.3).contains(&slope),
        format!(
            "GA residual {ga_res:.1e}; CNN mean relative residual at 256 samples {:.2}%, spread {:.2e}/{:.2e}/{:.2e} for n=64/256/1024 (slope {slope:.2}), {:.1} s",
            100.0 * mean_rel,
            spread[0],
            spread[1],
            spread[2],
            secs(t)
        ),
    )
}

// ------------------------------------------------------------------ 6

fn optimal_input_check() -> Outcome {
    let (h, w) = (16, 32);
    let d = 2 * h * w;
    let x = normal_rows(600, d, 60);
    // smooth target pattern, fitted with a roughness penalty
    let truth: Vec<f64> = (0..d)
        .map(|k| {
            let (i, j) = ((k % (h * w)) / w, k % w);
            ((i as f64 / 4.0).sin() * (j as f64 / 5.0).cos()) * if k < h * w { 1.0 } else { 0.3 }
        })
        .collect();
    let mut r = rng::stream(61, &[]);
    let a: Vec<f64> = x
        .rows()
        .map(|row| {
            dot(row, &truth) / 10.0 + 0.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)
        })
        .collect();
    let ga = fit_ga(&x, &a, 10.0, GaOptions::new(h, w, 2)).unwrap();
    let cfg = OptimalInputConfig {
        lambda2: 100.0,
        lambda_r: 0.0,
        lambda_orth: 0.0,
        n0: 28.0,
        steps: 200000,
        ..OptimalInputConfig::reference()
    };
    let s0: Vec<f64> = x.row(0).iter().map(|v| v * 1e-3).collect();
    let out = optimal_input(&ga, &s0, h, w, &cfg, None).unwrap();
    let cos = dot(&out.input, &ga.pattern) / (norm(&out.input) * norm(&ga.pattern));
    let norm_err = (out.norm - cfg.n0).abs() / cfg.n0;
    Outcome::new(
        out.converged && cos > 0.999 && norm_err < 0.01,
        format!(
            "converged {} after {} steps, cosine {cos:.6}, |S| = {:.4} (n0 {}, rel diff {:.1e})",
            out.converged,
            out.trace.len() - 1,
            out.norm,
            cfg.n0,
            norm_err
        ),
    )
}

// ------------------------------------------------------------------ 7

fn band_aggregates() -> Outcome {
    let start = Instant::now();
    let seeds = [1u64, 2, 3];
    let mut mean_scales = [0.0; 3];
    let mut worst_total: f64 = 0.0;
    let mut min_fraction = f64::INFINITY;
    let mut j_star = 0;
    for &seed in &seeds {
        let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
            "data": {"synthetic": {"n_years": 40, "nonlinear_gain": 1.0, "seed": seed}},
            "n_folds": 2,
            "models": [{"kind": "scatnet"}],
            "seed": seed,
        }))
        .unwrap();
        let heatcast::harness::DataSource::Synthetic(g) = &cfg.data else {
            unreachable!()
        };
        let ds = generate_dataset(g).unwrap();
        j_star = ds.truth.band_scale;
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let band: Vec<f64> = ds.band_term.iter().map(|b| b * g.nonlinear_gain).collect();
        min_fraction = min_fraction.min(var(&band) / var(&ds.targets.values));

        let raw = load_data(&cfg.data).unwrap();
        let out = run_with_data(&cfg, &raw, None).unwrap();
        for (fold, fitted) in out.results[0].folds.iter().enumerate() {
            let CheckpointModel::ScatNet(m) = &fitted.model else {
                unreachable!()
            };
            let fi = scatnet_feature_importance(m, &out.folds[fold].test.x).unwrap();
            worst_total = worst_total.max((fi.aggregates.total() - 100.0).abs());
            assert!(fi.paths.iter().all(|p| p.order() <= 1
                && *p
                    != ScatPath::Two {
                        j1: 0,
                        l1: 0,
                        j2: 0,
                        l2: 0
                    }));
            for (acc, v) in mean_scales.iter_mut().zip(&fi.aggregates.scales) {
                *acc += v / (seeds.len() * out.folds.len()) as f64;
            }
        }
    }
    let dominant = mean_scales
        .iter()
        .enumerate()
        .all(|(j, v)| j == j_star || mean_scales[j_star] > *v);
    let t = start.elapsed();
    Outcome::new(
        worst_total < 1e-9 && min_fraction >= 0.2 && dominant,
        format!(
            "band term >= {:.0}% of Var[A]; order-1 scale aggregates {:?}% (planted j = {j_star}); |sum - 100| <= {worst_total:.1e}; {:.1} s",
            100.0 * min_fraction,
            mean_scales.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>(),
            secs(t)
        ),
    )
}

// ------------------------------------------------------------------ 8

fn hierarchy() -> Outcome {
    let start = Instant::now();
    let cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "data": {"synthetic": {"nonlinear_gain": 1.0}},
        "n_folds": 5,
        "models": [
            {"kind": "ga", "epsilons": [0.1, 1, 10, 100, 1000]},
            {"kind": "scatnet"},
            {"kind": "scatnet_coarse"}
        ]
    }))
    .unwrap();
    let raw = load_data(&cfg.data).unwrap();
    let full = run_with_data(&cfg, &raw, None).unwrap();
    let crpss = |label: &str| {
        full.manifest
            .models
            .iter()
            .find(|m| m.label == label)
            .unwrap()
            .test_skills
            .crpss
            .mean
    };
    let (ga, scat, coarse) = (crpss("ga"), crpss("scatnet"), crpss("scatnet_coarse"));

    let reduced_cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "data": {"synthetic": {"nonlinear_gain": 1.0}},
        "n_folds": 5,
        "reduced_years": 10,
        "models": [
            {"kind": "ga", "epsilons": [0.1, 1, 10, 100, 1000]},
            {"kind": "cnn"}
        ]
    }))
    .unwrap();
    let reduced = run_with_data(&reduced_cfg, &raw, None).unwrap();
    let bces = |label: &str| {
        reduced
            .manifest
            .models
            .iter()
            .find(|m| m.label == label)
            .unwrap()
            .test_skills
            .bces
            .mean
    };
    let (ga_b, cnn_b) = (bces("ga"), bces("cnn"));
    let t = start.elapsed();
    let pass = scat - ga >= 0.02 && (coarse - ga).abs() <= 0.01 && ga_b >= cnn_b && secs(t) < 900.0;
    Outcome::new(
        pass,
        format!(
            "CRPSS ga {ga:.4}, scatnet {scat:.4} (+{:.4}), scatnet_coarse {coarse:.4} ({:+.4}); reduced BCES ga {ga_b:.4} vs cnn {cnn_b:.4}; {:.0} s on {} thread(s)",
            scat - ga,
            coarse - ga,
            secs(t),
            rayon::current_num_threads()
        ),
    )
}

// ------------------------------------------------------------------ 9

fn small_config() -> ExperimentConfig {
    serde_json::from_value(serde_json::json!({
        "data": {"synthetic": {"n_lat": 16, "n_lon": 32, "n_years": 20, "days_per_season": 40, "nonlinear_gain": 0.5}},
        "n_folds": 3,
        "models": [
            {"kind": "ga", "epsilons": [1, 10, 100]},
            {"kind": "iinn", "params": {"max_epochs": 3}},
            {"kind": "scatnet", "params": {"max_epochs": 3}},
            {"kind": "cnn", "params": {"max_epochs": 2}}
        ],
        "explain": {"n_inputs": 2, "eg_samples": 32, "n_optimal_inputs": 2, "optimal_input": {"steps": 100}},
        "seed": 9
    }))
    .unwrap()
}

/// Add noise to every channel on the test years only.
fn perturb_test_years(raw: &RawData, test_years: &[i32]) -> RawData {
    let bump = |s: &FieldSeries, amount: f64, seed: u64| {
        let cells = s.grid().n_cells();
        let mut r = rng::stream(seed, &[]);
        let mut values = s.values().to_vec();
        for (t, chunk) in values.chunks_mut(cells).enumerate() {
            if test_years.contains(&s.year()[t]) {
                chunk.iter_mut().for_each(|v| {
                    *v += amount * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r)
                });
            }
        }
        FieldSeries::new(
            s.grid().clone(),
            values,
            s.year().to_vec(),
            s.day_of_season().to_vec(),
            s.days_per_season(),
        )
        .unwrap()
    };
    RawData {
        z500: bump(&raw.z500, 50.0, 1),
        sm: bump(&raw.sm, 0.05, 2),
        t2m: bump(&raw.t2m, 3.0, 3),
        ..raw.clone()
    }
}

fn leakage_and_determinism() -> Outcome {
    let start = Instant::now();
    let mut cfg = small_config();
    cfg.explain = None;
    let raw = load_data(&cfg.data).unwrap();
    let base = run_with_data(&cfg, &raw, None).unwrap();
    let perturbed_raw = perturb_test_years(&raw, &base.manifest.test_years);
    let perturbed = run_with_data(&cfg, &perturbed_raw, None).unwrap();
    let mut compared = 0usize;
    let mut identical = true;
    for (a, b) in base.results.iter().zip(&perturbed.results) {
        identical &= a.selected_epsilon == b.selected_epsilon;
        for (fa, fb) in a.folds.iter().zip(&b.folds) {
            for (ta, tb) in fa.model.tensors().iter().zip(fb.model.tensors()) {
                compared += ta.len();
                identical &= ta.data.iter().zip(&tb.data).all(|(x, y)| x.to_bits() == y.to_bits());
            }
        }
    }
    let test_changed = base.manifest.models[0].test_skills != perturbed.manifest.models[0].test_skills;

    let full = small_config();
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&full, d1.path()).unwrap();
    run_experiment(&full, d2.path()).unwrap();
    let m1 = std::fs::read(d1.path().join("manifest.json")).unwrap();
    let m2 = std::fs::read(d2.path().join("manifest.json")).unwrap();
    let same_manifest = m1 == m2;
    let t = start.elapsed();
    Outcome::new(
        identical && test_changed && same_manifest,
        format!(
            "{compared} fitted parameters {} after perturbing test years (test skills {}); manifests ({} bytes) {}; {:.1} s",
            if identical { "bitwise unchanged" } else { "CHANGED" },
            if test_changed { "changed" } else { "unchanged" },
            m1.len(),
            if same_manifest { "bitwise identical" } else { "DIFFER" },
            secs(t)
        ),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; only a name filter is honoured.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "CRPS closed form vs quadrature", crps_quadrature),
        (2, "autodiff gradient checks", autodiff_integrity),
        (3, "GA vs dense least squares", ga_oracle),
        (4, "scattering contract", scattering_contract),
        (5, "attribution completeness", attribution_completeness),
        (6, "optimal input vs norm-constrained maximiser", optimal_input_check),
        (7, "feature-importance aggregates", band_aggregates),
        (8, "model hierarchy orderings", hierarchy),
        (9, "leakage and determinism", leakage_and_determinism),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        if filter
            .as_ref()
            .is_some_and(|f| !name.contains(f.as_str()) && *f != id.to_string())
        {
            continue;
        }
        let outcome = run();
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} [{name}]: {verdict} - {}", outcome.detail);
        if !outcome.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}
