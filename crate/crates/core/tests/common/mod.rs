#![allow(dead_code)]

use std::path::Path;

use dfl::experiment::RunConfig;
use dfl::tensor::{Graph, Tensor, Var};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub const FD_EPS: f64 = 1e-5;
pub const FD_REL: f64 = 1e-4;
pub const FD_ABS: f64 = 1e-6;

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values at least `gap` away from zero.
pub fn away_from_zero(rng: &mut StdRng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() > gap {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Pairwise distinct values, consecutive ones `0.01` apart, in random order.
pub fn distinct_values(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    for i in (1..n).rev() {
        data.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Collapses any node to a scalar through a fixed random linear map, so the
/// upstream gradient is not uniform.
pub fn project(g: &mut Graph, v: Var, seed: u64) -> Var {
    let n = g.value(v).len();
    let flat = g.reshape(v, vec![1, n]).unwrap();
    let w = random_tensor(&mut rng(seed), &[n, 1], -1.0, 1.0);
    let w = g.constant(w);
    let y = g.matmul(flat, w).unwrap();
    g.sum(y)
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= FD_ABS || diff <= FD_REL * analytic.abs().max(numeric.abs())
}

/// Compares reverse-mode gradients of `f` against central differences for
/// every element of every input. Returns the number of entries checked.
pub fn gradcheck(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> Result<usize, String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars);
    g.backward(out).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let eval = |values: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item().expect("scalar output")
    };
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_EPS;
            let plus = eval(&work);
            work[i].data_mut()[j] = x0 - FD_EPS;
            let minus = eval(&work);
            work[i].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * FD_EPS);
            let a = analytic[i][j];
            if !close(a, numeric) {
                return Err(format!("input {i} element {j}: analytic {a} vs numeric {numeric}"));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// The desk-scale configuration shipped in `configs/`.
pub fn desk_config(seed: u64, out: &Path) -> RunConfig {
    let mut cfg = RunConfig::parse(include_str!("../../../../configs/desk-synthetic.cfg")).unwrap();
    cfg.seed = seed;
    cfg.out = out.to_path_buf();
    cfg
}

pub mod grads {
    use super::*;
    use dfl::engine::{compute_total_loss, forward_all, init_pool, DflConfig, DistillWeight, ResetMode};
    use dfl::model::{build_model, InitScheme, LayerSpec, Model};
    use dfl::tensor::KL_EPSILON;

    pub type Case = (&'static str, fn() -> Result<usize, String>);

    pub fn op_cases() -> Vec<Case> {
        vec![
            ("matmul", matmul),
            ("add_bias", add_bias),
            ("conv2d", conv2d),
            ("conv2d stride 2", conv2d_strided),
            ("relu", relu),
            ("maxpool2d", maxpool2d),
            ("reshape", reshape),
            ("flatten", flatten),
            ("softmax", softmax),
            ("cross_entropy", cross_entropy),
            ("kl_divergence", kl_divergence),
            ("add", add),
            ("scale", scale),
            ("sum", sum),
        ]
    }

    pub fn loss_cases() -> Vec<Case> {
        vec![
            ("total loss, L=2, mean weight", || mlp_total_loss(2, DistillWeight::MeanOverK)),
            ("total loss, L=1, mean weight", || mlp_total_loss(1, DistillWeight::MeanOverK)),
            ("total loss, L=1, sum weight", || mlp_total_loss(1, DistillWeight::Sum)),
        ]
    }

    fn matmul() -> Result<usize, String> {
        let mut r = rng(1);
        let a = random_tensor(&mut r, &[4, 5], -1.0, 1.0);
        let b = random_tensor(&mut r, &[5, 3], -1.0, 1.0);
        gradcheck(&[a, b], |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            project(g, c, 10)
        })
    }

    fn add_bias() -> Result<usize, String> {
        let mut r = rng(2);
        let x = random_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let b = random_tensor(&mut r, &[4], -1.0, 1.0);
        gradcheck(&[x, b], |g, v| {
            let y = g.add_bias(v[0], v[1]).unwrap();
            project(g, y, 11)
        })
    }

    fn conv2d() -> Result<usize, String> {
        let mut r = rng(3);
        let x = random_tensor(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
        let w = random_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
        let b = random_tensor(&mut r, &[4], -0.5, 0.5);
        gradcheck(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
            project(g, y, 12)
        })
    }

    fn conv2d_strided() -> Result<usize, String> {
        let mut r = rng(4);
        let x = random_tensor(&mut r, &[1, 2, 7, 7], -1.0, 1.0);
        let w = random_tensor(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
        let b = random_tensor(&mut r, &[3], -0.5, 0.5);
        gradcheck(&[x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
            project(g, y, 13)
        })
    }

    fn relu() -> Result<usize, String> {
        let x = away_from_zero(&mut rng(5), &[4, 6], 1e-3);
        gradcheck(&[x], |g, v| {
            let y = g.relu(v[0]);
            project(g, y, 14)
        })
    }

    fn maxpool2d() -> Result<usize, String> {
        let x = distinct_values(&mut rng(6), &[2, 2, 4, 6]);
        gradcheck(&[x], |g, v| {
            let y = g.maxpool2d(v[0], 2, 2).unwrap();
            project(g, y, 15)
        })
    }

    fn reshape() -> Result<usize, String> {
        let x = random_tensor(&mut rng(7), &[2, 6], -1.0, 1.0);
        gradcheck(&[x], |g, v| {
            let y = g.reshape(v[0], vec![3, 4]).unwrap();
            let w = g.constant(random_tensor(&mut rng(70), &[4, 2], -1.0, 1.0));
            let z = g.matmul(y, w).unwrap();
            project(g, z, 16)
        })
    }

    fn flatten() -> Result<usize, String> {
        let x = random_tensor(&mut rng(8), &[2, 3, 2, 2], -1.0, 1.0);
        gradcheck(&[x], |g, v| {
            let y = g.flatten(v[0]).unwrap();
            let w = g.constant(random_tensor(&mut rng(80), &[12, 3], -1.0, 1.0));
            let z = g.matmul(y, w).unwrap();
            project(g, z, 17)
        })
    }

    fn softmax() -> Result<usize, String> {
        let x = random_tensor(&mut rng(9), &[3, 5], -2.0, 2.0);
        gradcheck(&[x], |g, v| {
            let y = g.softmax(v[0]).unwrap();
            project(g, y, 18)
        })
    }

    fn cross_entropy() -> Result<usize, String> {
        let x = random_tensor(&mut rng(10), &[4, 5], -2.0, 2.0);
        gradcheck(&[x], |g, v| g.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap())
    }

    fn kl_divergence() -> Result<usize, String> {
        let mut r = rng(11);
        let a = random_tensor(&mut r, &[3, 4], -2.0, 2.0);
        let b = random_tensor(&mut r, &[3, 4], -2.0, 2.0);
        gradcheck(&[a, b], |g, v| {
            let p = g.softmax(v[0]).unwrap();
            let q = g.softmax(v[1]).unwrap();
            g.kl_divergence(p, q).unwrap()
        })
    }

    fn add() -> Result<usize, String> {
        let mut r = rng(12);
        let a = random_tensor(&mut r, &[3, 3], -1.0, 1.0);
        let b = random_tensor(&mut r, &[3, 3], -1.0, 1.0);
        gradcheck(&[a, b], |g, v| {
            let c = g.add(v[0], v[1]).unwrap();
            let d = g.add(c, v[0]).unwrap();
            project(g, d, 19)
        })
    }

    fn scale() -> Result<usize, String> {
        let x = random_tensor(&mut rng(13), &[2, 5], -1.0, 1.0);
        gradcheck(&[x], |g, v| {
            let y = g.scale(v[0], -0.75);
            project(g, y, 20)
        })
    }

    fn sum() -> Result<usize, String> {
        let x = random_tensor(&mut rng(14), &[7], -1.0, 1.0);
        gradcheck(&[x], |g, v| g.sum(v[0]))
    }

    fn softmax_row(z: &[f64]) -> Vec<f64> {
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    /// Cross-entropy plus weighted KL to fixed teacher distributions, in
    /// plain arithmetic.
    fn reference_loss(logits: &Tensor, labels: &[usize], teachers: &[Tensor], w: f64) -> f64 {
        let c = logits.shape()[1];
        let b = labels.len() as f64;
        let mut ce = 0.0;
        let mut kl = vec![0.0; teachers.len()];
        for (i, row) in logits.data().chunks(c).enumerate() {
            let p = softmax_row(row);
            ce -= p[labels[i]].ln();
            for (k, q) in teachers.iter().enumerate() {
                let q = &q.data()[i * c..(i + 1) * c];
                for (pi, qi) in p.iter().zip(q) {
                    if *pi > 0.0 {
                        kl[k] += pi * (pi.max(KL_EPSILON).ln() - qi.max(KL_EPSILON).ln());
                    }
                }
            }
        }
        ce / b + w * kl.iter().map(|v| v / b).sum::<f64>()
    }

    /// Gradient of the full objective on a two-layer perceptron with two
    /// teachers. Teacher distributions are held at their unperturbed values,
    /// which is what detaching them means.
    fn mlp_total_loss(head_len: usize, weight: DistillWeight) -> Result<usize, String> {
        let specs = [LayerSpec::dense(4, 6), LayerSpec::Relu, LayerSpec::dense(6, 3)];
        let model = build_model(&[4], &specs, head_len, InitScheme::default(), 11).unwrap();
        let pool = init_pool(&model, 2, 5).unwrap();
        let x = random_tensor(&mut rng(3), &[5, 4], -1.0, 1.0);
        let labels = [0, 1, 2, 1, 0];
        let mut cfg = DflConfig::cycle(2, 5, head_len, ResetMode::Mean);
        cfg.distill_weight = weight;

        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let xv = g.constant(x.clone());
        let fwd = forward_all(&mut g, &model, &vars, &pool, xv).map_err(|e| e.to_string())?;
        let loss = compute_total_loss(&mut g, &fwd, &labels, &cfg).map_err(|e| e.to_string())?;
        g.backward(loss.total).map_err(|e| e.to_string())?;
        let analytic: Vec<Vec<f64>> = vars
            .iter()
            .zip(model.params())
            .map(|(v, p)| g.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect();
        let q: Vec<Tensor> = fwd.teacher_probs.iter().map(|&v| g.value(v).clone()).collect();
        let w = cfg.weight();

        let eval = |m: &Model| reference_loss(&m.predict(&x).unwrap(), &labels, &q, w);
        let value = g.value(loss.total).item().unwrap();
        if (value - eval(&model)).abs() > 1e-12 {
            return Err(format!("loss value {value} vs reference {}", eval(&model)));
        }
        let mut checked = 0;
        let mut work = model.clone();
        for (i, grads) in analytic.iter().enumerate() {
            for (j, &a) in grads.iter().enumerate() {
                let x0 = model.params().nth(i).unwrap().data()[j];
                let mut set = |v: f64| work.params_mut().nth(i).unwrap().data_mut()[j] = v;
                set(x0 + FD_EPS);
                let plus = eval(&work);
                let mut set = |v: f64| work.params_mut().nth(i).unwrap().data_mut()[j] = v;
                set(x0 - FD_EPS);
                let minus = eval(&work);
                work.params_mut().nth(i).unwrap().data_mut()[j] = x0;
                let numeric = (plus - minus) / (2.0 * FD_EPS);
                if !close(a, numeric) {
                    return Err(format!("param {i} element {j}: analytic {a} vs numeric {numeric}"));
                }
                checked += 1;
            }
        }
        Ok(checked)
    }
}
