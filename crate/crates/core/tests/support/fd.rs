//! Central finite-difference checks for every differentiable op and every
//! distribution log-density.

use effectppl::distributions::Distribution;
use effectppl::random::RandomStream;
use effectppl::tensor::Tensor;

pub type Program = Box<dyn Fn(&[Tensor]) -> Tensor>;

/// Largest relative gradient error tolerated.
pub const TOLERANCE: f64 = 1e-4;

/// `|a - n| / max(1, |a|, |n|)`: relative for large gradients, absolute
/// near zero where a relative measure is meaningless.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Worst error over all input elements between backward() and central
/// differences of `f`. Non-scalar outputs are contracted with fixed random
/// weights so every output element contributes.
pub fn max_grad_error(f: &dyn Fn(&[Tensor]) -> Tensor, inputs: &[Tensor], rng: &mut RandomStream) -> f64 {
    let probe = f(inputs);
    let weights = Tensor::new(rng.uniform_vec(probe.numel()).iter().map(|u| 0.5 + u).collect(), probe.shape()).unwrap();
    let scalar = |xs: &[Tensor]| f(xs).mul(&weights).unwrap().sum();

    let leaves: Vec<Tensor> = inputs.iter().map(|t| t.detach().requires_grad_leaf()).collect();
    scalar(&leaves).backward().unwrap();

    let mut worst = 0.0f64;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        for j in 0..leaf.numel() {
            let x = inputs[i].data()[j];
            let h = 1e-6 * x.abs().max(1.0);
            let eval = |v: f64| {
                let mut shifted: Vec<Tensor> = inputs.iter().map(|t| t.detach()).collect();
                let mut data = shifted[i].to_vec();
                data[j] = v;
                shifted[i] = Tensor::new(data, inputs[i].shape()).unwrap();
                scalar(&shifted).item()
            };
            let numeric = (eval(x + h) - eval(x - h)) / (2.0 * h);
            worst = worst.max(rel_error(analytic[j], numeric));
        }
    }
    worst
}

fn uniform_tensor(rng: &mut RandomStream, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(rng.uniform_vec(n).iter().map(|u| lo + (hi - lo) * u).collect(), shape).unwrap()
}

fn normal_tensor(rng: &mut RandomStream, shape: &[usize]) -> Tensor {
    Tensor::new(rng.normal_vec(shape.iter().product()), shape).unwrap()
}

/// Values bounded away from zero with a random sign.
fn nonzero_tensor(rng: &mut RandomStream, shape: &[usize]) -> Tensor {
    let t = uniform_tensor(rng, shape, 0.5, 2.0);
    let signs: Vec<f64> = t.data().iter().map(|v| if rng.uniform() < 0.5 { -v } else { *v }).collect();
    Tensor::new(signs, shape).unwrap()
}

/// Values at least `gap` away from each of `kinks`.
fn away_from(rng: &mut RandomStream, shape: &[usize], kinks: &[f64], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = 2.0 * rng.standard_normal();
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            out.push(v);
        }
    }
    Tensor::new(out, shape).unwrap()
}

/// Random batch dims for one case.
fn dims(rng: &mut RandomStream) -> (usize, usize) {
    (1 + (rng.uniform() * 3.0) as usize, 1 + (rng.uniform() * 4.0) as usize)
}

pub struct GradCase {
    pub name: &'static str,
    /// Builds inputs and the program for one randomized case.
    pub build: fn(&mut RandomStream) -> (Vec<Tensor>, Program),
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let e = logits.exp();
    let rows = e.shape()[0];
    e.div(&e.sum_axis(1).unwrap().reshape(&[rows, 1]).unwrap()).unwrap()
}

pub fn cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "add (broadcast)", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n]), normal_tensor(r, &[n])], Box::new(|x| x[0].add(&x[1]).unwrap()))
        }},
        GradCase { name: "sub (broadcast)", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, 1]), normal_tensor(r, &[m, n])], Box::new(|x| x[0].sub(&x[1]).unwrap()))
        }},
        GradCase { name: "mul (broadcast)", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n]), normal_tensor(r, &[])], Box::new(|x| x[0].mul(&x[1]).unwrap()))
        }},
        GradCase { name: "div (broadcast)", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n]), nonzero_tensor(r, &[n])], Box::new(|x| x[0].div(&x[1]).unwrap()))
        }},
        GradCase { name: "neg", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n])], Box::new(|x| x[0].neg()))
        }},
        GradCase { name: "exp", build: |r| {
            let (m, n) = dims(r);
            (vec![uniform_tensor(r, &[m, n], -2.0, 2.0)], Box::new(|x| x[0].exp()))
        }},
        GradCase { name: "log", build: |r| {
            let (m, n) = dims(r);
            (vec![uniform_tensor(r, &[m, n], 0.2, 3.0)], Box::new(|x| x[0].log().unwrap()))
        }},
        GradCase { name: "sqrt", build: |r| {
            let (m, n) = dims(r);
            (vec![uniform_tensor(r, &[m, n], 0.2, 3.0)], Box::new(|x| x[0].sqrt().unwrap()))
        }},
        GradCase { name: "sigmoid", build: |r| {
            let (m, n) = dims(r);
            (vec![uniform_tensor(r, &[m, n], -6.0, 6.0)], Box::new(|x| x[0].sigmoid()))
        }},
        GradCase { name: "tanh", build: |r| {
            let (m, n) = dims(r);
            (vec![uniform_tensor(r, &[m, n], -3.0, 3.0)], Box::new(|x| x[0].tanh()))
        }},
        GradCase { name: "softplus", build: |r| {
            let (m, n) = dims(r);
            (vec![uniform_tensor(r, &[m, n], -8.0, 8.0)], Box::new(|x| x[0].softplus()))
        }},
        GradCase { name: "square", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n])], Box::new(|x| x[0].square()))
        }},
        GradCase { name: "clamp", build: |r| {
            let (m, n) = dims(r);
            (vec![away_from(r, &[m, n], &[-0.5, 0.75], 1e-3)], Box::new(|x| x[0].clamp(-0.5, 0.75)))
        }},
        GradCase { name: "add_scalar/mul_scalar", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n])], Box::new(|x| x[0].add_scalar(1.5).mul_scalar(-2.5)))
        }},
        GradCase { name: "sum", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n])], Box::new(|x| x[0].square().sum()))
        }},
        GradCase { name: "mean", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n])], Box::new(|x| x[0].square().mean()))
        }},
        GradCase { name: "sum_axis", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n])], Box::new(|x| x[0].square().sum_axis(0).unwrap().mul(&x[0].sum_axis(0).unwrap()).unwrap()))
        }},
        GradCase { name: "mean_axis", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n])], Box::new(|x| x[0].exp().mean_axis(1).unwrap()))
        }},
        GradCase { name: "matmul", build: |r| {
            let (m, k) = dims(r);
            let n = 1 + (r.uniform() * 4.0) as usize;
            (vec![normal_tensor(r, &[m, k]), normal_tensor(r, &[k, n])], Box::new(|x| x[0].matmul(&x[1]).unwrap()))
        }},
        GradCase { name: "broadcast_to", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[1, n])], Box::new(move |x| x[0].broadcast_to(&[m, n]).unwrap().square()))
        }},
        GradCase { name: "reshape", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n])], Box::new(move |x| x[0].reshape(&[n, m]).unwrap().tanh()))
        }},
        GradCase { name: "transpose", build: |r| {
            let (m, n) = dims(r);
            (vec![normal_tensor(r, &[m, n]), normal_tensor(r, &[m, 2])], Box::new(|x| x[0].transpose().unwrap().matmul(&x[1]).unwrap()))
        }},
        GradCase { name: "gather_last", build: |r| {
            let (m, n) = dims(r);
            let idx: Vec<usize> = (0..m).map(|_| (r.uniform() * n as f64) as usize).collect();
            (vec![normal_tensor(r, &[m, n])], Box::new(move |x| x[0].square().gather_last(&idx).unwrap()))
        }},
        GradCase { name: "Normal.log_prob", build: |r| {
            let (m, n) = dims(r);
            let inputs = vec![normal_tensor(r, &[m, n]), normal_tensor(r, &[n]), uniform_tensor(r, &[m, n], 0.3, 3.0)];
            (inputs, Box::new(|x| Distribution::normal(&x[1], &x[2]).unwrap().log_prob(&x[0]).unwrap()))
        }},
        GradCase { name: "Bernoulli.log_prob", build: |r| {
            let (m, n) = dims(r);
            let value: Vec<f64> = (0..m * n).map(|_| (r.uniform() < 0.5) as u8 as f64).collect();
            let value = Tensor::new(value, &[m, n]).unwrap();
            (vec![uniform_tensor(r, &[m, n], 0.05, 0.95)], Box::new(move |x| Distribution::bernoulli(&x[0]).unwrap().log_prob(&value).unwrap()))
        }},
        GradCase { name: "Categorical.log_prob", build: |r| {
            let (m, n) = dims(r);
            let k = n + 1;
            let idx: Vec<f64> = (0..m).map(|_| ((r.uniform() * k as f64) as usize) as f64).collect();
            let value = Tensor::from_slice(&idx);
            (vec![normal_tensor(r, &[m, k])], Box::new(move |x| {
                Distribution::categorical(softmax_rows(&x[0])).unwrap().log_prob(&value).unwrap()
            }))
        }},
        GradCase { name: "Uniform.log_prob", build: |r| {
            let (m, _) = dims(r);
            let low = uniform_tensor(r, &[m], -2.0, -1.0);
            let high = uniform_tensor(r, &[m], 1.0, 2.0);
            let value = uniform_tensor(r, &[m], -0.9, 0.9);
            (vec![low, high], Box::new(move |x| Distribution::uniform(&x[0], &x[1]).unwrap().log_prob(&value).unwrap()))
        }},
        GradCase { name: "Normal.rsample (pathwise)", build: |r| {
            let (m, n) = dims(r);
            let seed = r.next_u64();
            (vec![normal_tensor(r, &[m, n]), uniform_tensor(r, &[m, n], 0.3, 3.0)], Box::new(move |x| {
                let mut rng = RandomStream::new(seed);
                Distribution::normal(&x[0], &x[1]).unwrap().rsample(&mut rng).unwrap().square()
            }))
        }},
    ]
}

/// Runs `n` randomized cases per op; returns `(name, worst error)`.
pub fn run_suite(seed: u64, n: usize) -> Vec<(&'static str, f64)> {
    let mut rng = RandomStream::new(seed);
    cases()
        .into_iter()
        .map(|case| {
            let worst = (0..n)
                .map(|_| {
                    let (inputs, program) = (case.build)(&mut rng);
                    max_grad_error(&*program, &inputs, &mut rng)
                })
                .fold(0.0, f64::max);
            (case.name, worst)
        })
        .collect()
}
