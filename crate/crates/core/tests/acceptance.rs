//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any fails.
//!
//! `cargo test -p zodarts --test acceptance -- 3 5` runs only criteria 3 and 5.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use zodarts::autodiff::{Eager, Graph, Tape, Var};
use zodarts::bilevel::{implicit_gradient_exact, zo_round, QuadraticBilevel};
use zodarts::checkpoint::{encode_search, load_search, save_search};
use zodarts::config::{DataConfig, RunConfig};
use zodarts::data::{Dataset, SyntheticKind, SyntheticSpec};
use zodarts::eval::{
    derive_size_tiers, evaluation_campaign, materialize, retrain_with_discard, sample_architecture, sample_sizes,
    CampaignInput, DiscardReason, DiscardRules, Init, RetrainConfig, SizeDistribution,
};
use zodarts::search::{penalized_val_loss, Bounds, SearchConfig, SearchState, Searcher};
use zodarts::simplex::{sparsemax, Normalizer};
use zodarts::supernet::{ArchMode, OperationKind, Supernet, SupernetConfig};
use zodarts::tensor::Tensor;
use zodarts::trace;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// State shared between the end-to-end criteria.
#[derive(Default)]
struct Shared {
    desk: Option<(SearchState, RunConfig)>,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// 1. Sparsemax against a brute-force projection.

/// Enumerates every support set and keeps the one satisfying the KKT
/// conditions of `min ‖p − z‖²` over the simplex.
fn projection_oracle(z: &[f64]) -> Vec<f64> {
    let n = z.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let members: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let tau = (members.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / members.len() as f64;
        let p: Vec<f64> = (0..n)
            .map(|i| if mask & (1 << i) != 0 { z[i] - tau } else { 0.0 })
            .collect();
        if p.iter().any(|v| *v < -1e-12) {
            continue;
        }
        let dist: f64 = p.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, p));
        }
    }
    best.expect("some support is feasible").1
}

fn criterion_1(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let (mut max_err, mut shift_err) = (0.0f64, 0.0f64);
    let mut order_violations = 0;
    for _ in 0..1000 {
        let n = r.random_range(2..=10);
        let z: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let p = sparsemax(&z);
        max_err = max_err.max(max_abs_diff(&p, &projection_oracle(&z)));
        let c = r.random_range(-5.0..5.0);
        let shifted: Vec<f64> = z.iter().map(|v| v + c).collect();
        shift_err = shift_err.max(max_abs_diff(&p, &sparsemax(&shifted)));
        // Support monotonicity: larger scores never get less mass, and the
        // support is exactly the entries above the smallest supported score.
        for i in 0..n {
            for j in 0..n {
                if z[i] > z[j] && p[i] < p[j] {
                    order_violations += 1;
                }
            }
        }
        let min_in = (0..n).filter(|&i| p[i] > 0.0).map(|i| z[i]).fold(f64::INFINITY, f64::min);
        if (0..n).any(|i| p[i] == 0.0 && z[i] > min_in) {
            order_violations += 1;
        }
        // Raising one score never removes it from the support.
        let k = r.random_range(0..n);
        let mut up = z.clone();
        up[k] += r.random_range(0.0..2.0);
        if p[k] > 0.0 && sparsemax(&up)[k] == 0.0 {
            order_violations += 1;
        }
    }
    let took = start.elapsed();
    outcome(
        max_err <= 1e-8 && shift_err <= 1e-8 && order_violations == 0 && took < Duration::from_secs(10),
        format!(
            "max |sparsemax − oracle| {max_err:.2e}, shift error {shift_err:.2e}, {order_violations} monotonicity violations, {took:.2?}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Finite-difference gradient checks.

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Largest relative error between tape gradients and central differences
/// (h = 1e-5) of `Σ c·f(inputs)` over every input.
fn fd_check(build: &Build, inputs: &[Tensor], r: &mut ChaCha8Rng) -> f64 {
    let h = 1e-5;
    let eval = |ins: &[Tensor], c: &[f64]| -> (f64, Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let loss = tape.dot_const(&out, c).unwrap();
        (tape.value(&loss).item(), tape, vars, loss)
    };
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        tape.value(&out).len()
    };
    let c: Vec<f64> = (0..probe).map(|_| r.random_range(-1.0..1.0)).collect();
    let (_, tape, vars, loss) = eval(inputs, &c);
    let grads = tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut ins = inputs.to_vec();
            ins[i].data_mut()[j] += h;
            let plus = eval(&ins, &c).0;
            ins[i].data_mut()[j] -= 2.0 * h;
            let minus = eval(&ins, &c).0;
            *slot = (plus - minus) / (2.0 * h);
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = scale(&analytic).max(scale(&numeric)).max(1e-8);
        worst = worst.max(diff / denom);
    }
    worst
}

/// Uniform draw kept at least `gap` away from zero.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.random_range(gap..1.0);
            if r.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn criterion_2(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let mut r = rng(2);
    type Case = (&'static str, Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>, Box<Build>);
    let cases: Vec<Case> = vec![
        (
            "conv2d stride 1",
            Box::new(|r| vec![random_tensor(r, &[2, 2, 5, 5], -1.0, 1.0), random_tensor(r, &[3, 2, 3, 3], -1.0, 1.0), random_tensor(r, &[3], -1.0, 1.0)]),
            Box::new(|t, v| t.conv2d(&v[0], &v[1], &v[2], 1, 1).unwrap()),
        ),
        (
            "conv2d stride 2",
            Box::new(|r| vec![random_tensor(r, &[2, 2, 6, 6], -1.0, 1.0), random_tensor(r, &[2, 2, 3, 3], -1.0, 1.0), random_tensor(r, &[2], -1.0, 1.0)]),
            Box::new(|t, v| t.conv2d(&v[0], &v[1], &v[2], 2, 1).unwrap()),
        ),
        (
            "crop_kernel",
            Box::new(|r| vec![random_tensor(r, &[2, 2, 5, 5], -1.0, 1.0)]),
            Box::new(|t, v| t.crop_kernel(&v[0], 3).unwrap()),
        ),
        (
            "blend_kernels",
            Box::new(|r| vec![random_tensor(r, &[2, 2, 5, 5], -1.0, 1.0), random_tensor(r, &[2], 0.0, 1.0)]),
            Box::new(|t, v| t.blend_kernels(&v[0], &v[1], &[3, 5]).unwrap()),
        ),
        (
            "avg_pool",
            Box::new(|r| vec![random_tensor(r, &[2, 2, 5, 5], -1.0, 1.0)]),
            Box::new(|t, v| t.avg_pool(&v[0], 3, 1, 1).unwrap()),
        ),
        (
            "batch_norm",
            Box::new(|r| vec![random_tensor(r, &[4, 3, 3, 3], -1.0, 1.0), random_tensor(r, &[3], 0.5, 1.5), random_tensor(r, &[3], -1.0, 1.0)]),
            Box::new(|t, v| t.batch_norm(&v[0], Some(&v[1]), Some(&v[2]), 1e-5).unwrap()),
        ),
        (
            "batch_norm without affine",
            Box::new(|r| vec![random_tensor(r, &[3, 2, 3, 3], -1.0, 1.0)]),
            Box::new(|t, v| t.batch_norm(&v[0], None, None, 1e-5).unwrap()),
        ),
        (
            "relu",
            Box::new(|r| vec![away_from_zero(r, &[3, 4], 0.01)]),
            Box::new(|t, v| t.relu(&v[0])),
        ),
        (
            "add",
            Box::new(|r| vec![random_tensor(r, &[3, 4], -1.0, 1.0), random_tensor(r, &[3, 4], -1.0, 1.0)]),
            Box::new(|t, v| t.add(&v[0], &v[1]).unwrap()),
        ),
        (
            "scale",
            Box::new(|r| vec![random_tensor(r, &[5], -1.0, 1.0)]),
            Box::new(|t, v| t.scale(&v[0], -1.7)),
        ),
        (
            "add_scalar",
            Box::new(|r| vec![random_tensor(r, &[5], -1.0, 1.0)]),
            Box::new(|t, v| t.add_scalar(&v[0], 0.3)),
        ),
        (
            "sum",
            Box::new(|r| vec![random_tensor(r, &[2, 3], -1.0, 1.0)]),
            Box::new(|t, v| t.sum(&v[0])),
        ),
        (
            "slice",
            Box::new(|r| vec![random_tensor(r, &[9], -1.0, 1.0)]),
            Box::new(|t, v| t.slice(&v[0], 2, 4).unwrap()),
        ),
        (
            "normalize softmax",
            Box::new(|r| vec![random_tensor(r, &[5], -2.0, 2.0)]),
            Box::new(|t, v| t.normalize(&v[0], Normalizer::Softmax, 0.7).unwrap()),
        ),
        (
            "sparsemax jacobian",
            Box::new(|r| vec![random_tensor(r, &[6], -1.0, 1.0)]),
            Box::new(|t, v| t.normalize(&v[0], Normalizer::Sparsemax, 0.7).unwrap()),
        ),
        (
            "weighted_sum",
            Box::new(|r| vec![random_tensor(r, &[2, 3], -1.0, 1.0), random_tensor(r, &[2, 3], -1.0, 1.0), random_tensor(r, &[3], 0.0, 1.0)]),
            Box::new(|t, v| t.weighted_sum(&[(v[0], 0), (v[1], 2)], &v[2]).unwrap()),
        ),
        (
            "dot_const",
            Box::new(|r| vec![random_tensor(r, &[4], -1.0, 1.0)]),
            Box::new(|t, v| t.dot_const(&v[0], &[0.5, -1.0, 2.0, 0.25]).unwrap()),
        ),
        (
            "dense_classifier",
            Box::new(|r| vec![random_tensor(r, &[2, 3, 2, 2], -1.0, 1.0), random_tensor(r, &[4, 3], -1.0, 1.0), random_tensor(r, &[4], -1.0, 1.0)]),
            Box::new(|t, v| t.dense_classifier(&v[0], &v[1], &v[2]).unwrap()),
        ),
        (
            "cross_entropy",
            Box::new(|r| vec![random_tensor(r, &[3, 4], -2.0, 2.0)]),
            Box::new(|t, v| t.cross_entropy(&v[0], &[1, 3, 0]).unwrap()),
        ),
    ];
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (name, make, build) in &cases {
        let mut case_worst = 0.0f64;
        for _ in 0..20 {
            let inputs = make(&mut r);
            case_worst = case_worst.max(fd_check(build.as_ref(), &inputs, &mut r));
        }
        if case_worst > 1e-4 {
            failures.push(format!("{name} {case_worst:.2e}"));
        }
        worst = worst.max(case_worst);
    }
    let took = start.elapsed();
    outcome(
        failures.is_empty() && took < Duration::from_secs(60),
        format!(
            "{} operations × 20 instances, worst relative error {worst:.2e}{}, {took:.2?}",
            cases.len(),
            if failures.is_empty() { String::new() } else { format!(" (failing: {})", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. Zeroth-order estimate against the exact implicit gradient.

fn inverse3(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let c = |i: usize, j: usize| {
        let (r0, r1) = ((i + 1) % 3, (i + 2) % 3);
        let (c0, c1) = ((j + 1) % 3, (j + 2) % 3);
        m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
    };
    (0..3).map(|i| (0..3).map(|j| c(j, i) / det).collect()).collect()
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// `∇F(α)` written out independently for the quadratic family.
fn exact_gradient(p: &QuadraticBilevel, alpha: &[f64]) -> Vec<f64> {
    let n = p.c.len();
    let a_inv: Vec<Vec<f64>> = if n == 1 {
        vec![vec![1.0 / p.a[0][0]]]
    } else {
        inverse3(&p.a)
    };
    let s: Vec<f64> = alpha.iter().map(|a| a + 0.5 * p.kappa * a * a).collect();
    let rhs: Vec<f64> = mat_vec(&p.b, &s).iter().zip(&p.c).map(|(x, y)| x + y).collect();
    let w = mat_vec(&a_inv, &rhs);
    let d: Vec<f64> = w.iter().zip(&p.t).map(|(x, y)| x - y).collect();
    let v = mat_vec(&a_inv, &mat_vec(&p.p, &d));
    (0..alpha.len())
        .map(|j| {
            let btv: f64 = (0..n).map(|i| p.b[i][j] * v[i]).sum();
            p.q[j] + p.rho * alpha[j] + (1.0 + p.kappa * alpha[j]) * btv
        })
        .collect()
}

fn three_dim_problem() -> QuadraticBilevel {
    QuadraticBilevel {
        a: vec![vec![3.0, 0.5, 0.2], vec![0.5, 2.0, 0.3], vec![0.2, 0.3, 1.5]],
        b: vec![vec![1.0, 0.2, 0.0], vec![0.3, 1.0, 0.1], vec![0.0, 0.4, 0.8]],
        c: vec![0.1, -0.2, 0.3],
        kappa: 0.8,
        p: vec![vec![1.0, 0.1, 0.0], vec![0.1, 1.2, 0.0], vec![0.0, 0.0, 0.9]],
        t: vec![0.5, -0.3, 0.2],
        q: vec![0.05, -0.1, 0.02],
        rho: 0.1,
    }
}

fn unit_directions(seed: u64, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Relative error of the estimate's component along `u`, per μ.
fn zo_errors(p: &QuadraticBilevel, alpha: &[f64], u: &[f64], mus: &[f64]) -> Vec<f64> {
    let exact = exact_gradient(p, alpha);
    let target: f64 = exact.iter().zip(u).map(|(a, b)| a * b).sum();
    let lr = 0.5 / p.curvature_bound();
    let w0 = vec![0.0; p.c.len()];
    mus.iter()
        .map(|&mu| {
            let g = zo_round(p, alpha, u, mu, &w0, 2000, lr).unwrap();
            let component: f64 = g.iter().zip(u).map(|(a, b)| a * b).sum();
            ((component - target) / target).abs()
        })
        .collect()
}

fn criterion_3(_: &mut Shared) -> Outcome {
    // Four steps spanning a 10× decrease, ending at 1e-3.
    let mus: Vec<f64> = (0..4).map(|k| 1e-2 * 10f64.powf(-(k as f64) / 3.0)).collect();
    let mut pass = true;
    let mut notes = Vec::new();

    // L_train = ½(w − α)², L_val = ½w² at α = 2: w* is linear in α, so the
    // estimate carries no truncation term and its error sits at round-off.
    let scalar = QuadraticBilevel::scalar();
    let lib = implicit_gradient_exact(&scalar, &[2.0]).unwrap();
    let mut floor = 0.0f64;
    for u in [[1.0], [-1.0]] {
        floor = floor.max(zo_errors(&scalar, &[2.0], &u, &mus).into_iter().fold(0.0, f64::max));
    }
    pass &= lib == vec![2.0] && floor <= 0.05 && floor <= 1e-9;
    notes.push(format!("scalar: exact gradient {}, max rel. error over the sweep {floor:.1e}", lib[0]));

    // Problems with a curved w*(α): the error is O(μ) and must shrink.
    let curved = QuadraticBilevel {
        kappa: 0.5,
        ..QuadraticBilevel::scalar()
    };
    let problems = [
        ("3-dim", three_dim_problem(), vec![0.4, -0.3, 0.6], unit_directions(3, 3, 3)),
        ("curved scalar", curved, vec![0.7], vec![vec![1.0], vec![-1.0]]),
    ];
    for (name, p, alpha, dirs) in &problems {
        let library = implicit_gradient_exact(p, alpha).unwrap();
        if max_abs_diff(&exact_gradient(p, alpha), &library) > 1e-12 {
            pass = false;
            notes.push(format!("{name}: library implicit gradient disagrees with the oracle"));
        }
        let mut worst_ratio = 0.0f64;
        let mut at_1e3 = 0.0f64;
        for u in dirs {
            let errs = zo_errors(p, alpha, u, &mus);
            for w in errs.windows(2) {
                worst_ratio = worst_ratio.max(w[1] / w[0]);
            }
            at_1e3 = at_1e3.max(*errs.last().unwrap());
        }
        pass &= at_1e3 <= 0.05 && worst_ratio <= 0.75;
        notes.push(format!("{name}: rel. error at μ=1e-3 {at_1e3:.2e}, worst shrink ratio {worst_ratio:.3}"));
    }
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------------------
// 4. Blended kernel against the sum of per-kernel convolutions.

/// Plain-loop stride-1 cross-correlation with "same" padding.
fn naive_conv(x: &Tensor, w: &[f64], k: usize, c_out: usize, bias: &[f64]) -> Vec<f64> {
    let [n, c_in, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; n * c_out * h * wd];
    for b in 0..n {
        for o in 0..c_out {
            for i in 0..h {
                for j in 0..wd {
                    let mut s = bias[o];
                    for c in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                let (ii, jj) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                s += w[((o * c_in + c) * k + di) * k + dj]
                                    * x.data()[((b * c_in + c) * h + ii as usize) * wd + jj as usize];
                            }
                        }
                    }
                    out[((b * c_out + o) * h + i) * wd + j] = s;
                }
            }
        }
    }
    out
}

/// Centered `k×k` crop of a `[c_out, c_in, K, K]` bank.
fn crop(bank: &Tensor, k: usize) -> Vec<f64> {
    let s = bank.shape();
    let (co, ci, kk) = (s[0], s[1], s[2]);
    let off = (kk - k) / 2;
    let mut out = Vec::with_capacity(co * ci * k * k);
    for o in 0..co {
        for c in 0..ci {
            for i in 0..k {
                for j in 0..k {
                    out.push(bank.data()[((o * ci + c) * kk + i + off) * kk + j + off]);
                }
            }
        }
    }
    out
}

fn criterion_4(_: &mut Shared) -> Outcome {
    let cfg = SupernetConfig {
        input_size: 6,
        base_channels: 3,
        stages: 1,
        cells_per_stage: 1,
        kernel_sizes: vec![3, 5, 7],
        depths: vec![1],
        ..SupernetConfig::default()
    };
    let mut r = rng(4);
    let mut worst = 0.0f64;
    let cases = 60;
    for case in 0..cases {
        let mut net = Supernet::build(cfg.clone(), case).unwrap();
        let bank = net.stages[0].cells[0].edges[case as usize % 6].bank.clone();
        let w = random_tensor(&mut r, net.store.get(bank.weight).shape(), -1.0, 1.0);
        net.store.get_mut(bank.weight).data_mut().copy_from_slice(w.data());
        let mut biases = Vec::new();
        for &b in &bank.biases {
            let v = random_tensor(&mut r, &[3], -1.0, 1.0);
            net.store.get_mut(b).data_mut().copy_from_slice(v.data());
            biases.push(v);
        }
        let mut p: Vec<f64> = (0..3).map(|_| r.random_range(0.0..1.0)).collect();
        if case % 5 == 0 {
            p[2] = 0.0;
        }
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= total);
        let x = random_tensor(&mut r, &[2, 3, 6, 6], -1.0, 1.0);
        let mut expected = vec![0.0; 2 * 3 * 36];
        for (i, &k) in [3, 5, 7].iter().enumerate() {
            let y = naive_conv(&x, &crop(&w, k), k, 3, biases[i].data());
            for (e, v) in expected.iter_mut().zip(y) {
                *e += p[i] * v;
            }
        }
        let mut g = Eager;
        let xv = g.constant(x);
        let pv = g.constant(Tensor::new(vec![3], p).unwrap());
        let out = bank.forward(&mut g, &net.store, &xv, Some(&pv)).unwrap();
        worst = worst.max(max_abs_diff(out.data(), &expected));
    }
    outcome(worst <= 1e-10, format!("{cases} random cases, max elementwise error {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 5. Expected parameter count.

fn accounting_config() -> SupernetConfig {
    SupernetConfig {
        input_size: 8,
        num_classes: 3,
        base_channels: 4,
        stages: 2,
        cells_per_stage: 2,
        kernel_sizes: vec![3, 5],
        depths: vec![1, 2],
        ..SupernetConfig::default()
    }
}

/// Weights of one edge choice: a `k×k` convolution with bias, or nothing.
fn edge_params(op: OperationKind, k: usize, ch: usize) -> f64 {
    match op {
        OperationKind::Conv1x1 => (ch * ch + ch) as f64,
        OperationKind::ConvKxK => (ch * ch * k * k + ch) as f64,
        _ => 0.0,
    }
}

/// Sets scores so that sparsemax at temperature 1 is one-hot on `arch`.
fn pin_architecture(net: &mut Supernet, arch: &zodarts::eval::DiscreteArchitecture) {
    let cfg = net.config.clone();
    let [a, b, g] = net.arch.all();
    let edges = cfg.edge_count();
    let nk = cfg.kernel_sizes.len();
    let nd = cfg.depths.len();
    let mut alpha = vec![0.0; cfg.stages * edges * 5];
    let mut beta = vec![0.0; cfg.stages * edges * nk];
    let mut gamma = vec![0.0; cfg.stages * nd];
    for s in 0..cfg.stages {
        for e in 0..edges {
            alpha[(s * edges + e) * 5 + arch.ops[s][e].index()] = 10.0;
            let ki = cfg.kernel_sizes.iter().position(|&k| k == arch.kernels[s][e]).unwrap();
            beta[(s * edges + e) * nk + ki] = 10.0;
        }
        let di = cfg.depths.iter().position(|&d| d == arch.depths[s]).unwrap();
        gamma[s * nd + di] = 10.0;
    }
    net.store.get_mut(a).data_mut().copy_from_slice(&alpha);
    net.store.get_mut(b).data_mut().copy_from_slice(&beta);
    net.store.get_mut(g).data_mut().copy_from_slice(&gamma);
}

fn criterion_5(_: &mut Shared) -> Outcome {
    let cfg = accounting_config();
    let mut r = rng(5);
    let sparse = ArchMode::new(Normalizer::Sparsemax, 1.0, true);
    let mut discrepancies = 0;
    let mut first_bad = String::new();
    for i in 0..100 {
        let mut net = Supernet::build(cfg.clone(), i).unwrap();
        for id in net.arch_ids(true) {
            let t = random_tensor(&mut r, net.store.get(id).shape(), -1.0, 1.0);
            net.store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        let arch = sample_architecture(&net, &sparse, &mut r).unwrap();
        pin_architecture(&mut net, &arch);
        let expected = net.expected_param_count_value(&sparse).unwrap();
        let exact = materialize(&arch, Init::Fresh { seed: i }).unwrap().param_count();
        if expected != exact as f64 {
            discrepancies += 1;
            if first_bad.is_empty() {
                first_bad = format!(" (e.g. {expected} vs {exact} for {})", arch.describe());
            }
        }
    }

    // Random dense probabilities against full enumeration of every stage's
    // (operations, kernels, depth) choices.
    let soft = ArchMode::new(Normalizer::Softmax, 1.0, true);
    let mut worst = 0.0f64;
    for i in 0..5 {
        let mut net = Supernet::build(cfg.clone(), 100 + i).unwrap();
        for id in net.arch_ids(true) {
            let t = random_tensor(&mut r, net.store.get(id).shape(), -2.0, 2.0);
            net.store.get_mut(id).data_mut().copy_from_slice(t.data());
        }
        // Fixed part: a model whose every edge is parameter-free.
        let mut empty = sample_architecture(&net, &soft, &mut r).unwrap();
        empty.ops.iter_mut().flatten().for_each(|o| *o = OperationKind::Zeroise);
        let fixed = materialize(&empty, Init::Fresh { seed: 0 }).unwrap().param_count() as f64;
        let mut total = fixed;
        let edges = cfg.edge_count();
        for s in 0..cfg.stages {
            let ch = cfg.stage_channels(s);
            let op_p: Vec<Vec<f64>> = (0..edges).map(|e| net.edge_probabilities(s, e, &soft).unwrap()).collect();
            let k_p: Vec<Vec<f64>> = (0..edges).map(|e| net.kernel_probabilities(s, e, &soft).unwrap()).collect();
            let d_p = net.depth_probabilities(s, &soft).unwrap();
            let choices = (5 * cfg.kernel_sizes.len()) as u64;
            let mut stage = 0.0;
            for code in 0..choices.pow(edges as u32) {
                let mut c = code;
                let (mut prob, mut cell) = (1.0, 0.0);
                for e in 0..edges {
                    let pick = (c % choices) as usize;
                    c /= choices;
                    let (o, ki) = (pick / cfg.kernel_sizes.len(), pick % cfg.kernel_sizes.len());
                    prob *= op_p[e][o] * k_p[e][ki];
                    cell += edge_params(OperationKind::ALL[o], cfg.kernel_sizes[ki], ch);
                }
                for (di, &d) in cfg.depths.iter().enumerate() {
                    stage += prob * d_p[di] * d as f64 * cell;
                }
            }
            total += stage;
        }
        let got = net.expected_param_count_value(&soft).unwrap();
        worst = worst.max((got - total).abs() / total);
    }
    outcome(
        discrepancies == 0 && worst <= 1e-9,
        format!(
            "one-hot: {discrepancies}/100 discrepancies{first_bad}; dense probabilities: max relative gap to enumeration {worst:.2e}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. Penalty behavior.

fn tiny_data(seed: u64) -> (Dataset, Dataset) {
    let data = DataConfig {
        synthetic: Some(SyntheticSpec {
            kind: SyntheticKind::Blobs,
            samples: 64,
            classes: 3,
            channels: 1,
            size: 8,
            noise: 0.2,
            seed,
        }),
        ..DataConfig::default()
    };
    let s = data.load(std::path::Path::new(".")).unwrap();
    (s.train.to_dataset(), s.val.to_dataset())
}

fn tiny_search() -> SearchConfig {
    SearchConfig {
        epochs: 4,
        theta: 2,
        inner_steps: 2,
        batch_size: 8,
        anneal_factor: 0.5,
        anneal_interval: 1,
        lr_alpha: 0.01,
        ..SearchConfig::default()
    }
}

fn criterion_6(_: &mut Shared) -> Outcome {
    let (train, val) = tiny_data(6);
    let cfg = accounting_config();
    let mut plain = Searcher::new(cfg.clone(), tiny_search(), &train, &val).unwrap();
    plain.run().unwrap();
    let wide_cfg = SearchConfig {
        c_lower: Some(0.0),
        c_upper: Some(1e12),
        ..tiny_search()
    };
    let mut wide = Searcher::new(cfg.clone(), wide_cfg, &train, &val).unwrap();
    wide.run().unwrap();
    let bits = |s: &Searcher| -> Vec<u64> {
        s.state
            .trace
            .iter()
            .flat_map(|r| {
                [r.tau_eff, r.lambda, r.mu, r.expected_params, r.train_loss, r.val_loss, r.penalty]
                    .into_iter()
                    .chain(r.op_probs.iter().flatten().flatten().copied())
                    .chain(r.kernel_probs.iter().flatten().flatten().copied())
                    .chain(r.depth_probs.iter().flatten().copied())
                    .map(f64::to_bits)
                    .collect::<Vec<_>>()
            })
            .collect()
    };
    let identical = bits(&plain) == bits(&wide) && trace::probs_csv(&plain.state.trace) == trace::probs_csv(&wide.state.trace);

    // Forced violation: the penalty's α-gradient is λ₁ times dC/dα.
    let mut net = Supernet::build(cfg, 61).unwrap();
    let mut r = rng(6);
    for id in net.arch_ids(true) {
        let t = random_tensor(&mut r, net.store.get(id).shape(), -1.0, 1.0);
        net.store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    let mode = ArchMode::new(Normalizer::Sparsemax, 1.0, true);
    let c = net.expected_param_count_value(&mode).unwrap();
    let bounds = Some(Bounds::new(0.0, 0.5 * c).unwrap());
    let lambda1 = 3.0;
    let (x, y) = val.batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
    let ids = net.arch_ids(true);
    let arch_grad = |net: &mut Supernet, bounds: Option<Bounds>| -> (Vec<f64>, f64) {
        let vl = penalized_val_loss(net, &x, &y, &mode, bounds, (lambda1, lambda1), 1.0).unwrap();
        let all: Vec<_> = net.weight_ids().iter().chain(&ids).copied().collect();
        net.store.reset_grads(&all);
        vl.tape.backward_into(vl.loss, &mut net.store).unwrap();
        (net.store.flatten_grad(&ids), vl.penalty)
    };
    let (with, penalty) = arch_grad(&mut net, bounds);
    let (without, _) = arch_grad(&mut net, None);
    let contribution: Vec<f64> = with.iter().zip(&without).map(|(a, b)| a - b).collect();
    let h = 1e-5;
    let base = net.store.flatten(&ids);
    let mut numeric = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut v = base.clone();
        v[i] += h;
        net.store.assign_flat(&ids, &v).unwrap();
        let plus = net.expected_param_count_value(&mode).unwrap();
        v[i] -= 2.0 * h;
        net.store.assign_flat(&ids, &v).unwrap();
        let minus = net.expected_param_count_value(&mode).unwrap();
        numeric.push(lambda1 * (plus - minus) / (2.0 * h));
    }
    net.store.assign_flat(&ids, &base).unwrap();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = contribution.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    let rel = norm(&diff) / norm(&numeric).max(1e-12);
    let expected_penalty = lambda1 * (c - 0.5 * c);
    let penalty_ok = (penalty - expected_penalty).abs() <= 1e-9 * expected_penalty;
    outcome(
        identical && rel <= 1e-4 && penalty_ok,
        format!(
            "inactive bounds trace {}; forced ramp: penalty {penalty:.1} (expected {expected_penalty:.1}), gradient relative error {rel:.2e}",
            if identical { "bitwise identical" } else { "DIFFERS" }
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Desk-scale end-to-end search.

fn desk_config() -> RunConfig {
    let mut cfg = RunConfig {
        supernet: SupernetConfig {
            input_channels: 1,
            input_size: 16,
            num_classes: 2,
            base_channels: 8,
            stages: 2,
            cells_per_stage: 2,
            depths: vec![1, 2],
            ..SupernetConfig::default()
        },
        search: SearchConfig::desk_preset(),
        ..RunConfig::default()
    };
    cfg.data = DataConfig {
        synthetic: Some(SyntheticSpec {
            kind: SyntheticKind::Blobs,
            samples: 5000,
            classes: 2,
            channels: 1,
            size: 16,
            noise: 0.3,
            seed: 7,
        }),
        test_count: Some(1000),
        split: 0.5,
        ..DataConfig::default()
    };
    cfg.retrain = RetrainConfig {
        epochs: 8,
        ..RetrainConfig::default()
    };
    cfg
}

fn criterion_7(shared: &mut Shared) -> Outcome {
    let cfg = desk_config();
    let splits = cfg.data.load(std::path::Path::new(".")).unwrap();
    let test = splits.test.as_ref().unwrap().to_dataset();
    let (train, val) = (splits.train.to_dataset(), splits.val.to_dataset());
    let sizes = (train.len(), val.len(), test.len());
    let start = Instant::now();
    let mut s = Searcher::new(cfg.supernet.clone(), cfg.search.clone(), &train, &val).unwrap();
    s.run().unwrap();
    let took = start.elapsed();
    let last = s.state.trace.last().unwrap();
    let confident = last.confident_edge_fraction(0.99);
    let mode = cfg.search.mode(cfg.search.epochs - 1);
    let input = CampaignInput {
        name: "desk".into(),
        net: s.state.net.clone(),
        mode,
    };
    let report = evaluation_campaign(&[input], 3, None, &cfg.retrain, (&train, &val, &test), 0, 1).unwrap();
    let accs: Vec<f64> = report.rows.iter().map(|r| r.test_acc.unwrap_or(0.0)).collect();
    let min_acc = accs.iter().copied().fold(1.0, f64::min);
    shared.desk = Some((s.state.clone(), cfg));
    outcome(
        sizes == (2000, 2000, 1000) && took < Duration::from_secs(600) && confident >= 0.9 && min_acc >= 0.95,
        format!(
            "search {took:.1?}, confident edges {:.1}%, retrained test accuracy {accs:?}",
            100.0 * confident
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Tier pipeline.

fn nearest_rank(sorted: &[usize], p: u32) -> usize {
    let n = sorted.len() as f64;
    let rank = ((p as f64 / 100.0) * n).ceil().max(1.0) as usize;
    sorted[rank - 1]
}

fn criterion_8(shared: &mut Shared) -> Outcome {
    if shared.desk.is_none() {
        let _ = criterion_7(shared);
    }
    let (state, cfg) = shared.desk.clone().expect("desk search ran");
    let mode = cfg.search.mode(cfg.search.epochs - 1);
    let per = 300;
    let mut sizes = Vec::new();
    let mut seeds = Vec::new();
    // The searched supernet plus a freshly initialised one, so the
    // distribution spans more than the searched mode.
    let fresh = Supernet::build(cfg.supernet.clone(), 1).unwrap();
    for (i, net) in [&state.net, &fresh].into_iter().enumerate() {
        let seed = 80 + i as u64;
        let m = if i == 0 { mode } else { ArchMode::new(Normalizer::Sparsemax, 1.0, true) };
        sizes.extend(sample_sizes(net, &m, per, seed).unwrap());
        seeds.push(seed);
    }
    let dist = SizeDistribution::new(sizes.clone(), seeds, per).unwrap();
    let tiers = derive_size_tiers(&dist);
    let mut sorted = sizes;
    sorted.sort_unstable();
    let oracle = [
        (0.0, nearest_rank(&sorted, 20) as f64),
        (nearest_rank(&sorted, 40) as f64, nearest_rank(&sorted, 60) as f64),
        (nearest_rank(&sorted, 80) as f64, nearest_rank(&sorted, 95) as f64),
    ];
    let matches = tiers.iter().zip(&oracle).all(|(t, o)| (t.c_lower, t.c_upper) == *o);
    let ordered = tiers.windows(2).all(|w| w[0].c_upper <= w[1].c_lower) && tiers.iter().all(|t| t.c_lower <= t.c_upper);

    let s_tier = tiers[0];
    let mut search = cfg.search.clone();
    search.c_lower = Some(s_tier.c_lower);
    search.c_upper = Some(s_tier.c_upper);
    let splits = cfg.data.load(std::path::Path::new(".")).unwrap();
    let (train, val) = (splits.train.to_dataset(), splits.val.to_dataset());
    let start = Instant::now();
    let mut s = Searcher::new(cfg.supernet.clone(), search.clone(), &train, &val).unwrap();
    s.run().unwrap();
    let took = start.elapsed();
    let final_mode = search.mode(search.epochs - 1);
    let draws = sample_sizes(&s.state.net, &final_mode, 1000, 88).unwrap();
    let inside = draws.iter().filter(|&&c| c as f64 <= s_tier.c_upper).count() as f64 / draws.len() as f64;
    outcome(
        matches && ordered && inside >= 0.95,
        format!(
            "tiers S(0,{}] M[{},{}] L[{},{}] {} the nearest-rank oracle, ordering {}; S-constrained search ({took:.1?}) draws within C_U: {:.1}%",
            s_tier.c_upper,
            tiers[1].c_lower,
            tiers[1].c_upper,
            tiers[2].c_lower,
            tiers[2].c_upper,
            if matches { "match" } else { "DO NOT match" },
            if ordered { "holds" } else { "VIOLATED" },
            100.0 * inside
        ),
    )
}

// ---------------------------------------------------------------------------
// 9. Discard rules and campaign size.

fn criterion_9(_: &mut Shared) -> Outcome {
    let rules = DiscardRules::default();
    // Replays the rule after every epoch of a 40-epoch trace and returns
    // the first epoch at which it fires.
    let first_firing = |trace: &[f64]| -> Option<(usize, DiscardReason)> {
        (1..=trace.len()).find_map(|e| rules.check(e, &trace[..e]).map(|r| (e, r)))
    };
    let low: Vec<f64> = (0..40).map(|e| 0.10 + 0.004 * e as f64).collect();
    let flat: Vec<f64> = (0..40).map(|e| 0.60 + 0.0004 * e as f64).collect();
    let healthy: Vec<f64> = (0..40).map(|e| 0.50 + 0.01 * e as f64).collect();
    let traces_ok = first_firing(&low) == Some((20, DiscardReason::LowAccuracy))
        && first_firing(&flat) == Some((20, DiscardReason::NoImprovement))
        && first_firing(&healthy).is_none();

    // A model that cannot learn is cut at the checkpoint epoch.
    let (train, val) = tiny_data(9);
    let mut net = Supernet::build(accounting_config(), 9).unwrap();
    for id in net.arch_ids(true) {
        let t = random_tensor(&mut rng(9), net.store.get(id).shape(), -1.0, 1.0);
        net.store.get_mut(id).data_mut().copy_from_slice(t.data());
    }
    let mode = ArchMode::new(Normalizer::Sparsemax, 1.0, true);
    let arch = sample_architecture(&net, &mode, &mut rng(9)).unwrap();
    let mut model = materialize(&arch, Init::Fresh { seed: 9 }).unwrap();
    let frozen = RetrainConfig {
        epochs: 30,
        batch_size: 16,
        lr: 1e-300,
        lr_min: 1e-300,
        ..RetrainConfig::default()
    };
    let out = retrain_with_discard(&mut model, &train, &val, &val, &frozen, 9).unwrap();
    let retrain_ok = out.epochs_run == 20 && out.discarded.is_some() && out.test_acc.is_none();

    // Three checkpoints × three samples.
    let dir = tempfile::tempdir().unwrap();
    let mut inputs = Vec::new();
    for seed in 0..3 {
        let search = SearchConfig {
            epochs: 2,
            theta: 1,
            seed,
            ..tiny_search()
        };
        let run = RunConfig {
            supernet: accounting_config(),
            search: search.clone(),
            ..RunConfig::default()
        };
        let mut s = Searcher::new(run.supernet.clone(), search.clone(), &train, &val).unwrap();
        s.run().unwrap();
        let path = dir.path().join(format!("c{seed}.zckp"));
        save_search(&path, &s.state, &run).unwrap();
        let (loaded_cfg, state) = load_search(&path).unwrap();
        inputs.push(CampaignInput {
            name: format!("c{seed}"),
            net: state.net,
            mode: loaded_cfg.search.mode(state.epoch - 1),
        });
    }
    let rt = RetrainConfig {
        epochs: 1,
        batch_size: 16,
        ..RetrainConfig::default()
    };
    let report = evaluation_campaign(&inputs, 3, None, &rt, (&train, &val, &val), 0, 1).unwrap();
    let csv = trace::report_csv(&report);
    let rows_ok = report.rows.len() == 9 && csv.lines().count() == 10 && report.summary.sampled == 9;
    outcome(
        traces_ok && retrain_ok && rows_ok,
        format!(
            "constructed traces fire at epoch 20: {traces_ok}; frozen model stopped after {} epochs ({:?}); campaign rows {}",
            out.epochs_run,
            out.discarded,
            report.rows.len()
        ),
    )
}

// ---------------------------------------------------------------------------
// 10. Reproducibility and resume.

fn criterion_10(_: &mut Shared) -> Outcome {
    let (train, val) = tiny_data(10);
    let run = RunConfig {
        supernet: accounting_config(),
        search: SearchConfig {
            seed: 10,
            ..tiny_search()
        },
        ..RunConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let full_run = |tag: &str| -> (Vec<u8>, Vec<Vec<u8>>) {
        let mut s = Searcher::new(run.supernet.clone(), run.search.clone(), &train, &val).unwrap();
        s.run().unwrap();
        let out = dir.path().join(tag);
        std::fs::create_dir_all(&out).unwrap();
        save_search(out.join("checkpoint.zckp"), &s.state, &run).unwrap();
        trace::export_trace(&s.state.trace, &out, &run.supernet.kernel_sizes, &run.supernet.depths).unwrap();
        let csvs = trace::TRACE_FILES.iter().map(|f| std::fs::read(out.join(f)).unwrap()).collect();
        (std::fs::read(out.join("checkpoint.zckp")).unwrap(), csvs)
    };
    let (ck_a, csv_a) = full_run("a");
    let (ck_b, csv_b) = full_run("b");
    let repeat_ok = ck_a == ck_b && csv_a == csv_b;

    let mut resumed_ok = true;
    for stop in 1..run.search.epochs {
        let partial = SearchConfig {
            early_stop: Some(stop),
            ..run.search.clone()
        };
        let mut s = Searcher::new(run.supernet.clone(), partial, &train, &val).unwrap();
        s.run().unwrap();
        let path = dir.path().join(format!("stop{stop}.zckp"));
        save_search(&path, &s.state, &run).unwrap();
        let (cfg, state) = load_search(&path).unwrap();
        let mut rest = Searcher::resume(cfg.search, &train, &val, state).unwrap();
        rest.run().unwrap();
        let bytes = encode_search(&rest.state, &run).unwrap().to_bytes().unwrap();
        resumed_ok &= bytes == ck_a;
    }
    outcome(
        repeat_ok && resumed_ok,
        format!(
            "repeated run checkpoint and CSVs {}; resume from every epoch {}",
            if repeat_ok { "byte-identical" } else { "DIFFER" },
            if resumed_ok { "matches the uninterrupted run" } else { "DIFFERS" }
        ),
    )
}

// ---------------------------------------------------------------------------

fn main() {
    type Criterion = fn(&mut Shared) -> Outcome;
    let criteria: [(u32, &str, Criterion); 10] = [
        (1, "sparsemax oracle", criterion_1),
        (2, "gradient checks", criterion_2),
        (3, "zeroth-order vs implicit gradient", criterion_3),
        (4, "kernel-blend equivalence", criterion_4),
        (5, "parameter accounting", criterion_5),
        (6, "penalty behavior", criterion_6),
        (7, "desk-scale search", criterion_7),
        (8, "tier pipeline", criterion_8),
        (9, "evaluation workflow", criterion_9),
        (10, "reproducibility", criterion_10),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| run(&mut shared)));
        let o = result.unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {:<4} {name} [{:.1?}]: {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed(),
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
