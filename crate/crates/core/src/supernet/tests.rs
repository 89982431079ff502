use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Eager, Tape};

fn small_config() -> SupernetConfig {
    SupernetConfig {
        input_channels: 1,
        input_size: 8,
        num_classes: 3,
        base_channels: 4,
        stages: 2,
        cells_per_stage: 2,
        node_count: 4,
        kernel_sizes: vec![3, 5],
        depths: vec![1, 2],
        bn_eps: 1e-5,
    }
}

fn random_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn randomize(store: &mut ParamStore, id: ParamId, rng: &mut ChaCha8Rng, scale: f64) {
    for v in store.get_mut(id).data_mut() {
        *v = rng.random_range(-scale..scale);
    }
}

fn sparse() -> ArchMode {
    ArchMode::new(Normalizer::Sparsemax, 1.0, true)
}

#[test]
fn alpha_count_matches_stage_edge_op_product() {
    let net = Supernet::build(SupernetConfig::default(), 0).unwrap();
    assert_eq!(net.config.edge_count(), 6);
    assert_eq!(net.store.get(net.arch.alpha).len(), 90);
    assert_eq!(net.config.alpha_len(), 90);
    assert!(net.store.get(net.arch.alpha).data().iter().all(|v| *v == 0.0));
}

#[test]
fn topology_edges_are_all_ordered_pairs() {
    let t = CellTopology::new(4);
    assert_eq!(t.edges, vec![(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)]);
}

#[test]
fn config_validation() {
    let mut c = small_config();
    c.depths = vec![1, 2, 3];
    assert!(matches!(Supernet::build(c, 0), Err(Error::Config(_))));
    let mut c = small_config();
    c.kernel_sizes = vec![5, 3];
    assert!(Supernet::build(c, 0).is_err());
    let mut c = small_config();
    c.kernel_sizes = vec![2, 3];
    assert!(Supernet::build(c, 0).is_err());
}

#[test]
fn default_forward_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Supernet::build(SupernetConfig { num_classes: 7, ..SupernetConfig::default() }, 3).unwrap();
    let x = random_input(&mut rng, &[4, 1, 28, 28]);
    let mut g = Eager;
    let xv = g.constant(x);
    let out = net.forward(&mut g, &xv, &ArchMode::new(Normalizer::Softmax, 1.0, false)).unwrap();
    assert_eq!(out.shape(), &[4, 7]);
}

#[test]
fn reductions_halve_extent_and_double_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Supernet::build(small_config(), 1).unwrap();
    let mut g = Eager;
    let x = g.constant(random_input(&mut rng, &[2, 4, 8, 8]));
    let y = net.reductions[0].forward(&mut g, &net.store, &x, 1e-5).unwrap();
    assert_eq!(y.shape(), &[2, 8, 4, 4]);
}

fn edge_output(net: &Supernet, x: &Tensor, p: &[f64], q: Option<&[f64]>) -> Tensor {
    let mut g = Eager;
    let xv = g.constant(x.clone());
    let pv = g.constant(Tensor::from_vec(p.to_vec()));
    let qv = q.map(|q| g.constant(Tensor::from_vec(q.to_vec())));
    (*net.mixed_edge_forward(&mut g, &xv, 0, 0, 0, &pv, qv.as_ref()).unwrap()).clone()
}

#[test]
fn one_hot_skip_and_zeroise() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let net = Supernet::build(small_config(), 2).unwrap();
    let x = random_input(&mut rng, &[2, 4, 8, 8]);
    let skip = edge_output(&net, &x, &[0.0, 1.0, 0.0, 0.0, 0.0], None);
    assert_eq!(skip.data(), x.data());
    let zero = edge_output(&net, &x, &[1.0, 0.0, 0.0, 0.0, 0.0], None);
    assert!(zero.data().iter().all(|v| *v == 0.0));
}

#[test]
fn mixed_edge_is_linear_in_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let net = Supernet::build(small_config(), 3).unwrap();
    let x = random_input(&mut rng, &[2, 4, 8, 8]);
    let q = [0.3, 0.7];
    let raw: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
    let total: f64 = raw.iter().sum();
    let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
    let mixed = edge_output(&net, &x, &p, Some(&q));
    let mut oracle = vec![0.0; x.len()];
    for o in 0..5 {
        let mut one = [0.0; 5];
        one[o] = 1.0;
        let out = edge_output(&net, &x, &one, Some(&q));
        for (a, b) in oracle.iter_mut().zip(out.data()) {
            *a += p[o] * b;
        }
    }
    for (a, b) in mixed.data().iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn kernel_bank_blend_matches_single_convolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut net = Supernet::build(SupernetConfig { kernel_sizes: vec![3, 5, 7], ..small_config() }, 4).unwrap();
    let bank = net.stages[0].cells[0].edges[0].bank.clone();
    for &b in &bank.biases {
        randomize(&mut net.store, b, &mut rng, 0.5);
    }
    let x = random_input(&mut rng, &[2, 4, 8, 8]);
    let p = [0.2, 0.5, 0.3];
    let mut g = Eager;
    let xv = g.constant(x.clone());
    let pv = g.constant(Tensor::from_vec(p.to_vec()));
    let mixed = bank.forward(&mut g, &net.store, &xv, Some(&pv)).unwrap();
    let per_kernel = bank.forward_per_kernel(&mut g, &net.store, &xv, &pv).unwrap();

    let full = net.store.get(bank.weight).clone();
    let (c, km) = (4, 7);
    let mut blended = vec![0.0; full.len()];
    let mut bias = vec![0.0; c];
    for (i, &k) in [3usize, 5, 7].iter().enumerate() {
        let off = (km - k) / 2;
        for o in 0..c {
            for ci in 0..c {
                for r in 0..k {
                    for s in 0..k {
                        let idx = ((o * c + ci) * km + r + off) * km + s + off;
                        blended[idx] += p[i] * full.data()[idx];
                    }
                }
            }
        }
        for (b, v) in bias.iter_mut().zip(net.store.get(bank.biases[i]).data()) {
            *b += p[i] * v;
        }
    }
    let kv = g.constant(Tensor::new(full.shape().to_vec(), blended).unwrap());
    let bv = g.constant(Tensor::from_vec(bias));
    let single = g.conv2d(&xv, &kv, &bv, 1, 3).unwrap();
    for ((a, b), c) in mixed.data().iter().zip(single.data()).zip(per_kernel.data()) {
        assert!((a - b).abs() <= 1e-10);
        assert!((c - b).abs() <= 1e-10);
    }
    let inactive = bank.forward(&mut g, &net.store, &xv, None).unwrap();
    let one_hot = g.constant(Tensor::from_vec(vec![0.0, 0.0, 1.0]));
    let top = bank.forward(&mut g, &net.store, &xv, Some(&one_hot)).unwrap();
    assert_eq!(inactive.data(), top.data());
}

#[test]
fn depth_mixture_matches_recorded_cell_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net = Supernet::build(small_config(), 5).unwrap();
    randomize(&mut net.store, net.arch.alpha, &mut rng, 1.0);
    randomize(&mut net.store, net.arch.beta, &mut rng, 1.0);
    let mode = ArchMode::new(Normalizer::Softmax, 1.0, true);
    let x = random_input(&mut rng, &[2, 4, 8, 8]);
    let mut g = Eager;
    let xv = g.constant(x);
    let outs = net.stage_cell_outputs(&mut g, &xv, 0, &mode).unwrap();
    let r = [0.35, 0.65];
    let rv = g.constant(Tensor::from_vec(r.to_vec()));
    let mixed = net.stage_forward_depth_mixed(&mut g, &xv, 0, &mode, Some(&rv)).unwrap();
    for i in 0..mixed.len() {
        let want = r[0] * outs[0].data()[i] + r[1] * outs[1].data()[i];
        assert!((mixed.data()[i] - want).abs() <= 1e-12);
    }
    let plain = net.stage_forward_depth_mixed(&mut g, &xv, 0, &mode, None).unwrap();
    assert_eq!(plain.data(), outs[1].data());
}

#[test]
fn phase_gating_ignores_beta_and_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = Supernet::build(small_config(), 6).unwrap();
    randomize(&mut net.store, net.arch.alpha, &mut rng, 1.0);
    let mode = ArchMode::new(Normalizer::Sparsemax, 1.0, false);
    let x = random_input(&mut rng, &[2, 1, 8, 8]);
    let run = |net: &Supernet| {
        let mut g = Eager;
        let xv = g.constant(x.clone());
        let y = net.forward(&mut g, &xv, &mode).unwrap();
        (y.data().to_vec(), net.expected_param_count_value(&mode).unwrap())
    };
    let before = run(&net);
    randomize(&mut net.store, net.arch.beta, &mut rng, 3.0);
    randomize(&mut net.store, net.arch.gamma, &mut rng, 3.0);
    assert_eq!(before, run(&net));
}

#[test]
fn conv_cost_examples() {
    assert_eq!(conv_param_cost(3, 2, 4), 76);
    assert_eq!(conv_param_cost(1, 1, 1), 2);
}

#[test]
fn half_half_edge_contributes_half_cost() {
    // One stage, one cell, two nodes: a single edge.
    let config = SupernetConfig {
        input_channels: 2,
        base_channels: 4,
        stages: 1,
        cells_per_stage: 1,
        node_count: 2,
        kernel_sizes: vec![3],
        depths: vec![1],
        ..small_config()
    };
    let net = Supernet::build(config, 0).unwrap();
    let table = net.cost_table();
    assert_eq!(table.edge_cost(0, OperationKind::ConvKxK, 0), conv_param_cost(3, 4, 4));
    let mut g = Eager;
    let p = g.constant(Tensor::from_vec(vec![0.5, 0.0, 0.0, 0.5, 0.0]));
    let c = table.stage_expectation(&mut g, 0, &[p], None, None).unwrap();
    assert_eq!(c.item(), 0.5 * conv_param_cost(3, 4, 4) as f64);
    let mut g = Eager;
    let p = g.constant(Tensor::from_vec(vec![0.5, 0.0, 0.0, 0.5, 0.0]));
    let table = ParamCostTable {
        op_costs: vec![[0, 0, 0, 76, 0]],
        kernel_costs: vec![vec![76]],
        ..table
    };
    let c = table.stage_expectation(&mut g, 0, &[p], None, None).unwrap();
    assert_eq!(c.item(), 38.0);
}

#[test]
fn expected_cost_bounded_by_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut net = Supernet::build(small_config(), 7).unwrap();
    let table = net.cost_table();
    let stage_max: usize = (0..2)
        .map(|s| table.edges_per_cell * table.kernel_costs[s].iter().max().unwrap() * 2)
        .sum();
    for _ in 0..20 {
        for id in net.arch.all() {
            randomize(&mut net.store, id, &mut rng, 2.0);
        }
        let c = net.expected_param_count_value(&sparse()).unwrap();
        assert!(c >= table.fixed as f64 - 1e-9);
        assert!(c <= (table.fixed + stage_max) as f64 + 1e-9);
    }
}

#[test]
fn expected_cost_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut net = Supernet::build(small_config(), 8).unwrap();
    for id in net.arch.all() {
        randomize(&mut net.store, id, &mut rng, 1.0);
    }
    let mode = ArchMode::new(Normalizer::Softmax, 0.7, true);
    let mut tape = Tape::new();
    let c = net.expected_param_count(&mut tape, &mode).unwrap();
    net.store.zero_grad();
    tape.backward_into(c, &mut net.store).unwrap();
    let h = 1e-5;
    for id in net.arch.all() {
        let analytic = net.store.get(id).grad().unwrap().to_vec();
        for i in 0..analytic.len() {
            let orig = net.store.get(id).data()[i];
            net.store.get_mut(id).data_mut()[i] = orig + h;
            let up = net.expected_param_count_value(&mode).unwrap();
            net.store.get_mut(id).data_mut()[i] = orig - h;
            let down = net.expected_param_count_value(&mode).unwrap();
            net.store.get_mut(id).data_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-2);
            assert!((fd - analytic[i]).abs() / denom <= 1e-4, "{fd} vs {}", analytic[i]);
        }
    }
}

#[test]
fn zero_trailing_kernels_run_in_a_smaller_crop() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut net = Supernet::build(SupernetConfig { kernel_sizes: vec![3, 5, 7], ..small_config() }, 8).unwrap();
    let bank = net.stages[0].cells[0].edges[1].bank.clone();
    for &b in &bank.biases {
        randomize(&mut net.store, b, &mut rng, 0.5);
    }
    let x = random_input(&mut rng, &[2, 4, 8, 8]);
    for p in [[0.4, 0.6, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] {
        let mut g = Eager;
        let xv = g.constant(x.clone());
        let pv = g.constant(Tensor::from_vec(p.to_vec()));
        let fast = bank.forward(&mut g, &net.store, &xv, Some(&pv)).unwrap();
        let reference = bank.forward_per_kernel(&mut g, &net.store, &xv, &pv).unwrap();
        for (a, b) in fast.data().iter().zip(reference.data()) {
            assert!((a - b).abs() <= 1e-10, "{p:?}: {a} vs {b}");
        }
    }
}
