//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//! Heavy artifacts (the 200-slice corpus, the pretrained CNN, the joint
//! model) are built once and shared.

use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agn_core::cnn::{cnn_backward, cnn_forward, conv_census, CnnGrads};
use agn_core::config::TrainConfig;
use agn_core::formats::{load_checkpoint, load_volume, save_checkpoint, save_volume, write_pgm};
use agn_core::gat::{gat_backward, gat_forward, init_gat_params, GatConfig, GatMode};
use agn_core::gradcheck::{check_gradient, GradCheckConfig};
use agn_core::graph::{geodesic_distances, Adjacency, GraphConfig};
use agn_core::metrics::{connected_components, dice_coefficient, metrics_to_csv, MetricRecord, Split};
use agn_core::model::{init_model_params, joint_backward, joint_forward, ModelConfig, SliceGraph};
use agn_core::ops::activation::{activation_backward, activation_forward, Activation, ActivationConfig};
use agn_core::ops::conv::{conv2d_backward, conv2d_forward, transpose_conv2d_backward, transpose_conv2d_forward};
use agn_core::ops::dropout::{dropout_backward, dropout_forward};
use agn_core::ops::loss::{bce_loss, bce_loss_backward};
use agn_core::ops::norm::{batchnorm2d_backward, batchnorm2d_forward, BN_EPS, BN_MOMENTUM};
use agn_core::ops::pool::{maxpool2d_backward, maxpool2d_forward, upsample_nearest_backward, upsample_nearest_forward};
use agn_core::ops::softmax::{masked_row_softmax, masked_row_softmax_backward};
use agn_core::params::{LayerParams, ParamSet};
use agn_core::phantom::{generate_phantom, window_hu, Difficulty, PhantomVolume, PreprocessConfig};
use agn_core::tensor::Tensor;
use agn_core::train::{prepare_slices, train_cnn, train_joint, SliceSet};

fn report(n: usize, name: &str, pass: bool) {
    println!("ACCEPTANCE {n} ({name}): {}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "acceptance criterion {n} ({name}) failed");
}

// ---- shared fixtures --------------------------------------------------------

fn corpus() -> &'static PhantomVolume {
    static V: OnceLock<PhantomVolume> = OnceLock::new();
    V.get_or_init(|| generate_phantom(200, 64, 64, 42, Difficulty::WithBronchi).unwrap())
}

fn corpus_slices() -> &'static SliceSet {
    static S: OnceLock<SliceSet> = OnceLock::new();
    S.get_or_init(|| prepare_slices(corpus()).unwrap())
}

struct CnnRun {
    params: ParamSet,
    model: ModelConfig,
    records: Vec<MetricRecord>,
    seconds: f64,
}

fn cnn_run() -> &'static CnnRun {
    static R: OnceLock<CnnRun> = OnceLock::new();
    R.get_or_init(|| {
        let t = Instant::now();
        let (params, model, records) = train_cnn(corpus(), &TrainConfig::default()).unwrap();
        CnnRun {
            params,
            model,
            records,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

fn joint_run() -> &'static ParamSet {
    static R: OnceLock<ParamSet> = OnceLock::new();
    R.get_or_init(|| {
        let mut params = cnn_run().params.clone();
        train_joint(corpus(), &TrainConfig::default(), &mut params).unwrap();
        params
    })
}

fn per_slice_cnn_dice(params: &ParamSet, model: &ModelConfig, indices: &[usize]) -> Vec<f64> {
    let slices = corpus_slices();
    let mut params = params.clone();
    indices
        .iter()
        .map(|&z| {
            let (out, _) = cnn_forward(&slices.inputs[z], &mut params, &model.cnn, false).unwrap();
            dice_coefficient(&out.prob, &slices.targets[z]).unwrap()
        })
        .collect()
}

fn per_slice_joint_dice(params: &ParamSet, model: &ModelConfig, indices: &[usize], seed: u64) -> Vec<f64> {
    let slices = corpus_slices();
    let mut params = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices
        .iter()
        .map(|&z| {
            let (out, _) = joint_forward(
                &slices.inputs[z],
                &mut params,
                model,
                None,
                seed.wrapping_add(z as u64),
                false,
                &mut rng,
            )
            .unwrap();
            dice_coefficient(&out.prob, &slices.targets[z]).unwrap()
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---- criterion 1: gradient suite ---------------------------------------------

/// Runs check_gradient and folds the report into a running (passed, max_err).
fn fd(
    label: &str,
    f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    samples: usize,
    seed: u64,
    worst: &mut f64,
) {
    let cfg = GradCheckConfig {
        samples,
        seed,
        ..GradCheckConfig::default()
    };
    let report = check_gradient(f, point, analytic, &cfg).unwrap();
    assert!(report.passed(), "{label} (seed {seed}): {report:?}");
    *worst = worst.max(report.max_rel_err);
}

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

#[test]
fn a1_gradient_suite() {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let act_cfg = ActivationConfig::default();

        // conv2d, both the 3x3 pad-1 fast path and the generic path
        for pad in [1usize, 0] {
            let x = rand_t(&[1, 2, 6, 6], &mut rng);
            let p = LayerParams::conv("c", 3, 2, 3, &mut rng);
            let y = conv2d_forward(&x, &p, 1, pad).unwrap();
            let r = rand_t(y.shape(), &mut rng);
            let mut pm = p.clone();
            pm.zero_grads();
            let gx = conv2d_backward(&x, &mut pm, &r, 1, pad).unwrap();
            let obj_x = |v: &[f64]| {
                let xt = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                conv2d_forward(&xt, &p, 1, pad).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("conv2d dx", obj_x, x.data(), gx.data(), 15, seed, &mut worst);
            let obj_w = |v: &[f64]| {
                let mut pc = p.clone();
                pc.weights.data_mut().copy_from_slice(v);
                conv2d_forward(&x, &pc, 1, pad).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("conv2d dW", obj_w, p.weights.data(), pm.weights.grad().unwrap(), 15, seed, &mut worst);
        }

        // transpose conv
        {
            let x = rand_t(&[1, 2, 4, 4], &mut rng);
            let p = LayerParams::transpose_conv("u", 2, 2, 4, &mut rng);
            let y = transpose_conv2d_forward(&x, &p, 2).unwrap();
            let r = rand_t(y.shape(), &mut rng);
            let mut pm = p.clone();
            pm.zero_grads();
            let gx = transpose_conv2d_backward(&x, &mut pm, &r, 2).unwrap();
            let obj = |v: &[f64]| {
                let xt = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                transpose_conv2d_forward(&xt, &p, 2).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("transpose dx", obj, x.data(), gx.data(), 15, seed, &mut worst);
            let obj_w = |v: &[f64]| {
                let mut pc = p.clone();
                pc.weights.data_mut().copy_from_slice(v);
                transpose_conv2d_forward(&x, &pc, 2).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("transpose dW", obj_w, p.weights.data(), pm.weights.grad().unwrap(), 15, seed, &mut worst);
        }

        // batch norm (training statistics)
        {
            let x = rand_t(&[1, 3, 4, 4], &mut rng);
            let r = rand_t(&[1, 3, 4, 4], &mut rng);
            let mut p = LayerParams::batchnorm("bn", 3);
            let (_, cache) = batchnorm2d_forward(&x, &mut p, true, BN_EPS, BN_MOMENTUM).unwrap();
            p.zero_grads();
            let gx = batchnorm2d_backward(&cache, &mut p, &r);
            let obj = |v: &[f64]| {
                let xt = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                let mut pc = LayerParams::batchnorm("bn", 3);
                let (y, _) = batchnorm2d_forward(&xt, &mut pc, true, BN_EPS, BN_MOMENTUM).unwrap();
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("batchnorm dx", obj, x.data(), gx.data(), 15, seed, &mut worst);
            let gamma = p.weights.data().to_vec();
            let obj_g = |v: &[f64]| {
                let mut pc = LayerParams::batchnorm("bn", 3);
                pc.weights.data_mut().copy_from_slice(v);
                let (y, _) = batchnorm2d_forward(&x, &mut pc, true, BN_EPS, BN_MOMENTUM).unwrap();
                y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("batchnorm dgamma", obj_g, &gamma, p.weights.grad().unwrap(), 3, seed, &mut worst);
        }

        // activations
        for kind in [Activation::Relu, Activation::LeakyRelu, Activation::Elu, Activation::Sigmoid] {
            let x = rand_t(&[1, 1, 4, 4], &mut rng);
            let r = rand_t(&[1, 1, 4, 4], &mut rng);
            let y = activation_forward(&x, kind, &act_cfg);
            let gx = activation_backward(&x, &y, &r, kind, &act_cfg);
            let obj = |v: &[f64]| {
                let xt = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                activation_forward(&xt, kind, &act_cfg).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("activation dx", obj, x.data(), gx.data(), 10, seed, &mut worst);
        }

        // maxpool routing (argmax flips are skipped as kinks)
        {
            let x = rand_t(&[1, 2, 4, 4], &mut rng);
            let (y, argmax) = maxpool2d_forward(&x, 2).unwrap();
            let r = rand_t(y.shape(), &mut rng);
            let gx = maxpool2d_backward(x.shape(), &argmax, &r);
            let obj = |v: &[f64]| {
                let xt = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                maxpool2d_forward(&xt, 2).unwrap().0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("maxpool dx", obj, x.data(), gx.data(), 16, seed, &mut worst);
        }

        // upsample
        {
            let x = rand_t(&[1, 2, 3, 3], &mut rng);
            let y = upsample_nearest_forward(&x, 2).unwrap();
            let r = rand_t(y.shape(), &mut rng);
            let gx = upsample_nearest_backward(x.shape(), &r, 2);
            let obj = |v: &[f64]| {
                let xt = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
                upsample_nearest_forward(&xt, 2).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("upsample dx", obj, x.data(), gx.data(), 12, seed, &mut worst);
        }

        // masked row softmax
        {
            let v = 5;
            let scores = rand_t(&[v, v], &mut rng);
            let mut mask = vec![0u8; v * v];
            for i in 0..v {
                mask[i * v + i] = 1;
                for j in 0..v {
                    if rng.gen_bool(0.5) {
                        mask[i * v + j] = 1;
                    }
                }
            }
            let alpha = masked_row_softmax(&scores, &mask).unwrap();
            let r = rand_t(&[v, v], &mut rng);
            let gs = masked_row_softmax_backward(&alpha, &r, &mask);
            let obj = |vals: &[f64]| {
                let st = Tensor::new(vec![v, v], vals.to_vec()).unwrap();
                masked_row_softmax(&st, &mask).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("softmax dscores", obj, scores.data(), gs.data(), 15, seed, &mut worst);
        }

        // GAT layer: x, W, a
        {
            let v = 5;
            let gat_cfg = GatConfig {
                heads: 2,
                in_features: 3,
                out_features: 2,
                mode: GatMode::Concat,
            };
            let mut ps = ParamSet::new();
            init_gat_params(&mut ps, "g", &gat_cfg, &mut rng).unwrap();
            let mut adj = Adjacency::identity(v);
            for i in 0..v {
                for j in 0..i {
                    if rng.gen_bool(0.5) {
                        adj.set_edge(i, j);
                    }
                }
            }
            let x = rand_t(&[v, 3], &mut rng);
            let r = rand_t(&[v, gat_cfg.output_width()], &mut rng);
            let (_, cache) = gat_forward(&x, &adj, &ps, "g", &gat_cfg, &act_cfg).unwrap();
            ps.zero_grads();
            let gx = gat_backward(&r, &cache, &adj, &mut ps, "g", &gat_cfg, &act_cfg).unwrap();
            let obj_x = |vals: &[f64]| {
                let xt = Tensor::new(vec![v, 3], vals.to_vec()).unwrap();
                gat_forward(&xt, &adj, &ps, "g", &gat_cfg, &act_cfg).unwrap().0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("gat dx", obj_x, x.data(), gx.data(), 15, seed, &mut worst);
            for head in ["g.h0", "g.h1"] {
                let w0 = ps.get(head).weights.data().to_vec();
                let obj_w = |vals: &[f64]| {
                    let mut pc = ps.clone();
                    pc.get_mut(head).weights.data_mut().copy_from_slice(vals);
                    gat_forward(&x, &adj, &pc, "g", &gat_cfg, &act_cfg).unwrap().0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
                };
                fd("gat dW", obj_w, &w0, ps.get(head).weights.grad().unwrap(), 6, seed, &mut worst);
                let a0 = ps.get(head).bias.as_ref().unwrap().data().to_vec();
                let obj_a = |vals: &[f64]| {
                    let mut pc = ps.clone();
                    pc.get_mut(head).bias.as_mut().unwrap().data_mut().copy_from_slice(vals);
                    gat_forward(&x, &adj, &pc, "g", &gat_cfg, &act_cfg).unwrap().0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
                };
                fd("gat da", obj_a, &a0, ps.get(head).bias.as_ref().unwrap().grad().unwrap(), 4, seed, &mut worst);
            }
        }

        // dropout mask path (mask pinned by reseeding)
        {
            let x = rand_t(&[1, 2, 4, 4], &mut rng);
            let r = rand_t(&[1, 2, 4, 4], &mut rng);
            let p = 0.5;
            let mut drng = ChaCha8Rng::seed_from_u64(seed);
            let (_, mask) = dropout_forward(&x, p, true, &mut drng).unwrap();
            let gx = dropout_backward(&r, p, mask.as_deref());
            let obj = |vals: &[f64]| {
                let xt = Tensor::new(x.shape().to_vec(), vals.to_vec()).unwrap();
                let mut drng = ChaCha8Rng::seed_from_u64(seed);
                dropout_forward(&xt, p, true, &mut drng).unwrap().0.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
            };
            fd("dropout dx", obj, x.data(), gx.data(), 12, seed, &mut worst);
        }

        // bce loss
        {
            let pred = Tensor::from_fn(&[4, 4], |_| rng.gen_range(0.05..0.95));
            let target = Tensor::from_fn(&[4, 4], |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 });
            let gp = bce_loss_backward(&pred, &target).unwrap();
            let obj = |vals: &[f64]| {
                let pt = Tensor::new(vec![4, 4], vals.to_vec()).unwrap();
                bce_loss(&pt, &target).unwrap()
            };
            fd("bce dpred", obj, pred.data(), gp.data(), 12, seed, &mut worst);
        }

        // full CNN stream at tiny config
        {
            let cnn_cfg = agn_core::cnn::CnnConfig {
                base_channels: 4,
                input_size: (16, 16),
            };
            let mut ps = ParamSet::new();
            agn_core::cnn::init_cnn_params(&mut ps, &cnn_cfg, &mut rng).unwrap();
            let slice = rand_t(&[1, 1, 16, 16], &mut rng);
            let mask = Tensor::from_fn(&[16, 16], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
            let loss_of = |ps_in: &ParamSet| {
                let mut pc = ps_in.clone();
                let (out, _) = cnn_forward(&slice, &mut pc, &cnn_cfg, true).unwrap();
                bce_loss(&out.prob, &mask).unwrap()
            };
            let mut pm = ps.clone();
            let (out, cache) = cnn_forward(&slice, &mut pm, &cnn_cfg, true).unwrap();
            let dprob = bce_loss_backward(&out.prob, &mask).unwrap();
            pm.zero_grads();
            let grads = CnnGrads {
                prob: Some(&dprob),
                ..CnnGrads::default()
            };
            cnn_backward(&grads, &cache, &mut pm, &cnn_cfg).unwrap();
            for group in ["cnn.s1.conv1", "cnn.s3.bn1", "cnn.side2", "cnn.up3", "cnn.final"] {
                let w0 = ps.get(group).weights.data().to_vec();
                let obj = |vals: &[f64]| {
                    let mut pc = ps.clone();
                    pc.get_mut(group).weights.data_mut().copy_from_slice(vals);
                    loss_of(&pc)
                };
                fd(group, obj, &w0, pm.get(group).weights.grad().unwrap(), 6, seed, &mut worst);
            }
        }

        // joint model at tiny config with a frozen graph
        {
            let mut cfg = ModelConfig::desk((16, 16));
            cfg.cnn.base_channels = 4;
            cfg.gat.in_features = 4;
            cfg.gat.out_features = 1;
            cfg.inference.stage_channels = 1;
            cfg.inference.in_features = 4;
            cfg.inference.dropout_p = 0.0;
            let ps = init_model_params(&cfg, &mut rng).unwrap();
            let slice = rand_t(&[1, 1, 16, 16], &mut rng);
            let mask = Tensor::from_fn(&[16, 16], |_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 });
            let mut ps0 = ps.clone();
            let mut drng = ChaCha8Rng::seed_from_u64(0);
            let (_, cache0) = joint_forward(&slice, &mut ps0, &cfg, None, seed, true, &mut drng).unwrap();
            let sg = SliceGraph {
                vertices: cache0.graph.vertices.clone(),
                adjacency: cache0.graph.adjacency.clone(),
                threshold: 0.0,
            };
            let loss_of = |ps_in: &ParamSet| {
                let mut pc = ps_in.clone();
                let mut drng = ChaCha8Rng::seed_from_u64(0);
                let (out, _) = joint_forward(&slice, &mut pc, &cfg, Some(&sg), 0, true, &mut drng).unwrap();
                bce_loss(&out.prob, &mask).unwrap()
            };
            let mut pm = ps.clone();
            let mut drng = ChaCha8Rng::seed_from_u64(0);
            let (out, cache) = joint_forward(&slice, &mut pm, &cfg, Some(&sg), 0, true, &mut drng).unwrap();
            let dprob = bce_loss_backward(&out.prob, &mask).unwrap();
            pm.zero_grads();
            joint_backward(&dprob, &cache, &mut pm, &cfg).unwrap();
            for group in ["cnn.s2.conv2", "gat.h0", "inf.s1.conv", "inf.final"] {
                let w0 = ps.get(group).weights.data().to_vec();
                let obj = |vals: &[f64]| {
                    let mut pc = ps.clone();
                    pc.get_mut(group).weights.data_mut().copy_from_slice(vals);
                    loss_of(&pc)
                };
                fd(group, obj, &w0, pm.get(group).weights.grad().unwrap(), 5, seed, &mut worst);
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    println!("  gradient suite: max rel err {worst:.2e}, {elapsed:.1}s");
    report(1, "gradient suite", worst < 1e-4 && elapsed < 120.0);
}

// ---- criterion 2: geodesic oracle --------------------------------------------

/// Exhaustive minimum over simple paths; independent of the Dijkstra code.
fn brute_force(prob: &[f64], h: usize, w: usize, src: usize, dst: usize) -> f64 {
    fn dfs(prob: &[f64], h: usize, w: usize, cur: usize, dst: usize, visited: &mut Vec<bool>, cost: f64, best: &mut f64) {
        if cost >= *best {
            return;
        }
        if cur == dst {
            *best = cost;
            return;
        }
        let (r, c) = (cur / w, cur % w);
        let mut neighbors = Vec::with_capacity(4);
        if r > 0 {
            neighbors.push(cur - w);
        }
        if r + 1 < h {
            neighbors.push(cur + w);
        }
        if c > 0 {
            neighbors.push(cur - 1);
        }
        if c + 1 < w {
            neighbors.push(cur + 1);
        }
        for n in neighbors {
            if !visited[n] {
                visited[n] = true;
                dfs(prob, h, w, n, dst, visited, cost + (prob[n] - prob[cur]).abs(), best);
                visited[n] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let mut visited = vec![false; h * w];
    visited[src] = true;
    dfs(prob, h, w, src, dst, &mut visited, 0.0, &mut best);
    best
}

#[test]
fn a2_geodesic_oracle() {
    let t0 = Instant::now();
    let cfg = GraphConfig::default();
    let mut ok = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (h, w) in [(3usize, 3usize), (4, 4)] {
            let prob = Tensor::from_fn(&[h, w], |_| rng.gen_range(0.0..1.0));
            let n = h * w;
            let mut all: Vec<Vec<f64>> = Vec::with_capacity(n);
            for s in 0..n {
                let d = geodesic_distances(&prob, (s / w, s % w), &cfg).unwrap();
                for t in 0..n {
                    let oracle = brute_force(prob.data(), h, w, s, t);
                    if (d[t] - oracle).abs() > 1e-12 {
                        println!("  mismatch seed {seed} {h}x{w} {s}->{t}: {} vs {}", d[t], oracle);
                        ok = false;
                    }
                }
                all.push(d);
            }
            // metric axioms on 100 sampled triples
            for _ in 0..100 {
                let (i, j, k) = (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..n));
                ok &= all[i][i] == 0.0;
                ok &= all[i][j] >= 0.0;
                ok &= (all[i][j] - all[j][i]).abs() <= 1e-12;
                ok &= all[i][k] <= all[i][j] + all[j][k] + 1e-12;
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    println!("  geodesic oracle: {elapsed:.1}s");
    report(2, "geodesic oracle", ok && elapsed < 60.0);
}

// ---- criterion 3: GAT properties ----------------------------------------------

#[test]
fn a3_gat_properties() {
    let act = ActivationConfig::default();
    let cfg = GatConfig {
        heads: 4,
        in_features: 32,
        out_features: 16,
        mode: GatMode::Concat,
    };
    let mut ok = cfg.output_width() == 64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let v = rng.gen_range(4..12);
        let mut ps = ParamSet::new();
        init_gat_params(&mut ps, "g", &cfg, &mut rng).unwrap();
        let mut adj = Adjacency::identity(v);
        for i in 0..v {
            for j in 0..i {
                if rng.gen_bool(0.4) {
                    adj.set_edge(i, j);
                }
            }
        }
        let x = rand_t(&[v, 32], &mut rng);
        let (out, cache) = gat_forward(&x, &adj, &ps, "g", &cfg, &act).unwrap();
        ok &= out.shape() == [v, 64];
        // attention rows sum to 1 over the neighborhood
        for alpha in &cache.alpha {
            for i in 0..v {
                let s: f64 = (0..v).filter(|&j| adj.is_edge(i, j)).map(|j| alpha.data()[i * v + j]).sum();
                ok &= (s - 1.0).abs() < 1e-9;
            }
        }
        // permutation equivariance, exact in double precision: vertex k of the
        // permuted graph corresponds to original vertex perm[k]
        let mut perm: Vec<usize> = (0..v).collect();
        use rand::seq::SliceRandom;
        perm.shuffle(&mut rng);
        let xp = Tensor::from_fn(&[v, 32], |idx| x.data()[perm[idx / 32] * 32 + idx % 32]);
        let mut adjp = Adjacency::identity(v);
        for a in 0..v {
            for b in 0..v {
                if adj.is_edge(perm[a], perm[b]) {
                    adjp.set_edge(a, b);
                }
            }
        }
        let (outp, _) = gat_forward(&xp, &adjp, &ps, "g", &cfg, &act).unwrap();
        for k in 0..v {
            let orig = &out.data()[perm[k] * 64..perm[k] * 64 + 64];
            let permuted = &outp.data()[k * 64..k * 64 + 64];
            ok &= orig.iter().zip(permuted).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }
    report(3, "gat properties", ok);
}

// ---- criterion 4: architecture census ------------------------------------------

#[test]
fn a4_architecture_census() {
    let model = ModelConfig::desk((64, 64));
    let (convs, transposes, pools) = conv_census(&model.cnn);
    let mut ok = convs == 15 && pools == 3 && transposes == 4;

    // pre-final concatenation is 2 * stage_channels wide at both scales;
    // at full scale (base 64, stage_channels 16) that is the 32-channel concat
    let slice = corpus_slices().inputs[0].clone();
    for (base, want) in [(16usize, 8usize), (64, 32)] {
        let mut m = ModelConfig::desk((64, 64));
        m.cnn.base_channels = base;
        m.gat.in_features = m.cnn.feature_channels();
        m.gat.out_features = m.cnn.side_channels();
        m.inference.stage_channels = m.cnn.side_channels();
        m.inference.in_features = m.gat.heads * m.gat.out_features;
        assert_eq!(want, 2 * m.inference.stage_channels);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut params = init_model_params(&m, &mut rng).unwrap();
        let mut drng = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = joint_forward(&slice, &mut params, &m, None, 0, false, &mut drng).unwrap();
        ok &= cache.inference.pre_final_shape() == [1, want, 64, 64];
    }
    report(4, "architecture census", ok);
}

// ---- criterion 5: preprocessing -------------------------------------------------

#[test]
fn a5_preprocessing() {
    let cfg = PreprocessConfig::default();
    let hu = Tensor::new(vec![1, 3], vec![-1100.0, -600.0, 100.0]).unwrap();
    let out = window_hu(&hu, &cfg).unwrap();
    report(5, "preprocessing", out.data() == [0.0, 0.5, 1.0]);
}

// ---- criterion 6: training trend -------------------------------------------------

#[test]
fn a6_training_trend() {
    let run = cnn_run();
    let train_losses: Vec<f64> = run
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .map(|r| r.loss)
        .collect();
    let test_losses: Vec<f64> = run
        .records
        .iter()
        .filter(|r| r.split == Split::Test)
        .map(|r| r.loss)
        .collect();
    let epoch = corpus_slices().train.len();
    let first_train = mean(&train_losses[..epoch]);
    let last_train = mean(&train_losses[train_losses.len() - epoch..]);
    // test records bracket each epoch (one eval before training plus one per
    // epoch boundary), so an epoch's mean averages its two bracketing evals
    let n = test_losses.len();
    let first_test = mean(&test_losses[..2]);
    let last_test = mean(&test_losses[n - 2..]);
    println!(
        "  train loss {first_train:.4} -> {last_train:.4}; test loss {first_test:.4} -> {last_test:.4}; {:.0}s",
        run.seconds
    );
    report(
        6,
        "training trend",
        last_train < first_train && last_test < first_test && run.seconds < 600.0,
    );
}

// ---- criterion 7: segmentation quality --------------------------------------------

#[test]
fn a7_segmentation_quality() {
    let t0 = Instant::now();
    let cnn = cnn_run();
    let joint = joint_run();
    let slices = corpus_slices();
    let test = &slices.test;

    let cnn_dice = per_slice_cnn_dice(&cnn.params, &cnn.model, test);
    let joint_dice = per_slice_joint_dice(joint, &cnn.model, test, 42);
    let cnn_mean = mean(&cnn_dice);
    let joint_mean = mean(&joint_dice);
    let mut ok = cnn_mean >= 0.60 && joint_mean >= cnn_mean - 0.01;
    println!("  cnn test dice {cnn_mean:.4}, joint test dice {joint_mean:.4}");

    // bronchi subset: test slices whose mask has at least two components
    let bronchi: Vec<usize> = test
        .iter()
        .copied()
        .filter(|&z| connected_components(&slices.targets[z]) >= 2)
        .collect();
    assert!(!bronchi.is_empty(), "corpus has no bronchi slices in the test split");
    let cnn_bronchi = mean(&per_slice_cnn_dice(&cnn.params, &cnn.model, &bronchi));

    // graph construction at inference is seed-dependent; the joint model must
    // beat the CNN on the bronchi subset for most vertex-sampling seeds
    let mut wins = 0;
    for seed in 0..10u64 {
        let jb = mean(&per_slice_joint_dice(joint, &cnn.model, &bronchi, 5000 + seed * 101));
        if jb > cnn_bronchi {
            wins += 1;
        }
        println!("  seed {seed}: joint bronchi dice {jb:.4} vs cnn {cnn_bronchi:.4}");
    }
    ok &= wins >= 6;
    let elapsed = t0.elapsed().as_secs_f64() + cnn.seconds;
    println!("  bronchi wins {wins}/10; {elapsed:.0}s total");
    report(7, "segmentation quality", ok && elapsed < 1800.0);
}

// ---- criterion 8: determinism -------------------------------------------------------

#[test]
fn a8_determinism() {
    let vol = generate_phantom(8, 64, 64, 5, Difficulty::WithBronchi).unwrap();
    let cfg = TrainConfig {
        cnn_iters: 8,
        joint_iters: 6,
        graph_update_period: 3,
        base_channels: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    let mut csvs = Vec::new();
    for run in 0..2 {
        let (mut params, _model, rec_cnn) = train_cnn(&vol, &cfg).unwrap();
        let (_, rec_joint) = train_joint(&vol, &cfg, &mut params).unwrap();
        let path = dir.path().join(format!("run{run}.agnc"));
        save_checkpoint(&path, &params, &[("seed".into(), cfg.seed as f64)]).unwrap();
        bytes.push(std::fs::read(&path).unwrap());
        csvs.push((metrics_to_csv(&rec_cnn), metrics_to_csv(&rec_joint)));
    }
    report(8, "determinism", bytes[0] == bytes[1] && csvs[0] == csvs[1]);
}

// ---- criterion 9: format round trips -------------------------------------------------

#[test]
fn a9_format_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;

    // volume
    let vol = generate_phantom(3, 32, 32, 2, Difficulty::TubeOnly).unwrap();
    let vp = dir.path().join("v.agnv");
    save_volume(&vp, &vol).unwrap();
    let v1 = std::fs::read(&vp).unwrap();
    let back = load_volume(&vp).unwrap();
    ok &= back.hu.data() == vol.hu.data() && back.mask.data() == vol.mask.data();
    save_volume(&vp, &back).unwrap();
    ok &= std::fs::read(&vp).unwrap() == v1;

    // checkpoint
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = {
        let mut m = ModelConfig::desk((32, 32));
        m.cnn.base_channels = 4;
        m.gat.in_features = 4;
        m.gat.out_features = 1;
        m.inference.stage_channels = 1;
        m.inference.in_features = 4;
        m
    };
    let params = init_model_params(&model, &mut rng).unwrap();
    let cp = dir.path().join("c.agnc");
    save_checkpoint(&cp, &params, &[("kind".into(), 0.0)]).unwrap();
    let c1 = std::fs::read(&cp).unwrap();
    let mut rng2 = ChaCha8Rng::seed_from_u64(99);
    let mut reload = init_model_params(&model, &mut rng2).unwrap();
    load_checkpoint(&cp, &mut reload).unwrap();
    save_checkpoint(&cp, &reload, &[("kind".into(), 0.0)]).unwrap();
    ok &= std::fs::read(&cp).unwrap() == c1;

    // corrupted headers rejected with diagnostics
    let mut bad = c1.clone();
    bad[0] = b'X';
    std::fs::write(&cp, &bad).unwrap();
    let err = load_checkpoint(&cp, &mut reload).unwrap_err().to_string();
    ok &= err.contains("magic");
    std::fs::write(&cp, &c1[..40]).unwrap();
    let err = load_checkpoint(&cp, &mut reload).unwrap_err().to_string();
    ok &= err.contains("truncated");
    let mut badv = v1.clone();
    badv[0] = b'Z';
    std::fs::write(&vp, &badv).unwrap();
    ok &= load_volume(&vp).unwrap_err().to_string().contains("magic");

    // PGM byte stability
    let img = Tensor::from_fn(&[8, 8], |i| i as f64 / 63.0);
    let p1 = dir.path().join("a.pgm");
    let p2 = dir.path().join("b.pgm");
    write_pgm(&p1, &img).unwrap();
    write_pgm(&p2, &img).unwrap();
    ok &= std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    report(9, "format round trips", ok);
}
