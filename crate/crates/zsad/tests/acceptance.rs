//! Acceptance suite: one test per criterion, each printing a single
//! `ACCEPTANCE <name>: PASS` line on success (run with `--nocapture` to see
//! them).

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

use zsad::backbone::{dpam_score_matrix, BackboneHandle, DpamMode};
use zsad::data;
use zsad::eval;
use zsad::losses::{self, GlocalConfig};
use zsad::math;
use zsad::prompts::{self, PromptMode};
use zsad::runner::config::RunConfig;
use zsad::runner::train::{self, TrainSample};
use zsad::scoring::{self, LayerId, ScorePair};
use zsad::tape::Tape;

fn pass(name: &str) {
    println!("ACCEPTANCE {name}: PASS");
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

/// Random synthetic training samples built directly from unit-norm features.
fn synthetic_samples(handle: &BackboneHandle, n: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = handle.embed_dim();
    let grid = handle.patch_grid();
    let n_patches = grid.0 * grid.1;
    (0..n)
        .map(|i| {
            let label = (i % 2) as u8;
            let g: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = math::l2_norm(&g);
            let global_embed = Array1::from_vec(g.into_iter().map(|v| v / norm).collect());
            let patches = math::l2_normalize_rows(&Array2::from_shape_fn(
                (n_patches, d),
                |_| rng.gen_range(-1.0..1.0),
            ));
            let mut mask_flat = Array2::zeros((n_patches, 1));
            if label == 1 {
                for p in 0..n_patches / 2 {
                    mask_flat[(p, 0)] = 1.0;
                }
            }
            TrainSample {
                features: zsad::backbone::VisualFeatures {
                    global_embed,
                    patch_embeds: vec![patches.clone(), patches],
                    tap_layers: vec![1, 2],
                    grid,
                },
                label,
                mask_flat,
                class_name: "synthetic".into(),
            }
        })
        .collect()
}

#[test]
fn gradient_correctness() {
    let start = Instant::now();
    let handle = BackboneHandle::stub(42);
    let config = RunConfig::stub_defaults();
    let samples = synthetic_samples(&handle, 2, 7);
    let batch: Vec<&TrainSample> = samples.iter().collect();

    let mut state = prompts::init_prompt_state(
        handle.text_width(),
        config.prompt.context_len,
        config.prompt.tuning_depth,
        config.prompt.tuning_length,
        0,
        PromptMode::Agnostic,
    )
    .unwrap();

    let mut tape = Tape::new();
    let loss = train::batch_loss_graph(&handle, &state, &config, &batch, &mut tape).unwrap();
    let grads = tape.backward(loss.total_node);
    let g_v = grads.get(&tape, loss.params.v);
    let g_w = grads.get(&tape, loss.params.w);
    let g_t: Vec<Array2<f64>> = loss
        .params
        .tuning
        .iter()
        .map(|&id| grads.get(&tape, id))
        .collect();

    let eps = 1e-5;
    let mut fd_of = |state: &mut prompts::PromptState,
                     select: &dyn Fn(&mut prompts::PromptState) -> &mut Array2<f64>|
     -> Array2<f64> {
        let dim = select(state).dim();
        let mut out = Array2::zeros(dim);
        for idx in 0..dim.0 * dim.1 {
            let pos = (idx / dim.1, idx % dim.1);
            let orig = select(state)[pos];
            select(state)[pos] = orig + eps;
            let mut t1 = Tape::new();
            let up = train::batch_loss_graph(&handle, state, &config, &batch, &mut t1)
                .unwrap()
                .total;
            select(state)[pos] = orig - eps;
            let mut t2 = Tape::new();
            let down = train::batch_loss_graph(&handle, state, &config, &batch, &mut t2)
                .unwrap()
                .total;
            select(state)[pos] = orig;
            out[pos] = (up - down) / (2.0 * eps);
        }
        out
    };

    let fd_v = fd_of(&mut state, &|s| &mut s.normal_ctx);
    let fd_w = fd_of(&mut state, &|s| &mut s.abnormal_ctx);
    assert!(rel_err(&g_v, &fd_v) < 1e-3, "V grad rel err {}", rel_err(&g_v, &fd_v));
    assert!(rel_err(&g_w, &fd_w) < 1e-3, "W grad rel err {}", rel_err(&g_w, &fd_w));
    for m in 0..g_t.len() {
        let fd_t = fd_of(&mut state, &move |s| &mut s.tuning.tokens[m]);
        assert!(
            rel_err(&g_t[m], &fd_t) < 1e-3,
            "tuning[{m}] grad rel err {}",
            rel_err(&g_t[m], &fd_t)
        );
    }
    assert!(start.elapsed().as_secs() < 60, "gradient check exceeded 60 s");
    pass("gradient-correctness");
}

#[test]
fn class_probability_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let k = rng.gen_range(2..=6usize);
        let d = rng.gen_range(2..=16usize);
        let logit_scale = rng.gen_range(0.5..50.0);
        let f = Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0));
        let gs: Vec<Array1<f64>> = (0..k)
            .map(|_| Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let views: Vec<_> = gs.iter().map(|g| g.view()).collect();
        let probs = scoring::class_probability(&views, &f, logit_scale).unwrap();

        // Scalar brute-force softmax with max subtraction.
        let raw: Vec<f64> = gs.iter().map(|g| g.dot(&f)).collect();
        let sims: Vec<f64> = raw.iter().map(|s| s * logit_scale).collect();
        let max = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = sims.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (p, e) in probs.iter().zip(&exps) {
            assert!((p - e / z).abs() < 1e-9, "softmax mismatch: {p} vs {}", e / z);
        }

        if k == 2 {
            let x = (raw[1] - raw[0]) * logit_scale;
            let expected = 1.0 / (1.0 + (-x).exp());
            assert_eq!(probs[1], expected, "two-class sigmoid must be exact");
        }
    }
    pass("class-probability-oracle");
}

#[test]
fn loss_analytic_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 64;
    let s_a = Array2::from_shape_fn((n, n), |_| rng.gen_range(0.02..0.98));
    let s_n = s_a.mapv(|v| 1.0 - v);
    let target = Array2::from_shape_fn((n, n), |_| (rng.gen_bool(0.5)) as u8 as f64);
    let pair = ScorePair {
        s_n: s_n.clone(),
        s_a: s_a.clone(),
        layer_id: LayerId::Layer(1),
    };

    // gamma = 0, alpha = 0.5 halves the pixel cross-entropy.
    let focal = losses::focal_loss(&pair, &target, 0.0, 0.5).unwrap();
    let ce: f64 = target
        .iter()
        .zip(s_a.iter())
        .map(|(&t, &a)| -(if t > 0.0 { a } else { 1.0 - a }).ln())
        .sum::<f64>()
        / (n * n) as f64;
    assert!((focal - 0.5 * ce).abs() < 1e-9, "focal {focal} vs 0.5 ce {}", 0.5 * ce);

    // Dice hand cases on large grids so the smooth term is negligible.
    let big = 100usize;
    let ones = Array2::<f64>::ones((big, big));
    let zeros = Array2::<f64>::zeros((big, big));
    assert!(losses::dice_loss(&ones, &ones, 1.0).unwrap().abs() < 1e-3);
    assert!((losses::dice_loss(&zeros, &ones, 1.0).unwrap() - 1.0).abs() < 1e-3);
    // Half the prediction overlaps nothing: dice = 1 - 2/3.
    let mut half = Array2::<f64>::zeros((big, big));
    let mut target_left = Array2::<f64>::zeros((big, big));
    for y in 0..big {
        for x in 0..big / 2 {
            half[(y, x)] = 1.0;
            target_left[(y, x)] = 1.0;
        }
        for x in big / 2..big {
            half[(y, x)] = 1.0;
        }
    }
    let third = losses::dice_loss(&half, &target_left, 1.0).unwrap();
    assert!((third - 1.0 / 3.0).abs() < 1e-3, "dice third case {third}");

    // Uniform two-class global cross-entropy is ln 2.
    let probs = Array2::from_shape_vec((1, 2), vec![0.5, 0.5]).unwrap();
    let g = losses::global_loss(&probs, &[1]).unwrap();
    assert!((g - std::f64::consts::LN_2).abs() < 1e-9, "uniform CE {g}");
    pass("loss-analytic-suite");
}

#[test]
fn map_pipeline_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // Softmax-produced pairs satisfy 0.5 (1 - S_n + S_a) = S_a.
    let logits = Array2::from_shape_fn((37 * 37, 2), |_| rng.gen_range(-5.0..5.0));
    let probs = math::softmax_rows(&logits);
    let mut s_n = Array2::zeros((37, 37));
    let mut s_a = Array2::zeros((37, 37));
    for i in 0..37 * 37 {
        s_n[(i / 37, i % 37)] = probs[(i, 0)];
        s_a[(i / 37, i % 37)] = probs[(i, 1)];
    }
    for ((y, x), &a) in s_a.indexed_iter() {
        let half = 0.5 * (1.0 - s_n[(y, x)] + a);
        assert!((half - a).abs() < 1e-6);
    }

    let pair = ScorePair {
        s_n,
        s_a,
        layer_id: LayerId::Fused,
    };
    let map = scoring::compose_anomaly_map(&pair, (518, 518), 4.0).unwrap();
    assert_eq!(map.dim(), (518, 518));

    // Constant maps are fixed points of the blur.
    let constant = Array2::from_elem((37, 37), 0.37);
    let blurred = scoring::gaussian_blur(&constant, 4.0);
    for &v in blurred.iter() {
        assert!((v - 0.37).abs() < 1e-12, "blur moved a constant map to {v}");
    }
    pass("map-pipeline-identity");
}

#[test]
fn dpam_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, d) = (8, 16);
    for i in 0..1000 {
        let q = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let k = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        let v = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));

        if i < 100 {
            for mode in [DpamMode::Qq, DpamMode::Kk, DpamMode::Vv] {
                let s = dpam_score_matrix(&q, &k, &v, mode).unwrap();
                for y in 0..n {
                    for x in 0..n {
                        assert!((s[(y, x)] - s[(x, y)]).abs() <= 1e-6);
                    }
                }
            }
            // QK mode bit-matches native scaled dot-product attention scores.
            let native = q.dot(&k.t()).mapv(|x| x / (d as f64).sqrt());
            let s = dpam_score_matrix(&q, &k, &v, DpamMode::Qk).unwrap();
            assert_eq!(s, native, "QK scores must be bit-identical");
        }

        // With row-normalized v, the VV softmax row max sits on the diagonal.
        let vn = math::l2_normalize_rows(&v);
        let s = dpam_score_matrix(&q, &k, &vn, DpamMode::Vv).unwrap();
        let attn = math::softmax_rows(&s);
        for y in 0..n {
            let row_max = (0..n).map(|x| attn[(y, x)]).fold(f64::MIN, f64::max);
            assert!(attn[(y, y)] >= row_max - 1e-12, "diagonal not row max");
        }
    }
    pass("dpam-properties");
}

#[test]
fn zero_depth_tuning_equivalence() {
    let handle = BackboneHandle::stub(42);
    let state = prompts::init_prompt_state(
        handle.text_width(),
        12,
        0,
        4,
        0,
        PromptMode::Agnostic,
    )
    .unwrap();

    let (plain_n, plain_a) = prompts::compute_prompt_embeddings(&handle, &state, "object").unwrap();
    let mut tape = Tape::new();
    let (g_n, g_a, _) =
        prompts::compute_prompt_embeddings_on_tape(&handle, &mut tape, &state, "object").unwrap();
    let tape_n = tape.val(g_n).row(0).to_owned();
    let tape_a = tape.val(g_a).row(0).to_owned();
    assert_eq!(plain_n, tape_n, "normal embedding must be bit-identical");
    assert_eq!(plain_a, tape_a, "abnormal embedding must be bit-identical");
    pass("zero-depth-tuning-equivalence");
}

#[test]
fn metric_oracles() {
    // Four-point AUROC = 0.75.
    let v = eval::auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    assert!((v - 0.75).abs() < 1e-12, "4-point auroc {v}");

    // AUPRO vs exhaustive-threshold oracle on an 8x8 single-region fixture.
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let map = Array2::from_shape_fn((8, 8), |_| rng.gen_range(0.0..1.0));
        let mut mask = Array2::zeros((8, 8));
        let (y0, x0) = (rng.gen_range(0..7usize), rng.gen_range(0..7usize));
        for dy in 0..2 {
            for dx in 0..2 {
                mask[(y0 + dy, x0 + dx)] = 1.0;
            }
        }
        let got = eval::aupro(&[map.clone()], &[mask.clone()], 0.3, 200).unwrap();

        // Oracle: enumerate every distinct value as a threshold.
        let mut thresholds: Vec<f64> = map.iter().cloned().collect();
        thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
        thresholds.dedup();
        let region: Vec<(usize, usize)> = mask
            .indexed_iter()
            .filter(|(_, &m)| m > 0.0)
            .map(|(p, _)| p)
            .collect();
        let n_normal = 64 - region.len();
        let mut curve = vec![(0.0f64, 0.0f64)];
        for &t in thresholds.iter().rev() {
            let pro = region.iter().filter(|&&p| map[p] >= t).count() as f64
                / region.len() as f64;
            let fp = map
                .indexed_iter()
                .filter(|(p, &s)| mask[*p] <= 0.0 && s >= t)
                .count();
            curve.push((fp as f64 / n_normal as f64, pro));
        }
        let expected = eval::area_under_curve(&curve, 0.3) / 0.3;
        assert!((got - expected).abs() < 1e-6, "aupro {got} vs oracle {expected}");
    }

    // Average precision vs an independent per-positive computation.
    for _ in 0..50 {
        let n = rng.gen_range(2..=20usize);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.5) as u8).collect();
        if !labels.contains(&1) {
            labels[0] = 1;
        }
        let got = eval::average_precision(&scores, &labels).unwrap();

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        let n_pos = labels.iter().filter(|&&l| l == 1).count();
        let mut expected = 0.0;
        for (rank, &idx) in order.iter().enumerate() {
            if labels[idx] == 1 {
                let hits = order[..=rank].iter().filter(|&&j| labels[j] == 1).count();
                expected += hits as f64 / (rank + 1) as f64;
            }
        }
        expected /= n_pos as f64;
        assert!((got - expected).abs() < 1e-12, "ap {got} vs {expected}");
    }
    pass("metric-oracles");
}

#[test]
fn agnostic_invariance() {
    let handle = BackboneHandle::stub(42);
    let state = prompts::init_prompt_state(handle.text_width(), 12, 2, 4, 0, PromptMode::Agnostic)
        .unwrap();
    let names = [
        "bottle", "cable", "capsule", "carpet", "grid", "hazelnut", "leather", "pill", "screw",
        "zipper",
    ];
    let (base_n, base_a) = prompts::compute_prompt_embeddings(&handle, &state, names[0]).unwrap();
    let (seq_n0, seq_a0) = prompts::build_token_sequences(&handle, &state, names[0]).unwrap();
    for name in &names[1..] {
        let (seq_n, seq_a) = prompts::build_token_sequences(&handle, &state, name).unwrap();
        assert_eq!(seq_n.token_ids(), seq_n0.token_ids());
        assert_eq!(seq_a.token_ids(), seq_a0.token_ids());
        let (g_n, g_a) = prompts::compute_prompt_embeddings(&handle, &state, name).unwrap();
        assert_eq!(g_n, base_n, "agnostic g_n depends on class name {name}");
        assert_eq!(g_a, base_a, "agnostic g_a depends on class name {name}");
    }
    pass("agnostic-invariance");
}

#[test]
fn end_to_end_smoke() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let train_root = dir.path().join("train");
    let eval_root = dir.path().join("eval");
    data::generate_synthetic_dataset(&train_root, 0, 16, 64).unwrap();
    data::generate_synthetic_dataset(&eval_root, 1, 16, 64).unwrap();

    let mut config = RunConfig::stub_defaults();
    config.data.train_root = Some(train_root);
    config.data.eval_root = Some(eval_root.clone());
    config.seed = 0;

    let handle = config.load_backbone().unwrap();
    let hash_before = handle.weights_hash();
    let out_dir = dir.path().join("run");
    let outcome = train::run_train_with_backbone(&config, &handle, &out_dir).unwrap();

    // Frozen backbone: weights bit-identical after 15 epochs.
    assert_eq!(handle.weights_hash(), hash_before, "backbone weights changed");
    pass("frozen-backbone");

    assert!(
        outcome.final_loss <= 0.5 * outcome.initial_loss,
        "loss did not halve: {} -> {}",
        outcome.initial_loss,
        outcome.final_loss
    );

    let run = zsad::runner::run_infer(&config, &handle, &outcome.state, &eval_root).unwrap();
    let scores: Vec<f64> = run.results.iter().map(|r| r.image_score).collect();
    let labels: Vec<u8> = run.results.iter().map(|r| r.sample.label).collect();
    let auroc = eval::auroc(&scores, &labels).unwrap();
    assert!(auroc >= 0.9, "held-out image AUROC {auroc} < 0.9");

    assert!(
        start.elapsed().as_secs() < 300,
        "smoke test exceeded 5 minutes"
    );
    pass("end-to-end-smoke");
}
