use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokenflow_core::autograd::grad_check;
use tokenflow_core::model::*;
use tokenflow_core::params::Bound;
use tokenflow_core::routing::{block_update, gates, score_tokens};
use tokenflow_core::tokenizers::{assemble_sequence, ModalityFrame};
use tokenflow_core::{Graph, Tensor};

fn frames(config: &ModelConfig, seed: u64) -> Vec<ModalityFrame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tc = &config.tokenizer;
    let mut out = Vec::new();
    for t in 0..config.window {
        for &m in &config.modalities {
            let payload = match m {
                Modality::Image => Tensor::uniform(&[tc.image_size, tc.image_size, tc.image_channels], 0.0, 1.0, &mut rng),
                Modality::Pointcloud => {
                    let mut pts = Tensor::uniform(&[60, 4], 0.0, 1.0, &mut rng);
                    for row in pts.data_mut().chunks_mut(4) {
                        row[0] = row[0] * 100.0 - 50.0;
                        row[1] = 5.0 + row[1] * 9.5;
                        row[2] *= 3.0;
                    }
                    pts
                }
                Modality::Radar => Tensor::uniform(&[tc.radar_tokens + 2, 5], 0.0, 1.0, &mut rng),
                Modality::Gps => Tensor::uniform(&[2], -1.0, 1.0, &mut rng),
                Modality::Rssi => Tensor::uniform(&[1], -70.0, -30.0, &mut rng),
            };
            out.push(ModalityFrame::new(m, payload, t));
        }
    }
    out
}

/// Tiny model with enlarged weights so every path carries signal.
fn tiny_model(seed: u64) -> Model {
    let mut m = Model::new(ModelConfig::tiny(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in m.params.iter_mut() {
        if p.name.ends_with(".w") || p.name.starts_with("emb.") {
            let scale = if p.name.starts_with("tok.") { 0.6 } else { 0.4 };
            let noise = Tensor::uniform(p.tensor.shape(), -scale, scale, &mut rng);
            p.tensor.data_mut().copy_from_slice(noise.data());
        }
    }
    m
}

#[test]
fn tiny_end_to_end_gradient_check() {
    let model = tiny_model(3);
    let fr = frames(&model.config, 4);
    for r in [[0.95, 0.75], [0.83, 0.91]] {
        let mut model = model.clone();
        model.set_keep_ratios(&r).unwrap();
        // Key biases shift every attention logit in a row equally, so their exact
        // gradient is zero and a relative check is meaningless there.
        let held: Vec<bool> = model
            .params
            .iter()
            .map(|p| p.name == "keep_ratio" || p.name.ends_with("attn.k.b"))
            .collect();
        let point: Vec<Tensor> =
            model.params.iter().zip(&held).filter(|(_, &h)| !h).map(|(p, _)| p.tensor.clone()).collect();
        let err = grad_check(
            |g, v| {
                let mut free = v.iter();
                let mut nodes = Vec::with_capacity(held.len());
                for (p, &h) in model.params.iter().zip(&held) {
                    nodes.push(if h { g.constant(p.tensor.clone())? } else { *free.next().unwrap() });
                }
                let p = Bound::from_nodes(nodes);
                let out = model.forward_train(g, &p, &fr, ScoreSource::Router)?;
                task_loss(g, out.logits, &Target::Class(2), model.config.task)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "r = {r:?}: rel err {err:e}");

        let mut g = Graph::new();
        let p = model.params.bind(&mut g, true).unwrap();
        let out = model.forward_train(&mut g, &p, &fr, ScoreSource::Router).unwrap();
        let loss = task_loss(&mut g, out.logits, &Target::Class(2), model.config.task).unwrap();
        let grads = g.backward(loss).unwrap();
        for blk in &model.ids.blocks {
            let gk = grads.get(p[blk.encoder.k.b]).unwrap();
            assert!(gk.iter().all(|v| v.abs() < 1e-12));
        }
        let stem = model.params.iter().position(|q| q.name == "tok.image.stem.w").unwrap();
        let gi = grads.get(p.nodes()[stem]).unwrap();
        assert!(gi.iter().any(|v| v.abs() > 1e-6));
    }
}

#[test]
fn full_ratio_matches_routing_free_forward() {
    let model = tiny_model(5);
    let fr = frames(&model.config, 6);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false).unwrap();
    let out = model.forward_train(&mut g, &p, &fr, ScoreSource::Router).unwrap();
    let routed = g.value(out.logits).clone();
    assert!(out.diagnostics.iter().all(|d| d.k_down == 10 && d.k_up == 10));

    let mut g = Graph::new();
    let p = model.params.bind(&mut g, false).unwrap();
    let seq = assemble_sequence(&mut g, &p, &model.ids.tokenizer, &model.config, &fr).unwrap();
    let all: Vec<usize> = (0..seq.len()).collect();
    let mut x = seq.tokens;
    for blk in &model.ids.blocks {
        let s = score_tokens(&mut g, &p, &blk.router, x).unwrap();
        let (delta, _) = block_update(&mut g, &p, &blk.encoder, x).unwrap();
        let gate = gates(&mut g, s, &all, model.config.gate).unwrap();
        let upd = g.mul(delta, gate).unwrap();
        x = g.add(x, upd).unwrap();
    }
    let cls = g.gather_rows(x, &[0]).unwrap();
    let h = g.layernorm(cls, p[model.ids.final_gamma], p[model.ids.final_beta]).unwrap();
    let logits = model.ids.head.apply(&mut g, &p, h).unwrap();
    let reference = g.value(logits).data().to_vec();
    for (a, b) in routed.data().iter().zip(&reference) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    let infer = model.forward_infer(&fr).unwrap();
    assert_eq!(infer.data(), routed.data());
}

#[test]
fn inference_matches_training_on_lattice() {
    let mut model = tiny_model(7);
    let fr = frames(&model.config, 8);
    for r in [[0.3, 0.7], [0.1, 1.0], [0.5, 0.5]] {
        model.set_keep_ratios(&r).unwrap();
        let mut g = Graph::new();
        let p = model.params.bind(&mut g, false).unwrap();
        let out = model.forward_train(&mut g, &p, &fr, ScoreSource::Router).unwrap();
        let infer = model.forward_infer(&fr).unwrap();
        assert!(g.value(out.logits).max_abs_diff(&infer) <= 1e-6, "r = {r:?}");
    }
}

#[test]
fn inference_token_counts_follow_ceiling() {
    let mut model = Model::new(ModelConfig::desk_beam(), 0).unwrap();
    model.set_keep_ratios(&[1.0, 0.5, 0.3, 0.1]).unwrap();
    assert_eq!(model.inference_ks(), vec![206, 103, 62, 21]);
    let fr = frames(&model.config, 1);
    let (logits, traces) = model.forward_infer_detailed(&fr, ScoreSource::Router).unwrap();
    assert_eq!(logits.shape(), &[16]);
    let ks: Vec<usize> = traces.iter().map(|t| t.attention_shape[1]).collect();
    assert_eq!(ks, vec![206, 103, 62, 21]);
    assert!(traces.iter().all(|t| t.attention_shape == vec![4, t.attention_shape[1], t.attention_shape[1]]));
}

#[test]
fn desk_forward_train_shapes() {
    let mut model = Model::new(ModelConfig::desk_beam(), 2).unwrap();
    model.set_keep_ratios(&[0.9, 0.7, 0.5, 0.3]).unwrap();
    let fr = frames(&model.config, 3);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true).unwrap();
    let out = model.forward_train(&mut g, &p, &fr, ScoreSource::Router).unwrap();
    assert_eq!(g.value(out.logits).shape(), &[16]);
    assert!((out.r_avg - 0.6).abs() < 1e-12);
    let d = &out.diagnostics[1];
    assert_eq!((d.k_down, d.k_up), (144, 145));
    assert!((d.w_up - (206.0 * 0.7 - 144.0)).abs() < 1e-12);
    let loss = total_loss(&mut g, out.logits, &Target::Class(5), out.r, &model.config).unwrap();
    let grads = g.backward(loss).unwrap();
    let gr = grads.get(p[model.ids.keep_ratio]).unwrap();
    assert!(gr.iter().all(|v| v.is_finite()));
    assert!(gr.iter().any(|&v| v != 0.0));
}

#[test]
fn handover_model_outputs_one_logit() {
    let model = Model::new(ModelConfig::desk_handover(), 0).unwrap();
    let fr = frames(&model.config, 0);
    let logits = model.forward_infer(&fr).unwrap();
    assert_eq!(logits.shape(), &[1]);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut model = Model::new(ModelConfig::desk_beam(), 11).unwrap();
    model.set_keep_ratios(&[0.8, 0.61, 0.44, 0.3]).unwrap();
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.config, model.config);
    assert_eq!(loaded.params, model.params);
    let fr = frames(&model.config, 12);
    let a = model.forward_infer(&fr).unwrap();
    let b = loaded.forward_infer(&fr).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn construction_is_deterministic() {
    let a = Model::new(ModelConfig::tiny(), 9).unwrap();
    let b = Model::new(ModelConfig::tiny(), 9).unwrap();
    let c = Model::new(ModelConfig::tiny(), 10).unwrap();
    assert_eq!(a.params, b.params);
    assert_ne!(a.params, c.params);
}

#[test]
fn f32_storage_stays_close() {
    let model = tiny_model(1);
    let fr = frames(&model.config, 1);
    let a = model.forward_infer(&fr).unwrap();
    let b = model.to_f32_storage().forward_infer(&fr).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-4);
}

#[test]
fn missing_modality_is_reported() {
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    let mut fr = frames(&model.config, 0);
    fr.retain(|f| f.kind != Modality::Radar);
    assert!(model.forward_infer(&fr).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn prop_topk_sets_nest(logits in prop::collection::vec(-10.0f64..10.0, 1..20)) {
        let task = Task::Beam { classes: logits.len() };
        match predict(&logits, task) {
            Prediction::Beam { top1, top3, top5 } => {
                prop_assert_eq!(top3[0], top1);
                prop_assert!(top3.iter().all(|i| top5.contains(i)));
                prop_assert_eq!(top5.len(), logits.len().min(5));
                let best = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(logits[top1], best);
            }
            Prediction::Handover { .. } => prop_assert!(false),
        }
    }
}
