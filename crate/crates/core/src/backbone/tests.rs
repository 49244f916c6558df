use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{ForecastShape, Model, ModelConfig, Stage};

fn random_input(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-2.0..2.0))
}

fn model_with(layers: usize, lora: Option<LoraConfig>, seed: u64) -> Model<f64> {
    let mut cfg = ModelConfig::toy();
    cfg.backbone.layers = layers;
    cfg.lora = lora;
    Model::new(cfg, seed).unwrap()
}

fn run(m: &Model<f64>, x: &Array2<f64>) -> Array2<f64> {
    forward(&m.params, &m.backbone, &m.config.backbone, x.view()).unwrap()
}

fn randomize_lora_b(m: &mut Model<f64>, rng: &mut ChaCha8Rng) {
    for block in m.backbone.blocks.clone() {
        for l in [block.lora_q, block.lora_k].into_iter().flatten() {
            m.params.mat_mut(l.b).mapv_inplace(|_| rng.random_range(-0.5..0.5));
        }
    }
}

#[test]
fn causal_outputs_ignore_future_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..20 {
        let layers = 1 + case % 4;
        let len = 2 + (case * 7) % 15;
        let mut m = model_with(layers, Some(LoraConfig::default()), case as u64);
        randomize_lora_b(&mut m, &mut rng);
        let x = random_input(len, 16, &mut rng);
        let z = run(&m, &x);
        let t = rng.random_range(0..len - 1);
        let mut perturbed = x.clone();
        for row in t + 1..len {
            perturbed.row_mut(row).mapv_inplace(|v| v + rng.random_range(-3.0..3.0));
        }
        let z2 = run(&m, &perturbed);
        for row in 0..=t {
            let diff = (&z.row(row) - &z2.row(row)).iter().fold(0.0f64, |a, d| a.max(d.abs()));
            assert!(diff < 1e-6, "case {case}: row {row} moved by {diff}");
        }
    }
}

#[test]
fn empty_stack_is_final_layer_norm() {
    let m = model_with(0, None, 1);
    let x = random_input(5, 16, &mut ChaCha8Rng::seed_from_u64(2));
    let z = run(&m, &x);
    for (zr, xr) in z.rows().into_iter().zip(x.rows()) {
        let mean = xr.mean().unwrap();
        let var = xr.mapv(|v| (v - mean).powi(2)).mean().unwrap();
        for (a, b) in zr.iter().zip(xr.iter()) {
            assert!((a - (b - mean) / (var + LN_EPS).sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_rows_are_simplex_vectors() {
    let m = model_with(3, None, 3);
    let x = random_input(9, 16, &mut ChaCha8Rng::seed_from_u64(4));
    let (_, cache) = forward_train(
        &m.params,
        &m.backbone,
        &m.config.backbone,
        x.view(),
        None::<&mut ChaCha8Rng>,
    )
    .unwrap();
    for block in 0..3 {
        for head in 0..2 {
            let att = cache.attention(block, head);
            for (i, row) in att.rows().into_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p >= 0.0));
                assert!(row.iter().skip(i + 1).all(|&p| p == 0.0));
            }
        }
    }
}

#[test]
fn fresh_lora_changes_nothing() {
    let plain = model_with(2, None, 9);
    let mut adapted = plain.clone();
    let added = adapted
        .attach_lora(&LoraConfig::default(), &mut ChaCha8Rng::seed_from_u64(1))
        .unwrap();
    assert_eq!(added, 2 * 2 * (2 * 4 * 16));
    let x = random_input(7, 16, &mut ChaCha8Rng::seed_from_u64(8));
    assert_eq!(run(&plain, &x), run(&adapted, &x));
}

#[test]
fn lora_attach_errors() {
    let mut m = model_with(2, None, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        m.attach_lora(&LoraConfig { rank: 0, alpha: 1.0 }, &mut rng),
        Err(Error::Config(_))
    ));
    m.attach_lora(&LoraConfig::default(), &mut rng).unwrap();
    assert!(matches!(
        m.attach_lora(&LoraConfig::default(), &mut rng),
        Err(Error::LoraAttached)
    ));
}

#[test]
fn lora_matches_merged_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut m = model_with(2, Some(LoraConfig { rank: 3, alpha: 6.0 }), 4);
    randomize_lora_b(&mut m, &mut rng);
    let scaling = 2.0;
    let mut merged = m.without_alignment_head().unwrap();
    let blocks = merged.backbone.blocks.clone();
    for b in &blocks {
        for (w, l) in [(b.w_q, b.lora_q.unwrap()), (b.w_k, b.lora_k.unwrap())] {
            let delta = merged.params.mat(l.b).dot(&merged.params.mat(l.a)) * scaling;
            let mut wm = merged.params.mat_mut(w);
            wm += &delta;
        }
    }
    // drop the adapters from the merged copy
    let mut cfg = merged.config.clone();
    cfg.lora = None;
    let merged = Model::from_store(cfg, merged.params.retain(|p| p.group != crate::ParamGroup::Lora)).unwrap();
    let x = random_input(11, 16, &mut rng);
    let diff = (&run(&m, &x) - &run(&merged, &x))
        .iter()
        .fold(0.0f64, |a, d| a.max(d.abs()));
    assert!(diff < 1e-5, "merge mismatch {diff}");
}

#[test]
fn dropout_zero_rate_is_identity_and_nonzero_rate_is_seeded() {
    let mut m = model_with(2, None, 1);
    let x = random_input(6, 16, &mut ChaCha8Rng::seed_from_u64(3));
    let (z0, _) = forward_train(
        &m.params,
        &m.backbone,
        &m.config.backbone,
        x.view(),
        Some(&mut ChaCha8Rng::seed_from_u64(0)),
    )
    .unwrap();
    assert_eq!(z0, run(&m, &x));
    m.config.backbone.dropout = 0.3;
    let a = forward_train(
        &m.params,
        &m.backbone,
        &m.config.backbone,
        x.view(),
        Some(&mut ChaCha8Rng::seed_from_u64(7)),
    )
    .unwrap()
    .0;
    let b = forward_train(
        &m.params,
        &m.backbone,
        &m.config.backbone,
        x.view(),
        Some(&mut ChaCha8Rng::seed_from_u64(7)),
    )
    .unwrap()
    .0;
    assert_eq!(a, b);
    assert_ne!(a, z0);
}

#[test]
fn forward_rejects_bad_shapes() {
    let m = model_with(1, None, 0);
    assert!(forward(
        &m.params,
        &m.backbone,
        &m.config.backbone,
        Array2::<f64>::zeros((4, 8)).view()
    )
    .is_err());
    assert!(forward(
        &m.params,
        &m.backbone,
        &m.config.backbone,
        Array2::<f64>::zeros((300, 16)).view()
    )
    .is_err());
}

#[test]
fn gelu_derivative_matches_central_difference() {
    for i in -40..=40 {
        let x = i as f64 * 0.1;
        let h = 1e-6;
        let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        assert!((fd - gelu_grad(x)).abs() < 1e-8);
    }
}

#[test]
fn default_policy_flags() {
    let mut m = model_with(2, Some(LoraConfig::default()), 0);
    m.apply_freeze_policy(&FreezePolicy::default());
    let flag = |name: &str| m.params.get(m.params.require(name).unwrap()).trainable;
    assert!(!flag("blocks.0.attn.w_q"));
    assert!(!flag("blocks.1.ffn.w2"));
    assert!(flag("blocks.0.ln1.gamma"));
    assert!(flag("blocks.1.lora_k.b"));
    assert!(flag("head.align"));
    m.apply_freeze_policy(&FreezePolicy::frozen());
    assert_eq!(m.trainable_fraction(), 0.0);
    assert!(FreezePolicy::from_names(&["layer_norm", "bogus"]).is_err());
}

// Brute-force census: list every backbone tensor by hand.
fn census_oracle(layers: usize, d: usize, ffn: usize, rank: usize) -> (usize, usize) {
    let mut trainable = 0;
    let mut total = 0;
    for _ in 0..layers {
        let tensors: [(usize, bool); 14] = [
            (d, true),      // ln1.gamma
            (d, true),      // ln1.beta
            (d * d, false), // w_q
            (d * d, false), // w_k
            (d * d, false), // w_v
            (d * d, false), // w_o
            (d, true),      // ln2.gamma
            (d, true),      // ln2.beta
            (ffn * d, false),
            (ffn, false),
            (d * ffn, false),
            (d, false),
            (2 * rank * d, true), // lora_q a + b
            (2 * rank * d, true), // lora_k a + b
        ];
        for (n, t) in tensors {
            total += n;
            if t {
                trainable += n;
            }
        }
    }
    (trainable + 2 * d, total + 2 * d)
}

#[test]
fn trainable_fraction_matches_census() {
    let mut m = model_with(2, Some(LoraConfig::default()), 0);
    m.apply_freeze_policy(&FreezePolicy::default());
    let (t, n) = census_oracle(2, 16, 64, 4);
    assert_eq!(m.census().trainable, t);
    assert_eq!(m.census().total, n);
    assert_eq!(m.trainable_fraction(), t as f64 / n as f64);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let mut cfg = ModelConfig::toy();
    cfg.forecast = Some(ForecastShape {
        horizon: 8,
        channels: 2,
    });
    let mut m = Model::<f32>::new(cfg, 17).unwrap();
    m.apply_freeze_policy(&FreezePolicy::default());
    let manifest = save_checkpoint(&path, &m, Stage::Forecasting).unwrap();
    let (loaded, read) = load_checkpoint::<f32>(&path, None).unwrap();
    assert_eq!(manifest, read);
    assert_eq!(read.stage, Stage::Forecasting);
    for ((_, a), (_, b)) in m.params.iter().zip(loaded.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.trainable, b.trainable);
        assert!(a
            .value
            .iter()
            .zip(b.value.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    // saving the loaded copy reproduces the file byte for byte
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&again, &loaded, Stage::Forecasting).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn checkpoint_truncates_to_first_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("deep.ckpt");
    let mut cfg = ModelConfig::toy();
    cfg.backbone.layers = 12;
    let m = Model::<f64>::new(cfg, 2).unwrap();
    save_checkpoint(&path, &m, Stage::Init).unwrap();
    let (six, _) = load_checkpoint::<f64>(&path, Some(6)).unwrap();
    assert_eq!(six.backbone.blocks.len(), 6);
    assert_eq!(six.config.backbone.layers, 6);
    assert!(six.params.id("blocks.6.attn.w_q").is_none());
    let name = "blocks.5.ffn.w1";
    assert_eq!(
        six.params.mat(six.params.require(name).unwrap()),
        m.params.mat(m.params.require(name).unwrap())
    );
    let ln = "ln_f.gamma";
    assert_eq!(
        six.params.vec(six.params.require(ln).unwrap()),
        m.params.vec(m.params.require(ln).unwrap())
    );
    match load_checkpoint::<f64>(&path, Some(13)) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("12"), "{msg}"),
        other => panic!("expected error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn checkpoint_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::<f32>::new(ModelConfig::toy(), 0).unwrap();
    save_checkpoint(&path, &m, Stage::Alignment).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let text = String::from_utf8_lossy(&bytes).into_owned();

    let truncated = dir.path().join("t.ckpt");
    std::fs::write(&truncated, &bytes[..bytes.len() - 4]).unwrap();
    assert!(load_checkpoint::<f32>(&truncated, None).is_err());

    let header_end = text.find("payload ").unwrap();
    let payload_start = header_end + text[header_end..].find('\n').unwrap() + 1;
    let swap = |from: &str, to: &str, file: &str| {
        let mut patched = text[..payload_start].replacen(from, to, 1).into_bytes();
        patched.extend_from_slice(&bytes[payload_start..]);
        let p = dir.path().join(file);
        std::fs::write(&p, patched).unwrap();
        load_checkpoint::<f32>(&p, None)
    };
    assert!(
        matches!(swap("tsalign-checkpoint 1", "tsalign-checkpoint 9", "v.ckpt"), Err(Error::Checkpoint(m)) if m.contains("version"))
    );
    assert!(matches!(
        swap("tensor head.align", "tensor head.other", "n.ckpt"),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(swap(" 8x16 ", " 16x8 ", "s.ckpt"), Err(Error::Checkpoint(m)) if m.contains("shape")));
}

#[test]
fn checkpoint_converts_between_dtypes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = Model::<f32>::new(ModelConfig::toy(), 3).unwrap();
    save_checkpoint(&path, &m, Stage::Init).unwrap();
    let (wide, manifest) = load_checkpoint::<f64>(&path, None).unwrap();
    assert_eq!(manifest.dtype, "f32");
    let narrowed = wide.cast::<f32>();
    assert_eq!(narrowed.params, m.params);
}
