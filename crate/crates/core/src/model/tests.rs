use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, ParameterSet, Tape, Tensor};
use crate::data::{Dialog, EmbeddingTable, UtteranceRecord, MFCC_DIM};
use crate::Error;

const VOCAB: &[&str] = &["haan", "yaar", "kya", "baat", "hai", "nahi", "bhai", "arre"];

fn toy(mut c: ModelConfig, d: usize) -> ModelConfig {
    c.text_dim = d;
    c.hidden_dim = d;
    c.acoustic_dim = d;
    c.head_hidden = d;
    c.hier_width = 3;
    c.context_width = 2;
    c
}

fn table(d: usize, seed: u64) -> EmbeddingTable {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = EmbeddingTable::new(d);
    for w in VOCAB {
        t.insert(*w, (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    }
    t
}

fn frames(rng: &mut ChaCha8Rng, f: usize) -> Tensor {
    Tensor::matrix(f, MFCC_DIM, (0..f * MFCC_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn dialog(n: usize, seed: u64) -> Dialog {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let utterances = (0..n)
        .map(|i| {
            let len = rng.gen_range(1..6);
            let nf = rng.gen_range(2..5);
            UtteranceRecord {
                id: format!("u{i}"),
                speaker: format!("s{}", i % 2),
                tokens: (0..len).map(|_| VOCAB[rng.gen_range(0..VOCAB.len())].to_string()).collect(),
                acoustic_frames: Some(frames(&mut rng, nf)),
                sarcasm: rng.gen_bool(0.5),
                humor: rng.gen_bool(0.5),
            }
        })
        .collect();
    Dialog {
        dialog_id: format!("d{seed}"),
        utterances,
    }
}

fn all_configs(d: usize) -> Vec<ModelConfig> {
    let mut out = Vec::new();
    for name in variant_names() {
        for mode in [TaskMode::Sarcasm, TaskMode::Humor, TaskMode::Joint] {
            out.push(toy(build_variant(name).unwrap().with_task(mode), d));
        }
    }
    out
}

#[test]
fn probabilities_strictly_inside_unit_interval() {
    let emb = table(4, 1);
    let dlg = dialog(4, 2);
    for (k, c) in all_configs(4).into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let (_, ps) = Model::init(&c, &mut rng).unwrap();
        for training in [false, true] {
            let pred = forward_dialog(&c, &ps, &dlg, Some(&emb), training, &mut rng).unwrap();
            assert_eq!(pred.probabilities.len(), c.task_mode.tasks().len());
            for (_, p) in &pred.probabilities {
                assert_eq!(p.len(), 4);
                assert!(p.iter().all(|&v| v > 0.0 && v < 1.0), "{:?}: {p:?}", c.variant_name());
            }
        }
    }
}

#[test]
fn text_only_ignores_acoustics_and_audio_only_ignores_tokens() {
    let emb = table(4, 3);
    let base = dialog(5, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let text = toy(build_variant("LSTM(H-ATN^U)+C-ATN^D").unwrap(), 4);
    let (_, ps) = Model::init(&text, &mut rng).unwrap();
    let a = forward_dialog(&text, &ps, &base, Some(&emb), false, &mut rng).unwrap();
    let mut mutated = base.clone();
    for u in &mut mutated.utterances {
        u.acoustic_frames = u.acoustic_frames.take().map(|f| Tensor::full(vec![f.rows() + 3, MFCC_DIM], 7.5));
    }
    let b = forward_dialog(&text, &ps, &mutated, Some(&emb), false, &mut rng).unwrap();
    for u in &mut mutated.utterances {
        u.acoustic_frames = None;
    }
    let c = forward_dialog(&text, &ps, &mutated, Some(&emb), false, &mut rng).unwrap();
    assert_eq!(a.probabilities, b.probabilities);
    assert_eq!(a.probabilities, c.probabilities);

    let audio = toy(build_variant("LSTM(A)+C-ATN^D").unwrap(), 4);
    let (_, ps) = Model::init(&audio, &mut rng).unwrap();
    let a = forward_dialog(&audio, &ps, &base, None, false, &mut rng).unwrap();
    let mut mutated = base.clone();
    for u in &mut mutated.utterances {
        u.tokens = vec!["zzz".into(); 9];
    }
    let b = forward_dialog(&audio, &ps, &mutated, Some(&table(4, 77)), false, &mut rng).unwrap();
    assert_eq!(a.probabilities, b.probabilities);
}

#[test]
fn missing_frames_rejected_when_audio_is_read() {
    let emb = table(4, 5);
    let mut dlg = dialog(3, 6);
    dlg.utterances[1].acoustic_frames = None;
    let c = toy(ModelConfig::default(), 4);
    let (_, ps) = Model::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = forward_dialog(&c, &ps, &dlg, Some(&emb), false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, Error::DataMismatch(ref m) if m.contains("u1")), "{err}");
}

#[test]
fn embedding_dimension_must_match() {
    let c = toy(build_variant("LSTM(T_avg)").unwrap(), 4);
    let (_, ps) = Model::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let err = forward_dialog(&c, &ps, &dialog(2, 1), Some(&table(6, 0)), false, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(err, Err(Error::DataMismatch(_))));
}

fn check_gradients(c: &ModelConfig, seed: u64) {
    let emb = table(c.text_dim, seed);
    let dlg = dialog(3, seed + 1);
    let (model, ps) = Model::init(c, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let feats = featurize(c, &dlg, Some(&emb)).unwrap();
    let report = grad_check(
        |ps, tape| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
            let pass = model.forward(tape, ps, &feats, true, false, &mut rng)?;
            model.loss_sum(tape, &pass, &feats)
        },
        &ps,
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(report.passed(), "{:?}\n{report}", c.variant_name());
    assert_eq!(report.params.len(), ps.len());
}

#[test]
fn full_model_passes_grad_check() {
    check_gradients(&toy(ModelConfig::default(), 5), 11);
}

#[test]
fn joint_full_model_passes_grad_check() {
    check_gradients(&toy(ModelConfig::default().with_task(TaskMode::Joint), 5), 12);
}

#[test]
fn hierarchical_audio_and_mean_text_pass_grad_check() {
    check_gradients(&toy(build_variant("LSTM(H-ATN^A)+C-ATN^D").unwrap(), 5), 13);
    check_gradients(&toy(build_variant("LSTM(A)+LSTM(T_avg)").unwrap(), 5), 14);
}

#[test]
fn parameter_count_matches_initialised_set() {
    for c in all_configs(4).into_iter().chain([ModelConfig::default(), ModelConfig::default().with_task(TaskMode::Joint)]) {
        let (_, ps) = Model::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(ps.total_elements(), parameter_count(&c), "{:?}", c.variant_name());
    }
}

#[test]
fn joint_adds_exactly_one_head() {
    for name in variant_names() {
        let s = build_variant(name).unwrap();
        let h = s.clone().with_task(TaskMode::Humor);
        let j = s.clone().with_task(TaskMode::Joint);
        let head = HeadParams::param_count(s.fused_dim(), s.head_hidden);
        assert_eq!(parameter_count(&j) - parameter_count(&s), head);
        assert!(parameter_count(&j) < parameter_count(&s) + parameter_count(&h));
    }
}

#[test]
fn joint_heads_share_trunk_gradients() {
    let c = toy(ModelConfig::default().with_task(TaskMode::Joint), 4);
    let emb = table(4, 20);
    let dlg = dialog(4, 21);
    let (model, ps) = Model::init(&c, &mut ChaCha8Rng::seed_from_u64(22)).unwrap();
    let f = featurize(&c, &dlg, Some(&emb)).unwrap();
    let grads = |tasks: &[Task]| -> ParameterSet {
        let mut ps = ps.clone();
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &ps, &f, false, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut loss = model.task_loss(&mut tape, &pass, &f, tasks[0]).unwrap();
        for &t in &tasks[1..] {
            let l = model.task_loss(&mut tape, &pass, &f, t).unwrap();
            loss = tape.add(loss, l).unwrap();
        }
        tape.backward(loss).unwrap();
        tape.accumulate_param_grads(&mut ps).unwrap();
        ps
    };
    let both = grads(&[Task::Sarcasm, Task::Humor]);
    let sarc = grads(&[Task::Sarcasm]);
    let hum = grads(&[Task::Humor]);
    let head_of = |name: &str| name.starts_with("head.");
    for (id, name, _) in ps.iter() {
        let gs = sarc.get(id).grad().unwrap_or(&[]);
        let gh = hum.get(id).grad().unwrap_or(&[]);
        let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>();
        if name.starts_with("head.humor") {
            assert_eq!(norm(gs), 0.0, "{name}");
            assert_eq!(gh, both.get(id).grad().unwrap(), "{name}");
        } else if name.starts_with("head.sarcasm") {
            assert_eq!(norm(gh), 0.0, "{name}");
            assert_eq!(gs, both.get(id).grad().unwrap(), "{name}");
        } else {
            assert!(!head_of(name));
            assert!(norm(gs) > 0.0 && norm(gh) > 0.0, "trunk parameter {name} missed a task");
        }
    }
}

#[test]
fn eval_forward_is_bitwise_repeatable() {
    let c = toy(ModelConfig::default().with_task(TaskMode::Joint), 4);
    let emb = table(4, 30);
    let dlg = dialog(6, 31);
    let (model, ps) = Model::init(&c, &mut ChaCha8Rng::seed_from_u64(32)).unwrap();
    let f = featurize(&c, &dlg, Some(&emb)).unwrap();
    let a = model.predict(&ps, &f, true).unwrap();
    let b = model.predict(&ps, &f, true).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.text_levels.len(), 6);
    assert_eq!(a.attention.as_ref().unwrap().rows.len(), 6);
}

#[test]
fn bind_checks_names_shapes_and_extras() {
    let c = toy(ModelConfig::default(), 4);
    let (_, ps) = Model::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    Model::bind(&c, &ps).unwrap();
    let mut extra = ps.clone();
    extra.insert("stray", Tensor::zeros(vec![1, 1])).unwrap();
    assert!(matches!(Model::bind(&c, &extra), Err(Error::Checkpoint(_))));
    let mut wide = c.clone();
    wide.hidden_dim = 5;
    assert!(Model::bind(&wide, &ps).is_err());
    assert!(Model::bind(&c.clone().with_task(TaskMode::Joint), &ps).is_err());
}

#[test]
fn checkpoint_round_trip_is_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let c = toy(ModelConfig::default().with_task(TaskMode::Joint), 4);
    let (_, ps) = Model::init(&c, &mut ChaCha8Rng::seed_from_u64(40)).unwrap();
    let p1 = dir.path().join("a.mshc");
    let p2 = dir.path().join("b.mshc");
    Checkpoint::new(ps.clone(), &c).unwrap().save(&p1).unwrap();
    let loaded = Checkpoint::load(&p1).unwrap();
    assert_eq!(loaded.model_config().unwrap(), c);
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let mut rounded = ps.clone();
    rounded.round_to_f32();
    for (id, name, t) in loaded.params.iter() {
        assert_eq!(t, rounded.by_name(name).unwrap(), "{name}");
        assert_eq!(name, ps.name(id));
    }
    assert_eq!(loaded.params.total_elements(), parameter_count(&c));

    save_checkpoint(&ps, &p2).unwrap();
    assert_eq!(load_checkpoint(&p2).unwrap().total_elements(), parameter_count(&c));
}

#[test]
fn forward_identical_after_reload() {
    let dir = tempfile::tempdir().unwrap();
    let c = toy(ModelConfig::default(), 4);
    let emb = table(4, 50);
    let dlg = dialog(5, 51);
    let (_, mut ps) = Model::init(&c, &mut ChaCha8Rng::seed_from_u64(52)).unwrap();
    ps.round_to_f32();
    let path = dir.path().join("m.mshc");
    Checkpoint::new(ps.clone(), &c).unwrap().save(&path).unwrap();
    let before = forward_dialog(&c, &ps, &dlg, Some(&emb), false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    let after = forward_dialog(&ck.model_config().unwrap(), &ck.params, &dlg, Some(&emb), false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for ((_, a), (_, b)) in before.probabilities.iter().zip(&after.probabilities) {
        for (x, y) in a.iter().zip(b) {
            assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn corrupt_checkpoints_rejected() {
    let c = toy(ModelConfig::default(), 3);
    let (_, ps) = Model::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let bytes = encode(&ps, &serde_json::Map::new()).unwrap();

    let mut wrong = bytes.clone();
    wrong[..6].copy_from_slice(b"NOPE!\n");
    assert!(matches!(decode(&wrong), Err(Error::Checkpoint(m)) if m.contains("magic")));

    let mut v2 = bytes.clone();
    v2[4] = b'2';
    assert!(matches!(decode(&v2), Err(Error::Checkpoint(m)) if m.contains("version `2`")));

    let truncated = &bytes[..bytes.len() - 3];
    assert!(matches!(decode(truncated), Err(Error::Checkpoint(m)) if m.contains("truncated")));
    assert!(matches!(decode(&bytes[..10]), Err(Error::Checkpoint(_))));

    let mut trailing = bytes.clone();
    trailing.extend_from_slice(&[0, 0, 0, 0]);
    assert!(decode(&trailing).is_err());
}
