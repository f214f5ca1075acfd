use mshc_core::autodiff::{grad_check, ParameterSet, Tape, Tensor};
use mshc_core::context_attn::contextualize_dialog;
use mshc_core::data::{embed_utterance, split_train_val, Dialog, EmbeddingTable, UtteranceRecord};
use mshc_core::eval::{compute_metrics, confusion, Metrics};
use mshc_core::filter::{filter_modality, GateParams};
use mshc_core::hier_attn::{hier_attend, HierAttnParams};
use mshc_core::model::{decode, encode};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Tensor> {
    (rows, cols).prop_flat_map(|(r, c)| {
        prop::collection::vec(-5.0f64..5.0, r * c).prop_map(move |d| Tensor::matrix(r, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn softmax_columns_sum_to_one_and_ignore_shifts(x in matrix(1..7, 1..6), shift in -50.0f64..50.0) {
        let mut t = Tape::new();
        let v = t.constant(x.clone()).unwrap();
        let s = t.softmax_cols(v).unwrap();
        let (n, d) = x.dims2().unwrap();
        let out = t.value(s).clone();
        for j in 0..d {
            let col: f64 = (0..n).map(|i| out.get(i, j)).sum();
            prop_assert!((col - 1.0).abs() < 1e-12);
        }
        let mut shifted = x.clone();
        for v in shifted.data_mut() {
            *v += shift;
        }
        let v2 = t.constant(shifted).unwrap();
        let s2 = t.softmax_cols(v2).unwrap();
        for (a, b) in out.data().iter().zip(t.data(s2)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_ignore_pair_order(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..200), seed in any::<u64>()) {
        let (p, l): (Vec<bool>, Vec<bool>) = pairs.iter().copied().unzip();
        let a = compute_metrics(&confusion(&p, &l).unwrap());
        let mut shuffled = pairs.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (p2, l2): (Vec<bool>, Vec<bool>) = shuffled.into_iter().unzip();
        prop_assert_eq!(a, compute_metrics(&confusion(&p2, &l2).unwrap()));
    }

    #[test]
    fn split_is_a_disjoint_cover(n in 2usize..80, fraction in 0.05f64..0.6, seed in any::<u64>()) {
        let dialogs: Vec<Dialog> = (0..n)
            .map(|i| Dialog {
                dialog_id: format!("d{i}"),
                utterances: vec![UtteranceRecord {
                    id: "u".into(),
                    speaker: "s".into(),
                    tokens: vec!["t".into()],
                    acoustic_frames: None,
                    sarcasm: false,
                    humor: false,
                }],
            })
            .collect();
        let n_val = (fraction * n as f64).round() as usize;
        match split_train_val(&dialogs, fraction, seed) {
            Ok((train, val)) => {
                prop_assert_eq!(val.len(), n_val);
                let mut ids: Vec<_> = train.iter().chain(&val).map(|d| d.dialog_id.clone()).collect();
                ids.sort();
                ids.dedup();
                prop_assert_eq!(ids.len(), n);
            }
            Err(_) => prop_assert!(n_val == 0 || n_val == n),
        }
    }

    #[test]
    fn oov_rows_are_zero(tokens in prop::collection::vec("[a-e]{1,2}", 1..12)) {
        let mut table = EmbeddingTable::new(3);
        table.insert("a", vec![1.0, 2.0, 3.0]).unwrap();
        table.insert("b", vec![-1.0, 0.5, 0.0]).unwrap();
        let e = embed_utterance(&tokens, &table);
        let mut oov = 0;
        for (i, tok) in tokens.iter().enumerate() {
            let row = e.matrix.row_slice(i);
            match table.get(tok) {
                Some(v) => prop_assert_eq!(row, v),
                None => {
                    oov += 1;
                    prop_assert_eq!(row.iter().map(|x| x * x).sum::<f64>(), 0.0);
                }
            }
        }
        prop_assert_eq!(e.oov_count, oov);
    }

    #[test]
    fn hierarchical_summary_keeps_width(n in 1usize..40, x in 2usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        let p = HierAttnParams::init(&mut ps, "h", 4, x, &mut rng).unwrap();
        let mut t = Tape::new();
        let v = t.constant(random(&mut rng, n, 4)).unwrap();
        let (out, trace) = hier_attend(&mut t, &ps, &p, v, true).unwrap();
        prop_assert_eq!(t.shape(out), &[1, 4]);
        prop_assert!(t.data(out).iter().all(|&v| v >= 0.0));
        let trace = trace.unwrap();
        prop_assert_eq!(*trace.sizes().last().unwrap(), 1);
    }

    #[test]
    fn context_outputs_are_causal(n in 1usize..12, width in 1usize..7, cut in 0usize..12, seed in any::<u64>()) {
        let cut = cut.min(n - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, n, 3);
        let b = random(&mut rng, n, 3);
        let run = |a: &Tensor, b: &Tensor| {
            let mut t = Tape::new();
            let (va, vb) = (t.constant(a.clone()).unwrap(), t.constant(b.clone()).unwrap());
            let o = contextualize_dialog(&mut t, Some(va), Some(vb), width).unwrap();
            let all = t.concat(&[o.audio.unwrap(), o.text.unwrap(), o.cross.unwrap()], 1).unwrap();
            t.value(all).to_rows()
        };
        let base = run(&a, &b);
        let mut a2 = a.clone();
        for v in &mut a2.data_mut()[cut * 3..] {
            *v = rng.gen_range(-1.0..1.0);
        }
        prop_assert_eq!(&base[..cut], &run(&a2, &b)[..cut]);
    }

    #[test]
    fn filter_stays_in_open_interval(seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        let g = GateParams::init(&mut ps, "g", 6, 4, &mut rng).unwrap();
        let mut m = random(&mut rng, 3, 4);
        for v in m.data_mut() {
            *v *= scale;
        }
        let mut t = Tape::new();
        let (mv, xv) = (t.constant(m).unwrap(), t.constant(random(&mut rng, 3, 6)).unwrap());
        let y = filter_modality(&mut t, &ps, &g, mv, xv).unwrap();
        prop_assert!(t.data(y).iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn checkpoints_round_trip_f32_values(values in prop::collection::vec(-1e30f32..1e30, 1..50), split in 0usize..50) {
        let split = split.min(values.len());
        let mut ps = ParameterSet::new();
        let (a, b) = values.split_at(split);
        if !a.is_empty() {
            ps.insert("first", Tensor::new(vec![a.len()], a.iter().map(|&v| v as f64).collect()).unwrap()).unwrap();
        }
        if !b.is_empty() {
            ps.insert("second.w", Tensor::new(vec![1, b.len()], b.iter().map(|&v| v as f64).collect()).unwrap()).unwrap();
        }
        let bytes = encode(&ps, &serde_json::Map::new()).unwrap();
        let (back, _) = decode(&bytes).unwrap();
        for (_, name, t) in ps.iter() {
            prop_assert_eq!(back.by_name(name).unwrap(), t);
        }
        prop_assert_eq!(encode(&back, &serde_json::Map::new()).unwrap(), bytes);
    }
}

fn naive(preds: &[bool], labels: &[bool]) -> Metrics {
    let count = |p: bool, l: bool| preds.iter().zip(labels).filter(|&(&a, &b)| a == p && b == l).count() as f64;
    let (tp, fp, fn_, tn) = (count(true, true), count(true, false), count(false, true), count(false, false));
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Metrics { precision, recall, f1, accuracy: (tp + tn) / preds.len() as f64 }
}

#[test]
fn metrics_match_counting_oracle_on_500_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for k in 0..500 {
        let n = rng.gen_range(1..300);
        let bias = rng.gen_range(0.0..1.0);
        let preds: Vec<bool> = (0..n).map(|_| rng.gen_bool(bias)).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
        let got = compute_metrics(&confusion(&preds, &labels).unwrap());
        let want = naive(&preds, &labels);
        for (a, b) in [(got.precision, want.precision), (got.recall, want.recall), (got.f1, want.f1), (got.accuracy, want.accuracy)] {
            assert!((a - b).abs() < 1e-12, "fixture {k}: {got:?} vs {want:?}");
        }
    }
}

#[test]
fn confusion_matches_brute_force_on_1000_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let preds: Vec<bool> = (0..1000).map(|_| rng.gen()).collect();
    let labels: Vec<bool> = (0..1000).map(|_| rng.gen()).collect();
    let m = confusion(&preds, &labels).unwrap();
    let mut counts = [0u64; 4];
    for i in 0..1000 {
        counts[(preds[i] as usize) * 2 + labels[i] as usize] += 1;
    }
    assert_eq!([m.tn, m.fn_, m.fp, m.tp], counts);
    assert_eq!(m.total(), 1000);
}

/// Gradient check of each primitive over 100 seeds, inputs in [−1, 1].
#[test]
fn primitive_gradients_over_many_seeds() {
    type Build = fn(&mut Tape, mshc_core::autodiff::Var, mshc_core::autodiff::Var) -> mshc_core::Result<mshc_core::autodiff::Var>;
    let ops: [(&str, Build); 7] = [
        ("matmul", |t, a, b| {
            let bt = t.reshape(b, vec![4, 3])?;
            t.matmul(a, bt)
        }),
        ("mul", |t, a, b| t.mul(a, b)),
        ("tanh", |t, a, _| t.tanh(a)),
        ("sigmoid", |t, a, _| t.sigmoid(a)),
        ("softmax", |t, a, _| t.softmax_cols(a)),
        ("relu", |t, a, _| t.relu(a)),
        ("add_row", |t, a, b| {
            let r = t.narrow(b, 0, 0, 1)?;
            t.add_row(a, r)
        }),
    ];
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParameterSet::new();
        let a = ps.insert("a", random(&mut rng, 3, 4)).unwrap();
        let b = ps.insert("b", random(&mut rng, 3, 4)).unwrap();
        let w = random(&mut rng, 3, 4);
        let w3 = random(&mut rng, 3, 3);
        for (name, op) in ops {
            let report = grad_check(
                |ps, t| {
                    let (va, vb) = (t.param(ps, a)?, t.param(ps, b)?);
                    let y = op(t, va, vb)?;
                    let wt = if t.shape(y) == [3, 3] { w3.clone() } else { w.clone() };
                    let wv = t.constant(wt)?;
                    let p = t.mul(y, wv)?;
                    t.sum(p)
                },
                &ps,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{name} seed {seed}\n{report}");
        }
    }
}
