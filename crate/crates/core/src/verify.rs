//! Built-in self checks: finite-difference gradient checks for every tape op
//! and model block, plus structural properties of the attention layers.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Fault, GradChecker, ParameterSet, Tape, Tensor, Var};
use crate::context_attn::contextualize_dialog;
use crate::encoders::{acoustic_encode, lstm_encode_dialog, AcousticEncoderParams, LstmParams};
use crate::error::Result;
use crate::eval::{compute_metrics, ConfusionMatrix, Heatmap};
use crate::filter::{filter_modality, GateParams};
use crate::hier_attn::{hier_attend, level_count, level_size, HierAttnParams};
use crate::model::{featurize, Model, ModelConfig, TaskMode};
use crate::synthetic::{marker_corpus, MarkerCorpusSpec};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{status} {:<28} {:>7.2}s  {}", c.name, c.secs, c.detail)?;
        }
        let failed: Vec<_> = self.failures().map(|c| c.name.as_str()).collect();
        if failed.is_empty() {
            write!(f, "all {} checks passed", self.checks.len())
        } else {
            write!(f, "{} of {} checks failed: {}", failed.len(), self.checks.len(), failed.join(", "))
        }
    }
}

type Check = fn(Option<Fault>) -> Result<(bool, String)>;

/// Names of every check, in run order.
pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

const CHECKS: &[(&str, Check)] = &[
    ("grad.matmul", |f| op_check(f, Op::MatMul)),
    ("grad.add_row", |f| op_check(f, Op::AddRow)),
    ("grad.mul", |f| op_check(f, Op::Mul)),
    ("grad.scale", |f| op_check(f, Op::Scale)),
    ("grad.relu", |f| op_check(f, Op::Relu)),
    ("grad.tanh", |f| op_check(f, Op::Tanh)),
    ("grad.sigmoid", |f| op_check(f, Op::Sigmoid)),
    ("grad.softmax", |f| op_check(f, Op::Softmax)),
    ("grad.concat_narrow", |f| op_check(f, Op::ConcatNarrow)),
    ("grad.sum_rows", |f| op_check(f, Op::SumRows)),
    ("grad.bce", |f| op_check(f, Op::Bce)),
    ("grad.lstm", lstm_check),
    ("grad.acoustic_conv", conv_check),
    ("grad.hier_attn", hier_check),
    ("grad.context_attn", context_check),
    ("grad.filter", filter_check),
    ("grad.full_model", full_model_check),
    ("prop.hier_levels", |_| hier_levels()),
    ("prop.context_causality", |_| context_causality()),
    ("prop.filter_bounds", |_| filter_bounds()),
    ("prop.metric_arithmetic", |_| metric_arithmetic()),
];

/// Run every check. `fault` corrupts one backward rule so the suite's
/// ability to catch gradient bugs can itself be tested.
pub fn run_verify(fault: Option<Fault>) -> VerifyReport {
    let checks = CHECKS
        .iter()
        .map(|&(name, check)| {
            let start = Instant::now();
            let (passed, detail) = match check(fault) {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckOutcome {
                name: name.to_string(),
                passed,
                detail,
                secs: start.elapsed().as_secs_f64(),
            }
        })
        .collect();
    VerifyReport { checks }
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn grad_outcome(
    fault: Option<Fault>,
    ps: &ParameterSet,
    f: impl Fn(&ParameterSet, &mut Tape) -> Result<Var> + Sync,
) -> Result<(bool, String)> {
    let report = GradChecker::default().with_fault(fault).run(f, ps)?;
    let worst = report
        .params
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|p| p.name.clone())
        .unwrap_or_default();
    let detail = format!("max rel error {:.2e} ({worst})", report.max_rel_error());
    Ok((report.passed(), detail))
}

/// Weighted sum so the objective depends on every output coordinate.
fn project(tape: &mut Tape, y: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = tape.shape(y).to_vec();
    let w = tape.constant(random(&mut rng, shape))?;
    let p = tape.mul(y, w)?;
    tape.sum(p)
}

#[derive(Clone, Copy)]
enum Op {
    MatMul,
    AddRow,
    Mul,
    Scale,
    Relu,
    Tanh,
    Sigmoid,
    Softmax,
    ConcatNarrow,
    SumRows,
    Bce,
}

fn op_check(fault: Option<Fault>, op: Op) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut ps = ParameterSet::new();
    let a = ps.insert("a", random(&mut rng, vec![3, 4]))?;
    let b = ps.insert("b", random(&mut rng, vec![4, 2]))?;
    let c = ps.insert("c", random(&mut rng, vec![3, 4]))?;
    let r = ps.insert("r", random(&mut rng, vec![1, 4]))?;
    let labels = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    grad_outcome(fault, &ps, move |ps, t| {
        let (va, vb, vc, vr) = (t.param(ps, a)?, t.param(ps, b)?, t.param(ps, c)?, t.param(ps, r)?);
        let y = match op {
            Op::MatMul => t.matmul(va, vb)?,
            Op::AddRow => t.add_row(va, vr)?,
            Op::Mul => t.mul(va, vc)?,
            Op::Scale => t.scale(va, -1.7)?,
            Op::Relu => t.relu(va)?,
            Op::Tanh => t.tanh(va)?,
            Op::Sigmoid => t.sigmoid(va)?,
            Op::Softmax => t.softmax_cols(va)?,
            Op::ConcatNarrow => {
                let wide = t.concat(&[va, vc], 1)?;
                let tall = t.concat(&[va, vc], 0)?;
                let w = t.narrow(wide, 1, 2, 4)?;
                let h = t.narrow(tall, 0, 1, 4)?;
                t.concat(&[w, h], 0)?
            }
            Op::SumRows => t.sum_rows(va)?,
            Op::Bce => {
                let z = t.matmul(va, vb)?;
                let z = t.reshape(z, vec![6, 1])?;
                let p = t.sigmoid(z)?;
                return t.bce_loss(p, &labels);
            }
        };
        project(t, y, 5)
    })
}

fn lstm_check(fault: Option<Fault>) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut ps = ParameterSet::new();
    let p = LstmParams::init(&mut ps, "lstm", 4, 3, &mut rng)?;
    let x = ps.insert("inputs", random(&mut rng, vec![4, 4]))?;
    grad_outcome(fault, &ps, |ps, t| {
        let xs = t.param(ps, x)?;
        let h = lstm_encode_dialog(t, ps, &p, xs)?;
        project(t, h, 2)
    })
}

fn conv_check(fault: Option<Fault>) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ps = ParameterSet::new();
    let p = AcousticEncoderParams::init(&mut ps, "conv", 6, 3, 3, &mut rng)?;
    let frames = ps.insert("frames", random(&mut rng, vec![5, 6]))?;
    grad_outcome(fault, &ps, |ps, t| {
        let fr = t.param(ps, frames)?;
        let u = acoustic_encode(t, ps, &p, fr)?;
        project(t, u, 4)
    })
}

fn hier_check(fault: Option<Fault>) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ps = ParameterSet::new();
    let p = HierAttnParams::init(&mut ps, "hier", 4, 3, &mut rng)?;
    let v = ps.insert("vectors", random(&mut rng, vec![6, 4]))?;
    grad_outcome(fault, &ps, |ps, t| {
        let vs = t.param(ps, v)?;
        let (u, _) = hier_attend(t, ps, &p, vs, false)?;
        project(t, u, 6)
    })
}

fn context_check(fault: Option<Fault>) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut ps = ParameterSet::new();
    let a = ps.insert("h_audio", random(&mut rng, vec![4, 3]))?;
    let x = ps.insert("h_text", random(&mut rng, vec![4, 3]))?;
    grad_outcome(fault, &ps, |ps, t| {
        let (ha, ht) = (t.param(ps, a)?, t.param(ps, x)?);
        let out = contextualize_dialog(t, Some(ha), Some(ht), 2)?;
        let all = t.concat(&[out.audio.unwrap(), out.text.unwrap(), out.cross.unwrap()], 1)?;
        project(t, all, 8)
    })
}

fn filter_check(fault: Option<Fault>) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ps = ParameterSet::new();
    let g = GateParams::init(&mut ps, "gate", 6, 4, &mut rng)?;
    let m = ps.insert("modality", random(&mut rng, vec![3, 4]))?;
    let x = ps.insert("cross", random(&mut rng, vec![3, 6]))?;
    grad_outcome(fault, &ps, |ps, t| {
        let (mv, xv) = (t.param(ps, m)?, t.param(ps, x)?);
        let y = filter_modality(t, ps, &g, mv, xv)?;
        project(t, y, 10)
    })
}

/// Toy configuration for end-to-end checks: width 5 everywhere, local
/// attention width 3, context width 2.
pub fn toy_config(task_mode: TaskMode) -> ModelConfig {
    ModelConfig {
        text_dim: 5,
        hidden_dim: 5,
        acoustic_dim: 5,
        head_hidden: 5,
        hier_width: 3,
        context_width: 2,
        task_mode,
        ..ModelConfig::default()
    }
}

fn full_model_check(fault: Option<Fault>) -> Result<(bool, String)> {
    let c = toy_config(TaskMode::Joint);
    let (dialogs, table) = marker_corpus(&MarkerCorpusSpec {
        dialogs: 1,
        min_utterances: 3,
        max_utterances: 3,
        embed_dim: 5,
        frames: 3,
        seed: 4,
        ..Default::default()
    });
    let (model, ps) = Model::init(&c, &mut ChaCha8Rng::seed_from_u64(4))?;
    let f = featurize(&c, &dialogs[0], Some(&table))?;
    grad_outcome(fault, &ps, |ps, t| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pass = model.forward(t, ps, &f, true, false, &mut rng)?;
        model.loss_sum(t, &pass, &f)
    })
}

fn hier_levels() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 3;
    let mut worst: f64 = 0.0;
    for x in 2..=5 {
        let mut ps = ParameterSet::new();
        let p = HierAttnParams::init(&mut ps, "h", d, x, &mut rng)?;
        for n in 1..=64 {
            let mut t = Tape::new();
            let v = t.constant(random(&mut rng, vec![n, d]))?;
            let (out, trace) = hier_attend(&mut t, &ps, &p, v, true)?;
            let trace = trace.expect("recorded");
            let expected: Vec<usize> = (0..=level_count(n, x)).map(|l| level_size(n, x, l)).collect();
            if trace.levels.len() != level_count(n, x) || trace.sizes() != expected || t.shape(out) != [1, d] {
                return Ok((false, format!("N={n} X={x}: sizes {:?}, expected {expected:?}", trace.sizes())));
            }
            for w in trace.levels.iter().flat_map(|l| &l.weights) {
                for j in 0..d {
                    worst = worst.max((w.iter().map(|m| m[j]).sum::<f64>() - 1.0).abs());
                }
            }
        }
    }
    Ok((worst < 1e-9, format!("N in 1..=64, X in 2..=5; max weight-sum error {worst:.1e}")))
}

fn context_causality() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, d, width) = (9, 3, 5);
    let ha = random(&mut rng, vec![n, d]);
    let ht = random(&mut rng, vec![n, d]);
    let run = |a: &Tensor, b: &Tensor| -> Result<(Vec<Vec<f64>>, Heatmap)> {
        let mut t = Tape::new();
        let (va, vb) = (t.constant(a.clone())?, t.constant(b.clone())?);
        let out = contextualize_dialog(&mut t, Some(va), Some(vb), width)?;
        let all = t.concat(&[out.audio.unwrap(), out.text.unwrap(), out.cross.unwrap()], 1)?;
        Ok((t.value(all).to_rows(), Heatmap::from_trace(&out.trace, "verify")?))
    };
    let (base, map) = run(&ha, &ht)?;
    for (i, r) in map.rows.iter().enumerate() {
        if r.window.len() != (i + 1).min(width) || r.weights.text.iter().any(|&w| w <= 0.0) {
            return Ok((false, format!("row {} has window {:?}", i + 1, r.window)));
        }
    }
    for cut in 0..n {
        let (mut a, mut b) = (ha.clone(), ht.clone());
        for v in &mut a.data_mut()[cut * d..] {
            *v += 0.5;
        }
        for v in &mut b.data_mut()[cut * d..] {
            *v -= 0.5;
        }
        let (pert, _) = run(&a, &b)?;
        if base[..cut] != pert[..cut] {
            return Ok((false, format!("perturbing from utterance {} changed an earlier output", cut + 1)));
        }
    }
    Ok((true, format!("{n} suffix perturbations, banded rows of width ≤ {width}")))
}

fn filter_bounds() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (d, n) = (3, 4);
    let m = random(&mut rng, vec![n, 2 * d]);
    let mut scaled = m.clone();
    for v in scaled.data_mut() {
        *v *= 40.0;
    }
    let x = random(&mut rng, vec![n, 3 * d]);
    let mut worst: f64 = 0.0;
    for (bias, open) in [(-30.0, false), (30.0, true), (0.0, true)] {
        for input in [&m, &scaled] {
            let mut ps = ParameterSet::new();
            let g = GateParams::init(&mut ps, "g", 3 * d, 2 * d, &mut rng)?;
            if bias != 0.0 {
                ps.get_mut(g.weight).data_mut().fill(0.0);
                ps.get_mut(g.bias).data_mut().fill(bias);
            }
            let mut t = Tape::new();
            let (mv, xv) = (t.constant(input.clone())?, t.constant(x.clone())?);
            let y = filter_modality(&mut t, &ps, &g, mv, xv)?;
            for (o, i) in t.data(y).iter().zip(input.data()) {
                if o.abs() >= 1.0 {
                    return Ok((false, format!("output {o} outside (-1, 1)")));
                }
                if bias != 0.0 {
                    let target = if open { i.tanh() } else { 0.0 };
                    worst = worst.max((o - target).abs());
                }
            }
        }
    }
    Ok((worst < 1e-12, format!("saturation error {worst:.1e}")))
}

fn metric_arithmetic() -> Result<(bool, String)> {
    let s = compute_metrics(&ConfusionMatrix::new(249, 142, 58, 1127));
    let h = compute_metrics(&ConfusionMatrix::new(635, 105, 174, 662));
    let ok = s.accuracy == 1376.0 / 1576.0
        && (s.precision - 0.811).abs() <= 0.003
        && (s.recall - 0.636).abs() <= 0.003
        && (s.f1 - 0.711).abs() <= 0.003
        && [(h.precision, 0.785), (h.recall, 0.858), (h.f1, 0.820), (h.accuracy, 0.823)]
            .iter()
            .all(|(a, b)| (a - b).abs() <= 0.001);
    Ok((ok, format!("sarcasm F1 {:.4}, humor F1 {:.4}", s.f1, h.f1)))
}
