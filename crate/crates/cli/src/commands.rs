use std::fs;
use std::path::{Path, PathBuf};

use mshc_core::autodiff::Fault;
use mshc_core::data::{load_corpus, load_embeddings, split_train_val, EmbeddingTable};
use mshc_core::eval::{evaluate_features, export_heatmap, render_report, TaskEvaluation};
use mshc_core::model::{forward_dialog, Checkpoint, Model, ModelConfig, Task};
use mshc_core::train::{evaluate_split, prepare, train_with, TrainHistory};
use mshc_core::verify::run_verify;
use rand::rngs::mock::StepRng;
use serde_json::{json, Value};

use crate::config::RunConfigFile;
use crate::error::{CliError, Context, EXIT_VERIFY};

pub const CHECKPOINT_FILE: &str = "model.mshc";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub task: Option<String>,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    /// Extra `key=value` overrides.
    pub set: Vec<String>,
    pub quiet: bool,
}

fn load_table(path: Option<&Path>, config: &ModelConfig, variant: &str) -> Result<Option<EmbeddingTable>, CliError> {
    if !config.modality.uses_text() {
        return Ok(None);
    }
    let path = path.ok_or_else(|| {
        CliError::config(format!("missing required key `embeddings` (variant {variant} reads text)"))
    })?;
    load_embeddings(path)
        .ctx(&format!("loading embeddings {}", path.display()))
        .map(Some)
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text + "\n").ctx(&format!("writing {}", path.display()))
}

fn summary(evals: &[TaskEvaluation]) -> String {
    evals
        .iter()
        .map(|e| {
            let m = e.metrics;
            format!(
                "{}: P {:.4} R {:.4} F1 {:.4} Acc {:.4}",
                e.task, m.precision, m.recall, m.f1, m.accuracy
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut file = match &args.config {
        Some(p) => RunConfigFile::load(p)?,
        None => RunConfigFile::default(),
    };
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("--set expects key=value, got `{kv}`")))?;
        let probe = format!("{} = {}", k.trim(), v.trim());
        RunConfigFile::parse(&probe, None)?;
        file.set(k.trim(), v.trim());
    }
    if let Some(t) = &args.task {
        file.set("task", t.clone());
    }
    if let Some(v) = &args.variant {
        file.set("variant", v.clone());
    }
    if let Some(s) = args.seed {
        file.set("seed", s.to_string());
    }
    for (key, value) in [
        ("out_dir", &args.out),
        ("corpus", &args.corpus),
        ("test_corpus", &args.test_corpus),
        ("embeddings", &args.embeddings),
    ] {
        if let Some(p) = value {
            file.set_path_flag(key, p);
        }
    }
    let rc = file.resolve()?;
    let corpus = rc.corpus.clone().ok_or_else(|| CliError::config("missing required key `corpus`"))?;
    let out = rc.out_dir.clone().ok_or_else(|| CliError::config("missing required key `out_dir`"))?;
    let table = load_table(rc.embeddings.as_deref(), &rc.model, &rc.variant)?;

    let dialogs = load_corpus(&corpus).ctx(&format!("loading corpus {}", corpus.display()))?;
    let (train_dialogs, val_dialogs) = split_train_val(&dialogs, rc.val_fraction, rc.train.seed)
        .map_err(|e| CliError::data(format!("splitting {}: {e}", corpus.display())))?;
    let train_feats = prepare(&rc.model, &train_dialogs, table.as_ref()).ctx("preparing training dialogs")?;
    let val_feats = prepare(&rc.model, &val_dialogs, table.as_ref()).ctx("preparing validation dialogs")?;
    let quiet = args.quiet;
    let outcome = train_with(&rc.model, &train_feats, &val_feats, &rc.train, |rec| {
        if !quiet {
            let f1: Vec<String> = rec.val.iter().map(|v| format!("{} F1 {:.4}", v.task, v.metrics.f1)).collect();
            eprintln!("epoch {:>3}  loss {:.5}  {}", rec.epoch, rec.train_loss, f1.join("  "));
        }
    })
    .ctx("training")?;

    fs::create_dir_all(&out).ctx(&format!("creating {}", out.display()))?;
    let mut ckpt = Checkpoint::new(outcome.params, &rc.model).ctx("building checkpoint")?;
    ckpt.metadata.insert("variant".into(), json!(rc.model.variant_name().unwrap_or("custom")));
    ckpt.metadata.insert("train_config".into(), serde_json::to_value(&rc.train).expect("serialisable"));
    if let Some(e) = &rc.embeddings {
        ckpt.metadata.insert("embeddings".into(), json!(e.to_string_lossy()));
    }
    ckpt.save(out.join(CHECKPOINT_FILE)).ctx("writing checkpoint")?;
    outcome.history.write_csv(out.join(HISTORY_FILE)).ctx("writing history")?;

    let evals = match &rc.test_corpus {
        Some(p) => {
            let test = load_corpus(p).ctx(&format!("loading test corpus {}", p.display()))?;
            evaluate_split(&ckpt, &test, table.as_ref(), rc.train.threshold).ctx("evaluating test corpus")?
        }
        None => {
            let model = Model::bind(&rc.model, &ckpt.params).ctx("binding checkpoint")?;
            evaluate_features(&model, &ckpt.params, &val_feats, rc.train.threshold).ctx("evaluating validation split")?
        }
    };
    render_report(&outcome.history, &evals, &rc.model, out.join(REPORT_FILE)).ctx("writing report")?;
    if !quiet {
        println!("{}", summary(&evals));
        println!("wrote {}", out.display());
    }
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    config: ModelConfig,
    table: Option<EmbeddingTable>,
    threshold: f64,
}

fn load_for_scoring(checkpoint: &Path, embeddings: Option<&Path>, threshold: Option<f64>) -> Result<Loaded, CliError> {
    let ckpt = Checkpoint::load(checkpoint).ctx(&format!("loading checkpoint {}", checkpoint.display()))?;
    let config = ckpt.model_config().ctx("reading checkpoint configuration")?;
    let stored = ckpt.metadata.get("embeddings").and_then(Value::as_str).map(PathBuf::from);
    let emb = embeddings.map(Path::to_path_buf).or(stored);
    let variant = config.variant_name().unwrap_or("custom");
    let table = load_table(emb.as_deref(), &config, variant)?;
    let threshold = threshold
        .or_else(|| ckpt.metadata.get("train_config")?.get("threshold")?.as_f64())
        .unwrap_or(0.5);
    Ok(Loaded {
        ckpt,
        config,
        table,
        threshold,
    })
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    embeddings: Option<&Path>,
    threshold: Option<f64>,
) -> Result<(), CliError> {
    let l = load_for_scoring(checkpoint, embeddings, threshold)?;
    let dialogs = load_corpus(data).ctx(&format!("loading corpus {}", data.display()))?;
    let evals = evaluate_split(&l.ckpt, &dialogs, l.table.as_ref(), l.threshold).ctx("evaluating")?;
    fs::create_dir_all(out).ctx(&format!("creating {}", out.display()))?;
    write_json(
        &out.join(METRICS_FILE),
        &json!({
            "variant": l.config.variant_name().unwrap_or("custom"),
            "data": data.to_string_lossy(),
            "threshold": l.threshold,
            "tasks": evals,
        }),
    )?;
    render_report(&TrainHistory::default(), &evals, &l.config, out.join("eval_report.txt")).ctx("writing report")?;
    println!("{}", summary(&evals));
    Ok(())
}

pub fn cmd_inspect(
    checkpoint: &Path,
    data: &Path,
    dialog_id: &str,
    out: &Path,
    embeddings: Option<&Path>,
    threshold: Option<f64>,
) -> Result<(), CliError> {
    let l = load_for_scoring(checkpoint, embeddings, threshold)?;
    let dialogs = load_corpus(data).ctx(&format!("loading corpus {}", data.display()))?;
    let dialog = dialogs
        .iter()
        .find(|d| d.dialog_id == dialog_id)
        .ok_or_else(|| CliError::data(format!("unknown dialog id `{dialog_id}` in {}", data.display())))?;
    let pred = forward_dialog(&l.config, &l.ckpt.params, dialog, l.table.as_ref(), false, &mut StepRng::new(0, 0))
        .ctx("scoring dialog")?;
    fs::create_dir_all(out).ctx(&format!("creating {}", out.display()))?;

    let tasks: Vec<Task> = l.config.task_mode.tasks().to_vec();
    let mut rows = Vec::new();
    println!("{:>4}  {:<10} {:<40} {}", "#", "speaker", "utterance", tasks.iter().map(|t| format!("{t} (gold/pred p)")).collect::<Vec<_>>().join("  "));
    for (i, u) in dialog.utterances.iter().enumerate() {
        let mut actual = serde_json::Map::new();
        let mut predicted = serde_json::Map::new();
        let mut cells = Vec::new();
        for &t in &tasks {
            let p = pred.probabilities_for(t).expect("active task")[i];
            let label = p >= l.threshold;
            actual.insert(t.name().into(), json!(u.label(t) as u8));
            predicted.insert(t.name().into(), json!({ "probability": p, "label": label as u8 }));
            cells.push(format!("{}/{} {:.3}", u.label(t) as u8, label as u8, p));
        }
        let text = u.tokens.join(" ");
        let shown: String = text.chars().take(40).collect();
        println!("{:>4}  {:<10} {:<40} {}", i + 1, u.speaker, shown, cells.join("  "));
        rows.push(json!({
            "index": i + 1,
            "id": u.id,
            "speaker": u.speaker,
            "text": text,
            "actual": actual,
            "predicted": predicted,
        }));
    }
    write_json(
        &out.join(format!("predictions_{dialog_id}.json")),
        &json!({
            "dialog_id": dialog_id,
            "variant": l.config.variant_name().unwrap_or("custom"),
            "threshold": l.threshold,
            "utterances": rows,
        }),
    )?;
    match &pred.attention {
        Some(trace) => {
            let path = out.join(format!("heatmap_{dialog_id}.json"));
            export_heatmap(trace, dialog_id, &path).ctx("writing heatmap")?;
            println!("wrote {}", path.display());
        }
        None => eprintln!("variant has no dialog context attention; no heatmap written"),
    }
    Ok(())
}

pub fn cmd_verify(fault: Option<&str>) -> Result<(), CliError> {
    let fault = fault
        .map(|f| Fault::parse(f).ok_or_else(|| CliError::config(format!("unknown fault `{f}` (tanh|sigmoid|matmul|softmax)"))))
        .transpose()?;
    let report = run_verify(fault);
    println!("{report}");
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<_> = report.failures().map(|c| c.name.as_str()).collect();
        Err(CliError::new(EXIT_VERIFY, format!("verification failed: {}", names.join(", "))))
    }
}
