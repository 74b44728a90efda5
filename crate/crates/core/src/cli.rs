//! Command-line front end.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, CheckpointMeta};
use crate::config::ModelConfig;
use crate::data::{load_pretrained_embeddings, load_split, load_tokens, write_lines, DatasetLayout, Utterance};
use crate::gradcheck;
use crate::metrics::{score_predictions, write_predictions, EvalReport, Frame, PredictionRecord};
use crate::model::Model;
use crate::numerics::seeded_rng;
use crate::train::{build_vocab, evaluate_checkpoint, train};

#[derive(Parser, Debug)]
#[command(name = "coit", version, about = "Joint intent detection and slot filling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train on <data>/train, select on <data>/dev, report dev and test.
    Train(TrainArgs),
    /// Metrics of a checkpoint on one split.
    Eval(EvalArgs),
    /// Write a prediction file for one split.
    Predict(PredictArgs),
    /// Metrics from a prediction file alone.
    Score(ScoreArgs),
    /// Finite-difference gradient suite at toy scale.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// `key=value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable, applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> anyhow::Result<ModelConfig> {
        let mut config = match &self.config {
            Some(p) => ModelConfig::from_file(p)?,
            None => ModelConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
            config.set(k, v)?;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset root with train/, dev/ (or valid/) and optionally test/.
    #[arg(long)]
    pub data: PathBuf,
    /// Text word vectors (`word v1 … ve` per line).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory for the checkpoint, report and training log.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint path; defaults to <out>/model.ckpt.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report file; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Prediction file with gold columns.
    pub predictions: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also check the five ablation variants.
    #[arg(long)]
    pub ablations: bool,
}

type Report = Vec<(String, String)>;

fn emit(report: &Report, out: Option<&Path>) -> anyhow::Result<()> {
    let lines = report.iter().map(|(k, v)| format!("{k}\t{v}"));
    match out {
        Some(p) => write_lines(p, lines)?,
        None => lines.for_each(|l| println!("{l}")),
    }
    Ok(())
}

fn metric_lines(report: &mut Report, prefix: &str, r: &EvalReport) {
    report.extend(r.to_kv(prefix));
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Score(a) => cmd_score(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let config = a.config.resolve()?;
    let layout = DatasetLayout::new(&a.data);
    let train_data = load_split(layout.split("train"), config.lowercase)?;
    let dev_data = load_split(layout.split("dev"), config.lowercase)?;
    let test_data = if layout.has_split("test") {
        Some(load_split(layout.split("test"), config.lowercase)?)
    } else {
        None
    };
    let mut others: Vec<&[Utterance]> = vec![&dev_data];
    if let Some(t) = &test_data {
        others.push(t);
    }
    let vocab = build_vocab(&config, &train_data, &others)?;

    let mut report: Report = vec![("config_hash".into(), config.hash())];
    let pretrained = match &a.embeddings {
        Some(p) => {
            let mut rng = seeded_rng(config.seed.wrapping_add(2));
            let init = load_pretrained_embeddings(p, &vocab, config.embedding_dim, &mut rng)?;
            report.push(("embedding_coverage".into(), format!("{:.6}", init.coverage())));
            Some(init.table)
        }
        None => None,
    };

    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let mut log = vec!["epoch\ttrain_loss\tdev_slot_f1\tdev_intent_accuracy\tdev_overall_accuracy\timproved".to_string()];
    let outcome = train(&config, vocab, pretrained.as_ref(), &train_data, &dev_data, |e| {
        let line = format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            e.epoch, e.train_loss, e.dev.slot_f1, e.dev.intent_accuracy, e.dev.overall_accuracy, e.improved
        );
        eprintln!("{line}");
        log.push(line);
    })?;
    write_lines(&a.out.join("train_log.tsv"), log)?;

    let ckpt = a.checkpoint.clone().unwrap_or_else(|| a.out.join("model.ckpt"));
    checkpoint::save(&ckpt, &outcome.model, &outcome.meta)?;

    report.push(("checkpoint".into(), ckpt.display().to_string()));
    report.push(("epochs_run".into(), outcome.history.len().to_string()));
    report.push(("best_epoch".into(), outcome.meta.epoch.to_string()));
    report.push(("parameters".into(), outcome.model.store.num_scalars().to_string()));
    for (k, v) in config.entries() {
        report.push((format!("config.{k}"), v));
    }
    metric_lines(&mut report, "dev_", outcome.meta.dev.as_ref().expect("best epoch has metrics"));
    if let Some(t) = &test_data {
        metric_lines(&mut report, "test_", &evaluate_checkpoint(&outcome.model, t)?);
    }
    emit(&report, Some(&a.out.join("report.tsv")))?;
    emit(&report, None)
}

fn load_model(path: &Path) -> anyhow::Result<(Model<f32>, CheckpointMeta)> {
    checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let (model, meta) = load_model(&a.checkpoint)?;
    let data = load_split(DatasetLayout::new(&a.data).split(&a.split), model.config.lowercase)?;
    let r = evaluate_checkpoint(&model, &data)?;
    let mut report: Report = vec![
        ("config_hash".into(), model.config.hash()),
        ("split".into(), a.split.clone()),
        ("checkpoint_epoch".into(), meta.epoch.to_string()),
    ];
    metric_lines(&mut report, "", &r);
    emit(&report, a.out.as_deref())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let (model, _) = load_model(&a.checkpoint)?;
    let dir = DatasetLayout::new(&a.data).split(&a.split);
    let lowercase = model.config.lowercase;
    let labelled = dir.join(crate::data::TAGS_FILE).exists() && dir.join(crate::data::INTENT_FILE).exists();
    let (tokens, gold): (Vec<Vec<String>>, Vec<Option<Frame>>) = if labelled {
        load_split(&dir, lowercase)?
            .into_iter()
            .map(|u| {
                let f = Frame {
                    intent: u.intent,
                    tags: u.slots,
                };
                (u.tokens, Some(f))
            })
            .unzip()
    } else {
        let t = load_tokens(&dir, lowercase)?;
        let n = t.len();
        (t, vec![None; n])
    };
    let inputs: Vec<Utterance> = tokens
        .iter()
        .map(|t| Utterance {
            tokens: t.clone(),
            slots: vec!["O".into(); t.len()],
            intent: String::new(),
        })
        .collect();
    let pred = model.predict(&inputs)?;
    let records: Vec<PredictionRecord> = tokens
        .into_iter()
        .zip(gold)
        .zip(pred)
        .map(|((tokens, gold), pred)| PredictionRecord { tokens, gold, pred })
        .collect();
    let file = std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_predictions(std::io::BufWriter::new(file), &records).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {} predictions to {}", records.len(), a.out.display());
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> anyhow::Result<()> {
    let r = score_predictions(&a.predictions)?;
    let mut report: Report = vec![("source".into(), a.predictions.display().to_string())];
    metric_lines(&mut report, "", &r);
    emit(&report, a.out.as_deref())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let mut report = gradcheck::full_suite(a.seed)?;
    if a.ablations {
        report.extend(gradcheck::ablation_suite(a.seed)?);
    }
    println!("seed\t{}", a.seed);
    println!("step\t{:e}", gradcheck::STEP);
    println!("tolerance\t{:e}", gradcheck::TOLERANCE);
    for g in &report.groups {
        println!(
            "{}\t{:.3e}\t{}\t{}",
            g.name,
            g.max_rel_error,
            g.coordinates,
            if g.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("worst\t{:.3e}", report.worst());
    if !report.passed() {
        bail!("gradient check failed");
    }
    println!("result\tpass");
    Ok(())
}
