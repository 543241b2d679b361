use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use tstransfer::adapt::{relevance, FeatureLayout, FinetunedModel, GridPoint, SparseLinearModel};
use tstransfer::artifact::{config_hash, read_json, write_json, Checkpoint};
use tstransfer::autoencoder::{train_autoencoder, ChannelScaler, Seq2SeqParams};
use tstransfer::data::synth::univariate_corpus;
use tstransfer::data::{labels_for, load_csv_dataset, synth_generate, DatasetSplit, EpisodeRecord, SynthConfig};
use tstransfer::eval::matrix::{
    fit_l1_logreg, fit_timenet_lasso, pretrain_healthnet, run_experiment_matrix, MatrixReport, TimeNetExtractor,
    AUTOENCODER_KIND, HEALTHNET_KIND,
};
use tstransfer::eval::metrics::{sparsity, MetricSet};
use tstransfer::eval::ExperimentPlan;
use tstransfer::multitask::{hn_extract, train_rnnc_baseline, HealthNetModel, LayerSelection};
use tstransfer::numerics::{label, Rng};

const LINEAR_KIND: &str = "linear";
const FINETUNED_KIND: &str = "finetuned";
const RNNC_KIND: &str = "rnnc";

#[derive(Parser)]
#[command(name = "tstransfer", version, about = "Transfer learning for multivariate time-series classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Layers {
    Top,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-task dataset bundle.
    SynthData {
        #[command(flatten)]
        common: Common,
    },
    /// Convert per-episode CSV files and a manifest into a dataset bundle.
    LoadData {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the sequence autoencoder on the univariate corpus.
    PretrainAe {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train the multi-task network on the source tasks of a dataset.
    PretrainHn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write per-channel autoencoder features of every episode.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit the LASSO classifier on autoencoder features.
    TrainLasso {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<String>,
    },
    /// Fit L1 logistic regression on frozen multi-task features.
    TrainLr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, value_enum, default_value = "all")]
        layers: Layers,
    },
    /// Fine-tune the multi-task network on a target task.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<String>,
    },
    /// Train the from-scratch recurrent classifier on a target task.
    TrainRnnc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        task: Option<String>,
    },
    /// Score a trained model on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run an experiment plan.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Per-channel relevance of a LASSO model.
    Relevance {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
    },
    /// Summarise a sweep report as markdown tables.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
}

/// Where a linear model's features come from.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
enum FeatureSource {
    Timenet { encoder: PathBuf },
    Healthnet { model: PathBuf, layers: LayerSelection },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LinearArtifact {
    task: String,
    features: FeatureSource,
    grid: Vec<GridPoint>,
    classifier: SparseLinearModel,
}

#[derive(Serialize)]
struct Evaluation {
    kind: String,
    task: String,
    config_hash: String,
    metrics: MetricSet,
    sparsity: Option<f64>,
}

#[derive(Serialize)]
struct CsvMeta<'a> {
    kind: &'a str,
    seed: u64,
    config_hash: String,
}

#[derive(Deserialize, Serialize)]
struct LoadConfig {
    root: PathBuf,
    manifest: PathBuf,
}

fn read_config<T: serde::de::DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(tstransfer::Error::Config(format!("config file {} not found", p.display())).into());
            }
            read_json(p).map_err(|e| match e {
                tstransfer::Error::Json(j) => tstransfer::Error::Config(format!("{}: {j}", p.display())).into(),
                other => other.into(),
            })
        }
        None => Ok(T::default()),
    }
}

fn plan_of(common: &Common) -> Result<ExperimentPlan> {
    let mut plan: ExperimentPlan = read_config(&common.config)?;
    if let Some(s) = common.seed {
        plan.seed = s;
    }
    plan.validate()?;
    Ok(plan)
}

fn pick_task(split: &DatasetSplit, plan: &ExperimentPlan, task: &Option<String>) -> Result<String> {
    let task = task
        .clone()
        .or_else(|| plan.tasks.as_ref().and_then(|t| t.first().cloned()))
        .or_else(|| split.target_tasks.first().cloned())
        .ok_or_else(|| tstransfer::Error::Config("no task given and the dataset has no target tasks".into()))?;
    if !split.tasks.contains(&task) {
        return Err(tstransfer::Error::Config(format!("task {task} is not in the dataset")).into());
    }
    Ok(task)
}

fn write_csv_meta(path: &Path, kind: &str, seed: u64, hash: String) -> Result<()> {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    write_json(PathBuf::from(name), &CsvMeta { kind, seed, config_hash: hash })?;
    Ok(())
}

fn extractor(encoder: &Path, split: &DatasetSplit, plan: &ExperimentPlan) -> Result<TimeNetExtractor> {
    let ae = Checkpoint::<Seq2SeqParams>::load(encoder, AUTOENCODER_KIND)?.model;
    Ok(TimeNetExtractor {
        encoder: ae.encoder,
        scaler: ChannelScaler::fit(&split.train)?,
        tau: plan.tau,
        shift: plan.window_shift,
    })
}

fn features(records: &[EpisodeRecord], f: impl Fn(&EpisodeRecord) -> tstransfer::Result<Vec<f64>>) -> Result<Vec<Vec<f64>>> {
    Ok(records.iter().map(f).collect::<tstransfer::Result<_>>()?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { common } => {
            let mut cfg: SynthConfig = read_config(&common.config)?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            synth_generate(&cfg)?.save_bundle(&common.out)?;
        }
        Command::LoadData { common } => {
            let cfg: LoadConfig = match &common.config {
                Some(_) => read_config::<Option<LoadConfig>>(&common.config)?.ok_or_else(|| anyhow!("empty config"))?,
                None => return Err(tstransfer::Error::Config("load-data needs --config with root and manifest".into()).into()),
            };
            let mut split = load_csv_dataset(&cfg.root, &cfg.manifest)?;
            if let Some(s) = common.seed {
                split.meta.seed = s;
            }
            split.save_bundle(&common.out)?;
        }
        Command::PretrainAe { common } => {
            let plan = plan_of(&common)?;
            let corpus = univariate_corpus(
                plan.corpus.n_series,
                plan.corpus.min_len,
                plan.corpus.max_len,
                tstransfer::numerics::derive_seed(plan.seed, &[label("corpus")]),
            );
            let mut rng = Rng::new(plan.seed).derive(&[label(AUTOENCODER_KIND)]);
            let trained = train_autoencoder(&corpus, &plan.autoencoder, &mut rng)?;
            let hash = config_hash(&(&plan.corpus, &plan.autoencoder));
            Checkpoint::new(AUTOENCODER_KIND, plan.seed, hash, trained.params).save(&common.out)?;
        }
        Command::PretrainHn { common, data } => {
            let plan = plan_of(&common)?;
            let split = DatasetSplit::load_bundle(&data)?;
            let mut p = plan.clone();
            p.checkpoints.healthnet = None;
            let model = pretrain_healthnet(&p, &split)?;
            let hash = model.config_hash.clone();
            Checkpoint::new(HEALTHNET_KIND, plan.seed, hash, model).save(&common.out)?;
        }
        Command::Extract { common, model, data } => {
            let plan = plan_of(&common)?;
            let split = DatasetSplit::load_bundle(&data)?;
            let tn = extractor(&model, &split, &plan)?;
            std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
            for (name, part) in [("train", &split.train), ("validation", &split.validation), ("test", &split.test)] {
                let path = common.out.join(format!("{name}.csv"));
                let mut w = csv::Writer::from_path(&path)?;
                for r in part {
                    let f = tn.first_window(&r.series)?;
                    let mut row = vec![r.id()];
                    row.extend(f.iter().map(|v| v.to_string()));
                    w.write_record(&row)?;
                }
                w.flush()?;
                write_csv_meta(&path, "features", plan.seed, config_hash(&plan))?;
            }
        }
        Command::TrainLasso { common, model, data, task } => {
            let plan = plan_of(&common)?;
            let split = DatasetSplit::load_bundle(&data)?;
            let task = pick_task(&split, &plan, &task)?;
            let tn = extractor(&model, &split, &plan)?;
            let tr = features(&split.train, |r| tn.first_window(&r.series))?;
            let va = features(&split.validation, |r| tn.first_window(&r.series))?;
            let (classifier, grid) = fit_timenet_lasso(
                &plan,
                (&tr, &labels_for(&split.train, &task)?),
                (&va, &labels_for(&split.validation, &task)?),
                Some(tn.layout(&split.channel_names)),
            )?;
            let art = LinearArtifact {
                task,
                features: FeatureSource::Timenet { encoder: model },
                grid,
                classifier,
            };
            Checkpoint::new(LINEAR_KIND, plan.seed, config_hash(&plan), art).save(&common.out)?;
        }
        Command::TrainLr { common, model, data, task, layers } => {
            let plan = plan_of(&common)?;
            let split = DatasetSplit::load_bundle(&data)?;
            let task = pick_task(&split, &plan, &task)?;
            let hn = Checkpoint::<HealthNetModel>::load(&model, HEALTHNET_KIND)?.model;
            let sel = match layers {
                Layers::Top => LayerSelection::TopOnly,
                Layers::All => LayerSelection::All,
            };
            let tr = features(&split.train, |r| hn_extract(&r.series, &hn, sel))?;
            let va = features(&split.validation, |r| hn_extract(&r.series, &hn, sel))?;
            let (classifier, grid) = fit_l1_logreg(
                &plan,
                (&tr, &labels_for(&split.train, &task)?),
                (&va, &labels_for(&split.validation, &task)?),
            )?;
            let art = LinearArtifact {
                task,
                features: FeatureSource::Healthnet { model, layers: sel },
                grid,
                classifier,
            };
            Checkpoint::new(LINEAR_KIND, plan.seed, config_hash(&plan), art).save(&common.out)?;
        }
        Command::Finetune { common, model, data, task } => {
            let plan = plan_of(&common)?;
            let split = DatasetSplit::load_bundle(&data)?;
            let task = pick_task(&split, &plan, &task)?;
            let hn = Checkpoint::<HealthNetModel>::load(&model, HEALTHNET_KIND)?.model;
            if hn.tasks.contains(&task) {
                bail!(tstransfer::Error::Config(format!("task {task} was seen during multi-task pre-training")));
            }
            let mut rng = Rng::new(plan.seed).derive(&[label("finetune"), label(&task)]);
            let (m, _) = tstransfer::adapt::finetune(&hn, &split.train, &split.validation, &task, &plan.finetune, &mut rng)?;
            let hash = m.config_hash.clone();
            Checkpoint::new(FINETUNED_KIND, plan.seed, hash, m).save(&common.out)?;
        }
        Command::TrainRnnc { common, data, task } => {
            let plan = plan_of(&common)?;
            let split = DatasetSplit::load_bundle(&data)?;
            let task = pick_task(&split, &plan, &task)?;
            let mut rng = Rng::new(plan.seed).derive(&[label("rnnc"), label(&task)]);
            let (m, _) = train_rnnc_baseline(&split.train, &split.validation, &task, &plan.rnnc, &mut rng)?;
            let hash = m.config_hash.clone();
            Checkpoint::new(RNNC_KIND, plan.seed, hash, m).save(&common.out)?;
        }
        Command::Evaluate { common, model, data } => {
            let plan = plan_of(&common)?;
            let split = DatasetSplit::load_bundle(&data)?;
            if !model.exists() {
                bail!(tstransfer::Error::Config(format!("missing checkpoint: {}", model.display())));
            }
            let head: serde_json::Value = read_json(&model)?;
            let kind = head.get("kind").and_then(|k| k.as_str()).unwrap_or_default().to_string();
            let (task, scores, sp, hash): (String, Vec<f64>, Option<f64>, String) = match kind.as_str() {
                LINEAR_KIND => {
                    let ck = Checkpoint::<LinearArtifact>::load(&model, LINEAR_KIND)?;
                    let art = ck.model;
                    let scores = match &art.features {
                        FeatureSource::Timenet { encoder } => {
                            let tn = extractor(encoder, &split, &plan)?;
                            features(&split.test, |r| tn.first_window(&r.series))?
                        }
                        FeatureSource::Healthnet { model, layers } => {
                            let hn = Checkpoint::<HealthNetModel>::load(model, HEALTHNET_KIND)?.model;
                            features(&split.test, |r| hn_extract(&r.series, &hn, *layers))?
                        }
                    }
                    .iter()
                    .map(|z| art.classifier.predict_proba(z))
                    .collect::<tstransfer::Result<_>>()?;
                    (art.task, scores, Some(sparsity(&art.classifier.w)), ck.config_hash)
                }
                FINETUNED_KIND => {
                    let ck = Checkpoint::<FinetunedModel>::load(&model, FINETUNED_KIND)?;
                    let scores = split.test.iter().map(|r| ck.model.predict_proba(&r.series)).collect::<tstransfer::Result<_>>()?;
                    (ck.model.task.clone(), scores, None, ck.config_hash)
                }
                RNNC_KIND => {
                    let ck = Checkpoint::<HealthNetModel>::load(&model, RNNC_KIND)?;
                    let scores = split.test.iter().map(|r| ck.model.predict(&r.series).map(|p| p[0])).collect::<tstransfer::Result<_>>()?;
                    (ck.model.tasks[0].clone(), scores, None, ck.config_hash)
                }
                other => bail!(tstransfer::Error::Config(format!("{} holds an unsupported model kind '{other}'", model.display()))),
            };
            let labels = labels_for(&split.test, &task)?;
            let eval = Evaluation {
                kind,
                metrics: MetricSet::compute(&scores, &labels),
                task,
                config_hash: hash,
                sparsity: sp,
            };
            write_json(&common.out, &eval)?;
        }
        Command::Sweep { common } => {
            let plan = plan_of(&common)?;
            run_experiment_matrix(&plan)?.write(&common.out)?;
        }
        Command::Relevance { common, model } => {
            let ck = Checkpoint::<LinearArtifact>::load(&model, LINEAR_KIND)?;
            if !matches!(ck.model.classifier.layout, FeatureLayout::Channels { .. }) {
                bail!(tstransfer::Error::Domain("relevance needs a model trained on per-channel features".into()));
            }
            relevance(&ck.model.classifier)?.write_csv(&common.out)?;
            write_csv_meta(&common.out, "relevance", ck.seed, ck.config_hash)?;
        }
        Command::Report { common, data } => {
            let report: MatrixReport = read_json(&data)?;
            let text = render_report(&report);
            if let Some(dir) = common.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(&common.out, text).with_context(|| format!("writing {}", common.out.display()))?;
        }
    }
    Ok(())
}

fn render_report(report: &MatrixReport) -> String {
    let mut fractions: Vec<f64> = report.summary.iter().map(|s| s.fraction).collect();
    fractions.sort_by(|a, b| b.total_cmp(a));
    fractions.dedup();
    let mut methods = Vec::new();
    for s in &report.summary {
        if !methods.contains(&s.method) {
            methods.push(s.method);
        }
    }
    let mut out = format!("# Experiment report\n\nconfig hash `{}`, dataset hash `{}`\n\n", report.config_hash, report.dataset_hash);
    out.push_str("## Mean test AUROC (± std over tasks and seeds)\n\n| method |");
    for f in &fractions {
        out.push_str(&format!(" {f} |"));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(fractions.len()));
    out.push('\n');
    for m in &methods {
        out.push_str(&format!("| {m} |"));
        for f in &fractions {
            match report.summary.iter().find(|s| s.method == *m && s.fraction == *f) {
                Some(s) => out.push_str(&format!(" {:.3} ± {:.3} |", s.mean_auroc, s.std_auroc)),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    let sparse: Vec<f64> = report.rows.iter().filter_map(|r| r.sparsity).collect();
    if !sparse.is_empty() {
        let mean = sparse.iter().sum::<f64>() / sparse.len() as f64;
        out.push_str(&format!(
            "\n## Linear-model sparsity\n\nmean fraction of weights with |w| < 0.001 over {} models: {:.3}\n",
            sparse.len(),
            mean
        ));
    }
    out.push_str(
        "\nWeighted AUROC (in report.json) is the mean of per-task AUROCs weighted by each task's number of test positives.\n",
    );
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<tstransfer::Error>().map_or(1, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}
