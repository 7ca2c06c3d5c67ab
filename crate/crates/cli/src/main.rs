//! `hiu`: generate scenes, train, infer, evaluate and check consistency.

mod config;
mod error;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hiu_core::car::Labeling;
use hiu_core::data::{gen_scenes, SceneSample, TRAIN_STREAM, VALIDATION_STREAM};
use hiu_core::eval::MetricReport;
use hiu_core::graph::InteractionGraph;
use hiu_core::learn::{ablate, ablation_table, train, EpochRecord, TrainConfig, TrainObserver};
use hiu_core::oracle::ConsistencyReport;
use hiu_core::Model;
use serde::Serialize;

use crate::config::Overrides;
use crate::error::{data_err, CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "hiu", version, about = "Human interaction understanding on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config; flags below take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "HIU_OUT", default_value = "hiu-out")]
    out: PathBuf,
    /// Mean-field rounds.
    #[arg(long)]
    iterations: Option<usize>,
    /// Factor-graph layers.
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    lambda_c_init: Option<f64>,
    #[arg(long)]
    lambda_t_init: Option<f64>,
    /// Pin the compatibility penalty at zero.
    #[arg(long)]
    freeze_lambda_c: bool,
    /// Pin the transitivity penalty at zero.
    #[arg(long)]
    freeze_lambda_t: bool,
}

impl Common {
    fn train_config(&self) -> CliResult<TrainConfig> {
        config::load(
            self.config.as_deref(),
            &Overrides {
                seed: self.seed,
                layers: self.layers,
                iterations: self.iterations,
                lambda_c_init: self.lambda_c_init,
                lambda_t_init: self.lambda_t_init,
                freeze_lambda_c: self.freeze_lambda_c,
                freeze_lambda_t: self.freeze_lambda_t,
            },
        )
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Validation,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic scene files and a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Scene count; defaults to the config's count for the split.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_enum, default_value = "train")]
        split: Split,
    },
    /// Train a model, writing checkpoints, history and a final report.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training scenes; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Validation scenes; generated from the config when absent.
        #[arg(long)]
        val_data: Option<PathBuf>,
    },
    /// Predict labelings for scene files.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write per-round mean-field marginals next to each labeling.
        #[arg(long)]
        trace_mf: bool,
        /// Write each scene's factor graph next to its labeling.
        #[arg(long)]
        dump_graph: bool,
        /// Scene files or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Score predicted labelings against reference scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Labeling or scene files (or directories), matched to references by order.
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        truth: Vec<PathBuf>,
    },
    /// Report oracle violations; exits with status 5 if any labeling has one.
    Check {
        #[command(flatten)]
        common: Common,
        /// Labeling or scene files, or directories of them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Train and compare the four penalty variants.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("hiu: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Gen {
            common,
            count,
            split,
        } => cmd_gen(&common, count, split),
        Command::Train {
            common,
            data,
            val_data,
        } => cmd_train(&common, data.as_deref(), val_data.as_deref()),
        Command::Infer {
            common,
            checkpoint,
            trace_mf,
            dump_graph,
            inputs,
        } => cmd_infer(&common, &checkpoint, trace_mf, dump_graph, &inputs),
        Command::Eval {
            common,
            pred,
            truth,
        } => cmd_eval(&common, &pred, &truth),
        Command::Check { common, inputs } => cmd_check(&common, &inputs),
        Command::Ablate { common } => cmd_ablate(&common),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| data_err(dir, e))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| data_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| data_err(path, e))?;
    write(path, &(text + "\n"))
}

/// Expands directories to their `.json` files in name order, skipping
/// manifests.
fn expand(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| data_err(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "json")
                        && f.file_name().is_some_and(|n| n != "manifest.json")
                })
                .collect();
            found.sort();
            files.extend(found);
        } else if p.is_file() {
            files.push(p.clone());
        } else {
            return Err(data_err(p, "no such file or directory"));
        }
    }
    Ok(files)
}

fn load_scenes(inputs: &[PathBuf]) -> CliResult<Vec<(PathBuf, SceneSample)>> {
    expand(inputs)?
        .into_iter()
        .map(|p| SceneSample::load(&p).map(|s| (p.clone(), s)).map_err(|e| data_err(&p, e)))
        .collect()
}

/// Reads a labeling file, or the ground truth of a scene file.
fn load_labeling(path: &Path) -> CliResult<Labeling> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    Labeling::from_json(&text)
        .or_else(|_| SceneSample::from_json(&text).map(|s| s.truth()))
        .map_err(|e| data_err(path, e))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scene".into())
}

#[derive(Serialize)]
struct Manifest<'a> {
    seed: u64,
    split: &'a str,
    count: usize,
    config_hash: String,
    config: &'a hiu_core::data::SceneConfig,
    files: Vec<String>,
}

fn cmd_gen(common: &Common, count: Option<usize>, split: Split) -> CliResult<()> {
    let config = common.train_config()?;
    let (stream, name, default) = match split {
        Split::Train => (TRAIN_STREAM, "train", config.train_scenes),
        Split::Validation => (VALIDATION_STREAM, "validation", config.val_count()),
    };
    let count = count.unwrap_or(default);
    let scenes = gen_scenes(&config.data, config.seed, stream, count)?;
    create_dir(&common.out)?;
    let mut files = Vec::with_capacity(count);
    for (k, s) in scenes.iter().enumerate() {
        let file = format!("scene_{k:05}.json");
        write(&common.out.join(&file), &s.to_json()?)?;
        files.push(file);
    }
    write_json(
        &common.out.join("manifest.json"),
        &Manifest {
            seed: config.seed,
            split: name,
            count,
            config_hash: config::hash(&config.data),
            config: &config.data,
            files,
        },
    )?;
    println!("wrote {count} {name} scenes to {}", common.out.display());
    Ok(())
}

/// Appends history lines and writes checkpoints under the output directory.
struct RunWriter {
    history: fs::File,
    checkpoints: PathBuf,
}

impl TrainObserver for RunWriter {
    fn epoch(&mut self, record: &EpochRecord) -> hiu_core::Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.history, "{line}")?;
        println!(
            "epoch {:>4}  val loss {:.4}  F1 {:.4}  consistency {:.4}",
            record.epoch, record.val_loss, record.val.f1, record.val.consistency_rate
        );
        Ok(())
    }

    fn checkpoint(&mut self, epoch: usize, model: &Model) -> hiu_core::Result<()> {
        model.save(&self.checkpoints.join(format!("epoch_{epoch:04}.json")))
    }
}

fn scenes_or_generate(
    dir: Option<&Path>,
    config: &TrainConfig,
    stream: u64,
    count: usize,
) -> CliResult<Vec<SceneSample>> {
    match dir {
        Some(d) => Ok(load_scenes(&[d.to_path_buf()])?
            .into_iter()
            .map(|(_, s)| s)
            .collect()),
        None => Ok(gen_scenes(&config.data, config.seed, stream, count)?),
    }
}

fn check_scenes(scenes: &[SceneSample], config: &hiu_core::togn::ModelConfig) -> CliResult<()> {
    for (k, s) in scenes.iter().enumerate() {
        if s.features.iter().any(|f| f.len() != config.feature_dim) {
            return Err(CliError::Data(format!(
                "scene {k} has features of the wrong length (model expects {})",
                config.feature_dim
            )));
        }
        if s.y_true.iter().any(|&y| y >= config.num_actions) {
            return Err(CliError::Data(format!(
                "scene {k} uses action classes beyond the model's {}",
                config.num_actions
            )));
        }
    }
    Ok(())
}

fn cmd_train(common: &Common, data: Option<&Path>, val_data: Option<&Path>) -> CliResult<()> {
    let config = common.train_config()?;
    let train_set = scenes_or_generate(data, &config, TRAIN_STREAM, config.train_scenes)?;
    let val_set = scenes_or_generate(val_data, &config, VALIDATION_STREAM, config.val_count())?;
    check_scenes(&train_set, &config.model)?;
    check_scenes(&val_set, &config.model)?;
    let checkpoints = common.out.join("checkpoints");
    create_dir(&checkpoints)?;
    write(
        &common.out.join("config.toml"),
        &toml::to_string(&config).map_err(|e| CliError::Config(e.to_string()))?,
    )?;
    let history_path = common.out.join("history.jsonl");
    let mut writer = RunWriter {
        history: fs::File::create(&history_path).map_err(|e| data_err(&history_path, e))?,
        checkpoints,
    };
    let outcome = match train(&config, &train_set, &val_set, &mut writer) {
        Ok(o) => o,
        Err(hiu_core::Error::Diverged(d)) => {
            let snap = common.out.join("diverged.json");
            d.snapshot.save(&snap)?;
            return Err(CliError::Numeric(format!(
                "{d}; parameters saved to {}",
                snap.display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    outcome.model.save(&common.out.join("model.json"))?;
    let last = outcome.history.last().expect("history starts at epoch 0");
    write_json(&common.out.join("report.json"), &last.val)?;
    Ok(())
}

fn cmd_infer(
    common: &Common,
    checkpoint: &Path,
    trace_mf: bool,
    dump_graph: bool,
    inputs: &[PathBuf],
) -> CliResult<()> {
    let mut model = Model::load(checkpoint).map_err(|e| data_err(checkpoint, e))?;
    if let Some(t) = common.iterations {
        model.car_config.iterations = t;
        model
            .car_config
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let scenes = load_scenes(inputs)?;
    let samples: Vec<SceneSample> = scenes.iter().map(|(_, s)| s.clone()).collect();
    check_scenes(&samples, &model.config)?;
    create_dir(&common.out)?;
    for (path, scene) in &scenes {
        let name = stem(path);
        let inference = model.infer(&scene.features, trace_mf)?;
        write(
            &common.out.join(format!("{name}.labels.json")),
            &inference.labeling.to_json()?,
        )?;
        if trace_mf {
            write_json(&common.out.join(format!("{name}.trace.json")), &inference.trace)?;
        }
        if dump_graph {
            let graph = InteractionGraph::build(scene.participants())?;
            write(&common.out.join(format!("{name}.graph.json")), &graph.dump()?)?;
        }
    }
    println!("labeled {} scenes into {}", scenes.len(), common.out.display());
    Ok(())
}

fn cmd_eval(common: &Common, pred: &[PathBuf], truth: &[PathBuf]) -> CliResult<()> {
    let config = common.train_config()?;
    let table = config.data.compat_table()?;
    let load_all = |inputs: &[PathBuf]| -> CliResult<Vec<Labeling>> {
        expand(inputs)?.iter().map(|p| load_labeling(p)).collect()
    };
    let (preds, truths) = (load_all(pred)?, load_all(truth)?);
    for l in preds.iter().chain(&truths) {
        l.validate(table.classes())
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    let report = MetricReport::compute(&preds, &truths, &table)?;
    create_dir(&common.out)?;
    write_json(&common.out.join("report.json"), &report)?;
    println!(
        "F1 {:.4}  accuracy {:.4}  mean IoU {:.4}  consistency {:.4}  ({} scenes)",
        report.f1, report.accuracy, report.mean_iou, report.consistency_rate, report.scenes
    );
    Ok(())
}

#[derive(Serialize)]
struct CheckEntry {
    file: String,
    #[serde(flatten)]
    report: ConsistencyReport,
}

fn cmd_check(common: &Common, inputs: &[PathBuf]) -> CliResult<()> {
    let config = common.train_config()?;
    let table = config.data.compat_table()?;
    let mut entries = Vec::new();
    let mut failing = 0;
    for path in expand(inputs)? {
        let labeling = load_labeling(&path)?;
        labeling
            .validate(table.classes())
            .map_err(|e| data_err(&path, e))?;
        let report = ConsistencyReport::new(&labeling, &table)?;
        if !report.is_consistent() {
            failing += 1;
            println!(
                "{}: {} compatibility and {} transitivity violation(s)",
                path.display(),
                report.compat_violations.len(),
                report.trans_violations.len()
            );
        }
        entries.push(CheckEntry {
            file: path.display().to_string(),
            report,
        });
    }
    create_dir(&common.out)?;
    write_json(&common.out.join("check.json"), &entries)?;
    if failing > 0 {
        return Err(CliError::Inconsistent(failing));
    }
    println!("{} labeling(s) consistent", entries.len());
    Ok(())
}

fn cmd_ablate(common: &Common) -> CliResult<()> {
    let config = common.train_config()?;
    let train_set = gen_scenes(&config.data, config.seed, TRAIN_STREAM, config.train_scenes)?;
    let val_set = gen_scenes(&config.data, config.seed, VALIDATION_STREAM, config.val_count())?;
    let rows = ablate(&config, &train_set, &val_set)?;
    let table = ablation_table(&rows);
    create_dir(&common.out)?;
    write_json(&common.out.join("ablation.json"), &rows)?;
    write(&common.out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}
