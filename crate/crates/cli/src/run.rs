//! Command implementations behind the `widenet` binary.
//!
//! Every command is a pure function of (config file, seed, explicit CLI
//! overrides): artifacts other than `timing.json` replay byte-identically.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use widenet::error::{Error, Result};
use widenet::expand::{run_expansion, ExpansionConfig, LogRecord};
use widenet::metrics::{ImportanceReport, InitSnapshot, Metric};
use widenet::net::{load_checkpoint, save_checkpoint, ParamStore};
use widenet::prune::{compute_importance, prune_curve, PruneCurve};
use widenet::rng::Rng;
use widenet::train::{evaluate, fit};

use crate::config::{load_config, resolve, LoadedConfig};
use crate::plot::{self, read_curve_csv, read_events, CURVE_HEADER};
use crate::record::{read_record, write_json, write_timing, FinalState, RecordEpoch, RunRecord};
use crate::report::{aggregate, render_table};

#[derive(clap::Args, Debug, Clone)]
pub struct TrainArgs {
    /// Run configuration file (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Training seed (initialization, shuffling, augmentation draws).
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Run several seeds sequentially; each writes to OUT/seed-N.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate on the test split every K epochs (overrides the config).
    #[arg(long, value_name = "K")]
    pub eval_every: Option<usize>,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ExpandArgs {
    /// Run configuration file (JSON); must carry an `expansion` section.
    /// Growable widths are reset to 1 before training begins.
    #[arg(long)]
    pub config: PathBuf,
    /// Training seed (initialization, shuffling, augmentation draws).
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Run several seeds sequentially; each writes to OUT/seed-N.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Vec<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Evaluate on the test split every K epochs (overrides the config).
    #[arg(long, value_name = "K")]
    pub eval_every: Option<usize>,
    /// Trigger reading: "prose" (min drift > epsilon) or "printed"
    /// (max drift < 1 - epsilon); overrides the config.
    #[arg(long, value_name = "MODE")]
    pub condition: Option<String>,
}

#[derive(clap::Args, Debug, Clone)]
pub struct PruneArgs {
    /// Run configuration file (JSON); must carry a `prune` section.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Produce a curve for one metric only:
    /// self_resemblance | l1_norm | mean_activation.
    #[arg(long, value_name = "NAME")]
    pub metric: Option<String>,
}

#[derive(clap::Args, Debug, Clone)]
pub struct PlotArgs {
    /// Event log (JSON lines) from a train/expand run; repeatable.
    #[arg(long = "events", value_name = "PATH")]
    pub events: Vec<PathBuf>,
    /// Prune-curve CSV; repeatable, all curves render into one panel.
    #[arg(long = "curve", value_name = "PATH")]
    pub curves: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(clap::Args, Debug, Clone)]
pub struct ReportArgs {
    /// record.json of one run; repeatable, all runs must share a
    /// configuration.
    #[arg(long = "record", value_name = "PATH", required = true)]
    pub records: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn seed_list(seed: u64, seeds: &[u64]) -> Vec<u64> {
    if seeds.is_empty() {
        vec![seed]
    } else {
        seeds.to_vec()
    }
}

fn run_dir(out: &Path, multi: bool, seed: u64) -> PathBuf {
    if multi {
        out.join(format!("seed-{seed}"))
    } else {
        out.to_path_buf()
    }
}

fn write_snapshot(path: &Path, snapshot: &InitSnapshot) -> Result<()> {
    let mut buf = Vec::new();
    snapshot.write_to(&mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_snapshot(path: &Path) -> Result<InitSnapshot> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| {
        Error::Config(format!("cannot read snapshot {}: {e}", path.display()))
    })?);
    InitSnapshot::read_from(&mut r)
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let loaded = load_config(&args.config)?;
    let mut overrides = Vec::new();
    let eval_every = match args.eval_every {
        Some(k) => {
            overrides.push(format!("eval_every={k}"));
            k
        }
        None => loaded.config.eval_every,
    };
    let multi = !args.seeds.is_empty();
    for seed in seed_list(args.seed, &args.seeds) {
        train_one(&loaded, seed, &run_dir(&args.out, multi, seed), eval_every, &overrides)?;
    }
    Ok(())
}

fn train_one(
    loaded: &LoadedConfig,
    seed: u64,
    dir: &Path,
    eval_every: usize,
    overrides: &[String],
) -> Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(dir)?;
    let arch = loaded.arch()?;
    let (train_data, test_data) = loaded.datasets()?;
    let cfg = &loaded.config.train;
    // Validate everything but the epoch count, which may legitimately be 0
    // for an init-state-only evaluation run.
    let mut probe = cfg.clone();
    probe.epochs = probe.epochs.max(1);
    probe.validate()?;

    // The snapshot reproduces the initialization `fit` performs internally:
    // same seed, same draw order.
    let mut rng = Rng::new(seed);
    let init = ParamStore::init(&arch, &mut rng)?;
    let snapshot = InitSnapshot::capture(&arch, &init);
    let (store, fit_epochs) = if cfg.epochs == 0 {
        (init, Vec::new())
    } else {
        let result = fit(
            &arch,
            &train_data,
            Some(&test_data),
            cfg,
            &loaded.config.augment,
            seed,
            eval_every,
        )?;
        (result.store, result.epochs)
    };

    let params = store.param_count();
    let widths = arch.widths();
    let (train_loss, train_accuracy) = evaluate(&arch, &store, &train_data, cfg.batch_size)?;
    let (test_loss, test_accuracy) = evaluate(&arch, &store, &test_data, cfg.batch_size)?;
    let epochs: Vec<RecordEpoch> = if cfg.epochs == 0 {
        // No training; record the untrained network's evaluation as epoch 0.
        vec![RecordEpoch {
            epoch: 0,
            t: None,
            lr: 0.0,
            train_loss,
            train_accuracy,
            test_loss: Some(test_loss),
            test_accuracy: Some(test_accuracy),
            params,
            widths: widths.clone(),
        }]
    } else {
        fit_epochs
            .into_iter()
            .map(|e| RecordEpoch {
                epoch: e.epoch,
                t: None,
                lr: e.lr,
                train_loss: e.train_loss,
                train_accuracy: e.train_accuracy,
                test_loss: e.test_loss,
                test_accuracy: e.test_accuracy,
                params,
                widths: widths.clone(),
            })
            .collect()
    };

    save_checkpoint(&dir.join("checkpoint.bin"), &arch, &store)?;
    write_snapshot(&dir.join("snapshot.bin"), &snapshot)?;
    let record = RunRecord {
        mode: "train".into(),
        config_hash: loaded.hash.clone(),
        seed,
        overrides: overrides.to_vec(),
        epochs,
        expansions: None,
        final_state: FinalState {
            params,
            widths,
            train_loss,
            train_accuracy,
            test_loss,
            test_accuracy,
        },
        artifacts: BTreeMap::from([
            ("checkpoint".to_string(), "checkpoint.bin".to_string()),
            ("snapshot".to_string(), "snapshot.bin".to_string()),
        ]),
    };
    write_json(&dir.join("record.json"), &record)?;
    write_timing(dir, start.elapsed().as_secs_f64())?;
    println!(
        "train seed {seed}: {} epochs, test accuracy {test_accuracy:.4}, {params} params -> {}",
        record.epochs.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_expand(args: &ExpandArgs) -> Result<()> {
    let loaded = load_config(&args.config)?;
    let mut expansion = loaded
        .config
        .expansion
        .clone()
        .ok_or_else(|| Error::Config("expand needs an `expansion` section in the config".into()))?;
    let mut overrides = Vec::new();
    let eval_every = match args.eval_every {
        Some(k) => {
            overrides.push(format!("eval_every={k}"));
            k
        }
        None => loaded.config.eval_every,
    };
    if let Some(mode) = &args.condition {
        expansion.condition = mode.parse()?;
        overrides.push(format!("condition={mode}"));
    }
    let multi = !args.seeds.is_empty();
    for seed in seed_list(args.seed, &args.seeds) {
        expand_one(
            &loaded,
            &expansion,
            seed,
            &run_dir(&args.out, multi, seed),
            eval_every,
            &overrides,
        )?;
    }
    Ok(())
}

fn expand_one(
    loaded: &LoadedConfig,
    expansion: &ExpansionConfig,
    seed: u64,
    dir: &Path,
    eval_every: usize,
    overrides: &[String],
) -> Result<()> {
    let start = Instant::now();
    std::fs::create_dir_all(dir)?;
    let template = loaded.arch()?;
    let (train_data, test_data) = loaded.datasets()?;
    let cfg = &loaded.config.train;
    let result = run_expansion(
        &template,
        &train_data,
        Some(&test_data),
        cfg,
        expansion,
        &loaded.config.augment,
        seed,
        eval_every,
    )?;

    let mut events = String::new();
    for rec in &result.log {
        events.push_str(&serde_json::to_string(rec)?);
        events.push('\n');
    }
    std::fs::write(dir.join("events.jsonl"), events)?;

    let epochs: Vec<RecordEpoch> = result
        .log
        .iter()
        .filter_map(|rec| match rec {
            LogRecord::Epoch {
                wall_epoch,
                t,
                step: _,
                lr,
                train_loss,
                train_accuracy,
                test_loss,
                test_accuracy,
                params,
                widths,
            } => Some(RecordEpoch {
                epoch: *wall_epoch,
                t: Some(*t),
                lr: *lr,
                train_loss: *train_loss,
                train_accuracy: *train_accuracy,
                test_loss: *test_loss,
                test_accuracy: *test_accuracy,
                params: *params,
                widths: widths.clone(),
            }),
            _ => None,
        })
        .collect();
    let (train_loss, train_accuracy) =
        evaluate(&result.arch, &result.store, &train_data, cfg.batch_size)?;
    let (test_loss, test_accuracy) =
        evaluate(&result.arch, &result.store, &test_data, cfg.batch_size)?;

    save_checkpoint(&dir.join("checkpoint.bin"), &result.arch, &result.store)?;
    write_snapshot(&dir.join("snapshot.bin"), &result.snapshot)?;
    let widths = result.arch.widths();
    let record = RunRecord {
        mode: "expand".into(),
        config_hash: loaded.hash.clone(),
        seed,
        overrides: overrides.to_vec(),
        epochs,
        expansions: Some(result.expansions),
        final_state: FinalState {
            params: result.store.param_count(),
            widths: widths.clone(),
            train_loss,
            train_accuracy,
            test_loss,
            test_accuracy,
        },
        artifacts: BTreeMap::from([
            ("checkpoint".to_string(), "checkpoint.bin".to_string()),
            ("snapshot".to_string(), "snapshot.bin".to_string()),
            ("events".to_string(), "events.jsonl".to_string()),
        ]),
    };
    write_json(&dir.join("record.json"), &record)?;
    write_timing(dir, start.elapsed().as_secs_f64())?;
    let widths_text: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
    println!(
        "expand seed {seed}: {} expansions, widths [{}], test accuracy {test_accuracy:.4} -> {}",
        result.expansions,
        widths_text.join(", "),
        dir.display()
    );
    Ok(())
}

fn write_curve_csv(path: &Path, curve: &PruneCurve) -> Result<()> {
    let mut text = String::from(CURVE_HEADER);
    text.push('\n');
    text.push_str(&format!(
        "0,{},{}\n",
        curve.baseline.test_accuracy, curve.baseline.params
    ));
    for p in &curve.points {
        text.push_str(&format!("{},{},{}\n", p.removed, p.test_accuracy, p.params));
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn cmd_prune(args: &PruneArgs) -> Result<()> {
    let start = Instant::now();
    let loaded = load_config(&args.config)?;
    let section = loaded
        .config
        .prune
        .clone()
        .ok_or_else(|| Error::Config("prune needs a `prune` section in the config".into()))?;
    let mut overrides = Vec::new();
    let metrics: Vec<Metric> = match &args.metric {
        Some(name) => {
            overrides.push(format!("metric={name}"));
            vec![name.parse()?]
        }
        None => section.metrics.clone(),
    };
    std::fs::create_dir_all(&args.out)?;
    let (arch, store) = load_checkpoint(&resolve(&loaded.dir, &section.checkpoint))?;
    let snapshot = section
        .snapshot
        .as_ref()
        .map(|p| read_snapshot(&resolve(&loaded.dir, p)))
        .transpose()?;
    let (train_data, test_data) = loaded.datasets()?;
    let batch = loaded.config.train.batch_size;

    let mut artifacts = BTreeMap::new();
    for &metric in &metrics {
        if metric == Metric::SelfResemblance && snapshot.is_none() {
            return Err(Error::Config(
                "self_resemblance pruning needs a `snapshot` path in the prune section".into(),
            ));
        }
        let importance = compute_importance(
            &arch,
            &store,
            metric,
            snapshot.as_ref(),
            Some((&train_data, batch)),
        )?;
        let report = ImportanceReport { step: 0, metric, layers: importance };
        let report_name = format!("importance-{}.json", metric.name());
        write_json(&args.out.join(&report_name), &report)?;
        artifacts.insert(format!("importance-{}", metric.name()), report_name);

        let (curve, _, _) = prune_curve(
            &arch,
            &store,
            metric,
            snapshot.as_ref(),
            &train_data,
            &test_data,
            batch,
            section.max_removals,
        )?;
        let csv_name = format!("curve-{}.csv", metric.name());
        let json_name = format!("curve-{}.json", metric.name());
        write_curve_csv(&args.out.join(&csv_name), &curve)?;
        write_json(&args.out.join(&json_name), &curve)?;
        artifacts.insert(format!("curve-{}-csv", metric.name()), csv_name);
        artifacts.insert(format!("curve-{}-json", metric.name()), json_name);
        let last_accuracy =
            curve.points.last().map_or(curve.baseline.test_accuracy, |p| p.test_accuracy);
        println!(
            "prune {}: {} removals, test accuracy {:.4} -> {last_accuracy:.4}",
            metric.name(),
            curve.points.len(),
            curve.baseline.test_accuracy
        );
    }

    let (train_loss, train_accuracy) = evaluate(&arch, &store, &train_data, batch)?;
    let (test_loss, test_accuracy) = evaluate(&arch, &store, &test_data, batch)?;
    let record = RunRecord {
        mode: "prune".into(),
        config_hash: loaded.hash.clone(),
        // Pruning draws no randomness; the record's seed slot is unused.
        seed: 0,
        overrides,
        epochs: vec![],
        expansions: None,
        final_state: FinalState {
            params: store.param_count(),
            widths: arch.widths(),
            train_loss,
            train_accuracy,
            test_loss,
            test_accuracy,
        },
        artifacts,
    };
    write_json(&args.out.join("record.json"), &record)?;
    write_timing(&args.out, start.elapsed().as_secs_f64())?;
    Ok(())
}

fn unique_stem(path: &Path, used: &mut BTreeSet<String>) -> String {
    let base = path.file_stem().and_then(|s| s.to_str()).unwrap_or("input").to_string();
    let mut stem = base.clone();
    let mut k = 2;
    while !used.insert(stem.clone()) {
        stem = format!("{base}-{k}");
        k += 1;
    }
    stem
}

pub fn cmd_plot(args: &PlotArgs) -> Result<()> {
    if args.events.is_empty() && args.curves.is_empty() {
        return Err(Error::Config("nothing to plot: pass --events and/or --curve".into()));
    }
    std::fs::create_dir_all(&args.out)?;
    let mut used = BTreeSet::new();
    for path in &args.events {
        let records = read_events(path)?;
        let stem = unique_stem(path, &mut used);
        let params_file = args.out.join(format!("{stem}-params.svg"));
        let widths_file = args.out.join(format!("{stem}-widths.svg"));
        std::fs::write(&params_file, plot::params_panel(&records, &stem))?;
        std::fs::write(&widths_file, plot::widths_panel(&records, &stem))?;
        println!("plot: {} {}", params_file.display(), widths_file.display());
    }
    if !args.curves.is_empty() {
        let mut used_curves = BTreeSet::new();
        let mut curves = Vec::new();
        for path in &args.curves {
            let rows = read_curve_csv(path)?;
            curves.push((unique_stem(path, &mut used_curves), rows));
        }
        let file = args.out.join("prune-curves.svg");
        std::fs::write(&file, plot::prune_panel(&curves))?;
        println!("plot: {}", file.display());
    }
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<()> {
    let records: Vec<RunRecord> =
        args.records.iter().map(|p| read_record(p)).collect::<Result<_>>()?;
    let report = aggregate(&records)?;
    std::fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("report.json"), &report)?;
    print!("{}", render_table(&report));
    Ok(())
}
