//! Command-line experiment runner.
//!
//! File layout:
//!
//! ```text
//! <data_dir>/domain{0,1}_{train,dev,test}.jsonl     gen-data
//! <out>/<method>_seed<S>/config.toml                 exact config of the run
//!                        history.csv                 epoch,lr,dev_loss,cer_org,cer_tar,sub_loss1,sub_loss2,loss2
//!                        steps.csv                   epoch,step,lr,sub_loss1,sub_loss2,loss1,loss2,total,max_abs_grad,max_abs_clipped_grad
//!                        checkpoints/epoch_NNN.ckpt  after every epoch (000 = starting model)
//!                        model.ckpt                  final weights
//!                        summary.json                method, seed, stop reason, test-set fingerprints
//!                        abort.json, abort.ckpt      only after a non-finite abort
//! <out>/sweep.csv                                    param,value,seed,cer_org,cer_tar
//! <out>/comparison.csv                               method,scale_tar,cer_org,cer_tar
//! <out>/curve_<run>.csv                              epoch,cer_org,cer_tar
//! ```
//!
//! Exit codes: 0 success, 1 other failure, 2 config or usage error,
//! 3 missing input, 4 numeric abort.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::data::{gen_domain, prepare, read_split, write_split, DomainData, Utterance};
use crate::error::{Error, Result};
use crate::eval::{build_comparison, csv_err, evaluate, write_comparison};
use crate::model::ModelParams;
use crate::train::{
    train_base, train_ft, train_mtlcf, train_rt, AbortDump, EpochRecord, Method, RunOptions, RunSummary,
    StepObserver, StepReport, TestSets, TrainRun,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_MISSING_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "mtlcf", version, about = "Continual CTC training without catastrophic forgetting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    Alpha,
    Beta,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate both synthetic domains.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to the config's data_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one method for every seed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<Method>,
        /// Repeatable; overrides the config's seeds.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Original model for ft and mtlcf.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Greedy-decode dataset files with a checkpoint and report CER.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        /// Directory for per-utterance CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run MTLCF over values of one weight, the other fixed at 0.5.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Comparison table and learning curves from finished run directories.
    Report {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::ConfigParse(_) => EXIT_CONFIG,
        Error::MissingInput(_) => EXIT_MISSING_INPUT,
        Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_OTHER,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let out = out.unwrap_or_else(|| cfg.data_dir.clone());
            for path in gen_data(&cfg, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Train {
            config,
            method,
            seeds,
            data,
            base,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(m) = method {
                cfg.method = m;
            }
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if base.is_some() {
                cfg.base_checkpoint = base;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            for dir in train(&cfg)? {
                println!("{}", dir.display());
            }
            Ok(())
        }
        Command::Eval { checkpoint, data, out } => {
            let model = ModelParams::<f64>::load(require(&checkpoint)?)?;
            for path in &data {
                let utts = prepare(&read_split::<f64>(require(path)?)?);
                let id = path.file_stem().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned());
                let report = evaluate(&model, &utts, &id)?;
                println!("{}\t{}\t{:.6}", report.dataset_id, report.utterance_count, report.mean_cer);
                if let Some(dir) = &out {
                    fs::create_dir_all(dir)?;
                    report.write_csv(dir.join(format!("eval_{id}.csv")))?;
                }
            }
            Ok(())
        }
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            data,
            base,
            out,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if !seeds.is_empty() {
                cfg.seeds = seeds;
            }
            if let Some(d) = data {
                cfg.data_dir = d;
            }
            if base.is_some() {
                cfg.base_checkpoint = base;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let path = sweep(&cfg, param, &values)?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Report { runs, out } => {
            for path in report(&runs, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(require(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn require(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingInput(path.display().to_string()))
    }
}

pub fn split_path(dir: &Path, domain: u8, split: &str) -> PathBuf {
    dir.join(format!("domain{domain}_{split}.jsonl"))
}

/// Writes the six split files and returns their paths.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for spec in [&cfg.original, &cfg.target] {
        let split = gen_domain::<f64>(spec)?;
        for (name, part) in split.parts() {
            let path = split_path(out, spec.domain_id, name);
            write_split(&path, part)?;
            written.push(path);
        }
    }
    Ok(written)
}

fn load_domain(dir: &Path, domain: u8) -> Result<DomainData<f64>> {
    let load = |split| -> Result<Vec<Utterance<f64>>> { Ok(prepare(&read_split(require(&split_path(dir, domain, split))?)?)) };
    Ok(DomainData {
        train: load("train")?,
        dev: load("dev")?,
        test: load("test")?,
    })
}

fn load_test(dir: &Path, domain: u8) -> Result<Option<Vec<Utterance<f64>>>> {
    let path = split_path(dir, domain, "test");
    if path.exists() {
        Ok(Some(prepare(&read_split(&path)?)))
    } else {
        Ok(None)
    }
}

fn load_base(cfg: &ExperimentConfig) -> Result<ModelParams<f64>> {
    let path = cfg
        .base_checkpoint
        .as_deref()
        .ok_or_else(|| Error::MissingInput(format!("{} needs a base checkpoint (--base or base_checkpoint)", cfg.method)))?;
    ModelParams::load(require(path)?)
}

#[derive(Serialize)]
struct StepRow {
    epoch: usize,
    step: u64,
    lr: f64,
    sub_loss1: f64,
    sub_loss2: f64,
    loss1: f64,
    loss2: f64,
    total: f64,
    max_abs_grad: f64,
    max_abs_clipped_grad: f64,
}

/// Streams a run's history, step losses and checkpoints into its directory.
struct RunWriter {
    dir: PathBuf,
    history: csv::Writer<File>,
    steps: csv::Writer<File>,
    pending: Option<Error>,
}

impl RunWriter {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            history: csv::Writer::from_path(dir.join("history.csv")).map_err(csv_err)?,
            steps: csv::Writer::from_path(dir.join("steps.csv")).map_err(csv_err)?,
            pending: None,
        })
    }
}

impl StepObserver<f64> for RunWriter {
    fn on_step(&mut self, r: &StepReport, _model: &ModelParams<f64>) {
        let row = StepRow {
            epoch: r.epoch,
            step: r.step,
            lr: r.lr,
            sub_loss1: r.losses.sub_loss1,
            sub_loss2: r.losses.sub_loss2,
            loss1: r.losses.loss1,
            loss2: r.losses.loss2,
            total: r.losses.total,
            max_abs_grad: r.clip.max_abs_raw,
            max_abs_clipped_grad: r.clip.max_abs_clipped,
        };
        if let Err(e) = self.steps.serialize(row) {
            self.pending.get_or_insert(csv_err(e));
        }
    }

    fn on_epoch(&mut self, record: &EpochRecord, model: &ModelParams<f64>) -> Result<()> {
        if let Some(e) = self.pending.take() {
            return Err(e);
        }
        self.history.serialize(record).map_err(csv_err)?;
        self.history.flush()?;
        self.steps.flush()?;
        model.save(self.dir.join("checkpoints").join(format!("epoch_{:03}.ckpt", record.epoch)))
    }

    fn on_abort(&mut self, dump: &AbortDump, model: &ModelParams<f64>) {
        let _ = self.history.flush();
        let _ = self.steps.flush();
        let json = serde_json::to_string_pretty(dump).unwrap_or_default();
        if let Err(e) = fs::write(self.dir.join("abort.json"), json) {
            log::error!("could not write abort dump: {e}");
        }
        if let Err(e) = model.save(self.dir.join("abort.ckpt")) {
            log::error!("could not write abort checkpoint: {e}");
        }
    }
}

fn finish_run(dir: &Path, run: &TrainRun<f64>, label: &str) -> Result<()> {
    run.model.save(dir.join("model.ckpt"))?;
    let summary = RunSummary {
        label: label.to_string(),
        ..run.summary()
    };
    fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(|e| Error::format("summary", e.to_string()))?,
    )?;
    Ok(())
}

/// Runs `cfg.method` once per seed; returns the run directories.
pub fn train(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let dir = &cfg.data_dir;
    let method = cfg.method;
    let data0 = match method {
        Method::Base | Method::Rt | Method::Mtlcf => Some(load_domain(dir, 0)?),
        Method::Ft => None,
    };
    let data1 = match method {
        Method::Base => None,
        _ => Some(load_domain(dir, 1)?),
    };
    let test_org = match &data0 {
        Some(d) => Some(d.test.clone()),
        None => load_test(dir, 0)?,
    };
    let test_tar = match &data1 {
        Some(d) => Some(d.test.clone()),
        None => load_test(dir, 1)?,
    };
    let base = match method {
        Method::Ft | Method::Mtlcf => Some(load_base(cfg)?),
        Method::Base | Method::Rt => None,
    };

    let mut dirs = Vec::new();
    for &seed in &cfg.seeds {
        let label = format!("{method}_seed{seed}");
        let run_dir = cfg.output_dir.join(&label);
        let run_cfg = ExperimentConfig {
            seeds: vec![seed],
            ..cfg.clone()
        };
        fs::create_dir_all(&run_dir)?;
        run_cfg.save(run_dir.join("config.toml"))?;
        let opts = RunOptions {
            hyper: cfg.hyper.clone(),
            schedule: cfg.schedule.clone(),
            seed,
            tests: TestSets {
                org: test_org.as_deref(),
                tar: test_tar.as_deref(),
            },
        };
        let mut writer = RunWriter::create(&run_dir)?;
        let run = match method {
            Method::Base => train_base(&cfg.model, data0.as_ref().expect("loaded"), &opts, &mut writer)?,
            Method::Ft => train_ft(base.as_ref().expect("loaded"), data1.as_ref().expect("loaded"), &opts, &mut writer)?,
            Method::Rt => train_rt(
                &cfg.model,
                data0.as_ref().expect("loaded"),
                data1.as_ref().expect("loaded"),
                &opts,
                &mut writer,
            )?,
            Method::Mtlcf => train_mtlcf(
                base.as_ref().expect("loaded"),
                data0.as_ref().expect("loaded"),
                data1.as_ref().expect("loaded"),
                &opts,
                &mut writer,
            )?,
        };
        finish_run(&run_dir, &run, &label)?;
        dirs.push(run_dir);
    }
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub cer_org: Option<f64>,
    pub cer_tar: Option<f64>,
}

/// MTLCF for each value of `param` (the other weight at 0.5) and seed.
/// Writes `sweep.csv` under the output directory and returns its path.
pub fn sweep(cfg: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<PathBuf> {
    if values.is_empty() {
        return Err(Error::config("values", "the sweep needs at least one value"));
    }
    let name = match param {
        SweepParam::Alpha => "alpha",
        SweepParam::Beta => "beta",
    };
    let mut rows = Vec::new();
    for &v in values {
        let mut run_cfg = ExperimentConfig {
            method: Method::Mtlcf,
            output_dir: cfg.output_dir.join(format!("{name}_{v}")),
            ..cfg.clone()
        };
        match param {
            SweepParam::Alpha => (run_cfg.hyper.alpha, run_cfg.hyper.beta) = (v, 0.5),
            SweepParam::Beta => (run_cfg.hyper.alpha, run_cfg.hyper.beta) = (0.5, v),
        }
        run_cfg.hyper.validate().map_err(|e| e.in_section("hyper"))?;
        for (dir, &seed) in train(&run_cfg)?.iter().zip(&run_cfg.seeds) {
            let history = read_history(dir)?;
            let last = history.last().ok_or_else(|| Error::MissingInput(format!("{}: empty history", dir.display())))?;
            rows.push(SweepRow {
                param: name.into(),
                value: v,
                seed,
                cer_org: last.cer_org,
                cer_tar: last.cer_tar,
            });
        }
    }
    let path = cfg.output_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(path)
}

pub fn read_history(dir: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(require(&dir.join("history.csv"))?).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn read_summary(dir: &Path) -> Result<RunSummary> {
    let incomplete = |what: &str| Error::MissingInput(format!("run directory {} is incomplete: no {what}", dir.display()));
    let summary_path = dir.join("summary.json");
    if !summary_path.exists() {
        return Err(incomplete("summary.json"));
    }
    if !dir.join("history.csv").exists() {
        return Err(incomplete("history.csv"));
    }
    let mut summary: RunSummary = serde_json::from_str(&fs::read_to_string(&summary_path)?)
        .map_err(|e| Error::format("summary", e.to_string()))?;
    summary.history = read_history(dir)?;
    if summary.history.is_empty() {
        return Err(incomplete("history rows"));
    }
    Ok(summary)
}

#[derive(Serialize)]
struct CurveRow {
    epoch: usize,
    cer_org: Option<f64>,
    cer_tar: Option<f64>,
}

/// Writes `comparison.csv` and one `curve_<run>.csv` per run directory.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    let summaries = runs.iter().map(|d| read_summary(d)).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    let rows = build_comparison(&summaries)?;
    let table = out.join("comparison.csv");
    write_comparison(&table, &rows)?;
    let mut written = vec![table];
    for s in &summaries {
        let path = out.join(format!("curve_{}.csv", s.label));
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        for r in &s.history {
            w.serialize(CurveRow {
                epoch: r.epoch,
                cer_org: r.cer_org,
                cer_tar: r.cer_tar,
            })
            .map_err(csv_err)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
