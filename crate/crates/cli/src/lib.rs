//! The `semseg` command: data generation, training, evaluation, ablation
//! grids and reports.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use log::info;

use semseg_core::ablation::{run_ablation, AblationReport};
use semseg_core::config::ConfigFile;
use semseg_core::data::{generate_dataset, load_dataset, save_dataset, Dataset, ImageFormat};
use semseg_core::eval::{evaluate, predict, render_grid};
use semseg_core::net::{load_checkpoint, save_checkpoint, ParameterVector};
use semseg_core::train::{run_seminar, TrainConfig, TrainLog};
use semseg_core::Error;

pub const RESOLVED_CONFIG: &str = "resolved_config.toml";
pub const TRAIN_LOG: &str = "train_log.csv";
/// Wall-clock details live here so every other output stays byte-stable.
pub const RUN_INFO: &str = "run_info.json";
pub const ABLATION_CSV: &str = "ablation.csv";
/// Number of items drawn in a report grid.
pub const REPORT_ITEMS: usize = 4;

#[derive(Debug, Parser)]
#[command(name = "semseg", version, about = "Click-supervised segmentation with seminar learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train the ancillary stage and the student-student modules.
    Train(TrainArgs),
    /// Score a checkpoint against a dataset.
    Eval(EvalArgs),
    /// Run every configuration of the ablation grid over its seeds.
    Ablate(AblateArgs),
    /// Render predictions and the validation curve of a finished run.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub seed: u64,
    /// Image storage: lossless `f32` or 8-bit `ppm`.
    #[arg(long, value_parser = parse_format, default_value = "f32")]
    pub format: ImageFormat,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Seed triples trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Grid image path; the curve goes beside it as `<stem>.curve.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset to draw; defaults to the one the run was trained on.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

fn parse_format(s: &str) -> Result<ImageFormat, String> {
    match s {
        "f32" => Ok(ImageFormat::F32),
        "ppm" => Ok(ImageFormat::Ppm),
        _ => Err(format!("unknown format {s:?} (expected f32 or ppm)")),
    }
}

/// Exit status 1 for usage and configuration problems, 2 for failures while
/// running.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn usage(e: impl fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// Keeps freed buffers in the heap instead of returning them to the kernel.
/// Training reallocates the same multi-megabyte activations every step and
/// would otherwise page-fault on each of them.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds; it is called before
    // any other thread exists.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

pub fn init_logging() {
    let env = env_logger::Env::new().filter_or("SEMSEG_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}

/// Parses `args` (program name first) and runs the command.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Report(a) => report(&a),
    }
}

fn load_config(path: &Path) -> Outcome<ConfigFile> {
    ConfigFile::load(path).map_err(usage)
}

/// A dataset that exists, is non-empty and is consistent.
fn load_data(dir: &Path) -> Outcome<Dataset> {
    if !dir.is_dir() {
        return Err(usage(format!("{}: no such dataset directory", dir.display())));
    }
    let data = load_dataset(dir).map_err(usage)?;
    if data.is_empty() {
        return Err(usage(format!("{}: dataset is empty", dir.display())));
    }
    Ok(data)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))
}

fn write_run_info(dir: &Path, started: Instant) -> Outcome {
    let finished = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let info = serde_json::json!({
        "finished_unix": finished,
        "elapsed_seconds": started.elapsed().as_secs_f64(),
    });
    write_file(&dir.join(RUN_INFO), format!("{info:#}\n"))
}

fn gen_data(a: &GenDataArgs) -> Outcome {
    let config = load_config(&a.config)?;
    config.scene.validate().map_err(usage)?;
    let data = generate_dataset(&config.scene, a.count, a.seed)?;
    save_dataset(&data, &a.out, a.format).map_err(runtime)?;
    println!(
        "wrote {} scenes to {} (classes {}, {}x{})",
        data.len(),
        a.out.display(),
        data.classes,
        data.height,
        data.width
    );
    Ok(())
}

/// Splits `val_count` items off the end of `data`.
fn hold_out(data: Dataset, val_count: usize) -> Outcome<(Dataset, Option<Dataset>)> {
    if val_count == 0 {
        return Ok((data, None));
    }
    if val_count >= data.len() {
        return Err(usage(format!(
            "val_count {val_count} leaves no training items out of {}",
            data.len()
        )));
    }
    let (train, val) = data.split_tail(val_count)?;
    Ok((train, Some(val)))
}

fn stage_file(k: usize, role: &str) -> String {
    format!("stage{k}_{role}.ckpt")
}

fn write_resolved(dir: &Path, config: &ConfigFile) -> Outcome {
    write_file(&dir.join(RESOLVED_CONFIG), config.to_toml())
}

fn train(a: &TrainArgs) -> Outcome {
    let started = Instant::now();
    let mut config = load_config(&a.config)?;
    config.train.data = Some(a.data.clone());
    config.train.out = Some(a.out.clone());
    config.train.validate().map_err(usage)?;
    let data = load_data(&a.data)?;
    let (train_set, val) = hold_out(data, config.train.val_count)?;
    let out = run_seminar(&config.train, &train_set, val.as_ref())?;

    create_dir(&a.out)?;
    write_resolved(&a.out, &config)?;
    for stage in &out.stages {
        save_checkpoint(&a.out.join(stage_file(stage.index, "student")), &stage.student).map_err(runtime)?;
        save_checkpoint(&a.out.join(stage_file(stage.index, "teacher")), &stage.teacher).map_err(runtime)?;
    }
    out.log.write_csv(&a.out.join(TRAIN_LOG)).map_err(runtime)?;
    write_run_info(&a.out, started)?;
    match out.log.records.last().and_then(|r| r.val_miou) {
        Some(m) => println!("trained {} stage(s); final val mIoU {m:.4}", out.stages.len()),
        None => println!("trained {} stage(s)", out.stages.len()),
    }
    Ok(())
}

fn eval_csv_path(checkpoint: &Path) -> PathBuf {
    let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    checkpoint.with_file_name(format!("{stem}.eval.csv"))
}

fn eval(a: &EvalArgs) -> Outcome {
    let params = load_checkpoint(&a.checkpoint).map_err(usage)?;
    let data = load_data(&a.data)?;
    let cm = evaluate(&params, &data)?;
    let mut csv = String::from("class,iou\n");
    for (c, iou) in cm.per_class_iou().into_iter().enumerate() {
        match iou {
            Some(v) => {
                println!("class {c}: {v:.4}");
                csv.push_str(&format!("{c},{v}\n"));
            }
            None => {
                println!("class {c}: absent");
                csv.push_str(&format!("{c},\n"));
            }
        }
    }
    let m = cm.mean_iou();
    println!("mIoU: {m:.4}");
    csv.push_str(&format!("mean,{m}\n"));
    write_file(&eval_csv_path(&a.checkpoint), csv)
}

fn ablate(a: &AblateArgs) -> Outcome {
    let started = Instant::now();
    let config = load_config(&a.config)?;
    let grid = config.ablation_grid().map_err(usage)?;
    for (name, c) in &grid.configs {
        c.validate().map_err(|e| usage(format!("configuration {name:?}: {e}")))?;
    }
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let data = load_data(&a.data)?;
    let val_count = config.train.val_count;
    if val_count == 0 {
        return Err(usage("ablation needs val_count > 0 to score runs"));
    }
    let (train_set, val) = hold_out(data, val_count)?;
    let val = val.expect("val_count is positive");
    let report = run_ablation(&grid, &train_set, &val, a.jobs)?;

    create_dir(&a.out)?;
    write_resolved(&a.out, &config)?;
    write_runs(a, &config, &report)?;
    write_file(&a.out.join(ABLATION_CSV), report.to_csv())?;
    write_run_info(&a.out, started)?;
    for s in report.summaries() {
        println!(
            "{:<24} mIoU {:.4} ± {:.4} ({} ok, {} failed)",
            s.config, s.mean, s.stddev, s.succeeded, s.failed
        );
    }
    if report.all_succeeded() {
        Ok(())
    } else {
        Err(runtime("some ablation runs failed; see ablation.csv"))
    }
}

/// One directory per run, laid out like a `train` output so `report` works on it.
fn write_runs(a: &AblateArgs, base: &ConfigFile, report: &AblationReport) -> Outcome {
    for r in &report.runs {
        let dir = a.out.join(&r.config).join(format!(
            "seeds-{}-{}-{}",
            r.seeds.ancillary, r.seeds.primary, r.seeds.augment
        ));
        create_dir(&dir)?;
        let grid = base.ablation_grid().map_err(usage)?;
        let train = grid
            .configs
            .into_iter()
            .find(|(n, _)| *n == r.config)
            .map(|(_, c)| c)
            .expect("run belongs to the grid");
        let resolved = ConfigFile {
            scene: base.scene.clone(),
            train: TrainConfig {
                ancillary_seed: r.seeds.ancillary,
                primary_seed: r.seeds.primary,
                augment_seed: r.seeds.augment,
                data: Some(a.data.clone()),
                out: Some(dir.clone()),
                ..train
            },
            ablation: Default::default(),
        };
        write_resolved(&dir, &resolved)?;
        if let (Some(model), Some(log)) = (&r.model, &r.log) {
            save_checkpoint(&dir.join(stage_file(resolved.train.modules, "student")), model).map_err(runtime)?;
            log.write_csv(&dir.join(TRAIN_LOG)).map_err(runtime)?;
        }
    }
    Ok(())
}

/// The student of the highest stage present in `dir`.
fn final_student(dir: &Path) -> Outcome<(usize, ParameterVector)> {
    let entries = fs::read_dir(dir).map_err(|e| usage(format!("{}: {e}", dir.display())))?;
    let best = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            name.strip_prefix("stage")?
                .strip_suffix("_student.ckpt")?
                .parse::<usize>()
                .ok()
        })
        .max()
        .ok_or_else(|| usage(format!("{}: no student checkpoint found", dir.display())))?;
    let params = load_checkpoint(&dir.join(stage_file(best, "student"))).map_err(usage)?;
    Ok((best, params))
}

fn curve_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.curve.csv"))
}

fn report(a: &ReportArgs) -> Outcome {
    let run_config = load_config(&a.run.join(RESOLVED_CONFIG))?;
    let log = TrainLog::read_csv(&a.run.join(TRAIN_LOG)).map_err(usage)?;
    let (stage, model) = final_student(&a.run)?;
    let data_dir = a
        .data
        .clone()
        .or_else(|| run_config.train.data.clone())
        .ok_or_else(|| usage("the run does not record its dataset; pass --data"))?;
    let data = load_data(&data_dir)?;
    // validation items when the run held some out
    let (_, val) = hold_out(data.clone(), run_config.train.val_count.min(data.len() - 1))?;
    let pool = val.unwrap_or(data);
    let items = &pool.items[..pool.len().min(REPORT_ITEMS)];
    let images: Vec<_> = items.iter().map(|i| i.image.clone()).collect();
    let gts: Vec<_> = items.iter().map(|i| i.mask.clone()).collect();
    let preds = images
        .iter()
        .map(|img| predict(&model, img))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    render_grid(&images, &gts, &preds, &a.out).map_err(runtime)?;

    let mut curve = String::from("stage,epoch,val_miou\n");
    for r in &log.records {
        let v = r.val_miou.map(|v| v.to_string()).unwrap_or_default();
        curve.push_str(&format!("{},{},{v}\n", r.stage, r.epoch));
    }
    let cp = curve_path(&a.out);
    write_file(&cp, curve)?;
    info!("report drew stage {stage} on {} items", items.len());
    println!("wrote {} and {}", a.out.display(), cp.display());
    Ok(())
}
