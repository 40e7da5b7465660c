//! Operator entry point. Every subcommand is deterministic given the
//! config file and the seed; the effective configuration is echoed next
//! to the outputs so a result can always be traced back to its setup.
//!
//! Exit codes: 0 success, 1 usage error (flags, overrides), 2 data or
//! format error (unreadable files, failed runs).

mod config;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::{ConfigError, RunConfig};
use sgvla_core::eval::{
    evaluate_task, export_metrics, run_ablation, task_label, AblationSpec, EvalConfig,
    EvalRow, HeadSelection, MetricsFormat, Policy, SuccessTable,
};
use sgvla_core::rng::{mix, rng_from_seed};
use sgvla_core::tensor::ParamStore;
use sgvla_core::trainer::{load_checkpoint, save_checkpoint, train_full, write_training_log, SgvlaModel};
use sgvla_core::world::{
    generate_dataset, read_dataset, write_dataset, EpisodeRecord, SegMask, Subtask,
};

#[derive(Parser)]
#[command(
    name = "sgvla",
    version,
    about = "Desk-scale vision-language-action training and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted-expert demonstrations for all six subtasks.
    GenData(RunArgs),
    /// Run the staged training pipeline on a generated dataset.
    Train(RunArgs),
    /// Roll out a checkpoint on every subtask and write metric tables.
    Eval(EvalArgs),
    /// Train and evaluate the ablation grid, caching checkpoints.
    Ablate(RunArgs),
    /// Print a dataset or checkpoint header, plus a text rendering of the
    /// first recorded frame for datasets.
    Inspect(InspectArgs),
    /// Re-emit a metrics table as csv or json-lines.
    ExportMetrics(ExportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Config file; missing keys fall back to documented defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config key, e.g. --set schedule.lr=5e-4. Repeatable;
    /// applied after the file, in order.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Base seed for data generation, training, and evaluation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output root; defaults to $SGVLA_OUT_DIR, then the current dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Worker-thread cap for the parallel sections.
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to evaluate; defaults to OUT/checkpoints/model.sgvc.
    #[arg(value_name = "CHECKPOINT")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    /// A .sgvd dataset or .sgvc checkpoint file.
    #[arg(value_name = "FILE")]
    file: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Metrics table in the csv layout.
    #[arg(value_name = "FILE")]
    input: PathBuf,
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    format: Format,
    /// Output root; defaults to $SGVLA_OUT_DIR, then the current dir.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => write!(f, "{m}"),
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

fn data<E: fmt::Display>(e: E) -> CliError {
    CliError::Data(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(args) => gen_data(&Ctx::build(&args, "gen-data")?),
        Command::Train(args) => train(&Ctx::build(&args, "train")?),
        Command::Eval(args) => {
            let ctx = Ctx::build(&args.run, "eval")?;
            eval(&ctx, args.checkpoint.as_deref())
        }
        Command::Ablate(args) => ablate(&Ctx::build(&args, "ablate")?),
        Command::Inspect(args) => inspect(&args.file),
        Command::ExportMetrics(args) => export(&args),
    }
}

/// Everything a run-style subcommand needs: the effective config (file,
/// then overrides), the seed, and the output root with the config echo
/// already written.
struct Ctx {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
    jobs: Option<usize>,
}

impl Ctx {
    fn build(args: &RunArgs, cmd: &str) -> Result<Ctx, CliError> {
        let mut cfg = match &args.config {
            Some(path) => RunConfig::load(path).map_err(data)?,
            None => RunConfig::default(),
        };
        for expr in &args.set {
            cfg.apply_set(expr).map_err(|e| match e {
                ConfigError::Parse(m) | ConfigError::Invalid(m) => CliError::Usage(m),
            })?;
        }
        let out = resolve_out(args.out.clone());
        fs::create_dir_all(&out).map_err(data)?;
        let echo = format!(
            "# effective configuration for `sgvla {cmd}`, seed {}, hash {:016x}\n{}",
            args.seed,
            cfg.hash(),
            cfg.to_toml()
        );
        fs::write(out.join(format!("{cmd}.effective.toml")), echo).map_err(data)?;
        if let Some(jobs) = args.jobs {
            if jobs == 0 {
                return Err(CliError::Usage("--jobs must be at least 1".into()));
            }
            // Caps the episode generator's pool; harmless if already built.
            rayon::ThreadPoolBuilder::new()
                .num_threads(jobs)
                .build_global()
                .ok();
        }
        Ok(Ctx {
            cfg,
            seed: args.seed,
            out,
            jobs: args.jobs,
        })
    }
}

fn resolve_out(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("SGVLA_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn gen_data(ctx: &Ctx) -> Result<(), CliError> {
    let wc = ctx.cfg.world_config().map_err(data)?;
    let per = ctx.cfg.world.episodes_per_subtask;
    if per == 0 {
        return Err(CliError::Usage(
            "world.episodes_per_subtask must be at least 1".into(),
        ));
    }
    let episodes = generate_dataset(&Subtask::ALL, per, ctx.seed, &wc);
    let dir = ctx.out.join("dataset");
    fs::create_dir_all(&dir).map_err(data)?;
    let blob = format!(
        "{{\"frame_size\":{},\"seed\":{},\"config_hash\":{}}}",
        wc.frame_size,
        ctx.seed,
        ctx.cfg.hash()
    );
    for (i, &subtask) in Subtask::ALL.iter().enumerate() {
        let slice = &episodes[i * per..(i + 1) * per];
        let path = dir.join(format!("{}.sgvd", task_label(subtask)));
        write_dataset(&path, slice, &blob).map_err(data)?;
        let steps: usize = slice.iter().map(|e| e.steps.len()).sum();
        println!(
            "wrote {} ({} episodes, {} steps)",
            path.display(),
            slice.len(),
            steps
        );
    }
    Ok(())
}

fn load_episodes(ctx: &Ctx) -> Result<Vec<EpisodeRecord>, CliError> {
    let dir = ctx.out.join("dataset");
    let mut files: Vec<PathBuf> = match fs::read_dir(&dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "sgvd"))
            .collect(),
        Err(_) => Vec::new(),
    };
    files.sort();
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "no .sgvd files under {}; run `sgvla gen-data` first",
            dir.display()
        )));
    }
    let mut episodes = Vec::new();
    for path in &files {
        let (eps, header) = read_dataset(path).map_err(data)?;
        if !header.hash_ok {
            eprintln!(
                "warning: {} config blob does not match its stored hash",
                path.display()
            );
        }
        if header.frame_size != ctx.cfg.world.frame_size {
            return Err(CliError::Data(format!(
                "{} was rendered at {}px but the config expects {}px",
                path.display(),
                header.frame_size,
                ctx.cfg.world.frame_size
            )));
        }
        episodes.extend(eps);
    }
    Ok(episodes)
}

fn train(ctx: &Ctx) -> Result<(), CliError> {
    let episodes = load_episodes(ctx)?;
    let model_cfg = ctx.cfg.model_config().map_err(data)?;
    let train_cfg = ctx.cfg.train_config(ctx.seed);
    let schedule = ctx.cfg.stage_schedule();

    let outcome = train_full(&schedule, &model_cfg, &train_cfg, &episodes).map_err(data)?;

    let ckpt_dir = ctx.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(data)?;
    let ckpt_path = ckpt_dir.join("model.sgvc");
    let stage = if schedule.stage3 > 0 {
        3
    } else if schedule.stage2 > 0 {
        2
    } else {
        1
    };
    save_checkpoint(
        &ckpt_path,
        &outcome.store,
        &outcome.model.decoders.bn_state(),
        stage,
        ctx.cfg.hash(),
        None,
    )
    .map_err(data)?;

    let log_dir = ctx.out.join("logs");
    fs::create_dir_all(&log_dir).map_err(data)?;
    let log_path = log_dir.join("train.jsonl");
    write_training_log(&log_path, &outcome.log).map_err(data)?;

    for entry in &outcome.log {
        println!(
            "stage {} epoch {:>3}: total {:.4}",
            entry.stage, entry.epoch, entry.total
        );
    }
    println!(
        "trained {} epochs over {} episodes; checkpoint {}, log {}",
        outcome.log.len(),
        episodes.len(),
        ckpt_path.display(),
        log_path.display()
    );
    Ok(())
}

fn head_label(head: HeadSelection) -> &'static str {
    match head {
        HeadSelection::DiscreteTokens => "tokens",
        HeadSelection::FlowExpert => "flow",
    }
}

fn eval(ctx: &Ctx, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let default_path = ctx.out.join("checkpoints").join("model.sgvc");
    let ckpt_path = checkpoint.unwrap_or(&default_path);
    let ckpt = load_checkpoint(ckpt_path).map_err(data)?;
    if ckpt.config_hash != ctx.cfg.hash() {
        eprintln!(
            "warning: {} was trained under config hash {:016x}, not {:016x}",
            ckpt_path.display(),
            ckpt.config_hash,
            ctx.cfg.hash()
        );
    }

    let model_cfg = ctx.cfg.model_config().map_err(data)?;
    let mut store = ParamStore::new();
    let model = SgvlaModel::init(
        &mut store,
        &model_cfg,
        &mut rng_from_seed(mix(ctx.seed, 0x1217)),
    )
    .map_err(data)?;
    ckpt.apply(&mut store, &model.decoders).map_err(data)?;

    let eval_cfg = ctx.cfg.eval_config(ctx.jobs).map_err(data)?;
    let policy = Policy::Model {
        model: &model,
        store: &store,
        head: eval_cfg.head,
    };
    let variant = head_label(eval_cfg.head);

    let mut table = SuccessTable::default();
    let mut pooled = vec![(0usize, 0usize); eval_cfg.seeds.len()];
    for subtask in Subtask::ALL {
        let rows = evaluate_task(&policy, subtask, variant, &eval_cfg).map_err(data)?;
        for (slot, row) in pooled.iter_mut().zip(&rows) {
            slot.0 += row.episodes;
            slot.1 += row.successes;
        }
        table.rows.extend(rows);
    }
    for (&seed, &(episodes, successes)) in eval_cfg.seeds.iter().zip(&pooled) {
        table.push(EvalRow {
            task: "avg".to_string(),
            variant: variant.to_string(),
            seed,
            episodes,
            successes,
        });
    }

    let dir = ctx.out.join("metrics");
    fs::create_dir_all(&dir).map_err(data)?;
    let csv = dir.join("eval.csv");
    export_metrics(&table, &csv, MetricsFormat::Csv).map_err(data)?;
    export_metrics(&table, &dir.join("eval.jsonl"), MetricsFormat::Jsonl).map_err(data)?;

    print_table(&table, &[variant.to_string()]);
    println!("metrics written to {}", csv.display());
    Ok(())
}

fn ablate(ctx: &Ctx) -> Result<(), CliError> {
    let episodes = load_episodes(ctx)?;
    let model_cfg = ctx.cfg.model_config().map_err(data)?;
    let eval_cfg: EvalConfig = ctx.cfg.eval_config(ctx.jobs).map_err(data)?;
    let spec = AblationSpec::standard(&ctx.cfg.train_config(ctx.seed));

    let dir = ctx.out.join("ablation");
    let outcome = run_ablation(&spec, &model_cfg, &episodes, &eval_cfg, &dir.join("cache"))
        .map_err(data)?;

    let csv = dir.join("metrics.csv");
    export_metrics(&outcome.table, &csv, MetricsFormat::Csv).map_err(data)?;
    export_metrics(
        &outcome.table,
        &dir.join("metrics.jsonl"),
        MetricsFormat::Jsonl,
    )
    .map_err(data)?;

    println!(
        "trained {} arms, reused {} cached",
        outcome.trained.len(),
        outcome.cached.len()
    );
    let variants: Vec<String> = spec.arms.iter().map(|a| a.name.clone()).collect();
    print_table(&outcome.table, &variants);
    println!("metrics written to {}", csv.display());
    Ok(())
}

/// Mean and std of the per-seed success rates, one line per (variant, task).
fn print_table(table: &SuccessTable, variants: &[String]) {
    let mut tasks: Vec<&str> = Subtask::ALL.iter().map(|&t| task_label(t)).collect();
    tasks.push("avg");
    let width = variants.iter().map(|v| v.len()).max().unwrap_or(7).max(7);
    print!("{:width$}", "variant");
    for task in &tasks {
        print!("  {task:>13}");
    }
    println!();
    for variant in variants {
        print!("{variant:width$}");
        for task in &tasks {
            match table.seed_stats(task, variant) {
                Some((mean, std)) => print!("  {:>6.3}±{:<6.3}", mean, std),
                None => print!("  {:>13}", "-"),
            }
        }
        println!();
    }
}

fn inspect(path: &Path) -> Result<(), CliError> {
    let bytes = fs::read(path).map_err(data)?;
    match bytes.get(..4) {
        Some(b"SGVD") => inspect_dataset(path),
        Some(b"SGVC") => inspect_checkpoint(path),
        _ => Err(CliError::Data(format!(
            "{} is neither a dataset (SGVD) nor a checkpoint (SGVC)",
            path.display()
        ))),
    }
}

fn inspect_dataset(path: &Path) -> Result<(), CliError> {
    let (episodes, header) = read_dataset(path).map_err(data)?;
    println!("dataset {}", path.display());
    println!("  version      {}", header.version);
    println!("  episodes     {}", header.episode_count);
    println!("  frame_size   {}", header.frame_size);
    println!("  seed         {}", header.seed);
    println!(
        "  config       {} (hash {})",
        header.config_blob,
        if header.hash_ok { "ok" } else { "MISMATCH" }
    );
    for &subtask in &Subtask::ALL {
        let eps: Vec<&EpisodeRecord> =
            episodes.iter().filter(|e| e.subtask == subtask).collect();
        if eps.is_empty() {
            continue;
        }
        let steps: usize = eps.iter().map(|e| e.steps.len()).sum();
        println!(
            "  {:<13} {} episodes, {} steps",
            task_label(subtask),
            eps.len(),
            steps
        );
    }
    if let Some(step) = episodes.first().and_then(|e| e.steps.first()) {
        println!("first step, head camera:");
        print_frame(&step.head.rgb, header.frame_size);
        println!("supervision mask:");
        print_mask(&step.aux.seg);
    }
    Ok(())
}

/// Maps luma onto a 10-step character ramp, one character per pixel.
fn print_frame(rgb: &[f32], size: usize) {
    const RAMP: &[u8] = b" .:-=+*#%@";
    let n = size * size;
    for r in 0..size {
        let mut line = String::with_capacity(size);
        for c in 0..size {
            let i = r * size + c;
            let luma = 0.299 * rgb[i] + 0.587 * rgb[n + i] + 0.114 * rgb[2 * n + i];
            let idx = (luma.clamp(0.0, 1.0) * (RAMP.len() - 1) as f32).round() as usize;
            line.push(RAMP[idx] as char);
        }
        println!("  {line}");
    }
}

fn print_mask(mask: &SegMask) {
    for r in 0..mask.size() {
        let mut line = String::with_capacity(mask.size());
        for c in 0..mask.size() {
            line.push(if mask.get(r, c) { '#' } else { '.' });
        }
        println!("  {line}");
    }
}

fn inspect_checkpoint(path: &Path) -> Result<(), CliError> {
    let ckpt = load_checkpoint(path).map_err(data)?;
    let values: usize = ckpt.params.iter().map(|(_, _, v)| v.len()).sum();
    println!("checkpoint {}", path.display());
    println!("  stage        {}", ckpt.stage);
    println!("  config hash  {:016x}", ckpt.config_hash);
    println!("  parameters   {} tensors, {} values", ckpt.params.len(), values);
    println!(
        "  batch norm   {} layers",
        ckpt.bn.len()
    );
    println!(
        "  optimizer    {}",
        if ckpt.moments.is_some() {
            "moments included"
        } else {
            "not included"
        }
    );
    const SHOWN: usize = 12;
    for (name, shape, _) in ckpt.params.iter().take(SHOWN) {
        println!("  {name:<28} {shape:?}");
    }
    if ckpt.params.len() > SHOWN {
        println!("  ... and {} more", ckpt.params.len() - SHOWN);
    }
    Ok(())
}

fn export(args: &ExportArgs) -> Result<(), CliError> {
    let text = fs::read_to_string(&args.input).map_err(data)?;
    let table = SuccessTable::from_csv(&text).map_err(data)?;
    let out = resolve_out(args.out.clone());
    fs::create_dir_all(&out).map_err(data)?;
    let stem = args
        .input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("metrics");
    let (ext, format) = match args.format {
        Format::Csv => ("csv", MetricsFormat::Csv),
        Format::Jsonl => ("jsonl", MetricsFormat::Jsonl),
    };
    let path = out.join(format!("{stem}.{ext}"));
    export_metrics(&table, &path, format).map_err(data)?;
    println!("wrote {} ({} rows)", path.display(), table.rows.len());
    Ok(())
}
