//! `adderkit`: gradient checks, energy profiling, toy training runs,
//! sparsity reports and fusion-graph export.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use adderkit::checkpoint::Checkpoint;
use adderkit::grad::GradCheckPlan;
use adderkit::necks::{build_neck, NeckConfig, NeckKind};
use adderkit::profiler::{convert_to_adder, ComponentMask, EnergyModel, EnergyReport, ModelSpec, Precision};
use adderkit::trainer::classifier::{Arch, BnPolicy, Classifier};
use adderkit::trainer::{run_experiment, ExperimentConfig, Task};
use adderkit::{FilterKind, Tensor4};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Parser)]
#[command(name = "adderkit", version, about = "Adder filter toolkit")]
struct Cli {
    /// Worker threads; 1 makes every command byte-reproducible.
    #[arg(long, global = true, env = "ADDERKIT_THREADS", value_parser = clap::value_parser!(u16).range(1..))]
    threads: Option<u16>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-difference check of the layer backward passes.
    Gradcheck(GradcheckArgs),
    /// Op counts and energy of a model spec.
    Energy(EnergyArgs),
    /// Run a training experiment.
    Train(TrainArgs),
    /// Fraction of zeros in a classifier's last block.
    Sparsity(SparsityArgs),
    /// Print or write the text form of a fusion graph.
    ExportGraph(ExportGraphArgs),
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Layer config (key = value). Defaults to the bundled adder layer config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `random_cases` from the config.
    #[arg(long)]
    cases: Option<usize>,
    /// Overrides the case seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Write every check as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnergyArgs {
    /// Model spec file, or the name of a bundled spec.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long, default_value = "fp32")]
    precision: Precision,
    /// Convert these components to adder filters first, e.g. `backbone+neck`.
    #[arg(long)]
    convert: Option<ComponentMask>,
    /// Convert the first layer too (kept as conv by default).
    #[arg(long, requires = "convert")]
    convert_first: bool,
    /// Write the per-layer report as CSV instead of printing the table.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Experiment config (key = value); flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    neck: Option<NeckKind>,
    #[arg(long)]
    bn_policy: Option<BnPolicy>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Pretrained weights for `classify`; defaults to the bundled twin.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Where `pretrain` writes its weights.
    #[arg(long)]
    save: Option<PathBuf>,
    /// Write the training record as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SparsityArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input batch in the binary tensor format, N×3×16×16.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "adder")]
    arch: Arch,
}

#[derive(Debug, Args)]
struct ExportGraphArgs {
    #[arg(long)]
    neck: NeckKind,
    /// Backbone channels per level, lowest level first.
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024")]
    in_channels: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    channels: usize,
    #[arg(long, default_value = "adder")]
    filter: FilterKind,
    /// Stride-2 levels added above the top backbone level.
    #[arg(long, default_value_t = 0)]
    extra_levels: usize,
    #[arg(long, short)]
    output: Option<PathBuf>,
}

fn assets_dir() -> PathBuf {
    std::env::var_os("ADDERKIT_ASSETS")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets"))
}

/// A path as given, or a bundled asset when the path does not exist and
/// is a bare file name.
fn resolve(path: &Path, subdir: &str, ext: &str) -> PathBuf {
    if path.exists() || path.components().count() > 1 {
        return path.to_path_buf();
    }
    let mut bundled = assets_dir().join(subdir).join(path);
    if bundled.extension().is_none() {
        bundled.set_extension(ext);
    }
    if bundled.exists() {
        bundled
    } else {
        path.to_path_buf()
    }
}

fn usage_error(msg: impl std::fmt::Display) -> ! {
    Cli::command().error(ErrorKind::ArgumentConflict, msg).exit()
}

type Outcome = Result<(), Box<dyn std::error::Error>>;

fn write_file(path: &Path, bytes: &[u8]) -> Outcome {
    fs::write(path, bytes).map_err(|e| format!("cannot write {}: {e}", path.display()).into())
}

fn gradcheck(args: GradcheckArgs, out: &mut dyn Write) -> Outcome {
    let path = args.config.unwrap_or_else(|| assets_dir().join("configs/gradcheck_adder.cfg"));
    let text = fs::read_to_string(&path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let mut plan = GradCheckPlan::from_text(&text)?;
    if let Some(n) = args.cases {
        plan.random_cases = n;
    }
    if let Some(s) = args.seed {
        plan.case.seed = s;
    }
    plan.validate()?;
    let reports = plan.run()?;
    if let Some(csv) = &args.csv {
        let mut s = String::from("case,layer,param,max_rel_err,max_abs_err,pass\n");
        for (i, r) in &reports {
            s.push_str(&format!(
                "{i},{},{},{:.6e},{:.6e},{}\n",
                r.layer, r.param, r.max_rel_err, r.max_abs_err, r.pass
            ));
        }
        write_file(csv, s.as_bytes())?;
    }
    let mut failed = 0;
    let mut worst = 0.0f64;
    for (i, r) in &reports {
        worst = worst.max(r.max_rel_err);
        if !r.pass {
            failed += 1;
            writeln!(out, "FAIL case {i} {} {} rel {:.3e}", r.layer, r.param, r.max_rel_err)?;
        }
    }
    let verdict = if failed == 0 { "pass" } else { "fail" };
    writeln!(
        out,
        "gradcheck {verdict}: {} checks over {} cases, worst relative error {worst:.3e}, tolerance {:e}",
        reports.len(),
        plan.random_cases + 1,
        plan.config.rel_tol
    )?;
    if failed > 0 {
        return Err(format!("{failed} gradient checks exceeded the tolerance").into());
    }
    Ok(())
}

fn energy(args: EnergyArgs, out: &mut dyn Write) -> Outcome {
    let path = resolve(&args.spec, "specs", "spec");
    let mut spec = ModelSpec::load(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if let Some(mask) = &args.convert {
        spec = convert_to_adder(&spec, mask, args.convert_first)?;
    }
    let report = EnergyReport::new(&spec, &EnergyModel::for_precision(args.precision))?;
    match &args.csv {
        Some(csv) => {
            write_file(csv, report.to_csv().as_bytes())?;
            writeln!(out, "{} {} total {:.2} mJ", spec.name, args.precision.name(), report.total_mj())?;
        }
        None => out.write_all(report.to_table().as_bytes())?,
    }
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<ExperimentConfig, Box<dyn std::error::Error>> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| format!("{}: {e}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = args.task {
        cfg.task = v;
    }
    if let Some(v) = args.arch {
        cfg.arch = v;
    }
    if let Some(v) = args.neck {
        cfg.neck = v;
    }
    if let Some(v) = args.bn_policy {
        cfg.bn_policy = v;
    }
    cfg.batch_size = args.batch_size.or(cfg.batch_size);
    cfg.seed = args.seed.or(cfg.seed);
    cfg.steps = args.steps.or(cfg.steps);
    cfg.base_lr = args.lr.or(cfg.base_lr);
    if let Some(p) = &args.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    if cfg.task == Task::Classify {
        let ckpt = cfg
            .checkpoint
            .take()
            .unwrap_or_else(|| PathBuf::from(format!("classifier_{}", cfg.arch)));
        cfg.checkpoint = Some(resolve(&ckpt, "checkpoints", "ckpt"));
    }
    Ok(cfg)
}

fn train(args: TrainArgs, cfg: ExperimentConfig, out: &mut dyn Write) -> Outcome {
    let report = run_experiment(&cfg)?;
    if let Some(csv) = &args.csv {
        let mut buf = Vec::new();
        report.record.write_csv(&mut buf)?;
        write_file(csv, &buf)?;
    }
    if let (Some(path), Some(ckpt)) = (&args.save, &report.checkpoint) {
        write_file(path, &ckpt.to_bytes())?;
    }
    writeln!(out, "task {} arch {}", cfg.task, cfg.arch)?;
    out.write_all(report.summary().as_bytes())?;
    Ok(())
}

fn sparsity(args: SparsityArgs, out: &mut dyn Write) -> Outcome {
    let ckpt_path = resolve(&args.checkpoint, "checkpoints", "ckpt");
    let input_path = resolve(&args.input, "inputs", "adt4");
    let ckpt = Checkpoint::load(&ckpt_path).map_err(|e| format!("{}: {e}", ckpt_path.display()))?;
    let x = Tensor4::load(&input_path).map_err(|e| format!("{}: {e}", input_path.display()))?;
    let mut model = Classifier::new(args.arch, &mut ChaCha8Rng::seed_from_u64(0))?;
    model.load(&ckpt)?;
    let s = model.last_block_sparsity(&x)?;
    writeln!(out, "{s:.4}")?;
    Ok(())
}

fn export_graph(args: ExportGraphArgs, out: &mut dyn Write) -> Outcome {
    let mut config = NeckConfig::new(args.neck, args.in_channels, args.channels, args.filter);
    config.extra_levels = args.extra_levels;
    let graph = build_neck(&config)?;
    let text = graph.to_text();
    match &args.output {
        Some(p) => write_file(p, text.as_bytes())?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads.map_or(0, usize::from);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        eprintln!("error: cannot start thread pool: {e}");
        return ExitCode::from(1);
    }
    // Invalid flag combinations are usage errors and are rejected before
    // any work starts.
    let train_cfg = match &cli.command {
        Command::Train(args) => {
            let cfg = train_config(args).unwrap_or_else(|e| usage_error(e));
            if let Err(e) = cfg.validate() {
                usage_error(e);
            }
            if args.save.is_some() && cfg.task != Task::Pretrain {
                usage_error("--save only applies to --task pretrain");
            }
            Some(cfg)
        }
        _ => None,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Gradcheck(a) => gradcheck(a, &mut out),
        Command::Energy(a) => energy(a, &mut out),
        Command::Train(a) => train(a, train_cfg.expect("parsed above"), &mut out),
        Command::Sparsity(a) => sparsity(a, &mut out),
        Command::ExportGraph(a) => export_graph(a, &mut out),
    };
    match result.and_then(|()| out.flush().map_err(Into::into)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
