use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use fedsl::cells::gradcheck::check_cell;
use fedsl::cells::CellKind;
use fedsl::data::{
    read_idx_header, synth_binary_task, write_flat_text, SynthConfig, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
use fedsl::harness::{execute, DatasetKind, Mode, PartitionKind, RunSpec, SynthSpec};
use fedsl::metrics::Metric;
use fedsl::split::gradcheck::split_suite;
use fedsl::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fedsl",
    version,
    about = "Federated split learning simulator for recurrent networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train in one of the four modes and write per-round metrics
    Train(Box<TrainArgs>),
    /// Finite-difference checks of every cell and of the split protocol
    Gradcheck(GradcheckArgs),
    /// Print the header of an IDX file
    InspectIdx { path: PathBuf },
    /// Write the synthetic task as flat text
    ExportSynthetic(ExportArgs),
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    /// key=value file supplying any flag; command-line flags win
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "fedsl")]
    mode: Mode,
    #[arg(long, default_value = "gru")]
    cell: CellKind,
    #[arg(long, default_value = "synthetic")]
    dataset: DatasetKind,
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    segments: Option<usize>,
    /// Explicit segment lengths, e.g. 264,260,260
    #[arg(long, value_delimiter = ',')]
    segment_lengths: Option<Vec<usize>>,
    #[arg(long, default_value_t = 10)]
    clients: usize,
    #[arg(long, default_value_t = 1.0)]
    frac: f64,
    #[arg(long, default_value_t = 10)]
    rounds: u64,
    #[arg(long, default_value_t = 8)]
    bs: usize,
    #[arg(long, default_value_t = 1)]
    ep: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value = "iid")]
    partition: PartitionKind,
    #[arg(long, default_value_t = 2)]
    shards_per_client: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    init_seed: Option<u64>,
    #[arg(long)]
    sample_seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value = "accuracy")]
    metric: Metric,
    /// Start every segment position from the same cell weights
    #[arg(long)]
    tie_init: bool,
    /// Train selected chains on a thread pool (results are unchanged)
    #[arg(long)]
    parallel: bool,
    /// Metrics CSV path; printed to stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    trace_messages: Option<PathBuf>,
    /// Fill elapsed_ms with wall time instead of 0
    #[arg(long)]
    wall_clock: bool,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = SynthSpec::default().n_train)]
    synth_train: usize,
    #[arg(long, default_value_t = SynthSpec::default().n_test)]
    synth_test: usize,
    #[arg(long, default_value_t = SynthSpec::default().steps)]
    synth_steps: usize,
    #[arg(long, default_value_t = SynthSpec::default().features)]
    synth_features: usize,
    #[arg(long, default_value_t = SynthSpec::default().class_gap)]
    class_gap: f64,
    #[arg(long, default_value_t = SynthSpec::default().noise)]
    noise: f64,
    #[arg(long, default_value_t = SynthSpec::default().positive_rate)]
    positive_rate: f64,
}

impl SynthArgs {
    fn spec(&self) -> SynthSpec {
        SynthSpec {
            n_train: self.synth_train,
            n_test: self.synth_test,
            steps: self.synth_steps,
            features: self.synth_features,
            class_gap: self.class_gap,
            noise: self.noise,
            positive_rate: self.positive_rate,
        }
    }
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random instances per cell
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Random chains per cell and segment count for the split checks
    #[arg(long, default_value_t = 5)]
    split_seeds: u64,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Export the test split instead of the training split
    #[arg(long)]
    test: bool,
}

impl TrainArgs {
    fn into_spec(self) -> RunSpec {
        RunSpec {
            mode: self.mode,
            cell: self.cell,
            dataset: self.dataset,
            data_dir: self.data_dir,
            segments: self.segments,
            segment_lengths: self.segment_lengths,
            clients: self.clients,
            frac: self.frac,
            rounds: self.rounds,
            batch_size: self.bs,
            local_epochs: self.ep,
            lr: self.lr,
            hidden: self.hidden,
            partition: self.partition,
            shards_per_client: self.shards_per_client,
            seed: self.seed,
            init_seed: self.init_seed,
            sample_seed: self.sample_seed,
            data_seed: self.data_seed,
            train_limit: self.train_limit,
            test_limit: self.test_limit,
            synth: self.synth.spec(),
            metric: self.metric,
            tie_init: self.tie_init,
            parallel: self.parallel,
            out: self.out,
            checkpoint_every: self.checkpoint_every,
            checkpoint_dir: self.checkpoint_dir,
            trace_messages: self.trace_messages,
            wall_clock: self.wall_clock,
        }
    }
}

/// Turns `key = value` lines into `--key=value` arguments. Boolean values
/// become a bare flag (`true`) or nothing (`false`).
fn config_args(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let mut args = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("{}:{}: expected key=value", path.display(), n + 1))
        })?;
        let key = key.trim().trim_start_matches("--").replace('_', "-");
        if key == "config" {
            return Err(Error::Config(
                "config files cannot include other config files".into(),
            ));
        }
        match value.trim() {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            v => args.push(format!("--{key}={v}")),
        }
    }
    Ok(args)
}

/// Splices the config file's arguments in front of the command-line ones
/// so that later (command-line) values override them.
fn expand_config(argv: Vec<String>) -> Result<Vec<String>> {
    let Some(cmd) = argv.iter().position(|a| a == "train") else {
        return Ok(argv);
    };
    let mut path = None;
    for (i, a) in argv.iter().enumerate().skip(cmd + 1) {
        if let Some(p) = a.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        } else if a == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        }
    }
    let Some(path) = path else {
        return Ok(argv);
    };
    let mut out: Vec<String> = argv[..=cmd].to_vec();
    out.extend(config_args(&path)?);
    out.extend_from_slice(&argv[cmd + 1..]);
    Ok(out)
}

fn train(args: TrainArgs) -> Result<()> {
    let spec = args.into_spec();
    let to_stdout = spec.out.is_none();
    let rows = execute(&spec)?;
    if to_stdout {
        print!("{}", fedsl::metrics::format_csv(&rows));
    } else {
        eprintln!(
            "wrote {} rows to {}",
            rows.len(),
            spec.out.as_ref().expect("set").display()
        );
    }
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let start = Instant::now();
    let mut ok = true;
    for kind in CellKind::ALL {
        let r = check_cell(kind, args.seeds)?;
        println!(
            "{} cell {kind}: {} gradients over {} seeds, {} failures, max rel err {:.3e}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.checked,
            args.seeds,
            r.failures,
            r.max_rel_err
        );
        ok &= r.passed();
    }
    for (kind, segments, eq, fd) in split_suite(args.split_seeds)? {
        println!(
            "{} split {kind} S={segments}: tied loss diff {:.3e}, tied grad rel err {:.3e}, chain fd {} gradients, max rel err {:.3e}",
            if eq.passed() && fd.passed() { "PASS" } else { "FAIL" },
            (eq.loss_split - eq.loss_unsplit).abs(),
            eq.max_grad_rel_err,
            fd.checked,
            fd.max_rel_err
        );
        ok &= eq.passed() && fd.passed();
    }
    println!("finished in {:.1}s", start.elapsed().as_secs_f64());
    Ok(ok)
}

fn inspect_idx(path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })?;
    let h = read_idx_header(&bytes)?;
    let kind = match h.magic {
        IDX_IMAGES_MAGIC => "images",
        IDX_LABELS_MAGIC => "labels",
        _ => "unknown",
    };
    println!("magic: {} ({kind})", h.magic);
    println!("dtype: 0x{:02x}", h.dtype);
    println!("dims: {:?}", h.dims);
    println!("payload bytes: {}", bytes.len() - h.byte_len());
    Ok(())
}

fn export(args: &ExportArgs) -> Result<()> {
    let s = args.synth.spec();
    let ds = synth_binary_task(&SynthConfig {
        n_train: s.n_train,
        n_test: s.n_test,
        steps: s.steps,
        features: s.features,
        class_gap: s.class_gap,
        noise: s.noise,
        positive_rate: s.positive_rate,
        seed: args.seed,
    })?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(&args.out)?);
    write_flat_text(if args.test { &ds.test } else { &ds.train }, &mut out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv = match expand_config(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(argv);
    let result = match cli.command {
        Command::Train(args) => train(*args).map(|_| true),
        Command::Gradcheck(args) => gradcheck(&args),
        Command::InspectIdx { path } => inspect_idx(&path).map(|_| true),
        Command::ExportSynthetic(args) => export(&args).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
