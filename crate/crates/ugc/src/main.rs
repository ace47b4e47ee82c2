use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ugc::checkpoint::GeneratorFile;
use ugc::config::RunConfig;
use ugc::data::synth_generate;
use ugc::metrics::write_report;
use ugc::nn::slice_subnet;
use ugc::pipeline::{codes_of, prepare, run_pipeline};
use ugc::report::{collect_reports, write_plots};
use ugc::search::{run_search, search_report_path, SearchReport};
use ugc::stage1::{load_supernet, run_stage1, Stage1Paths};
use ugc::stage2::{evaluate_generator, run_baseline, run_stage2};
use ugc::{Result, UgcError};

/// Unified GAN compression: supernet training, evolutionary search and online distillation.
#[derive(Parser)]
#[command(name = "ugc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; defaults are used when omitted. `UGC_<SECTION>_<KEY>` variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a synthetic paired corpus.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints the resolved configuration.
    Config {
        #[command(flatten)]
        cfg: ConfigArg,
    },
    /// Trains the supernet.
    Stage1 {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Continue from the existing checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop once this many total steps are done.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Searches the student and teacher architectures.
    Search {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Stage 1 checkpoint; defaults to the one under the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Distills the student from the two online teachers.
    Stage2 {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Search report; defaults to the one under the output directory.
        #[arg(long)]
        search: Option<PathBuf>,
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Trains the student architecture supervised-only on the labeled split.
    Baseline {
        #[command(flatten)]
        cfg: ConfigArg,
        #[arg(long)]
        search: Option<PathBuf>,
    },
    /// Evaluates a generator on a split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Standalone generator file.
        #[arg(long, conflicts_with = "supernet", required_unless_present = "supernet")]
        generator: Option<PathBuf>,
        /// Stage 1 checkpoint to slice a sub-network from.
        #[arg(long)]
        supernet: Option<PathBuf>,
        /// Search report naming the sub-network (with --supernet).
        #[arg(long)]
        search: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Which::Student)]
        which: Which,
        #[arg(long, value_enum, default_value_t = SplitArg::Eval)]
        split: SplitArg,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plots every logged evaluation under a run directory.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Plot directory; defaults to `<run-dir>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage 1, search and stage 2 in one go.
    Pipeline {
        #[command(flatten)]
        cfg: ConfigArg,
        /// Also train the supervised-only baseline.
        #[arg(long)]
        baseline: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Student,
    Deeper,
    Wider,
    Largest,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    /// Held-out ids.
    Eval,
    /// Labeled training ids.
    Labeled,
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    let cfg = RunConfig::resolve(arg.config.as_deref(), std::env::vars())?;
    cfg.validate()?;
    Ok(cfg)
}

fn or_default(p: Option<PathBuf>, default: PathBuf) -> PathBuf {
    p.unwrap_or(default)
}

fn print_json<T: serde::Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("value serializes"));
}

fn synth(n: usize, size: usize, seed: u64, out: &Path) -> Result<()> {
    let ids = synth_generate(out, n, size, seed)?;
    println!(
        "wrote {} pairs ({size}x{size}, seed {seed}) to {}: ids {}..{}",
        ids.len(),
        out.display(),
        ids[0],
        ids[ids.len() - 1]
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { n, size, seed, out } => synth(n, size, seed, &out),
        Command::Config { cfg } => {
            print!("{}", load_config(&cfg)?.to_toml());
            Ok(())
        }
        Command::Stage1 { cfg, resume, steps } => {
            let cfg = load_config(&cfg)?;
            let ws = prepare(&cfg)?;
            let net = run_stage1(&cfg, &ws.data, &ws.part, &cfg.out_dir, resume, steps)?;
            println!("stage 1 at step {} -> {}", net.step, Stage1Paths::new(&cfg.out_dir).checkpoint.display());
            Ok(())
        }
        Command::Search { cfg, checkpoint } => {
            let cfg = load_config(&cfg)?;
            let ckpt = or_default(checkpoint, Stage1Paths::new(&cfg.out_dir).checkpoint);
            let net = load_supernet(&ckpt)?;
            let ws = prepare(&cfg)?;
            let report = run_search(&cfg, &net, &ws.data, &ws.part, &cfg.out_dir)?;
            print_json(&report);
            Ok(())
        }
        Command::Stage2 { cfg, checkpoint, search, resume, steps } => {
            let cfg = load_config(&cfg)?;
            let ckpt = or_default(checkpoint, Stage1Paths::new(&cfg.out_dir).checkpoint);
            let search = SearchReport::load(&or_default(search, search_report_path(&cfg.out_dir)))?;
            let net = load_supernet(&ckpt)?;
            let ws = prepare(&cfg)?;
            let codes = codes_of(&search);
            let (state, eval) =
                run_stage2(&cfg, &net, &codes, &ws.data, &ws.part, &ws.eval_ids, &cfg.out_dir, resume, steps)?;
            match eval {
                Some(r) => print_json(&r),
                None => println!("stage 2 paused at step {}", state.step),
            }
            Ok(())
        }
        Command::Baseline { cfg, search } => {
            let cfg = load_config(&cfg)?;
            let search = SearchReport::load(&or_default(search, search_report_path(&cfg.out_dir)))?;
            let ws = prepare(&cfg)?;
            let (_, r) = run_baseline(&cfg, &search.student.code, &ws.data, &ws.part, &ws.eval_ids, &cfg.out_dir)?;
            print_json(&r);
            Ok(())
        }
        Command::Eval { cfg, generator, supernet, search, which, split, out } => {
            let cfg = load_config(&cfg)?;
            let g = match (generator, supernet) {
                (Some(p), _) => GeneratorFile::load(&p)?,
                (None, Some(p)) => {
                    let net = load_supernet(&p)?;
                    let code = match which {
                        Which::Largest => net.spec.sample_largest(),
                        w => {
                            let s = SearchReport::load(&or_default(search, search_report_path(&cfg.out_dir)))?;
                            match w {
                                Which::Deeper => s.deeper.code,
                                Which::Wider => s.wider.code,
                                _ => s.student.code,
                            }
                        }
                    };
                    net.spec.validate_arch(&code)?;
                    let label = match which {
                        Which::Student => "supernet-student",
                        Which::Deeper => "supernet-deeper",
                        Which::Wider => "supernet-wider",
                        Which::Largest => "supernet-largest",
                    };
                    let weights = slice_subnet(&net.generator, &net.spec, &code);
                    GeneratorFile { spec: net.spec, code, label: label.into(), weights }
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            let ws = prepare(&cfg)?;
            let ids = match split {
                SplitArg::Eval => ws.eval_ids,
                SplitArg::Labeled => ws.part.labeled_ids,
            };
            let report = evaluate_generator(&cfg, &g, &ws.data, &ids)?;
            if let Some(p) = out {
                write_report(&p, &report)?;
            }
            print_json(&report);
            Ok(())
        }
        Command::Report { run_dir, out } => {
            let reports = collect_reports(&run_dir)?;
            let out = or_default(out, run_dir.join("plots"));
            for p in write_plots(&reports, &out)? {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::Pipeline { cfg, baseline } => {
            let cfg = load_config(&cfg)?;
            let ws = prepare(&cfg)?;
            let outcome = run_pipeline(&cfg, &ws, &cfg.out_dir, baseline)?;
            print_json(&outcome.student);
            if let Some(b) = &outcome.baseline {
                print_json(b);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, UgcError::Missing(_)) {
                eprintln!("run the upstream stage first");
            }
            ExitCode::from(1)
        }
    }
}
