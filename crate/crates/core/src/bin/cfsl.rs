use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use cfsl::harness::{render_report, run_benchmark, BenchPlan, BenchReport, ReportFormat};
use cfsl::pack::{DatasetPack, SplitSpec};
use cfsl::sampler::sample_episode;
use cfsl::server::{spawn, EpisodeService, ServerOptions};
use cfsl::synth::{cluster_pack, ClusterSpec};
use cfsl::TaskConfig;

#[derive(Parser)]
#[command(name = "cfsl", version, about = "Continual few-shot learning benchmark toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build and inspect dataset packs.
    #[command(subcommand)]
    Pack(PackCommand),
    /// Write episode manifests for a pack and task config.
    Sample {
        #[arg(long)]
        pack: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        count: u64,
        /// First episode index.
        #[arg(long, default_value_t = 0)]
        start: u64,
        #[arg(long)]
        out: PathBuf,
    },
    #[command(subcommand)]
    Bench(BenchCommand),
    /// Serve episodes over TCP.
    Serve {
        #[arg(long)]
        pack: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Seconds before an idle session is closed.
        #[arg(long, default_value_t = 300)]
        idle_timeout: u64,
    },
}

#[derive(Subcommand)]
enum PackCommand {
    /// Pack a directory of class subdirectories holding images.
    Ingest {
        source: PathBuf,
        #[arg(long)]
        res: u32,
        #[arg(long, default_value_t = 3)]
        channels: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the first N samples of every class.
    Slim {
        pack: PathBuf,
        #[arg(long)]
        max_per_class: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split classes into train, val and test packs.
    Split {
        pack: PathBuf,
        #[arg(long)]
        train: usize,
        #[arg(long)]
        val: usize,
        #[arg(long)]
        test: usize,
        /// Defaults to the directory holding the pack.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Print size and suitability figures.
    Stats {
        pack: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Generate a synthetic class-clustered pack.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        classes: u32,
        #[arg(long, default_value_t = 20)]
        per_class: u32,
        #[arg(long, default_value_t = 8)]
        side: u32,
        #[arg(long, default_value_t = 1)]
        channels: u32,
        #[arg(long, default_value_t = 4)]
        grid: u32,
        #[arg(long, default_value_t = 12.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run a benchmark plan and write the report CSV.
    Run {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a report CSV.
    Render {
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Markdown)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn read_pack(path: &Path) -> Result<DatasetPack> {
    DatasetPack::read(path).with_context(|| format!("reading pack {}", path.display()))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Pack(cmd) => pack(cmd)?,
        Command::Sample {
            pack,
            config,
            count,
            start,
            out,
        } => {
            let pack = read_pack(&pack)?;
            let config = TaskConfig::load(&config)?;
            std::fs::create_dir_all(&out)?;
            for index in start..start + count {
                let episode = sample_episode(&pack, &config, index)?;
                std::fs::write(out.join(format!("episode_{index}.json")), episode.to_json())?;
            }
            println!("wrote {count} episodes to {}", out.display());
        }
        Command::Bench(BenchCommand::Run { plan, out }) => {
            let plan = BenchPlan::load(&plan)?;
            let report = run_benchmark(&plan)?;
            std::fs::write(&out, report.to_csv())?;
            let failed = report.rows.iter().filter(|r| r.outcome.is_err()).count();
            println!("wrote {} rows to {}", report.rows.len(), out.display());
            if failed > 0 {
                for r in report.rows.iter().filter(|r| r.outcome.is_err()) {
                    if let Err(e) = &r.outcome {
                        eprintln!(
                            "{} {} nss={} cci={} {} seed={}: {e}",
                            r.dataset, r.task_kind, r.nss, r.cci, r.learner, r.seed
                        );
                    }
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Bench(BenchCommand::Render { report, format }) => {
            let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let report = BenchReport::from_csv(&text)?;
            let format = match format {
                Format::Csv => ReportFormat::Csv,
                Format::Markdown => ReportFormat::Markdown,
            };
            print!("{}", render_report(&report, format)?);
        }
        Command::Serve {
            pack,
            config,
            bind,
            idle_timeout,
        } => {
            let pack = Arc::new(read_pack(&pack)?);
            let config = TaskConfig::load(&config)?;
            let options = ServerOptions {
                idle_timeout: Duration::from_secs(idle_timeout),
            };
            let service = Arc::new(EpisodeService::new(pack, config, options)?);
            let handle = spawn(service, bind.as_str())?;
            eprintln!("serving on {}", handle.local_addr());
            handle.join();
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn pack(cmd: PackCommand) -> Result<()> {
    match cmd {
        PackCommand::Ingest {
            source,
            res,
            channels,
            out,
        } => {
            let pack = DatasetPack::ingest(&source, res, channels)?;
            pack.write(&out)?;
            println!("packed {} classes into {}", pack.num_classes(), out.display());
        }
        PackCommand::Slim {
            pack,
            max_per_class,
            out,
        } => {
            let slim = read_pack(&pack)?.slim(max_per_class);
            slim.write(&out)?;
            println!("{} samples written to {}", slim.stats().total_images, out.display());
        }
        PackCommand::Split {
            pack,
            train,
            val,
            test,
            out_dir,
        } => {
            let dir = match out_dir {
                Some(d) => d,
                None => pack.parent().map(Path::to_path_buf).unwrap_or_default(),
            };
            let source = read_pack(&pack)?;
            let (tr, va, te) = source.split_by_class(SplitSpec { train, val, test })?;
            for part in [&tr, &va, &te] {
                let path = dir.join(part.name());
                part.write(&path)?;
                println!("{} classes -> {}", part.num_classes(), path.display());
            }
        }
        PackCommand::Stats { pack, json } => {
            let stats = read_pack(&pack)?.stats();
            if json {
                println!("{}", serde_json::to_string_pretty(&stats)?);
            } else {
                let gib = |b: u64| b as f64 / (1u64 << 30) as f64;
                let (h, w, c) = stats.resolution;
                println!("classes           {}", stats.num_classes);
                println!(
                    "samples/class     {}..{}",
                    stats.samples_per_class_min, stats.samples_per_class_max
                );
                println!("images            {}", stats.total_images);
                println!("resolution        {h}x{w}x{c}");
                println!("in-memory         {:.3} GiB", gib(stats.estimated_in_memory_bytes));
                println!("as float32        {:.3} GiB", gib(stats.float32_bytes));
                println!("fits 16 GiB       {}", if stats.passes_size_criterion { "yes" } else { "no" });
            }
        }
        PackCommand::Synth {
            out,
            classes,
            per_class,
            side,
            channels,
            grid,
            noise,
            seed,
        } => {
            if classes == 0 || per_class == 0 || side == 0 || channels == 0 {
                bail!("classes, per-class, side and channels must be positive");
            }
            let name = out
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "synthetic".into());
            let pack = cluster_pack(&ClusterSpec {
                name,
                num_classes: classes,
                per_class,
                side,
                channels,
                grid,
                noise,
                seed,
            });
            pack.write(&out)?;
            println!("synthesized {} classes into {}", pack.num_classes(), out.display());
        }
    }
    Ok(())
}
