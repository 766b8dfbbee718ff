use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cogload_core::experiments::{self, Axis, RunConfig, NOISE_FRACTIONS};
use cogload_core::{Error, Result, SubjectId};

/// EEG cognitive-load classification experiments.
#[derive(Parser)]
#[command(name = "cogload", version)]
struct Cli {
    /// Plain-text key=value configuration applied before any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds trained concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset in the binary recording format.
    Synth {
        #[arg(long, default_value_t = 6)]
        subjects: usize,
        #[arg(long, default_value_t = 40)]
        segments: usize,
    },
    /// Convert a `t,ch1,ch2,ch3,ch4` CSV into the binary recording format.
    ImportCsv {
        csv: PathBuf,
        #[arg(long)]
        subject: String,
        /// Sample rate in Hz; inferred from the time column when omitted.
        #[arg(long)]
        sample_rate: Option<f64>,
        /// `window_index<TAB>paas_score` label file.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Write per-segment band values to features.tsv.
    Featurize(#[command(flatten)] RunArgs),
    /// Dump per-segment topography tensors and PPM previews.
    Topomap {
        #[command(flatten)]
        run: RunArgs,
        /// Maximum segments per subject.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Leave-one-subject-out training and evaluation.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Run all six ablation configurations.
        #[arg(long)]
        ablation_suite: bool,
    },
    /// Re-evaluate a finished run under Gaussian test-time noise.
    Robustness {
        run_dir: PathBuf,
        /// Comma-separated noise fractions (fraction 0 is always included).
        #[arg(long, value_delimiter = ',')]
        fractions: Option<Vec<f64>>,
    },
    /// Re-evaluate a finished run keeping one channel or band at a time.
    Importance {
        run_dir: PathBuf,
        /// channel or band
        #[arg(long)]
        axis: String,
    },
    /// Export attention gates and fused embeddings of every test sample.
    AttentionExport { run_dir: PathBuf },
    /// Three beta values, each with and without attention.
    BetaSweep(#[command(flatten)] RunArgs),
}

#[derive(Args, Default)]
struct RunArgs {
    /// Dataset directory (one subdirectory per subject).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Use the built-in synthetic generator.
    #[arg(long)]
    synthetic: bool,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    segments: Option<usize>,
    /// Network size: paper or desk.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    plateau_factor: Option<f64>,
    #[arg(long)]
    plateau_patience: Option<usize>,
    /// psd or de
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    no_oc: bool,
    #[arg(long)]
    no_attention: bool,
    #[arg(long)]
    raw_only: bool,
    #[arg(long)]
    topo_only: bool,
    #[arg(long)]
    zero_phase: bool,
    #[arg(long)]
    linear_power: bool,
    #[arg(long)]
    pair_mean: bool,
    #[arg(long)]
    macro_f1: bool,
    /// Extra key=value setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl RunArgs {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(d) = &self.data {
            cfg.data = Some(d.clone());
            cfg.synthetic = false;
        }
        let mut pairs: Vec<(&str, String)> = Vec::new();
        let mut opt = |k: &'static str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k, v));
            }
        };
        opt("subjects", self.subjects.map(|v| v.to_string()));
        opt("segments", self.segments.map(|v| v.to_string()));
        opt("model", self.model.clone());
        opt("name", self.name.clone());
        opt("batch_size", self.batch_size.map(|v| v.to_string()));
        opt("lr", self.lr.map(|v| v.to_string()));
        opt("epochs", self.epochs.map(|v| v.to_string()));
        opt("beta", self.beta.map(|v| v.to_string()));
        opt("plateau_factor", self.plateau_factor.map(|v| v.to_string()));
        opt("plateau_patience", self.plateau_patience.map(|v| v.to_string()));
        opt("features", self.features.clone());
        for (k, on) in [
            ("synthetic", self.synthetic),
            ("no_oc", self.no_oc),
            ("no_attention", self.no_attention),
            ("raw_only", self.raw_only),
            ("topo_only", self.topo_only),
            ("zero_phase", self.zero_phase),
            ("linear_power", self.linear_power),
            ("pair_mean", self.pair_mean),
            ("macro_f1", self.macro_f1),
        ] {
            if on {
                pairs.push((k, "true".into()));
            }
        }
        for (k, v) in pairs {
            cfg.set(k, &v)?;
        }
        if self.synthetic {
            cfg.data = None;
        }
        for s in &self.sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(())
    }
}

impl Cli {
    fn run_config(&self, args: &RunArgs) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        args.apply(&mut cfg)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(j) = self.jobs {
            cfg.set("jobs", &j.to_string())?;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }

    fn out_or(&self, default: &Path) -> PathBuf {
        self.out.clone().unwrap_or_else(|| default.to_path_buf())
    }
}

fn print_rows(rows: &[experiments::AnalysisRow]) {
    for r in rows {
        println!("{}\taccuracy {}\tf1 {}", r.unit, r.accuracy.percent(), r.f1.percent());
    }
}

fn print_suite(out: &experiments::SuiteOutput) {
    for row in &out.rows {
        let s = &row.summary.loso;
        let cell = |m: Option<cogload_core::trainer::MeanStd>| m.map(|m| m.percent()).unwrap_or_else(|| "NA".into());
        println!("{}\taccuracy {}\tf1 {}", row.name, cell(s.accuracy), cell(s.f1));
    }
    println!("{}", out.dir.display());
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { subjects, segments } => {
            let out = cli.out_or(Path::new("data"));
            let dirs = experiments::cmd_synth(*subjects, *segments, cli.seed.unwrap_or(0), &out)?;
            println!("wrote {} subjects to {}", dirs.len(), out.display());
        }
        Command::ImportCsv {
            csv,
            subject,
            sample_rate,
            labels,
        } => {
            let out = cli.out_or(Path::new("data"));
            let dir = cogload_core::data::import_csv(csv, &out, &SubjectId::new(subject.as_str()), *sample_rate, labels.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Featurize(args) => {
            let cfg = cli.run_config(args)?;
            let path = experiments::cmd_featurize(&cfg, &cfg.out)?;
            println!("{}", path.display());
        }
        Command::Topomap { run, limit } => {
            let cfg = cli.run_config(run)?;
            let n = experiments::cmd_topomap(&cfg, &cfg.out, *limit)?;
            println!("wrote {n} maps under {}", cfg.out.join("maps").display());
        }
        Command::Run { run, ablation_suite } => {
            let cfg = cli.run_config(run)?;
            if *ablation_suite {
                print_suite(&experiments::cmd_ablation_suite(&cfg)?);
            } else {
                let out = experiments::cmd_run(&cfg)?;
                for f in &out.summary.folds {
                    match (f.accuracy, f.f1) {
                        (Some(a), Some(f1)) => println!("{}\taccuracy {a:.4}\tf1 {f1:.4}", f.subject),
                        _ => println!("{}\tfailed", f.subject),
                    }
                }
                if let (Some(a), Some(f1)) = (out.summary.loso.accuracy, out.summary.loso.f1) {
                    println!("mean(std)\taccuracy {}\tf1 {}", a.percent(), f1.percent());
                }
                println!("{}", out.dir.display());
            }
        }
        Command::Robustness { run_dir, fractions } => {
            let fractions = fractions.clone().unwrap_or_else(|| NOISE_FRACTIONS.to_vec());
            let out = cli.out_or(&run_dir.join("robustness"));
            print_rows(&experiments::cmd_robustness(run_dir, &fractions, &out)?);
        }
        Command::Importance { run_dir, axis } => {
            let axis = Axis::parse(axis)?;
            let out = cli.out_or(&run_dir.join("importance"));
            print_rows(&experiments::cmd_importance(run_dir, axis, &out)?);
        }
        Command::AttentionExport { run_dir } => {
            let out = cli.out_or(&run_dir.join("attention"));
            let s = experiments::cmd_attention_export(run_dir, &out)?;
            println!("{} samples x {} gates: {}", s.rows, s.gate_dim, s.attention.display());
        }
        Command::BetaSweep(args) => {
            let cfg = cli.run_config(args)?;
            print_suite(&experiments::cmd_beta_sweep(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
