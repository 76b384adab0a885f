use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmprobe::data::{generate_synthetic, save_dataset, DatasetFiles, SyntheticSpec};
use mmprobe::experiment::{parse_stages, report_stage, run_experiment, DataSource, ExperimentConfig};
use mmprobe::{Error, Result};

#[derive(Parser)]
#[command(name = "mmprobe", version, about = "Probe post-projection richness of a toy multimodal LM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the study (or a subset of its stages).
    Run(Box<RunArgs>),
    /// Write a planted synthetic dataset as embedding/label files.
    GenSynthetic {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthetic")]
        name: String,
    },
    /// Rebuild the report of a finished run from its artifacts.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Default)]
struct SpecArgs {
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    mean_scale: Option<f64>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    data_seed: Option<u64>,
}

impl SpecArgs {
    fn apply(&self, spec: &mut SyntheticSpec) {
        macro_rules! set {
            ($($f:ident => $t:ident),*) => {$( if let Some(v) = self.$f { spec.$t = v; } )*};
        }
        set!(classes => classes, tokens => tokens, dim => dim, mean_scale => mean_scale,
             noise_std => noise_std, train_per_class => train_per_class,
             test_per_class => test_per_class, data_seed => seed);
    }

    fn any(&self) -> bool {
        self.classes.is_some()
            || self.tokens.is_some()
            || self.dim.is_some()
            || self.mean_scale.is_some()
            || self.noise_std.is_some()
            || self.train_per_class.is_some()
            || self.test_per_class.is_some()
            || self.data_seed.is_some()
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the planted synthetic dataset.
    #[arg(long, conflicts_with_all = ["data", "labels"])]
    synthetic: bool,
    #[command(flatten)]
    spec: SpecArgs,
    /// Embedding file (binary format).
    #[arg(long, requires = "labels")]
    data: Option<PathBuf>,
    /// Label CSV with `id,label[,split][,index]`.
    #[arg(long, requires = "data")]
    labels: Option<PathBuf>,
    /// One class name per line, fixing class order.
    #[arg(long, requires = "data")]
    class_file: Option<PathBuf>,
    /// Prototype embedding file and its CSV, comma separated.
    #[arg(long, requires = "data", value_delimiter = ',', num_args = 2)]
    prototypes: Option<Vec<PathBuf>>,
    #[arg(long)]
    task: Option<String>,
    /// `all` or a comma list of zeroshot,original,ft-proj,ft-e2e,probe,report.
    #[arg(long)]
    stages: Option<String>,
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Epochs for both regimes (`N`) or per regime (`ft-proj=N,ft-e2e=M`).
    #[arg(long)]
    regime_epochs: Option<String>,
}

fn apply_regime_epochs(cfg: &mut ExperimentConfig, text: &str) -> Result<()> {
    let bad = || Error::Config(format!("cannot parse --regime-epochs `{text}`"));
    if let Ok(n) = text.trim().parse::<usize>() {
        cfg.ft_proj.epochs = n;
        cfg.ft_e2e.epochs = n;
        return Ok(());
    }
    for part in text.split(',') {
        let (name, n) = part.split_once('=').ok_or_else(bad)?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        match name.trim() {
            "ft-proj" => cfg.ft_proj.epochs = n,
            "ft-e2e" => cfg.ft_e2e.epochs = n,
            _ => return Err(bad()),
        }
    }
    Ok(())
}

fn resolve(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let (Some(data), Some(labels)) = (&args.data, &args.labels) {
        cfg.data = DataSource::Files(DatasetFiles {
            embeddings: data.clone(),
            labels: labels.clone(),
            classes: args.class_file.clone(),
            prototypes: args.prototypes.as_ref().map(|p| (p[0].clone(), p[1].clone())),
        });
    } else if args.synthetic || args.spec.any() {
        let mut spec = match &cfg.data {
            DataSource::Synthetic(s) => s.clone(),
            DataSource::Files(_) => SyntheticSpec::default(),
        };
        args.spec.apply(&mut spec);
        cfg.projection.d_in = spec.dim;
        cfg.data = DataSource::Synthetic(spec);
    }
    if let Some(t) = &args.task {
        cfg.task = t.clone();
    }
    if let Some(s) = &args.stages {
        cfg.stages = parse_stages(s)?;
    }
    if let Some(s) = args.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &args.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(o) = &args.out {
        cfg.out_dir = o.clone();
    }
    if let Some(e) = &args.regime_epochs {
        apply_regime_epochs(&mut cfg, e)?;
    }
    cfg.normalize();
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = resolve(&args)?;
            let outcome = run_experiment(&cfg)?;
            match &outcome.report {
                Some(r) => print!("{}", r.to_table(outcome.scores.as_deref())),
                None => println!("stages done; artifacts in {}", outcome.out_dir.display()),
            }
        }
        Command::GenSynthetic { spec, out, name } => {
            let mut s = SyntheticSpec::default();
            spec.apply(&mut s);
            let ds = generate_synthetic(&s)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let files = DatasetFiles::in_dir(&out, &name);
            save_dataset(&ds, &files)?;
            println!("wrote {} examples to {}", ds.examples.len(), files.embeddings.display());
        }
        Command::Report { out } => {
            let mut cfg = ExperimentConfig::load(&out.join("config.resolved.toml"))?;
            cfg.out_dir = out;
            let (report, scores) = report_stage(&cfg)?;
            print!("{}", report.to_table(Some(&scores)));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
