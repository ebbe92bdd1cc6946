use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedvck::cli_io::{
    arms_csv, comparison_table, gen_synthetic, k_sweep, k_sweep_csv, load_or_generate, mmd_diag, run_arms,
    run_experiment, write_run, Config, Dataset,
};
use fedvck::fed::{comm_calc, dirichlet_partition, Method};
use fedvck::model::{EncoderConfig, ImageShape, ModelSnapshot};
use fedvck::rng::{stream, Stream};
use fedvck::{Error, Result};

#[derive(Parser)]
#[command(name = "fedvck", version, about = "Federated learning through condensed knowledge")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Settings shared by every command that builds a configuration. Named
/// flags beat `--set`, which beats `FVCK_SEED`, which beats the file.
#[derive(Args, Clone, Default)]
struct Settings {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set condense.lr=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// `standard` or `desk`.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients: Option<usize>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    percent: Option<f64>,
    /// Run clients on a thread pool.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args, Clone, Default)]
struct DataFiles {
    /// Training set (FVDS); with --test replaces the synthetic task.
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic train and test sets.
    GenData {
        #[command(flatten)]
        settings: Settings,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Print per-client class counts of a Dirichlet partition.
    Partition {
        #[command(flatten)]
        settings: Settings,
        #[command(flatten)]
        data: DataFiles,
        /// Also write `client,index` rows here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one method and write metrics, ledger, server log and model.
    Run {
        #[command(flatten)]
        settings: Settings,
        #[command(flatten)]
        data: DataFiles,
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Run the ablation arms and the hard-negative sweep over several seeds.
    Ablate {
        #[command(flatten)]
        settings: Settings,
        #[command(flatten)]
        data: DataFiles,
        /// Comma-separated seeds.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Skip the FedAvg reference row.
        #[arg(long)]
        no_fedavg: bool,
        /// Skip the hard-negative sweep.
        #[arg(long)]
        no_k_sweep: bool,
        #[arg(long, default_value = "runs/ablation")]
        out: PathBuf,
    },
    /// Knowledge upload size for a hypothetical client, without training.
    CommCalc {
        /// Local items on the client.
        #[arg(long)]
        items: usize,
        #[arg(long, default_value_t = 1.0)]
        percent: f64,
        #[arg(long, default_value_t = 28)]
        height: usize,
        #[arg(long, default_value_t = 28)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        /// Also report the model upload of this encoder: depth,width,classes.
        #[arg(long, value_delimiter = ',')]
        model: Option<Vec<usize>>,
    },
    /// Adjacent-round MMD of condensed knowledge with importance and uniform sampling.
    MmdDiag {
        #[command(flatten)]
        settings: Settings,
        #[command(flatten)]
        data: DataFiles,
        #[arg(long, default_value = "runs/mmd_diag.csv")]
        out: PathBuf,
    },
}

fn resolve(s: &Settings) -> Result<Config> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    if let Some(p) = &s.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        pairs.extend(Config::read_pairs(&text)?);
    }
    if let Ok(seed) = std::env::var("FVCK_SEED") {
        pairs.push(("seed".into(), seed));
    }
    for kv in &s.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    let mut named = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            pairs.push((k.into(), v));
        }
    };
    named("preset", s.preset.clone());
    named("method", s.method.clone());
    named("seed", s.seed.map(|v| v.to_string()));
    named("rounds", s.rounds.map(|v| v.to_string()));
    named("clients", s.clients.map(|v| v.to_string()));
    named("beta", s.beta.map(|v| v.to_string()));
    named("percent", s.percent.map(|v| v.to_string()));
    named("parallel", s.parallel.then(|| "true".into()));
    Config::from_pairs(&pairs)
}

fn files(d: &DataFiles) -> (Option<&Path>, Option<&Path>) {
    (d.train.as_deref(), d.test.as_deref())
}

fn loaded(d: &Option<(Dataset, Dataset)>) -> Option<(&Dataset, &Dataset)> {
    d.as_ref().map(|(a, b)| (a, b))
}

fn user_data(d: &DataFiles) -> Result<Option<(Dataset, Dataset)>> {
    match files(d) {
        (None, None) => Ok(None),
        (Some(a), Some(b)) => Ok(Some((Dataset::load(a)?, Dataset::load(b)?))),
        _ => Err(Error::Config("--train and --test must be given together".into())),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn main_inner(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData { settings, out } => {
            let cfg = resolve(&settings)?;
            let (train, test) = gen_synthetic(&cfg.resolved_data())?;
            std::fs::create_dir_all(&out)?;
            train.save(&out.join("train.fvds"))?;
            test.save(&out.join("test.fvds"))?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            println!("wrote {} train and {} test items to {}", train.len(), test.len(), out.display());
        }
        Cmd::Partition { settings, data, out } => {
            let cfg = resolve(&settings)?;
            let (train, _) = load_or_generate(&cfg, data.train.as_deref(), data.test.as_deref())?;
            let parts = dirichlet_partition(
                &train.labels(),
                train.classes,
                cfg.run.clients,
                cfg.run.beta,
                &mut stream(cfg.run.seed, Stream::Partition, 0, 0),
            )?;
            println!("client,size,{}", (0..train.classes).map(|c| format!("class_{c}")).collect::<Vec<_>>().join(","));
            for (k, p) in parts.iter().enumerate() {
                let counts = train.subset(p).class_counts();
                println!("{k},{},{}", p.len(), counts.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","));
            }
            if let Some(path) = out {
                let mut s = String::from("client,index\n");
                for (k, p) in parts.iter().enumerate() {
                    for i in p {
                        s.push_str(&format!("{k},{i}\n"));
                    }
                }
                write(&path, &s)?;
            }
        }
        Cmd::Run { settings, data, out } => {
            let cfg = resolve(&settings)?;
            let (train, test) = load_or_generate(&cfg, data.train.as_deref(), data.test.as_deref())?;
            let f = run_experiment(&cfg, &train, &test)?;
            write_run(&out, &cfg, &f)?;
            for m in &f.metrics {
                println!("round {} accuracy {:.4} upload {} B", m.round, m.accuracy, m.upload_bytes);
            }
            println!("wrote {}", out.display());
        }
        Cmd::Ablate { settings, data, seeds, no_fedavg, no_k_sweep, out } => {
            let cfg = resolve(&settings)?;
            let user = user_data(&data)?;
            let mut methods = Method::ABLATION.to_vec();
            if !no_fedavg {
                methods.push(Method::FedAvg);
            }
            let rows = run_arms(&cfg, &methods, &seeds, loaded(&user))?;
            std::fs::create_dir_all(&out)?;
            write(&out.join("config.txt"), &cfg.to_text())?;
            write(&out.join("arms.csv"), &arms_csv(&rows))?;
            let table = comparison_table(&rows);
            write(&out.join("table.txt"), &table)?;
            print!("{table}");
            if !no_k_sweep {
                let classes = loaded(&user).map_or(cfg.data.classes, |(t, _)| t.classes);
                let sweep = k_sweep(&cfg, &seeds, loaded(&user))?;
                let csv = k_sweep_csv(&sweep, classes);
                write(&out.join("k_sweep.csv"), &csv)?;
                let ks: Vec<_> = sweep.iter().map(|(_, r)| r.clone()).collect();
                print!("{}", comparison_table(&ks));
            }
            println!("wrote {}", out.display());
        }
        Cmd::CommCalc { items, percent, height, width, channels, model } => {
            if !(percent > 0.0 && percent <= 100.0) {
                return Err(Error::Config(format!("percent must lie in (0, 100], got {percent}")));
            }
            let image = ImageShape { height, width, channels };
            let bytes = comm_calc(items, percent, image);
            println!("knowledge_upload_bytes {bytes}");
            println!("knowledge_upload_mb {:.4}", bytes as f64 / 1e6);
            if let Some(m) = model {
                if m.len() != 3 {
                    return Err(Error::Config("--model expects depth,width,classes".into()));
                }
                let enc = EncoderConfig { depth: m[0], width: m[1], image, classes: m[2] };
                let snap = ModelSnapshot::init(enc, Default::default(), &mut stream(0, Stream::ModelInit, 0, 0))?;
                println!("model_upload_bytes {}", snap.wire_len());
                println!("model_upload_mb {:.4}", snap.wire_len() as f64 / 1e6);
            }
        }
        Cmd::MmdDiag { settings, data, out } => {
            let cfg = resolve(&settings)?;
            let user = user_data(&data)?;
            let csv = mmd_diag(&cfg, loaded(&user))?;
            write(&out, &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
