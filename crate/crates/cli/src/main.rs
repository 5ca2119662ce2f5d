use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use fedcap_core::cluster::{cluster_similarity, rbf_similarity_real, SpectralParams};
use fedcap_core::harness::{self, Algorithm, ExperimentConfig, HarnessError};
use fedcap_core::he::keygen;
use fedcap_core::rng::SeedTree;

#[derive(Debug, Parser)]
#[command(name = "fedcap", version, about = "Clustered federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a Paillier key pair and print it as JSON.
    KeygenDemo {
        #[arg(long)]
        bits: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the Dirichlet client partition of a config as JSON.
    Partition {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Spectral soft clustering of a whitespace-separated point matrix.
    ClusterDemo {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        c: usize,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run one experiment; writes metrics.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run several algorithms over consecutive seeds and report medians and means.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "fedcap,fedavg")]
        arms: Vec<Algorithm>,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare clustering frequency decay rates against always clustering.
    AblateDfd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.005,0.01,0.1")]
        alphas: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare final accuracy across cluster counts.
    AblateClusters {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "2,5,10,20")]
        cs: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn runtime(e: impl Display) -> Self {
        Failure::Runtime(e.to_string())
    }

    fn validation(e: impl Display) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDCAP_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::KeygenDemo { bits, seed } => keygen_demo(bits, seed),
        Command::Partition { config, out } => partition(&config, &out),
        Command::ClusterDemo { points, c, gamma, out, seed } => cluster_demo(&points, c, gamma, &out, seed),
        Command::Run { config, out_dir } => {
            let config = ExperimentConfig::load(&config)?;
            let metrics = harness::run_experiment(&config)?;
            let summary = harness::export(&config, &metrics, &out_dir)?;
            print_json(&summary)
        }
        Command::Compare { config, arms, seeds, out } => {
            if seeds == 0 {
                return Err(Failure::validation("--seeds must be at least 1"));
            }
            let config = ExperimentConfig::load(&config)?;
            report(&harness::compare(&config, &arms, seeds)?, out.as_deref())
        }
        Command::AblateDfd { config, alphas, out } => {
            let config = ExperimentConfig::load(&config)?;
            report(&harness::ablate_dfd(&config, &alphas)?, out.as_deref())
        }
        Command::AblateClusters { config, cs, out } => {
            let config = ExperimentConfig::load(&config)?;
            report(&harness::ablate_clusters(&config, &cs)?, out.as_deref())
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(value).map_err(Failure::runtime)?);
    Ok(())
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn report<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), Failure> {
    if let Some(path) = out {
        let json = serde_json::to_string_pretty(value).map_err(Failure::runtime)?;
        write_file(path, &(json + "\n"))?;
    }
    print_json(value)
}

#[derive(Serialize)]
struct KeyPairJson {
    public: fedcap_core::he::PublicKeyRecord,
    private: fedcap_core::he::PrivateKeyRecord,
}

fn keygen_demo(bits: u64, seed: u64) -> Result<(), Failure> {
    if bits < 16 {
        return Err(Failure::validation(format!("--bits must be at least 16, got {bits}")));
    }
    let (pk, sk) = keygen(bits, &mut SeedTree::new(seed).stream("keygen-demo")).map_err(Failure::runtime)?;
    print_json(&KeyPairJson { public: pk.to_record(), private: sk.to_record() })
}

#[derive(Serialize)]
struct ClientPartition {
    pid: usize,
    indices: Vec<usize>,
    class_histogram: Vec<usize>,
    uplink_factor: f64,
    local_epochs: usize,
}

fn partition(config: &Path, out: &Path) -> Result<(), Failure> {
    let config = ExperimentConfig::load(config)?;
    let setup = harness::prepare(&config)?;
    let clients: Vec<ClientPartition> = setup
        .partition
        .iter()
        .zip(&setup.clients)
        .enumerate()
        .map(|(pid, (indices, client))| ClientPartition {
            pid,
            indices: indices.clone(),
            class_histogram: client.shard.class_histogram(),
            uplink_factor: client.profile.uplink_factor,
            local_epochs: client.profile.local_epochs,
        })
        .collect();
    let json = serde_json::to_string_pretty(&clients).map_err(Failure::runtime)?;
    write_file(out, &(json + "\n"))
}

fn parse_points(text: &str) -> Result<Vec<Vec<f64>>, Failure> {
    let mut points = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Failure::Validation(format!("line {}: bad number {t:?}", line_no + 1)))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        if let Some(first) = points.first().map(Vec::len) {
            if row.len() != first {
                return Err(Failure::Validation(format!(
                    "line {}: {} columns, expected {first}",
                    line_no + 1,
                    row.len()
                )));
            }
        }
        points.push(row);
    }
    Ok(points)
}

fn cluster_demo(points: &Path, c: usize, gamma: f64, out: &Path, seed: u64) -> Result<(), Failure> {
    let text = std::fs::read_to_string(points)
        .map_err(|e| Failure::Runtime(format!("{}: {e}", points.display())))?;
    let points = parse_points(&text)?;
    let params = SpectralParams::new(c, gamma);
    params.validate(points.len()).map_err(Failure::validation)?;
    let similarity = rbf_similarity_real(&points, &params).map_err(Failure::validation)?;
    let outcome = cluster_similarity(similarity, &params, 1, &mut SeedTree::new(seed).stream("cluster-demo"))
        .map_err(Failure::runtime)?;
    write_file(out, &outcome.assignment.to_csv())
}
