use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bytes::Bytes;
use clap::{Parser, Subcommand, ValueEnum};
use edgepier_core::image::ImageRef;
use edgepier_daemon::{Daemon, DaemonConfig, RegistryClient};
use edgepier_netsim::bench::{run_bench, write_csvs, BenchSpec, Mode, Scenario};
use edgepier_netsim::report;

#[derive(Parser)]
#[command(name = "edgepier", version, about = "Peer-to-peer container registry for edge sites")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a registry node until SIGINT or SIGTERM.
    Daemon {
        #[arg(long)]
        config: PathBuf,
    },
    /// Push an image directory: `config.json` plus one file per layer,
    /// layered in file name order.
    Push {
        dir: PathBuf,
        image: String,
        #[arg(long, default_value = "127.0.0.1:5000")]
        registry: String,
    },
    /// Pull an image and verify every digest.
    Pull {
        image: String,
        #[arg(long, default_value = "127.0.0.1:5000")]
        registry: String,
        /// Write the config and layers here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a distribution experiment in the simulator and write CSVs.
    Bench(BenchArgs),
    /// Summarize bench CSVs.
    Report { dir: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Edgepier,
    Baseline,
    Both,
}

#[derive(clap::Args)]
struct BenchArgs {
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, value_enum, default_value = "both")]
    mode: ModeArg,
    #[arg(long, default_value_t = 6)]
    nodes: usize,
    #[arg(long)]
    image_mb: Option<u64>,
    #[arg(long, default_value_t = 5)]
    layers: usize,
    /// Comma-separated list. Defaults to 20,50,100,500, or 100 for the size sweep.
    #[arg(long, value_delimiter = ',')]
    uplink_mbps: Vec<f64>,
    #[arg(long, default_value_t = 1000.0)]
    intra_mbps: f64,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Image sizes for the size sweep, comma-separated.
    #[arg(long, value_delimiter = ',')]
    sweep_mb: Vec<u64>,
    /// 500 MB images and a 100 MB to 1 GB sweep instead of the desk-scale defaults.
    #[arg(long)]
    full_scale: bool,
    #[arg(long)]
    out: PathBuf,
}

impl BenchArgs {
    fn spec(&self) -> BenchSpec {
        let mut s = BenchSpec {
            scenario: self.scenario,
            modes: match self.mode {
                ModeArg::Edgepier => vec![Mode::EdgePier],
                ModeArg::Baseline => vec![Mode::Baseline],
                ModeArg::Both => vec![Mode::EdgePier, Mode::Baseline],
            },
            nodes: self.nodes,
            layers: self.layers,
            intra_mbps: self.intra_mbps,
            reps: self.reps,
            seed: self.seed,
            ..BenchSpec::default()
        };
        if self.full_scale {
            s.image_mb = 500;
            s.sweep_mb = (1..=10).map(|i| i * 100).collect();
        }
        if let Some(mb) = self.image_mb {
            s.image_mb = mb;
        }
        if !self.sweep_mb.is_empty() {
            s.sweep_mb = self.sweep_mb.clone();
        }
        if !self.uplink_mbps.is_empty() {
            s.uplink_mbps = self.uplink_mbps.clone();
        } else if self.scenario == Scenario::SizeSweep {
            s.uplink_mbps = vec![100.0];
        }
        s
    }
}

fn parse_image(s: &str) -> Result<(String, String)> {
    let r: ImageRef = s.parse().with_context(|| format!("bad image reference {s:?}"))?;
    Ok((r.name, r.reference.to_string()))
}

/// Reads `config.json` and the layer files of an image directory.
fn read_image_dir(dir: &Path) -> Result<(Vec<Bytes>, Bytes)> {
    let config = fs::read(dir.join("config.json"))
        .with_context(|| format!("{} has no config.json", dir.display()))?;
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.is_file() && p.file_name().is_some_and(|n| n != "config.json"));
    paths.sort();
    if paths.is_empty() {
        bail!("{} holds no layer files", dir.display());
    }
    let layers = paths
        .iter()
        .map(|p| fs::read(p).map(Bytes::from).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<_>>()?;
    Ok((layers, Bytes::from(config)))
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("cannot start the async runtime")
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Daemon { config } => {
            let cfg = DaemonConfig::load(&config)?;
            runtime()?.block_on(async {
                let d = Daemon::start(cfg).await?;
                println!("registry on {}, peers on {}", d.http_addr(), d.p2p_addr());
                d.run_until_signal().await
            })?;
        }
        Cmd::Push { dir, image, registry } => {
            let (name, tag) = parse_image(&image)?;
            let (layers, config) = read_image_dir(&dir)?;
            let digest = runtime()?.block_on(RegistryClient::new(&registry).push(&name, &tag, &layers, config))?;
            println!("{name}:{tag} {digest}");
        }
        Cmd::Pull { image, registry, out } => {
            let (name, reference) = parse_image(&image)?;
            let img = runtime()?.block_on(RegistryClient::new(&registry).pull(&name, &reference))?;
            if let Some(out) = out {
                fs::create_dir_all(&out)?;
                fs::write(out.join("config.json"), &img.config)?;
                for (i, l) in img.layers.iter().enumerate() {
                    fs::write(out.join(format!("layer-{i:03}")), l)?;
                }
            }
            let total: usize = img.layers.iter().map(|l| l.len()).sum();
            println!(
                "{name}@{} {} layers, {total} bytes, all digests verified",
                img.manifest.digest(),
                img.layers.len()
            );
        }
        Cmd::Bench(args) => {
            let spec = args.spec();
            let records = run_bench(&spec)?;
            fs::create_dir_all(&args.out)?;
            write_csvs(&args.out, &records)?;
            let failed = records.iter().filter(|r| r.error.is_some()).count();
            println!("{} runs written to {}", records.len(), args.out.display());
            if failed > 0 {
                eprintln!("{failed} runs recorded a failed pull");
            }
        }
        Cmd::Report { dir } => {
            let r = report::load(&dir)?;
            print!("{}", r.render());
        }
    }
    Ok(())
}
