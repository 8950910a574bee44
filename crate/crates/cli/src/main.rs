use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use east_core::model::{flops_report, learnable_census, ArchSpec, Density, Layout};
use east_core::train::{self, Checkpoint, CompareOptions, RunConfig, RunOptions};
use east_core::SharingPlan;

#[derive(Parser)]
#[command(name = "east", version, about = "Dynamic sparse training with cyclic sparsity, DyReLU phasing and weight sharing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for metrics, summary and checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Zero wallclock columns so repeated runs write identical files.
        #[arg(long)]
        deterministic: bool,
        /// Continue from a checkpoint written for the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Run several configs over several seeds and aggregate.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Inference MACs/FLOPs and parameter census of an architecture.
    Flops {
        /// Preset (resnet34, resnet50, desk, mlp), an architecture TOML or a
        /// run config.
        #[arg(long)]
        arch: String,
        /// Global density over the unmodified architecture's maskable weights.
        #[arg(long)]
        density: Option<f64>,
        /// Apply the default sharing plan (donor block 2 on every stage with
        /// at least three blocks).
        #[arg(long)]
        sharing: bool,
        /// Print every layer.
        #[arg(long)]
        layers: bool,
    },
    /// Summarise a checkpoint file.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train {
            config,
            seed,
            out,
            deterministic,
            resume,
            quiet,
        } => train_cmd(&config, seed, out, deterministic, resume, quiet),
        Command::Compare {
            configs,
            seeds,
            out,
            deterministic,
            quiet,
        } => compare_cmd(&configs, &seeds, out, deterministic, quiet),
        Command::Flops {
            arch,
            density,
            sharing,
            layers,
        } => flops_cmd(&arch, density, sharing, layers),
        Command::Inspect { checkpoint } => inspect_cmd(&checkpoint),
    }
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))
}

fn train_cmd(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    deterministic: bool,
    resume: Option<PathBuf>,
    quiet: bool,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let opts = RunOptions {
        out_dir: out,
        deterministic,
        verbose: !quiet,
    };
    let output = match resume {
        Some(path) => {
            let ckpt = Checkpoint::load(&path).with_context(|| format!("reading {}", path.display()))?;
            train::resume_run(&cfg, &ckpt, &opts)?
        }
        None => train::run(&cfg, &opts)?,
    };
    let s = &output.summary;
    println!(
        "{}: seed {} steps {} test acc {:.4} sparsity {:.6} active {} updates {}",
        s.name, s.seed, s.steps, s.final_test_accuracy, s.final_sparsity, s.active_count, s.topology_updates
    );
    if let Some(dir) = &output.out_dir {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn compare_cmd(configs: &[PathBuf], seeds: &[u64], out: Option<PathBuf>, deterministic: bool, quiet: bool) -> Result<()> {
    let cfgs = configs.iter().map(|p| load_config(p)).collect::<Result<Vec<_>>>()?;
    let opts = CompareOptions {
        out_dir: out,
        deterministic,
        verbose: !quiet,
    };
    let report = train::compare(&cfgs, seeds, &opts)?;
    println!(
        "{:<24} {:>9} {:>5} {:>9} {:>9} {:>9} {:>12}",
        "method", "sparsity", "runs", "acc med", "acc min", "acc max", "early gns"
    );
    for m in &report.methods {
        println!(
            "{:<24} {:>9.4} {:>5} {:>9.4} {:>9.4} {:>9.4} {:>12.4e}",
            m.method, m.sparsity, m.runs, m.accuracy_median, m.accuracy_min, m.accuracy_max, m.early_grad_norm_median
        );
    }
    if let Some(dir) = &opts.out_dir {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn resolve_arch(arg: &str) -> Result<ArchSpec> {
    if let Some(spec) = ArchSpec::preset(arg) {
        return Ok(spec);
    }
    let path = Path::new(arg);
    if !path.is_file() {
        bail!("{arg} is neither a preset (resnet34, resnet50, desk, mlp) nor a file");
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {arg}"))?;
    // A run config carries its architecture under [arch].
    match RunConfig::from_toml(&text) {
        Ok(cfg) => Ok(cfg.arch),
        Err(_) => ArchSpec::from_toml(&text).with_context(|| format!("parsing architecture {arg}")),
    }
}

fn flops_cmd(arch: &str, density: Option<f64>, sharing: bool, layers: bool) -> Result<()> {
    let mut spec = resolve_arch(arch)?;
    if sharing {
        spec.sharing = SharingPlan::default_for(&spec.blocks);
    }
    let layout = Layout::new(&spec)?;
    let census = learnable_census(&spec, density)?;
    let dense = flops_report(&layout, Density::Dense)?;
    let report = match density {
        Some(p) => flops_report(&layout, Density::Global(p))?,
        None => dense.clone(),
    };
    if layers {
        println!("{:<28} {:>6} {:>9} {:>14} {:>16}", "layer", "shared", "density", "dense MACs", "MACs");
        for l in &report.layers {
            println!(
                "{:<28} {:>6} {:>9.5} {:>14} {:>16.1}",
                l.name, l.shared, l.density, l.dense_macs, l.macs
            );
        }
        println!();
    }
    println!("theoretical params  {}", census.theoretical);
    println!("stored params       {}", census.stored);
    println!("replaced (N_s)      {}", census.replaced);
    println!("gains               {}", census.gains);
    println!("maskable            {}", census.maskable);
    if density.is_some() {
        println!("active weights      {}", census.unique_active);
    }
    println!("dense MACs          {} ({:.2}M FLOPs)", dense.dense_macs, dense.dense_flops() as f64 / 1e6);
    println!(
        "MACs                {:.0} ({:.2}M FLOPs, {:.4}x dense)",
        report.macs,
        report.flops() / 1e6,
        report.ratio()
    );
    Ok(())
}

fn inspect_cmd(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let total: usize = ck.masked.iter().map(|m| m.weights.len()).sum();
    let active = ck.active_count();
    println!("version        {}", ck.version);
    println!("config hash    {:016x}", ck.config_hash);
    println!("step           {}", ck.step);
    println!("next epoch     {}", ck.next_epoch);
    println!("beta           {}", ck.beta);
    println!("dyrelu sites   {}", ck.dyrelu_sites.iter().filter(|&&on| on).count());
    println!("donors         {:?}", ck.donors);
    println!(
        "masked         {} tensors, {active}/{total} active ({:.6} stored density)",
        ck.masked.len(),
        active as f64 / total.max(1) as f64
    );
    println!("dense tensors  {}", ck.dense.iter().flatten().count());
    if let Some(c) = &ck.controller {
        println!("controller     t={} s_current={:.6} remainder={:.6}", c.t, c.s_current, c.remainder);
    }
    println!();
    println!("{:<28} {:>14} {:>10} {:>9}", "tensor", "shape", "active", "density");
    for m in &ck.masked {
        let a = m.mask.iter().filter(|&&b| b).count();
        println!(
            "{:<28} {:>14} {:>10} {:>9.5}",
            m.name,
            format!("{:?}", m.shape),
            a,
            a as f64 / m.mask.len().max(1) as f64
        );
    }
    Ok(())
}
