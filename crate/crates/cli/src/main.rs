use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use occreg::analysis::{
    epsilon_distribution, epsilon_svd_ranks, gap_ratio, synthetic_problem, taylor_noise_check,
    BinSpec, EpsilonDistribution, Histogram, QuadraticModel, RegressionNet, TraceMethod,
};
use occreg::compress::Operator;
use occreg::data::synthetic_gaussian;
use occreg::experiment::{load_checkpoint, run, sweep, ExperimentConfig, OUTPUT_ENV};
use occreg::{RngStream, Tensor};

#[derive(Parser)]
#[command(
    name = "occreg",
    version,
    about = "Occasional-regularization experiments"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Train {
        config: PathBuf,
        /// Output root (overrides the config and $OCCREG_OUT).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a config once per value of one field and aggregate accuracy.
    Sweep {
        config: PathBuf,
        /// Dotted field path, e.g. `schedule.pnr` or `schedule.rules.0.theta`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Offline analyses that write CSV files.
    #[command(subcommand)]
    Analyze(Analyze),
    /// Summarize a checkpoint directory.
    Inspect { checkpoint: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum EpsOp {
    Quantize,
    Svd,
    TiledSvd,
    Prune,
}

#[derive(Clone, Copy, ValueEnum)]
enum Net {
    Linear,
    Tanh,
}

#[derive(Args)]
struct BinArgs {
    #[arg(long, default_value_t = 201)]
    bins: usize,
    /// `lo,hi`; `auto` uses ±max|x|.
    #[arg(long)]
    range: Option<String>,
}

impl BinArgs {
    fn spec(&self, default: Option<(f64, f64)>) -> Result<BinSpec> {
        let range = match self.range.as_deref() {
            None => default,
            Some("auto") => None,
            Some(r) => {
                let v = parse_floats(r)?;
                if v.len() != 2 {
                    bail!("--range needs `lo,hi`");
                }
                Some((v[0], v[1]))
            }
        };
        Ok(BinSpec {
            bins: self.bins,
            range,
        })
    }
}

#[derive(Subcommand)]
enum Analyze {
    /// ε = w'/w − 1 histograms for a Gaussian matrix.
    Epsilon {
        #[arg(long, default_value = "2048x2048")]
        shape: String,
        #[arg(long, value_enum)]
        op: EpsOp,
        /// Bit counts for quantize: list or range, e.g. `1..4`.
        #[arg(long)]
        bits: Option<String>,
        /// Ranks for svd / tiled-svd.
        #[arg(long)]
        ranks: Option<String>,
        /// Rates for prune.
        #[arg(long)]
        rates: Option<String>,
        /// Tile shape for tiled-svd, e.g. `64x64`.
        #[arg(long)]
        tile: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        bins: BinArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient-descent trajectory on a local quadratic model.
    Quadratic {
        /// Rows separated by `;`, entries by `,`.
        #[arg(long, default_value = "1")]
        h: String,
        #[arg(long, default_value = "0")]
        w0: String,
        #[arg(long, default_value = "1")]
        wt: String,
        #[arg(long, default_value_t = 0.5)]
        lr: f64,
        #[arg(long, default_value_t = 20)]
        steps: u64,
        /// Also report the first step where ‖w − w0‖ ≤ tol.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo loss increase under Gaussian weight noise vs its expansion.
    Taylor {
        #[arg(long, value_enum, default_value = "tanh")]
        net: Net,
        /// Noise variances, comma-separated.
        #[arg(long, default_value = "0.04,0.02")]
        eta: String,
        #[arg(long, default_value_t = 100_000)]
        pairs: usize,
        #[arg(long, default_value_t = 2)]
        inputs: usize,
        #[arg(long, default_value_t = 64)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        seed: u64,
        /// Hutchinson probes for the Hessian trace; exact when absent.
        #[arg(long)]
        probes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Histogram of the parameters stored in a checkpoint.
    Histogram {
        checkpoint: PathBuf,
        /// Restrict to these layers (comma-separated).
        #[arg(long, value_delimiter = ',')]
        layers: Vec<String>,
        #[command(flatten)]
        bins: BinArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_floats(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("`{v}` is not a number"))
        })
        .collect()
}

/// `a,b,c` or an inclusive range `a..b`.
fn parse_usizes(s: &str) -> Result<Vec<usize>> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
        if a > b {
            bail!("empty range `{s}`");
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .with_context(|| format!("`{v}` is not an integer"))
        })
        .collect()
}

fn parse_dims(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s
        .split_once('x')
        .ok_or_else(|| anyhow!("expected `MxN`, got `{s}`"))?;
    Ok((a.parse()?, b.parse()?))
}

fn out_dir(out: Option<PathBuf>) -> Result<PathBuf> {
    let dir = out.unwrap_or_else(|| {
        std::env::var_os(OUTPUT_ENV)
            .map_or_else(|| PathBuf::from("runs"), PathBuf::from)
            .join("analysis")
    });
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write_hist(dir: &Path, file: &str, h: &Histogram) -> Result<()> {
    h.write_csv(fs::File::create(dir.join(file))?)?;
    Ok(())
}

fn load_config(path: &Path, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(o) = out {
        std::env::set_var(OUTPUT_ENV, o);
    }
    cfg.validate()?;
    cfg.output.dir = cfg.output_root();
    Ok(cfg)
}

fn train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(config, out)?;
    let s = run(&cfg)?;
    println!(
        "run {} ({} steps, {} regularization events)",
        s.run_id, s.steps, s.events
    );
    if let Some(a) = s.final_accuracy {
        println!("final test accuracy: {:.2}%", 100.0 * a);
    }
    println!("compression ratio: {:.3}", s.compression_ratio);
    for (layer, sp) in &s.sparsity {
        println!("  {layer}: {:.2}% zeros", 100.0 * sp);
    }
    println!("artifacts: {}", s.dir.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn epsilon(
    shape: &str,
    op: EpsOp,
    bits: Option<String>,
    ranks: Option<String>,
    rates: Option<String>,
    tile: Option<String>,
    seed: u64,
    bins: &BinArgs,
    out: Option<PathBuf>,
) -> Result<()> {
    let (m, n) = parse_dims(shape)?;
    let w = synthetic_gaussian(&mut RngStream::new(seed), m, n)?;
    let spec = bins.spec(BinSpec::default().range)?;
    let need = |o: Option<String>, flag: &str| o.ok_or_else(|| anyhow!("this op needs --{flag}"));
    let labelled: Vec<(String, EpsilonDistribution)> = match op {
        EpsOp::Quantize => parse_usizes(&need(bits, "bits")?)?
            .into_iter()
            .map(|q| {
                let op = Operator::Quantize {
                    bits: q,
                    max_iters: 20,
                    tol: 1e-6,
                };
                Ok((
                    format!("quantize_q{q}"),
                    epsilon_distribution(&w, &op, spec)?,
                ))
            })
            .collect::<Result<_>>()?,
        EpsOp::Svd => {
            let rs = parse_usizes(&need(ranks, "ranks")?)?;
            let hs = epsilon_svd_ranks(&w, &rs, spec)?;
            rs.iter().map(|r| format!("svd_r{r}")).zip(hs).collect()
        }
        EpsOp::TiledSvd => {
            let (tr, tc) = parse_dims(&need(tile, "tile")?)?;
            parse_usizes(&need(ranks, "ranks")?)?
                .into_iter()
                .map(|r| {
                    let op = Operator::TiledSvd {
                        tile_rows: tr,
                        tile_cols: tc,
                        rank: r,
                    };
                    Ok((
                        format!("tiled_{tr}x{tc}_r{r}"),
                        epsilon_distribution(&w, &op, spec)?,
                    ))
                })
                .collect::<Result<_>>()?
        }
        EpsOp::Prune => parse_floats(&need(rates, "rates")?)?
            .into_iter()
            .map(|p| {
                Ok((
                    format!("prune_p{p}"),
                    epsilon_distribution(&w, &Operator::Prune { rate: p }, spec)?,
                ))
            })
            .collect::<Result<_>>()?,
    };
    let dir = out_dir(out)?;
    let mut summary = csv::Writer::from_path(dir.join("epsilon_summary.csv"))?;
    summary.write_record([
        "setting",
        "n",
        "mean",
        "weighted_mean",
        "variance",
        "skew",
        "underflow",
        "overflow",
    ])?;
    println!(
        "{:<22} {:>12} {:>14} {:>12} {:>10}",
        "setting", "mean", "weighted_mean", "variance", "skew"
    );
    for (label, e) in &labelled {
        let h = &e.hist;
        write_hist(&dir, &format!("epsilon_{label}.csv"), h)?;
        summary.write_record([
            label.clone(),
            h.n.to_string(),
            h.mean.to_string(),
            e.weighted_mean.to_string(),
            h.variance.to_string(),
            h.skew.to_string(),
            h.underflow.to_string(),
            h.overflow.to_string(),
        ])?;
        println!(
            "{label:<22} {:>12.6} {:>14.6} {:>12.6} {:>10.4}",
            h.mean, e.weighted_mean, h.variance, h.skew
        );
    }
    summary.flush()?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn quadratic(
    h: &str,
    w0: &str,
    wt: &str,
    lr: f64,
    steps: u64,
    tol: Option<f64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let rows = h.split(';').map(parse_floats).collect::<Result<Vec<_>>>()?;
    let model = QuadraticModel::new(Tensor::from_rows(&rows), parse_floats(w0)?, lr)?;
    let wt = parse_floats(wt)?;
    let dir = out_dir(out)?;
    let mut w = csv::Writer::from_path(dir.join("trajectory.csv"))?;
    w.write_record(["step", "norm"])?;
    for p in 0..=steps {
        let x = model.trajectory(&wt, p)?;
        let norm = x
            .iter()
            .zip(&model.w0)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        w.write_record([p.to_string(), norm.to_string()])?;
    }
    w.flush()?;
    println!(
        "spectral radius of I - lr*H: {:.6}",
        model.spectral_radius()?
    );
    if let Some(tol) = tol {
        let d: Vec<f64> = wt.iter().zip(&model.w0).map(|(a, b)| a - b).collect();
        println!(
            "steps to reach {tol}: {}",
            model.convergence_horizon(&d, tol)?
        );
    }
    println!("wrote {}", dir.join("trajectory.csv").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn taylor(
    net: Net,
    eta: &str,
    pairs: usize,
    inputs: usize,
    samples: usize,
    seed: u64,
    probes: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let net = match net {
        Net::Linear => RegressionNet::Linear,
        Net::Tanh => RegressionNet::TanhUnit,
    };
    let method = probes.map_or(TraceMethod::Exact, |p| TraceMethod::Hutchinson {
        probes: p,
    });
    let problem = synthetic_problem(net, inputs, samples, &mut RngStream::new(seed));
    let rng = RngStream::new(seed).derive(1);
    let dir = out_dir(out)?;
    let mut w = csv::Writer::from_path(dir.join("taylor.csv"))?;
    w.write_record([
        "eta",
        "empirical",
        "std_error",
        "predicted",
        "gap",
        "gap_ratio_halving",
    ])?;
    println!(
        "{:>8} {:>14} {:>12} {:>14} {:>12} {:>8}",
        "eta", "empirical", "std_err", "predicted", "gap", "ratio"
    );
    for e in parse_floats(eta)? {
        let c = taylor_noise_check(&problem, e, pairs, method, &rng)?;
        let ratio = gap_ratio(&problem, e, pairs, method, &rng)?;
        w.write_record([
            e.to_string(),
            c.empirical.to_string(),
            c.std_error.to_string(),
            c.predicted.to_string(),
            c.gap().to_string(),
            ratio.to_string(),
        ])?;
        println!(
            "{e:>8} {:>14.6e} {:>12.3e} {:>14.6e} {:>12.3e} {ratio:>8.3}",
            c.empirical,
            c.std_error,
            c.predicted,
            c.gap()
        );
    }
    w.flush()?;
    println!("wrote {}", dir.join("taylor.csv").display());
    Ok(())
}

fn histogram(
    checkpoint: &Path,
    layers: &[String],
    bins: &BinArgs,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt =
        load_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let mut values = Vec::new();
    let mut seen = Vec::new();
    for (name, t) in &ckpt.params {
        let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l);
        if layers.is_empty() || layers.iter().any(|l| l == layer) {
            values.extend_from_slice(t.data());
            seen.push(layer.to_string());
        }
    }
    if let Some(missing) = layers.iter().find(|l| !seen.contains(l)) {
        bail!("checkpoint has no layer `{missing}`");
    }
    let h = Histogram::build(&values, bins.spec(None)?)?;
    let dir = out_dir(out)?;
    write_hist(&dir, "histogram.csv", &h)?;
    println!(
        "{} values, mean {:.6}, variance {:.6}, skew {:.4}; wrote {}",
        h.n,
        h.mean,
        h.variance,
        h.skew,
        dir.join("histogram.csv").display()
    );
    Ok(())
}

fn inspect(path: &Path) -> Result<()> {
    let ckpt = load_checkpoint(path).with_context(|| format!("reading {}", path.display()))?;
    println!("model {} at step {}", ckpt.model.name(), ckpt.step);
    println!(
        "{:<14} {:>14} {:>10} {:>9} {:>12}",
        "parameter", "shape", "count", "zeros %", "max |w|"
    );
    for (name, t) in &ckpt.params {
        let zeros = t.data().iter().filter(|&&v| v == 0.0).count();
        let shape = t
            .shape()
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        println!(
            "{name:<14} {shape:>14} {:>10} {:>9.3} {:>12.5}",
            t.len(),
            100.0 * zeros as f64 / t.len() as f64,
            t.max_abs()
        );
    }
    println!("total parameters: {}", ckpt.param_count());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Train { config, out } => train(&config, out),
        Command::Sweep {
            config,
            axis,
            values,
            repeats,
            out,
        } => {
            let cfg = load_config(&config, out)?;
            let (dir, rows) = sweep(&cfg, &axis, &values, repeats)?;
            println!("{:>12} {:>5} {:>10} {:>8}", axis, "runs", "accuracy", "std");
            for r in &rows {
                println!(
                    "{:>12} {:>5} {:>9.2}% {:>7.3}%",
                    r.value,
                    r.runs,
                    100.0 * r.mean_accuracy,
                    100.0 * r.std_accuracy
                );
            }
            println!("wrote {}", dir.join("sweep.csv").display());
            Ok(())
        }
        Command::Analyze(a) => match a {
            Analyze::Epsilon {
                shape,
                op,
                bits,
                ranks,
                rates,
                tile,
                seed,
                bins,
                out,
            } => epsilon(&shape, op, bits, ranks, rates, tile, seed, &bins, out),
            Analyze::Quadratic {
                h,
                w0,
                wt,
                lr,
                steps,
                tol,
                out,
            } => quadratic(&h, &w0, &wt, lr, steps, tol, out),
            Analyze::Taylor {
                net,
                eta,
                pairs,
                inputs,
                samples,
                seed,
                probes,
                out,
            } => taylor(net, &eta, pairs, inputs, samples, seed, probes, out),
            Analyze::Histogram {
                checkpoint,
                layers,
                bins,
                out,
            } => histogram(&checkpoint, &layers, &bins, out),
        },
        Command::Inspect { checkpoint } => inspect(&checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
