use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use halp_core::feature_store::{FeaturePack, Representation};
use halp_core::policy::{
    frontier, read_scores_csv, simulate_refusal, simulate_routing, simulate_routing_exact, write_frontier_csv,
    write_scores_csv, RoutingCosts,
};
use halp_core::probe::{init_weights, ProbeArch};
use halp_core::report::{
    evaluate, layer_grid, parse_taus, render_report, run_grid, CellReport, EvalReport, ReportFormat, RunManifest,
    Subset,
};
use halp_core::rng::Stream;
use halp_core::trainer::{pack_records, train_packs, TrainConfig};

#[derive(Parser)]
#[command(
    name = "halp",
    version,
    about = "Hallucination probes over VLM internal representations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check feature packs; exits non-zero if any pack is invalid.
    Validate {
        #[arg(required = true)]
        packs: Vec<PathBuf>,
    },
    /// Train a probe on one or more packs (several packs are joined and concatenated).
    Train {
        #[arg(long = "features", required = true)]
        features: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 0.8)]
        split: f64,
        #[arg(long, default_value = "hallucination_type")]
        stratify: String,
        #[arg(long)]
        standardize: bool,
        /// Hidden widths, e.g. 512,256,128.
        #[arg(long, value_parser = parse_hidden)]
        hidden: Option<[usize; 3]>,
        /// NDJSON training log path; stdout when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score packs with trained weights and write a report cell as JSON.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long = "features", required = true)]
        features: Vec<PathBuf>,
        #[arg(long = "group-by")]
        group_by: Vec<String>,
        #[arg(long, default_value = "0.1:0.9:0.1", value_parser = parse_taus)]
        taus: ::std::vec::Vec<f64>,
        #[arg(long, default_value = "all")]
        subset: Subset,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write per-sample scores as CSV.
        #[arg(long = "scores-out")]
        scores_out: Option<PathBuf>,
    },
    /// Train and evaluate every (representation, layer) cell of a manifest.
    Grid {
        #[arg(long)]
        manifest: PathBuf,
        /// Keep only these decoder layers (VF is always kept).
        #[arg(long, value_delimiter = ',')]
        layers: Vec<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the probed layer set for a model with the given number of layers.
    Layers { num_layers: u32 },
    /// Render one or more report JSON files.
    Report {
        #[arg(long = "in", required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "md")]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Simulate refusing inputs whose score is at or above tau.
    Refuse {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        tau: f64,
    },
    /// Simulate routing flagged inputs to a stronger model.
    Route {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long = "strong-rate", required_unless_present = "strong_scores")]
        strong_rate: Option<f64>,
        /// Labeled strong-model outcomes joined by sample_id.
        #[arg(long = "strong-scores", conflicts_with = "strong_rate")]
        strong_scores: Option<PathBuf>,
        #[arg(long = "cost-base", default_value_t = 1.0)]
        cost_base: f64,
        #[arg(long = "cost-strong", default_value_t = 1.0)]
        cost_strong: f64,
    },
    /// Coverage / residual hallucination rate per threshold, as CSV.
    Frontier {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value = "0.1:0.9:0.1", value_parser = parse_taus)]
        taus: ::std::vec::Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time forward passes of a default-shape probe.
    BenchProbe {
        #[arg(long, default_value_t = 4096)]
        dim: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
}

fn parse_hidden(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| format!("bad width {x:?}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| "expected three widths".to_string())
}

fn load_packs(paths: &[PathBuf]) -> Result<Vec<FeaturePack>> {
    paths
        .iter()
        .map(|p| FeaturePack::load(p).with_context(|| format!("reading {}", p.display())))
        .collect()
}

/// Writes to `path`, or stdout when `None`.
fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(io::stdout().lock()),
    })
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    let mut w = output(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn load_scores(path: &Path) -> Result<halp_core::metrics::ScoredSet> {
    let f = File::open(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(read_scores_csv(f)?)
}

fn validate(packs: &[PathBuf]) -> ExitCode {
    let mut ok = true;
    for path in packs {
        match FeaturePack::load(path) {
            Ok(p) => {
                let h = &p.header;
                println!(
                    "{}: ok model={} representation={} layer={} dim={} count={}",
                    path.display(),
                    h.model_id,
                    h.representation,
                    h.layer,
                    h.dim,
                    h.count
                );
            }
            Err(e) => {
                ok = false;
                println!("{}: invalid: {e}", path.display());
            }
        }
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { .. } => unreachable!("handled in main"),
        Command::Train {
            features,
            out,
            lr,
            batch,
            epochs,
            seed,
            split,
            stratify,
            standardize,
            hidden,
            log,
        } => {
            let cfg = TrainConfig {
                learning_rate: lr,
                batch_size: batch,
                epochs,
                split_ratio: split,
                seed,
                stratify_key: stratify,
                standardize,
                hidden: hidden.unwrap_or(TrainConfig::default().hidden),
                ..TrainConfig::default()
            };
            let packs = load_packs(&features)?;
            let outcome = train_packs(&packs, &cfg)?;
            for w in &outcome.split.warnings {
                eprintln!("warning: {w}");
            }
            outcome
                .weights
                .save(&out)
                .with_context(|| format!("writing {}", out.display()))?;
            write_text(log.as_deref(), &outcome.log.to_ndjson())
        }
        Command::Eval {
            weights,
            features,
            group_by,
            taus,
            subset,
            out,
            scores_out,
        } => {
            let w = halp_core::probe::ProbeWeights::load(&weights)
                .with_context(|| format!("reading {}", weights.display()))?;
            let packs = load_packs(&features)?;
            let records = pack_records(&packs)?;
            let (eval, set) = evaluate(&w, &records, subset, &taus, &group_by)?;
            let h = &packs[0].header;
            let cell = CellReport {
                model_id: h.model_id.clone(),
                representation: h.representation,
                layer: h.layer,
                num_layers: None,
                subset,
                n_train: None,
                eval,
            };
            if let Some(p) = scores_out {
                let f = File::create(&p).with_context(|| format!("creating {}", p.display()))?;
                write_scores_csv(&set, BufWriter::new(f))?;
            }
            write_text(out.as_deref(), &(serde_json::to_string_pretty(&cell)? + "\n"))
        }
        Command::Grid { manifest, layers, out } => {
            let mut m = RunManifest::load(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            if !layers.is_empty() {
                m.cells
                    .retain(|c| c.representation == Representation::VF || layers.contains(&c.layer));
            }
            let threads = match std::env::var("HALP_THREADS") {
                Ok(v) => Some(v.parse::<usize>().context("HALP_THREADS must be a positive integer")?),
                Err(_) => None,
            };
            let base = manifest.parent().unwrap_or(Path::new("."));
            let outcome = run_grid(&m, base, threads)?;
            if let Some(dir) = &m.weights_dir {
                let dir = base.join(dir);
                fs::create_dir_all(&dir)?;
                for a in &outcome.artifacts {
                    let stem = format!("{}_L{}", a.representation, a.layer);
                    a.weights.save(dir.join(format!("{stem}.weights")))?;
                    fs::write(dir.join(format!("{stem}.log.ndjson")), a.log.to_ndjson())?;
                }
            }
            let target = out.or_else(|| m.report.as_ref().map(|r| base.join(r)));
            write_text(
                target.as_deref(),
                &(serde_json::to_string_pretty(&outcome.report)? + "\n"),
            )
        }
        Command::Layers { num_layers } => {
            let g = layer_grid(num_layers)?;
            let text: Vec<String> = g.layers.iter().map(u32::to_string).collect();
            println!("{}", text.join(","));
            Ok(())
        }
        Command::Report { inputs, format, out } => {
            let reports = inputs
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    EvalReport::from_json(&text).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<Result<Vec<_>>>()?;
            let report = if reports.len() == 1 {
                reports.into_iter().next().unwrap()
            } else {
                EvalReport::merge(reports)
            };
            write_text(out.as_deref(), &render_report(&report, format)?)
        }
        Command::Refuse { scores, tau } => {
            let o = simulate_refusal(&load_scores(&scores)?, tau)?;
            println!("{}", serde_json::to_string_pretty(&o)?);
            Ok(())
        }
        Command::Route {
            scores,
            tau,
            strong_rate,
            strong_scores,
            cost_base,
            cost_strong,
        } => {
            let base = load_scores(&scores)?;
            let costs = RoutingCosts {
                base: cost_base,
                strong: cost_strong,
            };
            let o = match (strong_rate, strong_scores) {
                (_, Some(p)) => simulate_routing_exact(&base, &load_scores(&p)?, tau, costs)?,
                (Some(r), None) => simulate_routing(&base, tau, r, costs)?,
                (None, None) => bail!("one of --strong-rate or --strong-scores is required"),
            };
            println!("{}", serde_json::to_string_pretty(&o)?);
            Ok(())
        }
        Command::Frontier { scores, taus, out } => {
            let points = frontier(&load_scores(&scores)?, &taus)?;
            let mut w = output(out.as_deref())?;
            write_frontier_csv(&points, &mut w)?;
            w.flush()?;
            Ok(())
        }
        Command::BenchProbe { dim, iters, seed } => {
            if dim == 0 || iters == 0 {
                bail!("--dim and --iters must be positive");
            }
            let probe = init_weights(ProbeArch::new(dim), seed);
            let mut rng = Stream::new(seed, "bench-input");
            let inputs: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..dim).map(|_| rng.next_f64() * 2.0 - 1.0).collect())
                .collect();
            let mut sink = 0.0;
            for x in &inputs {
                sink += probe.score(x)?;
            }
            let start = Instant::now();
            for i in 0..iters {
                sink += probe.score(&inputs[i % inputs.len()])?;
            }
            let mean_ms = start.elapsed().as_secs_f64() * 1e3 / iters as f64;
            println!(
                "{}",
                serde_json::json!({ "dim": dim, "iters": iters, "mean_ms": mean_ms, "checksum": sink })
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Validate { packs } = &cli.command {
        return validate(packs);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
