//! Command-line surface: data generation, training, evaluation, decoding,
//! ablation sweeps, gradient checking, and report emission.
//!
//! Exit codes: 0 success, 2 contract error, 3 numerical failure, 4
//! threshold failure.

use crate::dataset::{self, TaskKind};
use crate::decoder::{generate, DecodeConfig, Sampling, TraceSegment};
use crate::error::{Error, Result};
use crate::eval::{self, SweepAxis};
use crate::taskgen::{gen_jigsaw, gen_maze, MazeSpec, Variant};
use crate::train::{train_run, TrainConfig, TrainOutcome};
use crate::{checkpoint, perception};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "sketchlm",
    about = "Hybrid text/latent-sketch sequence model: data generation, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (maze or jigsaw).
    GenData(GenDataArgs),
    /// Train a model from a key=value config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a held-out dataset.
    Eval(EvalArgs),
    /// Decode one sample and print the reasoning trace.
    Decode(DecodeArgs),
    /// Train/evaluate one model per value of a swept hyperparameter.
    Sweep(SweepArgs),
    /// Finite-difference check of the full training loss (tiny configs).
    GradCheck(GradCheckArgs),
    /// Re-emit CSV tables as plots.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Maze grid, e.g. 6x6.
    #[arg(long, default_value = "6x6")]
    grid: String,
    #[arg(long, default_value_t = 0.2)]
    density: f64,
    #[arg(long, default_value_t = 27)]
    k: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Override the config's training variant.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Write the per-step loss log as CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many completed steps (mid-run checkpointing).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Directory for metrics.csv.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Decode this dataset sample.
    #[arg(long, conflicts_with = "seed")]
    sample_index: Option<usize>,
    /// Or generate a fresh sample from this seed (task from the header).
    #[arg(long)]
    seed: Option<u64>,
    /// Summarize latent segments against freshly computed sketch targets.
    #[arg(long)]
    with_targets: bool,
    /// Temperature sampling instead of greedy (with --sample-seed).
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    sample_seed: u64,
}

#[derive(Args)]
struct SweepArgs {
    /// k, lambda or variant.
    #[arg(long)]
    axis: String,
    /// Comma-separated values, e.g. 1,3,9,27,81.
    #[arg(long)]
    values: String,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    eval_data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once('x')
        .ok_or_else(|| Error::Contract(format!("grid must look like 6x6, got {s:?}")))?;
    Ok((
        w.parse().map_err(|_| Error::Contract(format!("bad grid width {w:?}")))?,
        h.parse().map_err(|_| Error::Contract(format!("bad grid height {h:?}")))?,
    ))
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let task = TaskKind::parse(&a.task)?;
    let (w, h) = parse_grid(&a.grid)?;
    let spec = MazeSpec { width: w, height: h, wall_density: a.density, ..Default::default() };
    let ds = dataset::generate_dataset(task, a.count, a.seed, a.k, &spec)?;
    dataset::write_dataset(&ds, &a.out)?;
    println!(
        "wrote {} {} samples (seeds {}..{}) to {}; vocab {} words, images {}x{}, K={}",
        ds.samples.len(),
        ds.header.task,
        a.seed,
        a.seed + a.count as u64,
        a.out.display(),
        ds.header.words.len(),
        ds.header.img_h,
        ds.header.img_w,
        ds.header.k
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let mut config = TrainConfig::from_key_values(&text)?;
    if let Some(v) = &a.variant {
        config.variant = Variant::parse(v)?;
    }
    let ds = dataset::read_dataset(&a.data)?;
    let resume = a.resume.as_ref().map(checkpoint::load).transpose()?;
    let run = train_run(&config, &ds, resume, a.stop_after)?;
    checkpoint::save(&run.state, &a.out)?;
    if let Some(metrics_path) = &a.metrics {
        eval::write_csv(&eval::metrics_log_table(&run.metrics), metrics_path)?;
    }
    if let Some(first) = run.metrics.first() {
        let last = run.metrics.last().expect("nonempty");
        println!(
            "trained steps {}..{}: l_total {:.4} -> {:.4} (l_ntp {:.4}, l_sketch {:.4})",
            first.step, last.step, first.l_total, last.l_total, last.l_ntp, last.l_sketch
        );
    }
    println!("checkpoint written to {}", a.out.display());
    match run.outcome {
        TrainOutcome::Completed => Ok(()),
        TrainOutcome::AbortedNan { step } => Err(Error::Numerical(format!(
            "loss went non-finite at step {step}; checkpoint holds the last good state"
        ))),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let state = checkpoint::load(&a.ckpt)?;
    let ds = dataset::read_dataset(&a.data)?;
    let metrics = eval::evaluate(&state, &ds, true)?;
    println!("samples:              {}", metrics.n_samples);
    println!("answer accuracy:      {:.4}", metrics.answer_accuracy);
    match metrics.sketch_recon_mse {
        Some(v) => println!("sketch recon mse:     {v:.6}"),
        None => println!("sketch recon mse:     (no aligned latent segments)"),
    }
    if let Some(v) = metrics.sketch_recon_cosine {
        println!("sketch recon cosine:  {v:.6}");
    }
    println!("mean latent seg len:  {:.2}", metrics.mean_latent_segment_len);
    println!("mean mode switches:   {:.2}", metrics.mean_mode_switches);
    println!(
        "trace length:         mean {:.1}, max {}",
        metrics.mean_trace_len, metrics.max_trace_len
    );
    if let Some(dir) = &a.report {
        std::fs::create_dir_all(dir)?;
        eval::write_csv(&eval::metrics_table(&metrics), dir.join("metrics.csv"))?;
        println!("report written to {}", dir.join("metrics.csv").display());
    }
    Ok(())
}

fn cmd_decode(a: DecodeArgs) -> Result<()> {
    let state = checkpoint::load(&a.ckpt)?;
    let ds = dataset::read_dataset(&a.data)?;
    let vocab = ds.vocab();
    let sample = match (a.sample_index, a.seed) {
        (Some(i), _) => ds
            .samples
            .get(i)
            .cloned()
            .ok_or_else(|| Error::Index {
                context: "sample index".into(),
                index: i,
                bound: ds.samples.len(),
            })?,
        (None, Some(seed)) => match ds.header.task.as_str() {
            "jigsaw" => gen_jigsaw(seed)?,
            _ => {
                let spec = MazeSpec {
                    width: ds.header.img_w / crate::taskgen::CELL_PX,
                    height: ds.header.img_h / crate::taskgen::CELL_PX,
                    ..Default::default()
                };
                gen_maze(seed, &spec)?
            }
        },
        (None, None) => ds.samples.first().cloned().ok_or_else(|| {
            Error::Contract("dataset has no samples; pass --sample-index or --seed".into())
        })?,
    };
    let sampling = match a.temperature {
        Some(t) => Sampling::Temperature { t, seed: a.sample_seed },
        None => Sampling::Greedy,
    };
    let cfg = DecodeConfig {
        k_train: state.config.k,
        max_total_len: state.config.max_seq_len,
        sampling,
    };
    let trace = generate(&state.params, &sample.context_image, &sample.question, &vocab, &cfg)?;

    println!("question: {}", sample.question);
    let mut latent_idx = 0usize;
    for seg in &trace.segments {
        match seg {
            TraceSegment::Text(ids) => println!("text    | {}", vocab.decode(ids)?),
            TraceSegment::Latent(vs) => {
                let mean_norm = if vs.is_empty() {
                    0.0
                } else {
                    vs.iter()
                        .map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt())
                        .sum::<f64>()
                        / vs.len() as f64
                };
                let mut line = format!("latent  | (len={}, mean-norm={:.4}", vs.len(), mean_norm);
                if a.with_targets && latent_idx < sample.steps.len() {
                    let target = perception::build_sketch_target(
                        &sample.steps[latent_idx].sketch_image,
                        &state.params.e_s,
                        &state.params.proj_s,
                        state.config.k,
                    )?;
                    let mut cos_sum = 0.0;
                    for v in vs {
                        let mut best = f64::NEG_INFINITY;
                        for r in 0..target.vectors.rows() {
                            best = best.max(cos(v, target.vectors.row_slice(r)));
                        }
                        cos_sum += best;
                    }
                    if !vs.is_empty() {
                        line.push_str(&format!(
                            ", nearest-target-cos={:.4}",
                            cos_sum / vs.len() as f64
                        ));
                    }
                }
                line.push(')');
                println!("{line}");
                latent_idx += 1;
            }
        }
    }
    match &trace.answer {
        Some(ans) => println!(
            "answer: {ans:?} (reference {:?}, {})",
            sample.answer,
            if *ans == sample.answer { "match" } else { "mismatch" }
        ),
        None => println!("answer: absent (reference {:?})", sample.answer),
    }
    if trace.truncated {
        println!("note: decode hit max_total_len and was truncated");
    }
    Ok(())
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na * nb <= 1e-12 {
        0.0
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let axis = SweepAxis::parse(&a.axis)?;
    let values: Vec<String> = a.values.split(',').map(str::to_string).collect();
    let text = std::fs::read_to_string(&a.config)?;
    let base = TrainConfig::from_key_values(&text)?;
    let train_ds = dataset::read_dataset(&a.data)?;
    let eval_ds = dataset::read_dataset(&a.eval_data)?;
    let rows = eval::sweep(axis, &values, &base, &train_ds, &eval_ds)?;
    std::fs::create_dir_all(&a.out)?;
    let table = eval::sweep_table(&rows);
    let csv_path = a.out.join(format!("sweep_{}.csv", axis.name()));
    eval::write_csv(&table, &csv_path)?;
    let series = sweep_series(&rows);
    let svg_path = a.out.join(format!("sweep_{}.svg", axis.name()));
    eval::write_line_plot_svg(&svg_path, &format!("sweep over {}", axis.name()), &series)?;
    for r in &rows {
        match &r.skipped {
            Some(reason) => println!("{}={}: skipped ({reason})", r.axis, r.value),
            None => println!(
                "{}={}: accuracy {:.4}, recon_mse {}, final l_total {:.4}",
                r.axis,
                r.value,
                r.accuracy,
                r.recon_mse.map_or("-".into(), |v| format!("{v:.5}")),
                r.final_l_total
            ),
        }
    }
    println!("wrote {} and {}", csv_path.display(), svg_path.display());
    Ok(())
}

fn sweep_series(rows: &[eval::SweepRow]) -> Vec<(String, Vec<(f64, f64)>)> {
    let xs: Vec<f64> = rows
        .iter()
        .enumerate()
        .map(|(i, r)| r.value.parse::<f64>().unwrap_or(i as f64))
        .collect();
    let mut acc = Vec::new();
    let mut cosine = Vec::new();
    for (x, r) in xs.iter().zip(rows) {
        if r.skipped.is_none() {
            acc.push((*x, r.accuracy));
            if let Some(c) = r.recon_cosine {
                cosine.push((*x, c));
            }
        }
    }
    let mut series = vec![("accuracy".to_string(), acc)];
    if !cosine.is_empty() {
        series.push(("recon_cosine".to_string(), cosine));
    }
    series
}

fn cmd_grad_check(a: GradCheckArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.config)?;
    let config = TrainConfig::from_key_values(&text)?;
    let report = eval::grad_check(&config)?;
    for row in &report.rows {
        println!(
            "{:13} {:11} max rel err {:.3e}",
            row.mode.name(),
            match row.group {
                crate::model::ParamGroup::Backbone => "backbone",
                crate::model::ParamGroup::SketchProj => "sketch_proj",
            },
            row.max_rel_err
        );
    }
    println!("elapsed {:.1}s; overall max {:.3e}", report.elapsed_secs, report.max_err());
    Ok(())
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let table = eval::read_csv(&a.input)?;
    std::fs::create_dir_all(&a.out)?;
    let stem = a
        .input
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("table");
    let svg = a.out.join(format!("{stem}.svg"));
    let series = table_series(&table)?;
    eval::write_line_plot_svg(&svg, stem, &series)?;
    println!("wrote {}", svg.display());
    Ok(())
}

/// Numeric columns become series against the first numeric column (or the
/// row index when nothing parses).
fn table_series(table: &Table) -> Result<Vec<(String, Vec<(f64, f64)>)>> {
    let numeric: Vec<usize> = (0..table.columns.len())
        .filter(|&ci| {
            !table.rows.is_empty()
                && table.rows.iter().all(|r| r[ci].is_empty() || r[ci].parse::<f64>().is_ok())
                && table.rows.iter().any(|r| r[ci].parse::<f64>().is_ok())
        })
        .collect();
    if numeric.is_empty() {
        return Err(Error::Contract("no numeric columns to plot".into()));
    }
    let x_col = numeric[0];
    let mut series = Vec::new();
    for &ci in numeric.iter().skip(1) {
        let mut pts = Vec::new();
        for (ri, row) in table.rows.iter().enumerate() {
            let x = row[x_col].parse::<f64>().unwrap_or(ri as f64);
            if let Ok(y) = row[ci].parse::<f64>() {
                pts.push((x, y));
            }
        }
        series.push((table.columns[ci].clone(), pts));
    }
    if series.is_empty() {
        // Single numeric column: plot it against the row index.
        let mut pts = Vec::new();
        for (ri, row) in table.rows.iter().enumerate() {
            if let Ok(y) = row[x_col].parse::<f64>() {
                pts.push((ri as f64, y));
            }
        }
        series.push((table.columns[x_col].clone(), pts));
    }
    Ok(series)
}

use eval::Table;

/// Build/refresh a dataset path pair for tests and examples.
pub fn write_demo_config(path: &Path, overrides: &str) -> Result<()> {
    let mut cfg = TrainConfig::default().to_key_values();
    cfg.push_str(overrides);
    std::fs::write(path, cfg)?;
    Ok(())
}
