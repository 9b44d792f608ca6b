//! Evaluation, ablation sweeps, gradient-check reporting, and CSV/SVG
//! report emission.

use crate::autodiff::finite_difference_check;
use crate::dataset::Dataset;
use crate::decoder::{generate, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamGroup};
use crate::objective::LatentInputMode;
use crate::perception::build_sketch_target;
use crate::taskgen::{MazeSpec, TraceSample, Variant};
use crate::tensor::Tensor;
use crate::train::{
    prepare_sample, sample_loss_and_grad, train_run, TrainConfig, TrainRun, TrainState,
};
use crate::vocab::Vocabulary;
use rayon::prelude::*;
use std::io::Write;
use std::path::Path;

/// Held-out evaluation results. Reconstruction metrics are this artifact's
/// own diagnostic (latents are never decoded at inference in the method
/// itself) and are absent when no decoded latent aligns with a reference
/// sketch step.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub answer_accuracy: f64,
    pub sketch_recon_mse: Option<f64>,
    pub sketch_recon_cosine: Option<f64>,
    pub mean_latent_segment_len: f64,
    pub mean_mode_switches: f64,
    pub mean_trace_len: f64,
    pub max_trace_len: usize,
    pub n_samples: usize,
    pub n_aligned_vectors: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = na * nb;
    if d <= 1e-12 {
        0.0
    } else {
        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / d
    }
}

struct SampleEval {
    correct: bool,
    sq_dist_sum: f64,
    cos_sum: f64,
    aligned: usize,
    latent_len_sum: usize,
    latent_segments: usize,
    mode_switches: usize,
    trace_len: usize,
}

fn eval_one(
    params: &ModelParams,
    vocab: &Vocabulary,
    sample: &TraceSample,
    cfg: &DecodeConfig,
    k: usize,
) -> Result<SampleEval> {
    let trace = generate(params, &sample.context_image, &sample.question, vocab, cfg)?;
    let correct = trace.answer.as_deref() == Some(sample.answer.as_str());
    let mut sq_dist_sum = 0.0;
    let mut cos_sum = 0.0;
    let mut aligned = 0;
    let mut latent_len_sum = 0;
    let latents = trace.latent_segments();
    for (i, seg) in latents.iter().enumerate() {
        latent_len_sum += seg.len();
        if i < sample.steps.len() {
            let target =
                build_sketch_target(&sample.steps[i].sketch_image, &params.e_s, &params.proj_s, k)?;
            for (j, h) in seg.iter().take(k.min(seg.len())).enumerate() {
                let v = target.vectors.row_slice(j);
                sq_dist_sum += h.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                cos_sum += cosine(h, v);
                aligned += 1;
            }
        }
    }
    Ok(SampleEval {
        correct,
        sq_dist_sum,
        cos_sum,
        aligned,
        latent_len_sum,
        latent_segments: latents.len(),
        mode_switches: trace.mode_switches(),
        trace_len: trace.total_len(),
    })
}

/// Decode every sample greedily and score exact-match answers plus latent
/// reconstruction diagnostics. The dataset must be disjoint from the
/// training seed range recorded in the checkpoint.
pub fn evaluate(state: &TrainState, dataset: &Dataset, parallel: bool) -> Result<Metrics> {
    if dataset.header.k != state.config.k {
        return Err(Error::Contract(format!(
            "dataset K={} vs checkpoint K={}",
            dataset.header.k, state.config.k
        )));
    }
    if dataset.header.words != state.vocab_words {
        return Err(Error::Contract(
            "dataset vocabulary differs from the checkpoint's".into(),
        ));
    }
    if state.data_count > 0 && dataset.header.count > 0 {
        let (ts, te) = (
            state.data_seed_start,
            state.data_seed_start + state.data_count as u64,
        );
        let (es, ee) = dataset.seed_range();
        if ts < ee && es < te && dataset.header.task == state.data_task {
            return Err(Error::Contract(format!(
                "evaluation dataset seed range [{es},{ee}) overlaps training range [{ts},{te})"
            )));
        }
    }
    let vocab = dataset.vocab();
    let cfg = DecodeConfig::greedy(state.config.k, state.config.max_seq_len);
    let evals: Vec<Result<SampleEval>> = if parallel {
        dataset
            .samples
            .par_iter()
            .map(|s| eval_one(&state.params, &vocab, s, &cfg, state.config.k))
            .collect()
    } else {
        dataset
            .samples
            .iter()
            .map(|s| eval_one(&state.params, &vocab, s, &cfg, state.config.k))
            .collect()
    };
    let mut correct = 0usize;
    let mut sq = 0.0;
    let mut cs = 0.0;
    let mut aligned = 0usize;
    let mut latent_len = 0usize;
    let mut latent_segs = 0usize;
    let mut switches = 0usize;
    let mut trace_len = 0usize;
    let mut max_len = 0usize;
    for e in evals {
        let e = e?;
        correct += e.correct as usize;
        sq += e.sq_dist_sum;
        cs += e.cos_sum;
        aligned += e.aligned;
        latent_len += e.latent_len_sum;
        latent_segs += e.latent_segments;
        switches += e.mode_switches;
        trace_len += e.trace_len;
        max_len = max_len.max(e.trace_len);
    }
    let n = dataset.samples.len();
    Ok(Metrics {
        answer_accuracy: correct as f64 / n as f64,
        sketch_recon_mse: (aligned > 0).then(|| sq / aligned as f64),
        sketch_recon_cosine: (aligned > 0).then(|| cs / aligned as f64),
        mean_latent_segment_len: if latent_segs > 0 {
            latent_len as f64 / latent_segs as f64
        } else {
            0.0
        },
        mean_mode_switches: switches as f64 / n as f64,
        mean_trace_len: trace_len as f64 / n as f64,
        max_trace_len: max_len,
        n_samples: n,
        n_aligned_vectors: aligned,
    })
}

/// Score gold traces through the same answer-extraction path the decoder
/// uses; a self-consistency harness for the scoring plumbing.
pub fn oracle_replay_accuracy(dataset: &Dataset, variant: Variant) -> Result<f64> {
    let vocab = dataset.vocab();
    let mut correct = 0usize;
    for sample in &dataset.samples {
        let rendered = crate::taskgen::render_variant(sample, variant, &vocab, 1)?;
        let tokens: Vec<u32> = rendered
            .slots
            .iter()
            .filter_map(|s| match s {
                crate::taskgen::RenderedSlot::Tok(id) => Some(*id),
                _ => None,
            })
            .collect();
        let got = crate::decoder::extract_answer_tokens(&tokens, &vocab);
        if got.as_deref() == Some(sample.answer.as_str()) {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    K,
    Lambda,
    Variant,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "k" | "K" => Ok(SweepAxis::K),
            "lambda" => Ok(SweepAxis::Lambda),
            "variant" => Ok(SweepAxis::Variant),
            other => Err(Error::Contract(format!(
                "unknown sweep axis {other:?}; expected k, lambda or variant"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::K => "k",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Variant => "variant",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub skipped: Option<String>,
    pub accuracy: f64,
    pub recon_mse: Option<f64>,
    pub recon_cosine: Option<f64>,
    pub mean_latent_len: f64,
    pub final_l_total: f64,
    pub final_l_ntp: f64,
    pub final_l_sketch: f64,
}

/// Train one model per axis value (same seed, same data) and evaluate it.
/// K values that do not divide the sketch patch count produce a warning
/// row instead of a run.
pub fn sweep(
    axis: SweepAxis,
    values: &[String],
    base: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        let mut skip = None;
        match axis {
            SweepAxis::K => {
                let k: usize = value
                    .parse()
                    .map_err(|_| Error::Contract(format!("bad K value {value:?}")))?;
                let m = (train_data.header.sketch_h / cfg.sketch_patch)
                    * (train_data.header.sketch_w / cfg.sketch_patch);
                if k == 0 || m % k != 0 {
                    skip = Some(format!("K={k} does not divide {m} sketch patches"));
                } else {
                    cfg.k = k;
                }
            }
            SweepAxis::Lambda => {
                cfg.lambda_sketch = value
                    .parse()
                    .map_err(|_| Error::Contract(format!("bad lambda value {value:?}")))?;
            }
            SweepAxis::Variant => {
                cfg.variant = Variant::parse(value)?;
            }
        }
        if let Some(reason) = skip {
            rows.push(SweepRow {
                axis: axis.name().into(),
                value: value.clone(),
                seed: base.seed,
                skipped: Some(reason),
                accuracy: f64::NAN,
                recon_mse: None,
                recon_cosine: None,
                mean_latent_len: 0.0,
                final_l_total: f64::NAN,
                final_l_ntp: f64::NAN,
                final_l_sketch: f64::NAN,
            });
            continue;
        }
        let row = sweep_point(axis, value, &cfg, train_data, eval_data)?;
        rows.push(row);
    }
    Ok(rows)
}

/// One standalone train+evaluate run, exactly what a sweep row does.
pub fn sweep_point(
    axis: SweepAxis,
    value: &str,
    cfg: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
) -> Result<SweepRow> {
    // K changes re-derive per-sample plans; reuse the shared datasets but
    // rebuild headers' K view for init checks.
    let mut train_ds = train_data.clone();
    train_ds.header.k = cfg.k;
    let mut eval_ds = eval_data.clone();
    eval_ds.header.k = cfg.k;
    let run: TrainRun = train_run(cfg, &train_ds, None, None)?;
    let metrics = evaluate(&run.state, &eval_ds, true)?;
    let last = run.metrics.last();
    Ok(SweepRow {
        axis: axis.name().into(),
        value: value.into(),
        seed: cfg.seed,
        skipped: None,
        accuracy: metrics.answer_accuracy,
        recon_mse: metrics.sketch_recon_mse,
        recon_cosine: metrics.sketch_recon_cosine,
        mean_latent_len: metrics.mean_latent_segment_len,
        final_l_total: last.map_or(f64::NAN, |r| r.l_total),
        final_l_ntp: last.map_or(f64::NAN, |r| r.l_ntp),
        final_l_sketch: last.map_or(f64::NAN, |r| r.l_sketch),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub mode: LatentInputMode,
    pub group: ParamGroup,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub rows: Vec<GradCheckRow>,
    pub elapsed_secs: f64,
}

impl GradCheckReport {
    pub fn max_err(&self) -> f64 {
        self.rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
    }
}

/// Central-difference step sizes for the joint-loss check. Two scales
/// cover both failure modes of a fixed step: curvature-limited coordinates
/// need the small step, while coordinates whose true gradient is tiny need
/// the large one so the loss difference rises above f64 rounding. Each
/// coordinate keeps its best estimate; a wrong analytic gradient fails at
/// every step size.
pub const GRAD_CHECK_EPS: [f64; 2] = [1e-3, 3e-5];

/// Finite-difference check of the full joint loss on a real mini-batch in
/// both latent input modes, reported per parameter group. Requires a tiny
/// config (d_model <= 16, n_layers <= 2) to stay tractable.
pub fn grad_check(config: &TrainConfig) -> Result<GradCheckReport> {
    grad_check_with_eps(config, &GRAD_CHECK_EPS)
}

pub fn grad_check_with_eps(config: &TrainConfig, eps_list: &[f64]) -> Result<GradCheckReport> {
    if config.d_model > 16 || config.n_layers > 2 {
        return Err(Error::Contract(format!(
            "grad-check needs d_model <= 16 and n_layers <= 2 (got {} and {})",
            config.d_model, config.n_layers
        )));
    }
    let start = std::time::Instant::now();
    let spec = MazeSpec { width: 4, height: 4, wall_density: 0.15, ..Default::default() };
    let ds = crate::dataset::generate_dataset(crate::dataset::TaskKind::Maze, 2, 0, config.k, &spec)?;
    let vocab = ds.vocab();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(config.seed);
    let params = ModelParams::init(
        config.model_config(vocab.size()),
        config.freeze_flags(),
        &mut rng,
    )?;
    let prepared: Vec<_> = ds
        .samples
        .iter()
        .map(|s| prepare_sample(s, &vocab, &params, config.variant, config.k))
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for mode in [LatentInputMode::TeacherForce, LatentInputMode::Propagate] {
        let loss_cfg = crate::objective::LossConfig {
            latent_input_mode: mode,
            ..config.loss_config()
        };
        // Analytic batch gradient: mean over samples.
        let mut grads = None;
        for prep in &prepared {
            let (_, _, _, g) = sample_loss_and_grad(&params, prep, &loss_cfg)?;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => acc.add_assign(&g)?,
            }
        }
        let mut grads = grads.expect("nonempty batch");
        grads.scale_in_place(1.0 / prepared.len() as f64);

        let eval_loss = |ps: &[(String, Tensor)]| -> Result<f64> {
            let mut p = params.clone();
            for (name, tensor) in ps {
                *p.tensor_mut(name)
                    .ok_or_else(|| Error::Contract(format!("unknown tensor {name}")))? =
                    tensor.clone();
            }
            let mut total = 0.0;
            for prep in &prepared {
                total += sample_loss_and_grad(&p, prep, &loss_cfg)?.0;
            }
            Ok(total / prepared.len() as f64)
        };

        for group in [ParamGroup::Backbone, ParamGroup::SketchProj] {
            let tensors: Vec<(String, Tensor)> = params
                .named_tensors()
                .into_iter()
                .filter(|(n, _)| !params.is_frozen(n) && ModelParams::group_of(n) == group)
                .map(|(n, t)| (n, t.clone()))
                .collect();
            let err = finite_difference_check(&eval_loss, &tensors, &grads, eps)?;
            rows.push(GradCheckRow { mode, group, max_rel_err: err });
        }
    }
    let report = GradCheckReport { rows, elapsed_secs: start.elapsed().as_secs_f64() };
    if report.max_err() > 1e-3 {
        return Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:.3e} > 1e-3",
            report.max_err()
        )));
    }
    Ok(report)
}

/// A rectangular text table; the CSV carrier for every report.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push_row(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::Contract(format!(
                "row has {} cells, table has {} columns",
                row.len(),
                self.columns.len()
            )));
        }
        self.rows.push(row);
        Ok(())
    }
}

fn check_cell(cell: &str) -> Result<()> {
    if cell.contains(',') || cell.contains('\n') || cell.contains('"') {
        return Err(Error::Format(format!(
            "table cells must not contain commas, quotes or newlines: {cell:?}"
        )));
    }
    Ok(())
}

pub fn write_csv(table: &Table, path: impl AsRef<Path>) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for c in &table.columns {
        check_cell(c)?;
    }
    writeln!(w, "{}", table.columns.join(","))?;
    for row in &table.rows {
        for c in row {
            check_cell(c)?;
        }
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Table> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty CSV: no header".into()))?;
    let columns: Vec<String> = header.split(',').map(str::to_string).collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(str::to_string).collect();
        if row.len() != columns.len() {
            return Err(Error::Format(format!(
                "CSV row has {} cells, header has {}",
                row.len(),
                columns.len()
            )));
        }
        rows.push(row);
    }
    Ok(Table { columns, rows })
}

pub fn sweep_table(rows: &[SweepRow]) -> Table {
    let mut t = Table::new(&[
        "axis",
        "value",
        "seed",
        "status",
        "accuracy",
        "recon_mse",
        "recon_cosine",
        "mean_latent_len",
        "final_l_total",
        "final_l_ntp",
        "final_l_sketch",
    ]);
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.9}"));
    let num = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.9}") };
    for r in rows {
        t.push_row(vec![
            r.axis.clone(),
            r.value.clone(),
            r.seed.to_string(),
            r.skipped.clone().unwrap_or_else(|| "ok".into()).replace(',', ";"),
            num(r.accuracy),
            opt(r.recon_mse),
            opt(r.recon_cosine),
            num(r.mean_latent_len),
            num(r.final_l_total),
            num(r.final_l_ntp),
            num(r.final_l_sketch),
        ])
        .expect("column count fixed");
    }
    t
}

pub fn metrics_table(metrics: &Metrics) -> Table {
    let mut t = Table::new(&["metric", "value"]);
    let mut kv = |k: &str, v: String| t.push_row(vec![k.to_string(), v]).expect("two columns");
    kv("answer_accuracy", format!("{:.9}", metrics.answer_accuracy));
    kv(
        "sketch_recon_mse",
        metrics.sketch_recon_mse.map_or(String::new(), |v| format!("{v:.9}")),
    );
    kv(
        "sketch_recon_cosine",
        metrics.sketch_recon_cosine.map_or(String::new(), |v| format!("{v:.9}")),
    );
    kv("mean_latent_segment_len", format!("{:.9}", metrics.mean_latent_segment_len));
    kv("mean_mode_switches", format!("{:.9}", metrics.mean_mode_switches));
    kv("mean_trace_len", format!("{:.9}", metrics.mean_trace_len));
    kv("max_trace_len", metrics.max_trace_len.to_string());
    kv("n_samples", metrics.n_samples.to_string());
    kv("n_aligned_vectors", metrics.n_aligned_vectors.to_string());
    t
}

pub fn metrics_log_table(rows: &[crate::train::MetricsRow]) -> Table {
    let mut t = Table::new(&["step", "lr", "l_ntp", "l_sketch", "l_total"]);
    for r in rows {
        t.push_row(vec![
            r.step.to_string(),
            format!("{:.9e}", r.lr),
            format!("{:.9}", r.l_ntp),
            format!("{:.9}", r.l_sketch),
            format!("{:.9}", r.l_total),
        ])
        .expect("five columns");
    }
    t
}

/// Minimal line plot in SVG: one polyline per series, auto-scaled axes.
pub fn write_line_plot_svg(
    path: impl AsRef<Path>,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    const W: f64 = 640.0;
    const H: f64 = 420.0;
    const M: f64 = 56.0;
    let points: Vec<(f64, f64)> = series.iter().flat_map(|(_, p)| p.iter().copied()).collect();
    let (x0, x1) = points
        .iter()
        .map(|p| p.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (y0, y1) = points
        .iter()
        .map(|p| p.1)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (x0, x1) = if points.is_empty() { (0.0, 1.0) } else { (x0, x1) };
    let (y0, y1) = if points.is_empty() { (0.0, 1.0) } else { (y0, y1) };
    let xs = if (x1 - x0).abs() < 1e-12 { 1.0 } else { x1 - x0 };
    let ys = if (y1 - y0).abs() < 1e-12 { 1.0 } else { y1 - y0 };
    let px = |x: f64| M + (x - x0) / xs * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / ys * (H - 2.0 * M);

    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str(&format!(
        "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">{}</text>\n",
        W / 2.0,
        title
    ));
    svg.push_str(&format!(
        "<rect x=\"{M}\" y=\"{M}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        W - 2.0 * M,
        H - 2.0 * M
    ));
    for (tick, along_x) in [(x0, true), (x1, true), (y0, false), (y1, false)] {
        if along_x {
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>\n",
                px(tick),
                H - M + 18.0,
                tick
            ));
        } else {
            svg.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{:.3}</text>\n",
                M - 6.0,
                py(tick) + 4.0,
                tick
            ));
        }
    }
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = colors[i % colors.len()];
        if !pts.is_empty() {
            let path_d: Vec<String> =
                pts.iter().map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"/>\n",
                path_d.join(" ")
            ));
            for (x, y) in pts {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                    px(*x),
                    py(*y)
                ));
            }
        }
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
            M + 8.0,
            M + 16.0 + 16.0 * i as f64
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("sketchlm-eval-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn csv_round_trip() {
        let mut t = Table::new(&["a", "b"]);
        t.push_row(vec!["1".into(), "x".into()]).unwrap();
        t.push_row(vec!["2".into(), "".into()]).unwrap();
        let p = tmpfile("round.csv");
        write_csv(&t, &p).unwrap();
        assert_eq!(read_csv(&p).unwrap(), t);
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn empty_table_writes_header_only() {
        let t = Table::new(&["x", "y", "z"]);
        let p = tmpfile("empty.csv");
        write_csv(&t, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "x,y,z\n");
        assert_eq!(read_csv(&p).unwrap(), t);
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn cells_with_commas_are_rejected() {
        let mut t = Table::new(&["a"]);
        t.push_row(vec!["1,2".into()]).unwrap();
        assert!(write_csv(&t, tmpfile("bad.csv")).is_err());
    }

    #[test]
    fn svg_plot_writes_all_series() {
        let p = tmpfile("plot.svg");
        write_line_plot_svg(
            &p,
            "demo",
            &[
                ("one".into(), vec![(0.0, 1.0), (1.0, 2.0)]),
                ("two".into(), vec![(0.0, 2.0), (1.0, 0.5)]),
                ("three".into(), vec![(0.0, 0.0), (1.0, 1.0)]),
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.matches("<polyline").count(), 3);
        assert!(text.contains(">one<") && text.contains(">three<"));
        std::fs::remove_file(&p).ok();
    }

    #[test]
    fn oracle_replay_scores_hundred_percent() {
        let ds = crate::dataset::generate_dataset(
            crate::dataset::TaskKind::Maze,
            50,
            900,
            3,
            &MazeSpec::default(),
        )
        .unwrap();
        let acc = oracle_replay_accuracy(&ds, Variant::Unified).unwrap();
        assert_eq!(acc, 1.0);
        let acc = oracle_replay_accuracy(&ds, Variant::TextOnly).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn grad_check_requires_tiny_config() {
        let cfg = TrainConfig { d_model: 64, ..Default::default() };
        assert!(grad_check(&cfg).is_err());
    }
}
