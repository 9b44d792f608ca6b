//! Dataset serialization: line 1 is a JSON header (format version,
//! vocabulary word list, image geometry, K), then one JSON record per
//! sample. Floats are written with six decimal places; reading a written
//! file recovers every value up to that rounding.

use crate::error::{Error, Result};
use crate::perception::ToyImage;
use crate::taskgen::{self, MazeSpec, TraceSample, TraceStep};
use crate::vocab::Vocabulary;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub words: Vec<String>,
    pub img_h: usize,
    pub img_w: usize,
    pub sketch_h: usize,
    pub sketch_w: usize,
    #[serde(rename = "K")]
    pub k: usize,
    // Provenance fields beyond the core geometry: they let evaluation
    // assert train/holdout seed-range disjointness.
    #[serde(default)]
    pub task: String,
    #[serde(default)]
    pub seed_start: u64,
    #[serde(default)]
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<TraceSample>,
}

impl Dataset {
    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::from_words(self.header.words.clone())
    }

    /// Seed ranges [seed_start, seed_start+count) must not overlap between
    /// a training set and a holdout set.
    pub fn seed_range(&self) -> (u64, u64) {
        (self.header.seed_start, self.header.seed_start + self.header.count as u64)
    }
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    task: String,
    question: String,
    context_image: Vec<f64>,
    steps: Vec<StepJson>,
    final_think: String,
    answer: String,
}

#[derive(Serialize, Deserialize)]
struct StepJson {
    think: String,
    sketch_image: Vec<f64>,
}

fn push_floats(out: &mut String, values: &[f64]) {
    out.push('[');
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&format!("{v:.6}"));
    }
    out.push(']');
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization")
}

fn record_line(sample: &TraceSample) -> String {
    let mut line = String::with_capacity(4096);
    line.push_str("{\"task\":");
    line.push_str(&json_str(&sample.task));
    line.push_str(",\"question\":");
    line.push_str(&json_str(&sample.question));
    line.push_str(",\"context_image\":");
    push_floats(&mut line, &sample.context_image.pixels);
    line.push_str(",\"steps\":[");
    for (i, step) in sample.steps.iter().enumerate() {
        if i > 0 {
            line.push(',');
        }
        line.push_str("{\"think\":");
        line.push_str(&json_str(&step.think));
        line.push_str(",\"sketch_image\":");
        push_floats(&mut line, &step.sketch_image.pixels);
        line.push('}');
    }
    line.push_str("],\"final_think\":");
    line.push_str(&json_str(&sample.final_think));
    line.push_str(",\"answer\":");
    line.push_str(&json_str(&sample.answer));
    line.push('}');
    line
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    if dataset.samples.is_empty() {
        return Err(Error::Contract("refusing to write an empty dataset".into()));
    }
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = serde_json::to_string(&dataset.header)
        .map_err(|e| Error::Format(format!("header serialization: {e}")))?;
    writeln!(w, "{header}")?;
    for sample in &dataset.samples {
        writeln!(w, "{}", record_line(sample))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(&path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::Format("empty dataset file: header missing".into()))?;
    let header: DatasetHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::Format(format!("bad dataset header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "dataset format version {} (supported: {FORMAT_VERSION})",
            header.version
        )));
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 2;
        let rec: RecordJson = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("dataset line {lineno}: {e}")))?;
        if rec.context_image.len() != header.img_h * header.img_w {
            return Err(Error::Format(format!(
                "dataset line {lineno}: context image has {} pixels, header says {}x{}",
                rec.context_image.len(),
                header.img_h,
                header.img_w
            )));
        }
        let context_image = ToyImage::new(header.img_h, header.img_w, rec.context_image)?;
        let mut steps = Vec::with_capacity(rec.steps.len());
        for s in rec.steps {
            if s.sketch_image.len() != header.sketch_h * header.sketch_w {
                return Err(Error::Format(format!(
                    "dataset line {lineno}: sketch image has {} pixels, header says {}x{}",
                    s.sketch_image.len(),
                    header.sketch_h,
                    header.sketch_w
                )));
            }
            steps.push(TraceStep {
                think: s.think,
                sketch_image: ToyImage::new(header.sketch_h, header.sketch_w, s.sketch_image)?,
            });
        }
        samples.push(TraceSample {
            task: rec.task,
            question: rec.question,
            context_image,
            steps,
            final_think: rec.final_think,
            answer: rec.answer,
        });
    }
    Ok(Dataset { header, samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Maze,
    Jigsaw,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<TaskKind> {
        match s {
            "maze" => Ok(TaskKind::Maze),
            "jigsaw" => Ok(TaskKind::Jigsaw),
            other => Err(Error::Contract(format!(
                "unknown task {other:?}; expected maze or jigsaw"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Maze => "maze",
            TaskKind::Jigsaw => "jigsaw",
        }
    }
}

/// Generate `count` samples seeded `seed_start..seed_start+count` and
/// assemble them with a vocabulary built from all their text.
pub fn generate_dataset(
    task: TaskKind,
    count: usize,
    seed_start: u64,
    k: usize,
    maze_spec: &MazeSpec,
) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Contract("count must be > 0".into()));
    }
    let samples: Vec<TraceSample> = (0..count as u64)
        .map(|i| match task {
            TaskKind::Maze => taskgen::gen_maze(seed_start + i, maze_spec),
            TaskKind::Jigsaw => taskgen::gen_jigsaw(seed_start + i),
        })
        .collect::<Result<Vec<_>>>()?;
    let lines: Vec<String> = samples
        .iter()
        .flat_map(taskgen::sample_text_lines)
        .map(str::to_string)
        .collect();
    let vocab = Vocabulary::build(&lines);
    let first = &samples[0];
    let sk = &first.steps.first().map(|s| &s.sketch_image);
    let (sketch_h, sketch_w) = match sk {
        Some(img) => (img.height, img.width),
        // Degenerate zero-step samples still share task geometry.
        None => (first.context_image.height, first.context_image.width),
    };
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        words: vocab.words().to_vec(),
        img_h: first.context_image.height,
        img_w: first.context_image.width,
        sketch_h,
        sketch_w,
        k,
        task: task.name().into(),
        seed_start,
        count,
    };
    for (i, s) in samples.iter().enumerate() {
        if s.context_image.height != header.img_h || s.context_image.width != header.img_w {
            return Err(Error::Generation(format!("sample {i}: context geometry varies")));
        }
        for st in &s.steps {
            if st.sketch_image.height != header.sketch_h
                || st.sketch_image.width != header.sketch_w
            {
                return Err(Error::Generation(format!("sample {i}: sketch geometry varies")));
            }
        }
    }
    Ok(Dataset { header, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpfile(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("sketchlm-test-{}-{name}", std::process::id()));
        p
    }

    fn round6(v: f64) -> f64 {
        format!("{v:.6}").parse().unwrap()
    }

    #[test]
    fn round_trip_mixed_samples() {
        let maze = generate_dataset(TaskKind::Maze, 40, 100, 27, &MazeSpec::default()).unwrap();
        let jig = generate_dataset(TaskKind::Jigsaw, 40, 100, 27, &MazeSpec::default()).unwrap();
        for (name, ds) in [("maze", maze), ("jigsaw", jig)] {
            let path = tmpfile(&format!("rt-{name}.jsonl"));
            write_dataset(&ds, &path).unwrap();
            let back = read_dataset(&path).unwrap();
            assert_eq!(back.header, ds.header);
            assert_eq!(back.samples.len(), ds.samples.len());
            for (a, b) in ds.samples.iter().zip(&back.samples) {
                assert_eq!(a.question, b.question);
                assert_eq!(a.answer, b.answer);
                for (x, y) in a.context_image.pixels.iter().zip(&b.context_image.pixels) {
                    assert_eq!(round6(*x), *y);
                }
                for (sa, sb) in a.steps.iter().zip(&b.steps) {
                    assert_eq!(sa.think, sb.think);
                    for (x, y) in sa.sketch_image.pixels.iter().zip(&sb.sketch_image.pixels) {
                        assert_eq!(round6(*x), *y);
                    }
                }
            }
            // Write-read-write is a fixpoint: the second file is identical.
            let path2 = tmpfile(&format!("rt2-{name}.jsonl"));
            write_dataset(&back, &path2).unwrap();
            assert_eq!(
                std::fs::read(&path).unwrap(),
                std::fs::read(&path2).unwrap()
            );
            std::fs::remove_file(&path).ok();
            std::fs::remove_file(&path2).ok();
        }
    }

    #[test]
    fn empty_file_reports_missing_header() {
        let path = tmpfile("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("header missing"), "{err}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn corrupted_record_names_line_number() {
        let ds = generate_dataset(TaskKind::Maze, 3, 0, 9, &MazeSpec::default()).unwrap();
        let path = tmpfile("corrupt.jsonl");
        write_dataset(&ds, &path).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let mut fixed: Vec<String> = lines.iter().map(|l| l.to_string()).collect();
        fixed[2] = fixed[2][..fixed[2].len() / 2].to_string(); // truncate record on line 3
        text = fixed.join("\n");
        std::fs::write(&path, text).unwrap();
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let ds = generate_dataset(TaskKind::Maze, 2, 0, 9, &MazeSpec::default()).unwrap();
        let path = tmpfile("version.jsonl");
        write_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replacen("\"version\":1", "\"version\":9", 1);
        std::fs::write(&path, text).unwrap();
        assert!(read_dataset(&path).unwrap_err().to_string().contains("version"));
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let ds = generate_dataset(TaskKind::Maze, 2, 0, 9, &MazeSpec::default()).unwrap();
        let path = tmpfile("geom.jsonl");
        write_dataset(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let text = text.replacen("\"img_h\":18", "\"img_h\":12", 1);
        std::fs::write(&path, text).unwrap();
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("pixels"), "{err}");
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn header_fields_serialize_in_contract_order() {
        let ds = generate_dataset(TaskKind::Maze, 1, 5, 27, &MazeSpec::default()).unwrap();
        let json = serde_json::to_string(&ds.header).unwrap();
        let core = ["\"version\"", "\"words\"", "\"img_h\"", "\"img_w\"", "\"sketch_h\"", "\"sketch_w\"", "\"K\""];
        let mut last = 0;
        for key in core {
            let pos = json.find(key).unwrap_or_else(|| panic!("missing {key}"));
            assert!(pos > last || last == 0, "{key} out of order");
            last = pos;
        }
    }

    #[test]
    fn generated_dataset_round_trips_bitwise() {
        // Generator pixel values are chosen to be parse-stable at 6
        // decimals, so even float payloads survive exactly.
        let ds = generate_dataset(TaskKind::Jigsaw, 20, 7, 27, &MazeSpec::default()).unwrap();
        let path = tmpfile("bitwise.jsonl");
        write_dataset(&ds, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, ds);
        std::fs::remove_file(&path).ok();
    }
}
