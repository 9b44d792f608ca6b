//! Synthetic interleaved text+sketch reasoning tasks with exact oracles.
//!
//! Two families: multi-step maze navigation (shortest path, deterministic
//! tie-break) and single-step jigsaw completion (pick the candidate quadrant
//! that finishes a procedural pattern). Generation is a pure function of the
//! seed.

use crate::error::{Error, Result};
use crate::perception::ToyImage;
use crate::vocab::{self, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

pub const CELL_PX: usize = 3;
// Pixel codes; all parse-stable at 6 decimal places.
const WALL: f64 = 1.0;
const FREE: f64 = 0.0;
const START_MARK: f64 = 0.8;
const GOAL_MARK: f64 = 0.4;
const AGENT_MARK: f64 = 0.6;
const BLANK: f64 = 0.5;
const DARK: f64 = 0.1;
const LIGHT: f64 = 0.9;

/// One training example in the interleaved trace format.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSample {
    pub task: String,
    pub question: String,
    pub context_image: ToyImage,
    pub steps: Vec<TraceStep>,
    pub final_think: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub think: String,
    pub sketch_image: ToyImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MazeSpec {
    pub width: usize,
    pub height: usize,
    pub wall_density: f64,
    /// Resample start/goal pairs whose shortest path exceeds this; keeps
    /// every rendered trace within the backbone's sequence budget.
    pub max_path_len: usize,
    /// Keep samples whose start equals goal (zero-step traces). Off by
    /// default: they carry degenerate supervision.
    pub allow_degenerate: bool,
}

impl Default for MazeSpec {
    fn default() -> Self {
        MazeSpec {
            width: 6,
            height: 6,
            wall_density: 0.2,
            max_path_len: 10,
            allow_degenerate: false,
        }
    }
}

// Move order fixes the BFS tie-break, hence path uniqueness.
const DIRS: [(char, i32, i32); 4] = [('R', 0, 1), ('D', 1, 0), ('L', 0, -1), ('U', -1, 0)];

/// Breadth-first shortest path with the R,D,L,U tie-break; None if
/// unreachable.
fn bfs_path(
    walls: &[bool],
    w: usize,
    h: usize,
    start: (usize, usize),
    goal: (usize, usize),
) -> Option<Vec<(usize, usize)>> {
    let idx = |r: usize, c: usize| r * w + c;
    let mut parent: Vec<Option<usize>> = vec![None; w * h];
    let mut seen = vec![false; w * h];
    let mut queue = VecDeque::new();
    seen[idx(start.0, start.1)] = true;
    queue.push_back(start);
    while let Some((r, c)) = queue.pop_front() {
        if (r, c) == goal {
            let mut path = vec![goal];
            let mut cur = idx(goal.0, goal.1);
            while let Some(p) = parent[cur] {
                path.push((p / w, p % w));
                cur = p;
            }
            path.reverse();
            return Some(path);
        }
        for (_, dr, dc) in DIRS {
            let (nr, nc) = (r as i32 + dr, c as i32 + dc);
            if nr < 0 || nc < 0 || nr >= h as i32 || nc >= w as i32 {
                continue;
            }
            let (nr, nc) = (nr as usize, nc as usize);
            if walls[idx(nr, nc)] || seen[idx(nr, nc)] {
                continue;
            }
            seen[idx(nr, nc)] = true;
            parent[idx(nr, nc)] = Some(idx(r, c));
            queue.push_back((nr, nc));
        }
    }
    None
}

fn move_letter(from: (usize, usize), to: (usize, usize)) -> char {
    let (dr, dc) = (to.0 as i32 - from.0 as i32, to.1 as i32 - from.1 as i32);
    DIRS.iter()
        .find(|(_, r, c)| (*r, *c) == (dr, dc))
        .map(|(l, _, _)| *l)
        .expect("adjacent cells")
}

fn render_maze(
    walls: &[bool],
    w: usize,
    h: usize,
    marks: &[((usize, usize), f64)],
) -> ToyImage {
    let mut img = ToyImage::blank(h * CELL_PX, w * CELL_PX);
    for r in 0..h {
        for c in 0..w {
            let v = if walls[r * w + c] { WALL } else { FREE };
            img.fill_block(r * CELL_PX, c * CELL_PX, CELL_PX, CELL_PX, v);
        }
    }
    for &((r, c), v) in marks {
        img.fill_block(r * CELL_PX, c * CELL_PX, CELL_PX, CELL_PX, v);
    }
    img
}

/// Deterministic trace construction from a fixed maze layout.
pub fn maze_trace(
    walls: &[bool],
    spec: &MazeSpec,
    start: (usize, usize),
    goal: (usize, usize),
) -> Result<TraceSample> {
    let (w, h) = (spec.width, spec.height);
    let path = bfs_path(walls, w, h, start, goal)
        .ok_or_else(|| Error::Generation("maze has no path".into()))?;
    let context_image = render_maze(walls, w, h, &[(start, START_MARK), (goal, GOAL_MARK)]);
    let mut steps = Vec::with_capacity(path.len().saturating_sub(1));
    let mut letters = Vec::new();
    for pair in path.windows(2) {
        let (from, to) = (pair[0], pair[1]);
        let letter = move_letter(from, to);
        letters.push(letter.to_string());
        steps.push(TraceStep {
            think: format!("move {letter} to {} {}", to.0, to.1),
            sketch_image: render_maze(walls, w, h, &[(goal, GOAL_MARK), (to, AGENT_MARK)]),
        });
    }
    Ok(TraceSample {
        task: "maze".into(),
        question: format!("navigate from {} {} to {} {}", start.0, start.1, goal.0, goal.1),
        context_image,
        steps,
        final_think: "path complete".into(),
        answer: letters.join(" "),
    })
}

/// Generate a solvable maze sample. Regenerates the layout until BFS finds
/// a path, failing after 100 attempts.
pub fn gen_maze(seed: u64, spec: &MazeSpec) -> Result<TraceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width, spec.height);
    for _ in 0..100 {
        let walls: Vec<bool> = (0..w * h).map(|_| rng.gen_bool(spec.wall_density)).collect();
        let free: Vec<usize> = (0..w * h).filter(|&i| !walls[i]).collect();
        if free.len() < 2 {
            continue;
        }
        let start = free[rng.gen_range(0..free.len())];
        let goal = free[rng.gen_range(0..free.len())];
        if start == goal && !spec.allow_degenerate {
            continue;
        }
        let start = (start / w, start % w);
        let goal = (goal / w, goal % w);
        if let Some(path) = bfs_path(&walls, w, h, start, goal) {
            if path.len() - 1 <= spec.max_path_len {
                return maze_trace(&walls, spec, start, goal);
            }
        }
    }
    Err(Error::Generation(format!(
        "no solvable {w}x{h} maze after 100 regenerations (density {})",
        spec.wall_density
    )))
}

// Jigsaw geometry: a 12x12 pattern (quadrants of 6x6) in the top-left of an
// 18x18 canvas; the two candidate quadrants sit in the bottom strip.
const JIG_CANVAS: usize = 18;
const PATTERN: usize = 12;
const QUAD: usize = 6;
const CAND_A_COL: usize = 0;
const CAND_B_COL: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq)]
enum PatternKind {
    Stripes { horizontal: bool, width: usize, phase: usize },
    Checker { size: usize, phase: usize },
    Rings { cr: usize, cc: usize },
    Gradient { horizontal: bool, reversed: bool },
}

fn pattern_value(kind: PatternKind, r: usize, c: usize) -> f64 {
    match kind {
        PatternKind::Stripes { horizontal, width, phase } => {
            let band = if horizontal { r } else { c } / width + phase;
            if band % 2 == 0 {
                DARK
            } else {
                LIGHT
            }
        }
        PatternKind::Checker { size, phase } => {
            if (r / size + c / size + phase) % 2 == 0 {
                DARK
            } else {
                LIGHT
            }
        }
        PatternKind::Rings { cr, cc } => {
            let d = (r as i32 - cr as i32).abs().max((c as i32 - cc as i32).abs());
            if d % 2 == 0 {
                LIGHT
            } else {
                DARK
            }
        }
        PatternKind::Gradient { horizontal, reversed } => {
            // Sixteenths are exact binary fractions, so serialization at six
            // decimals round-trips bitwise.
            let t = if horizontal { c } else { r };
            let level = if reversed { PATTERN - 1 - t } else { t };
            (level + 2) as f64 / 16.0
        }
    }
}

fn sample_pattern(rng: &mut ChaCha8Rng) -> PatternKind {
    match rng.gen_range(0..4) {
        0 => PatternKind::Stripes {
            horizontal: rng.gen_bool(0.5),
            width: rng.gen_range(1..4),
            phase: rng.gen_range(0..2),
        },
        1 => PatternKind::Checker { size: rng.gen_range(1..4), phase: rng.gen_range(0..2) },
        2 => PatternKind::Rings {
            cr: rng.gen_range(2..10),
            cc: rng.gen_range(2..10),
        },
        _ => PatternKind::Gradient {
            horizontal: rng.gen_bool(0.5),
            reversed: rng.gen_bool(0.5),
        },
    }
}

fn quadrant_origin(q: usize) -> (usize, usize) {
    (q / 2 * QUAD, q % 2 * QUAD)
}

fn quadrant_pixels(kind: PatternKind, q: usize) -> Vec<f64> {
    let (r0, c0) = quadrant_origin(q);
    let mut out = Vec::with_capacity(QUAD * QUAD);
    for r in 0..QUAD {
        for c in 0..QUAD {
            out.push(pattern_value(kind, r0 + r, c0 + c));
        }
    }
    out
}

fn blit(img: &mut ToyImage, r0: usize, c0: usize, block: &[f64], h: usize, w: usize) {
    for r in 0..h {
        for c in 0..w {
            img.set(r0 + r, c0 + c, block[r * w + c]);
        }
    }
}

/// Generate a jigsaw sample: the context shows a pattern with one blanked
/// quadrant plus candidates a and b in the bottom strip; the sketch is the
/// fully completed pattern.
pub fn gen_jigsaw(seed: u64) -> Result<TraceSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = sample_pattern(&mut rng);
    let blank_q = rng.gen_range(0..4);
    let correct = quadrant_pixels(kind, blank_q);

    let mut distractor = None;
    for _ in 0..50 {
        let other = sample_pattern(&mut rng);
        let pixels = quadrant_pixels(other, blank_q);
        if pixels != correct {
            distractor = Some(pixels);
            break;
        }
    }
    let distractor = distractor
        .ok_or_else(|| Error::Generation("jigsaw candidates identical after 50 draws".into()))?;

    let correct_is_a = rng.gen_bool(0.5);
    let (cand_a, cand_b) = if correct_is_a {
        (&correct, &distractor)
    } else {
        (&distractor, &correct)
    };

    let mut context = ToyImage::blank(JIG_CANVAS, JIG_CANVAS);
    for r in 0..PATTERN {
        for c in 0..PATTERN {
            context.set(r, c, pattern_value(kind, r, c));
        }
    }
    let (br, bc) = quadrant_origin(blank_q);
    context.fill_block(br, bc, QUAD, QUAD, BLANK);
    blit(&mut context, PATTERN, CAND_A_COL, cand_a, QUAD, QUAD);
    blit(&mut context, PATTERN, CAND_B_COL, cand_b, QUAD, QUAD);

    let mut sketch = ToyImage::blank(JIG_CANVAS, JIG_CANVAS);
    for r in 0..PATTERN {
        for c in 0..PATTERN {
            sketch.set(r, c, pattern_value(kind, r, c));
        }
    }

    Ok(TraceSample {
        task: "jigsaw".into(),
        question: "which candidate completes the image a or b".into(),
        context_image: context,
        steps: vec![TraceStep { think: "imagine completed image".into(), sketch_image: sketch }],
        final_think: "compare candidates".into(),
        answer: if correct_is_a { "a".into() } else { "b".into() },
    })
}

/// Training variants: the full interleaved format, sketches only, or text
/// only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Unified,
    VisualOnly,
    TextOnly,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "unified" => Ok(Variant::Unified),
            "visual-only" => Ok(Variant::VisualOnly),
            "text-only" => Ok(Variant::TextOnly),
            other => Err(Error::Contract(format!(
                "unknown variant {other:?}; expected unified, visual-only or text-only"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Unified => "unified",
            Variant::VisualOnly => "visual-only",
            Variant::TextOnly => "text-only",
        }
    }
}

/// One response slot of a rendered trace: a discrete token or the j-th
/// latent slot (1-based) of sketch segment `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RenderedSlot {
    Tok(u32),
    Latent { step: usize, j: usize },
}

/// Token/slot stream for one training sample under a variant. Latent slots
/// are placeholders filled at training time.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedTrace {
    pub question_ids: Vec<u32>,
    pub slots: Vec<RenderedSlot>,
    /// Indices into `sample.steps` whose sketch segments appear, in order.
    pub sketch_steps: Vec<usize>,
}

pub fn render_variant(
    sample: &TraceSample,
    variant: Variant,
    vocab: &Vocabulary,
    k: usize,
) -> Result<RenderedTrace> {
    use RenderedSlot::Tok;
    let mut slots = Vec::new();
    let mut sketch_steps = Vec::new();

    let push_text_block = |slots: &mut Vec<RenderedSlot>, open: u32, text: &str, close: u32| -> Result<()> {
        slots.push(Tok(open));
        for id in vocab.encode(text)? {
            slots.push(Tok(id));
        }
        slots.push(Tok(close));
        Ok(())
    };

    for (si, step) in sample.steps.iter().enumerate() {
        if variant != Variant::VisualOnly {
            push_text_block(&mut slots, vocab::THINK_START, &step.think, vocab::THINK_END)?;
        }
        if variant != Variant::TextOnly {
            slots.push(Tok(vocab::SKETCH_START));
            for j in 1..=k {
                slots.push(RenderedSlot::Latent { step: si, j });
            }
            slots.push(Tok(vocab::SKETCH_END));
            sketch_steps.push(si);
        }
    }
    if variant != Variant::VisualOnly {
        push_text_block(&mut slots, vocab::THINK_START, &sample.final_think, vocab::THINK_END)?;
    }
    push_text_block(&mut slots, vocab::ANSWER_START, &sample.answer, vocab::ANSWER_END)?;
    slots.push(Tok(vocab::EOS));

    Ok(RenderedTrace {
        question_ids: vocab.encode(&sample.question)?,
        slots,
        sketch_steps,
    })
}

/// All text lines of a sample, for vocabulary construction.
pub fn sample_text_lines(sample: &TraceSample) -> Vec<&str> {
    let mut lines = vec![sample.question.as_str()];
    for s in &sample.steps {
        lines.push(s.think.as_str());
    }
    lines.push(sample.final_think.as_str());
    lines.push(sample.answer.as_str());
    lines
}
