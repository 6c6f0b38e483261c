//! Procedural glyph scenes where the answer depends on detail that only the
//! high-resolution render preserves.
//!
//! A scene is an `n x n` grid of cells. Each cell holds one digit drawn on a
//! 3x5 module bitmap in one color. Geometry lives on an integer pixel grid at
//! a reference resolution; renders at other resolutions point-sample pixel
//! centres with no filtering.

use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ImagePair, TokenSequence};
use crate::tensor::Tensor;

pub const GENERATOR_VERSION: u32 = 1;
pub const GLYPH_W: usize = 3;
pub const GLYPH_H: usize = 5;

/// Digits 0-9 in seven-segment style, one row per string.
const GLYPHS: [[&str; GLYPH_H]; 10] = [
    ["###", "#.#", "#.#", "#.#", "###"],
    ["..#", "..#", "..#", "..#", "..#"],
    ["###", "..#", "###", "#..", "###"],
    ["###", "..#", "###", "..#", "###"],
    ["#.#", "#.#", "###", "..#", "..#"],
    ["###", "#..", "###", "..#", "###"],
    ["###", "#..", "###", "#.#", "###"],
    ["###", "..#", "..#", "..#", "..#"],
    ["###", "#.#", "###", "#.#", "###"],
    ["###", "#.#", "###", "..#", "###"],
];

pub const PALETTE: [(&str, [f32; 3]); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("orange", [1.0, 0.5, 0.0]),
];

pub fn glyph_on(glyph: usize, row: usize, col: usize) -> bool {
    GLYPHS[glyph][row].as_bytes()[col] == b'#'
}

fn d_grid() -> usize {
    2
}
fn d_glyphs() -> usize {
    10
}
fn d_colors() -> usize {
    4
}
fn d_module() -> usize {
    1
}
fn d_reference() -> usize {
    256
}
fn d_jitter() -> usize {
    3
}
fn d_color_fraction() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Cells per side.
    #[serde(default = "d_grid")]
    pub grid: usize,
    #[serde(default = "d_glyphs")]
    pub glyphs: usize,
    #[serde(default = "d_colors")]
    pub colors: usize,
    /// Side of one glyph module in reference pixels.
    #[serde(default = "d_module")]
    pub module_px: usize,
    #[serde(default = "d_reference")]
    pub reference_resolution: usize,
    /// Largest random shift, in reference pixels, of a glyph from the centre
    /// of its cell. Shifts change which modules a coarse render samples.
    #[serde(default = "d_jitter")]
    pub jitter_px: usize,
    /// Share of queries asking for a color rather than a glyph.
    #[serde(default = "d_color_fraction")]
    pub color_query_fraction: f64,
    /// Every cell of a scene shows the same glyph; colors and offsets stay
    /// independent per cell.
    #[serde(default)]
    pub shared_glyph: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            grid: d_grid(),
            glyphs: d_glyphs(),
            colors: d_colors(),
            module_px: d_module(),
            reference_resolution: d_reference(),
            jitter_px: d_jitter(),
            color_query_fraction: d_color_fraction(),
            shared_glyph: false,
        }
    }
}

impl TaskConfig {
    pub fn cell_px(&self) -> usize {
        self.reference_resolution / self.grid.max(1)
    }

    pub fn glyph_height_px(&self) -> usize {
        GLYPH_H * self.module_px
    }

    /// Ids of every token the task emits; the model vocabulary needs one more
    /// slot for its end token.
    pub fn vocab(&self) -> Vocab {
        Vocab {
            glyphs: self.glyphs,
            colors: self.colors,
            grid: self.grid,
        }
    }

    /// Glyph height in pixels when rendered at `resolution`.
    pub fn glyph_height_at(&self, resolution: usize) -> f64 {
        self.glyph_height_px() as f64 * resolution as f64 / self.reference_resolution as f64
    }

    pub fn validate(&self, path: &str, errs: &mut Vec<String>) {
        if self.grid == 0 {
            errs.push(format!("{path}.grid: must be at least 1"));
        }
        if !(1..=GLYPHS.len()).contains(&self.glyphs) {
            errs.push(format!("{path}.glyphs: must be in 1..={}", GLYPHS.len()));
        }
        if !(1..=PALETTE.len()).contains(&self.colors) {
            errs.push(format!("{path}.colors: must be in 1..={}", PALETTE.len()));
        }
        if self.module_px == 0 {
            errs.push(format!("{path}.module_px: must be at least 1"));
        }
        if self.grid > 0 && !self.reference_resolution.is_multiple_of(self.grid) {
            errs.push(format!(
                "{path}.reference_resolution: {} is not divisible by grid {}",
                self.reference_resolution, self.grid
            ));
        }
        if self.grid > 0
            && (GLYPH_W * self.module_px > self.cell_px()
                || self.glyph_height_px() > self.cell_px())
        {
            errs.push(format!(
                "{path}.module_px: a {}x{} px glyph does not fit a {} px cell",
                GLYPH_W * self.module_px,
                self.glyph_height_px(),
                self.cell_px()
            ));
        }
        if !(0.0..=1.0).contains(&self.color_query_fraction) {
            errs.push(format!(
                "{path}.color_query_fraction: must be within [0, 1]"
            ));
        }
    }
}

/// Token layout: glyphs, colors, the two query words, row words, column words.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub glyphs: usize,
    pub colors: usize,
    pub grid: usize,
}

impl Vocab {
    pub fn glyph(&self, g: usize) -> usize {
        g
    }
    pub fn color(&self, c: usize) -> usize {
        self.glyphs + c
    }
    pub fn query(&self, kind: QueryKind) -> usize {
        self.glyphs + self.colors + kind as usize
    }
    pub fn row(&self, r: usize) -> usize {
        self.glyphs + self.colors + 2 + r
    }
    pub fn col(&self, c: usize) -> usize {
        self.glyphs + self.colors + 2 + self.grid + c
    }
    /// Number of task tokens (excluding the end token).
    pub fn len(&self) -> usize {
        self.glyphs + self.colors + 2 + 2 * self.grid
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Smallest model vocabulary that covers the task plus the end token.
    pub fn required_model_vocab(&self) -> usize {
        self.len() + 1
    }

    pub fn word(&self, t: usize) -> String {
        if t < self.glyphs {
            t.to_string()
        } else if t < self.glyphs + self.colors {
            PALETTE[t - self.glyphs].0.to_string()
        } else if t == self.query(QueryKind::Glyph) {
            "glyph".into()
        } else if t == self.query(QueryKind::Color) {
            "color".into()
        } else if t < self.glyphs + self.colors + 2 + self.grid {
            format!("row{}", t - self.row(0))
        } else if t < self.len() {
            format!("col{}", t - self.col(0))
        } else {
            format!("<{t}>")
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Glyph = 0,
    Color = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellSpec {
    pub glyph: usize,
    pub color: usize,
    /// Glyph top-left corner inside the cell, in reference pixels.
    pub dx: usize,
    pub dy: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub grid: usize,
    pub reference_resolution: usize,
    pub module_px: usize,
    pub background: [f32; 3],
    /// Row-major cells.
    pub cells: Vec<CellSpec>,
}

impl SceneSpec {
    fn cell_px(&self) -> usize {
        self.reference_resolution / self.grid
    }

    /// Color of the reference-space point `(x, y)` given as exact fractions
    /// `x_num / den`.
    fn color_at(&self, x_num: u64, y_num: u64, den: u64) -> [f32; 3] {
        let cell = self.cell_px() as u64;
        let (cx, cy) = (
            (x_num / (den * cell)) as usize,
            (y_num / (den * cell)) as usize,
        );
        let spec = &self.cells[cy * self.grid + cx];
        let m = self.module_px as u64;
        let gx0 = (cx * self.cell_px() + spec.dx) as u64;
        let gy0 = (cy * self.cell_px() + spec.dy) as u64;
        if x_num < gx0 * den || y_num < gy0 * den {
            return self.background;
        }
        let (col, row) = (
            (x_num - gx0 * den) / (den * m),
            (y_num - gy0 * den) / (den * m),
        );
        if (col as usize) < GLYPH_W
            && (row as usize) < GLYPH_H
            && glyph_on(spec.glyph, row as usize, col as usize)
        {
            PALETTE[spec.color].1
        } else {
            self.background
        }
    }
}

/// Rasterizes a scene at `resolution` by sampling each pixel centre.
pub fn render_scene(spec: &SceneSpec, resolution: usize) -> Result<Tensor<f32>> {
    if spec.grid == 0 || resolution == 0 || !resolution.is_multiple_of(spec.grid) {
        return Err(Error::config(format!(
            "resolution {resolution} is not divisible by the {} cell grid",
            spec.grid
        )));
    }
    if spec.cells.len() != spec.grid * spec.grid {
        return Err(Error::config(format!(
            "scene has {} cells for a {0}x{0} grid",
            spec.cells.len()
        )));
    }
    // pixel centre (p + 1/2) * ref / res  ==  (2p + 1) * ref / (2 res)
    let den = 2 * resolution as u64;
    let r = spec.reference_resolution as u64;
    let mut data = Vec::with_capacity(resolution * resolution * 3);
    for py in 0..resolution as u64 {
        for px in 0..resolution as u64 {
            data.extend_from_slice(&spec.color_at((2 * px + 1) * r, (2 * py + 1) * r, den));
        }
    }
    Tensor::new(&[resolution, resolution, 3], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub kind: QueryKind,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub scene: SceneSpec,
    pub query: Query,
    pub tokens: TokenSequence,
}

impl Sample {
    pub fn render(&self, low: usize, high: usize) -> Result<ImagePair<f32>> {
        Ok(ImagePair {
            low: render_scene(&self.scene, low)?,
            high: render_scene(&self.scene, high)?,
        })
    }

    pub fn instruction_text(&self, vocab: &Vocab) -> String {
        let words: Vec<String> = self
            .tokens
            .instruction
            .iter()
            .map(|&t| vocab.word(t))
            .collect();
        words.join(" ")
    }

    pub fn answer_text(&self, vocab: &Vocab) -> String {
        let words: Vec<String> = self.tokens.answer.iter().map(|&t| vocab.word(t)).collect();
        words.join(" ")
    }

    /// The answer token read straight from the scene.
    pub fn expected_answer(&self, vocab: &Vocab) -> usize {
        let cell = self.scene.cells[self.query.row * self.scene.grid + self.query.col];
        match self.query.kind {
            QueryKind::Glyph => vocab.glyph(cell.glyph),
            QueryKind::Color => vocab.color(cell.color),
        }
    }
}

fn checked(task: &TaskConfig, model_vocab: usize) -> Result<()> {
    let mut errs = Vec::new();
    task.validate("data.task", &mut errs);
    let need = task.vocab().required_model_vocab();
    if model_vocab < need {
        errs.push(format!(
            "model.decoder.vocab_size: {model_vocab} is too small; the task needs {need} tokens including the end token"
        ));
    }
    if errs.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(errs))
    }
}

/// Draws one scene and query from `seed`.
pub fn sample_task(seed: u64, task: &TaskConfig, model_vocab: usize) -> Result<Sample> {
    checked(task, model_vocab)?;
    Ok(draw(seed, task))
}

fn draw(seed: u64, task: &TaskConfig) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = task.cell_px();
    let (gw, gh) = (GLYPH_W * task.module_px, task.glyph_height_px());
    let shared = task.shared_glyph.then(|| rng.gen_range(0..task.glyphs));
    let cells = (0..task.grid * task.grid)
        .map(|_| {
            let glyph = shared.unwrap_or_else(|| rng.gen_range(0..task.glyphs));
            let color = rng.gen_range(0..task.colors);
            let dx = ((cell - gw) / 2 + rng.gen_range(0..=task.jitter_px)).min(cell - gw);
            let dy = ((cell - gh) / 2 + rng.gen_range(0..=task.jitter_px)).min(cell - gh);
            CellSpec {
                glyph,
                color,
                dx,
                dy,
            }
        })
        .collect();
    let kind = if rng.gen_bool(task.color_query_fraction) {
        QueryKind::Color
    } else {
        QueryKind::Glyph
    };
    let query = Query {
        kind,
        row: rng.gen_range(0..task.grid),
        col: rng.gen_range(0..task.grid),
    };
    let scene = SceneSpec {
        grid: task.grid,
        reference_resolution: task.reference_resolution,
        module_px: task.module_px,
        background: [0.0; 3],
        cells,
    };
    let vocab = task.vocab();
    let mut sample = Sample {
        seed,
        scene,
        query,
        tokens: TokenSequence {
            instruction: vec![
                vocab.query(kind),
                vocab.row(query.row),
                vocab.col(query.col),
            ],
            answer: Vec::new(),
        },
    };
    sample.tokens.answer = vec![sample.expected_answer(&vocab)];
    sample
}

/// Seed of the `index`-th sample of a dataset.
pub fn sample_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index);
    rng.next_u64()
}

/// `count` samples derived from `base`; generation runs in parallel when the
/// feature is enabled and the order is always by index.
pub fn generate_samples(
    task: &TaskConfig,
    model_vocab: usize,
    base: u64,
    count: usize,
) -> Result<Vec<Sample>> {
    checked(task, model_vocab)?;
    let idx: Vec<u64> = (0..count as u64).collect();
    Ok(crate::exec::map(true, idx, |i| {
        draw(sample_seed(base, i), task)
    }))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestHeader {
    generator: String,
    version: u32,
    model_vocab: usize,
    task: TaskConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    seed: u64,
    grid: usize,
    module_px: usize,
    reference_resolution: usize,
    cells: Vec<CellSpec>,
    query: Query,
    instruction: String,
    answer: String,
}

const GENERATOR: &str = "mra-synth";

pub fn manifest_string(
    task: &TaskConfig,
    model_vocab: usize,
    samples: &[Sample],
) -> Result<String> {
    let header = ManifestHeader {
        generator: GENERATOR.into(),
        version: GENERATOR_VERSION,
        model_vocab,
        task: task.clone(),
    };
    let mut out = json_line(&header)?;
    let vocab = task.vocab();
    for s in samples {
        let rec = ManifestRecord {
            seed: s.seed,
            grid: s.scene.grid,
            module_px: s.scene.module_px,
            reference_resolution: s.scene.reference_resolution,
            cells: s.scene.cells.clone(),
            query: s.query,
            instruction: s.instruction_text(&vocab),
            answer: s.answer_text(&vocab),
        };
        out.push_str(&json_line(&rec)?);
    }
    Ok(out)
}

fn json_line<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string(v).map_err(|e| Error::Manifest {
        line: 0,
        detail: e.to_string(),
    })?;
    s.push('\n');
    Ok(s)
}

pub fn write_manifest(
    path: &Path,
    task: &TaskConfig,
    model_vocab: usize,
    samples: &[Sample],
) -> Result<()> {
    crate::io::write_atomic(
        path,
        manifest_string(task, model_vocab, samples)?.as_bytes(),
    )
}

/// Reads a manifest, regenerating every sample from its seed and checking
/// that the stored fields agree.
pub fn load_manifest(path: &Path) -> Result<(TaskConfig, usize, Vec<Sample>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let bad = |line: usize, detail: String| Error::Manifest { line, detail };
    let header = lines
        .next()
        .ok_or_else(|| bad(1, "empty manifest".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: ManifestHeader =
        serde_json::from_str(&header).map_err(|e| bad(1, e.to_string()))?;
    if header.generator != GENERATOR || header.version != GENERATOR_VERSION {
        return Err(bad(
            1,
            format!(
                "generator {} v{} is not {GENERATOR} v{GENERATOR_VERSION}",
                header.generator, header.version
            ),
        ));
    }
    checked(&header.task, header.model_vocab).map_err(|e| bad(1, e.to_string()))?;
    let vocab = header.task.vocab();
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let n = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| bad(n, e.to_string()))?;
        let s = draw(rec.seed, &header.task);
        if s.scene.cells != rec.cells
            || s.query != rec.query
            || s.instruction_text(&vocab) != rec.instruction
            || s.answer_text(&vocab) != rec.answer
        {
            return Err(bad(
                n,
                format!(
                    "record does not match the scene regenerated from seed {}",
                    rec.seed
                ),
            ));
        }
        samples.push(s);
    }
    Ok((header.task, header.model_vocab, samples))
}
