//! Shapes-world corpus: scenes, rendering, grammar captions, the
//! pseudo-initial caption corruptor, and the line-delimited dataset file.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const IMAGE_SIZE: usize = 32;
pub const GRID: usize = 4;
pub const CELL_PX: usize = IMAGE_SIZE / GRID;
pub const SMALL_PX: usize = 4;
pub const LARGE_PX: usize = 7;
pub const MAX_OBJECTS: usize = 4;
pub const PSEUDO_PER_CAPTION: usize = 3;
/// Probabilities of 0, 1, 2 and 3 edits per pseudo-initial caption.
pub const EDIT_WEIGHTS: [f64; 4] = [0.15, 0.4, 0.3, 0.15];

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate scene id {id}")]
    DuplicateId { line: usize, id: u64 },
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];
    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [0.9, 0.1, 0.1],
            Color::Green => [0.1, 0.7, 0.1],
            Color::Blue => [0.1, 0.2, 0.9],
            Color::Yellow => [0.95, 0.85, 0.1],
        }
    }
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];
    pub fn word(self) -> &'static str {
        match self {
            Size::Small => "small",
            Size::Large => "large",
        }
    }
    pub fn pixels(self) -> usize {
        match self {
            Size::Small => SMALL_PX,
            Size::Large => LARGE_PX,
        }
    }
}

/// Spatial relation of the first object relative to the second.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn word(self) -> &'static str {
        match self {
            Relation::LeftOf => "left-of",
            Relation::RightOf => "right-of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Dominant-axis relation of `a` to `b`; horizontal wins ties.
    pub fn between(a: u8, b: u8) -> Relation {
        let (ar, ac) = ((a as i32) / GRID as i32, (a as i32) % GRID as i32);
        let (br, bc) = ((b as i32) / GRID as i32, (b as i32) % GRID as i32);
        let (dr, dc) = (br - ar, bc - ac);
        if dc != 0 && dc.abs() >= dr.abs() {
            if dc > 0 {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        } else if dr > 0 {
            Relation::Above
        } else {
            Relation::Below
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    /// Raster index on the 4×4 grid.
    pub cell: u8,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<Object>,
    pub id: u64,
}

impl Scene {
    /// Checks object count, cell range, distinct cells and raster order.
    pub fn validate(&self) -> Result<(), String> {
        if self.objects.is_empty() || self.objects.len() > MAX_OBJECTS {
            return Err(format!("scene {} has {} objects", self.id, self.objects.len()));
        }
        for w in self.objects.windows(2) {
            if w[0].cell >= w[1].cell {
                return Err(format!("scene {} objects not in raster order with distinct cells", self.id));
            }
        }
        if self.objects.iter().any(|o| o.cell as usize >= GRID * GRID) {
            return Err(format!("scene {} has a cell outside the grid", self.id));
        }
        Ok(())
    }
}

/// Samples a scene: 1–4 objects, uniform attributes, distinct cells.
pub fn gen_scene(id: u64, seed: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(1..=MAX_OBJECTS);
    let mut cells: Vec<u8> = sample(&mut rng, GRID * GRID, count).into_iter().map(|c| c as u8).collect();
    cells.sort_unstable();
    let objects = cells
        .into_iter()
        .map(|cell| Object {
            shape: Shape::ALL[rng.gen_range(0..Shape::ALL.len())],
            color: Color::ALL[rng.gen_range(0..Color::ALL.len())],
            size: Size::ALL[rng.gen_range(0..Size::ALL.len())],
            cell,
        })
        .collect();
    Scene { objects, id }
}

/// `IMAGE_SIZE × IMAGE_SIZE × 3` image, channel-last, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn blank() -> Self {
        Self { pixels: vec![1.0; IMAGE_SIZE * IMAGE_SIZE * 3] }
    }

    pub fn from_pixels(pixels: Vec<f32>) -> Result<Self, DataError> {
        if pixels.len() != IMAGE_SIZE * IMAGE_SIZE * 3 {
            return Err(DataError::InvalidImage(format!(
                "expected {} values, got {}",
                IMAGE_SIZE * IMAGE_SIZE * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(DataError::InvalidImage("pixel outside [0, 1]".into()));
        }
        Ok(Self { pixels })
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * IMAGE_SIZE + x) * 3 + c]
    }

    fn set(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * IMAGE_SIZE + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

fn glyph_covers(shape: Shape, s: usize, x: usize, y: usize) -> bool {
    let half = s as f32 / 2.0;
    let cx = x as f32 + 0.5 - half;
    let cy = y as f32 + 0.5 - half;
    match shape {
        Shape::Square => true,
        Shape::Circle => cx * cx + cy * cy <= half * half,
        Shape::Triangle => cx.abs() <= (y as f32 + 0.5) / 2.0 * (2.0 * half / s as f32),
    }
}

/// Rasterizes each object inside its own grid cell on a white background.
pub fn render(scene: &Scene) -> Image {
    let mut img = Image::blank();
    for o in &scene.objects {
        let (row, col) = (o.cell as usize / GRID, o.cell as usize % GRID);
        let s = o.size.pixels();
        let off = (CELL_PX - s) / 2;
        for y in 0..s {
            for x in 0..s {
                if glyph_covers(o.shape, s, x, y) {
                    img.set(row * CELL_PX + off + y, col * CELL_PX + off + x, o.color.rgb());
                }
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Tag {
    Entity,
    Attribute,
    Relation,
    /// Supported by the tag set, never produced by the shapes grammar.
    Action,
    None,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaggedCaption {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
}

impl TaggedCaption {
    pub fn new(pairs: &[(&str, Tag)]) -> Self {
        Self {
            tokens: pairs.iter().map(|(w, _)| w.to_string()).collect(),
            tags: pairs.iter().map(|(_, t)| *t).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

impl fmt::Display for TaggedCaption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text())
    }
}

/// Grammar caption: `a <size> <color> <shape>` per object in raster order;
/// the first two objects are joined by their relation, later ones by "and".
pub fn caption_of(scene: &Scene) -> TaggedCaption {
    let mut pairs: Vec<(&str, Tag)> = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        if i == 1 {
            let rel = Relation::between(scene.objects[0].cell, o.cell);
            pairs.push((rel.word(), Tag::Relation));
        } else if i > 1 {
            pairs.push(("and", Tag::None));
        }
        pairs.push(("a", Tag::None));
        pairs.push((o.size.word(), Tag::Attribute));
        pairs.push((o.color.word(), Tag::Attribute));
        pairs.push((o.shape.word(), Tag::Entity));
    }
    TaggedCaption::new(&pairs)
}

/// Longest grammar caption (four objects).
pub const MAX_CAPTION_TOKENS: usize = 4 * 4 + 1 + 2;

/// Interchangeable words for each slot class. Substitutions stay inside a
/// class so that a corrupted caption keeps its grammatical shape.
#[derive(Clone, Debug)]
pub struct Lexicon {
    classes: Vec<Vec<String>>,
}

impl Lexicon {
    pub fn new(classes: &[&[&str]]) -> Self {
        Self { classes: classes.iter().map(|c| c.iter().map(|w| w.to_string()).collect()).collect() }
    }

    pub fn shapes_world() -> Self {
        let sizes: Vec<&str> = Size::ALL.iter().map(|s| s.word()).collect();
        let colors: Vec<&str> = Color::ALL.iter().map(|c| c.word()).collect();
        let shapes: Vec<&str> = Shape::ALL.iter().map(|s| s.word()).collect();
        let rels: Vec<&str> = Relation::ALL.iter().map(|r| r.word()).collect();
        Self::new(&[&sizes, &colors, &shapes, &rels])
    }

    pub fn class_of(&self, word: &str) -> Option<&[String]> {
        self.classes.iter().find(|c| c.iter().any(|w| w == word)).map(|c| c.as_slice())
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().flatten().map(|s| s.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoInitial {
    pub tokens: Vec<String>,
    pub tags: Vec<Tag>,
    pub edit_positions: Vec<usize>,
    pub categories: Vec<Tag>,
}

impl PseudoInitial {
    pub fn caption(&self) -> TaggedCaption {
        TaggedCaption { tokens: self.tokens.clone(), tags: self.tags.clone() }
    }
    pub fn edit_count(&self) -> usize {
        self.edit_positions.len()
    }
}

/// A ground-truth caption with one lightly corrupted copy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RefinementTriple {
    pub scene_id: u64,
    pub truth: TaggedCaption,
    pub pseudo: TaggedCaption,
    /// Positions where `pseudo` differs from `truth`, ascending.
    pub edit_positions: Vec<usize>,
    pub categories: Vec<Tag>,
}

impl RefinementTriple {
    pub fn edit_count(&self) -> usize {
        self.edit_positions.len()
    }

    pub fn pseudo_initial(&self) -> PseudoInitial {
        PseudoInitial {
            tokens: self.pseudo.tokens.clone(),
            tags: self.pseudo.tags.clone(),
            edit_positions: self.edit_positions.clone(),
            categories: self.categories.clone(),
        }
    }
}

fn draw_edit_count(rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (e, w) in EDIT_WEIGHTS.iter().enumerate() {
        acc += w;
        if u < acc {
            return e;
        }
    }
    EDIT_WEIGHTS.len() - 1
}

/// Substitutes 0–3 tagged slots with a different word of the same class.
/// The edit count is clamped to the number of substitutable slots.
pub fn corrupt(caption: &TaggedCaption, scene_id: u64, seed: u64, lexicon: &Lexicon) -> RefinementTriple {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let drawn = draw_edit_count(&mut rng);
    corrupt_n(caption, scene_id, drawn, &mut rng, lexicon)
}

/// Corrupts exactly `min(edits, substitutable slots)` positions.
pub fn corrupt_n(
    caption: &TaggedCaption,
    scene_id: u64,
    edits: usize,
    rng: &mut ChaCha8Rng,
    lexicon: &Lexicon,
) -> RefinementTriple {
    let slots: Vec<usize> = (0..caption.len())
        .filter(|&i| {
            caption.tags[i] != Tag::None
                && lexicon.class_of(&caption.tokens[i]).is_some_and(|c| c.len() > 1)
        })
        .collect();
    let e = edits.min(slots.len());
    let mut chosen: Vec<usize> = sample(rng, slots.len(), e).into_iter().map(|i| slots[i]).collect();
    chosen.sort_unstable();
    let mut pseudo = caption.clone();
    for &pos in &chosen {
        let class = lexicon.class_of(&caption.tokens[pos]).expect("slot has a class");
        let alternatives: Vec<&String> = class.iter().filter(|w| **w != caption.tokens[pos]).collect();
        pseudo.tokens[pos] = alternatives[rng.gen_range(0..alternatives.len())].clone();
    }
    RefinementTriple {
        scene_id,
        categories: chosen.iter().map(|&p| caption.tags[p]).collect(),
        truth: caption.clone(),
        pseudo,
        edit_positions: chosen,
    }
}

/// Positions where two equal-length token sequences differ.
pub fn diff_positions(a: &[String], b: &[String]) -> Vec<usize> {
    a.iter().zip(b).enumerate().filter(|(_, (x, y))| x != y).map(|(i, _)| i).collect()
}

/// SplitMix64 step; derives per-record and per-corruption seeds.
pub fn mix_seed(base: u64, salt: u64) -> u64 {
    let mut z = base.wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub scene: Scene,
    pub caption: TaggedCaption,
    pub pseudo_initials: Vec<PseudoInitial>,
    pub seed: u64,
}

impl DatasetRecord {
    /// Builds the record for scene `id` from its seed alone.
    pub fn generate(id: u64, seed: u64, lexicon: &Lexicon) -> Self {
        let scene = gen_scene(id, seed);
        let caption = caption_of(&scene);
        let pseudo_initials = (0..PSEUDO_PER_CAPTION as u64)
            .map(|k| corrupt(&caption, id, mix_seed(seed, k + 1), lexicon).pseudo_initial())
            .collect();
        Self { scene, caption, pseudo_initials, seed }
    }

    pub fn triples(&self) -> impl Iterator<Item = RefinementTriple> + '_ {
        self.pseudo_initials.iter().map(|p| RefinementTriple {
            scene_id: self.scene.id,
            truth: self.caption.clone(),
            pseudo: p.caption(),
            edit_positions: p.edit_positions.clone(),
            categories: p.categories.clone(),
        })
    }

    pub fn image(&self) -> Image {
        render(&self.scene)
    }

    fn validate(&self) -> Result<(), String> {
        self.scene.validate()?;
        if self.pseudo_initials.len() != PSEUDO_PER_CAPTION {
            return Err(format!("expected {PSEUDO_PER_CAPTION} pseudo-initials, found {}", self.pseudo_initials.len()));
        }
        if self.caption != caption_of(&self.scene) {
            return Err("caption does not match scene".into());
        }
        for p in &self.pseudo_initials {
            if p.tokens.len() != self.caption.len() || p.tags.len() != p.tokens.len() {
                return Err("pseudo-initial length differs from caption".into());
            }
            if diff_positions(&p.tokens, &self.caption.tokens) != p.edit_positions {
                return Err("edit positions disagree with token diff".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetFile {
    pub records: Vec<DatasetRecord>,
}

impl DatasetFile {
    /// `count` records with ids `start_id..`, each seeded from `base_seed`.
    pub fn generate(count: usize, start_id: u64, base_seed: u64) -> Self {
        let lexicon = Lexicon::shapes_world();
        let records = (0..count as u64)
            .map(|i| {
                let id = start_id + i;
                DatasetRecord::generate(id, mix_seed(base_seed, id), &lexicon)
            })
            .collect();
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(self.to_jsonl().as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Self, DataError> {
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in reader.lines().enumerate() {
            let line_no = i + 1;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetRecord = serde_json::from_str(&line)
                .map_err(|e| DataError::Malformed { line: line_no, message: e.to_string() })?;
            rec.validate().map_err(|message| DataError::Malformed { line: line_no, message })?;
            if !seen.insert(rec.scene.id) {
                return Err(DataError::DuplicateId { line: line_no, id: rec.scene.id });
            }
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        Self::parse(BufReader::new(File::open(path)?))
    }
}
