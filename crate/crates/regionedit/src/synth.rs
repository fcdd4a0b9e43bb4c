//! Deterministic synthetic shape world: scene graphs, hard-edged
//! rasterization, corpus generation, and eval-only oracle edits.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::img_io;
use crate::rng::{self, Prng};
use crate::tensor::Tensor;

pub const CANVAS: usize = 64;
pub const GRID: usize = 4;
pub const CELL_PX: usize = CANVAS / GRID;
pub const GENERATOR_VERSION: &str = "shapeworld-v1";

/// Light gray background, exactly representable after 8-bit quantization.
pub const BACKGROUND: [f64; 3] = [230.0 / 255.0, 230.0 / 255.0, 230.0 / 255.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Purple,
    Orange,
    Black,
    White,
}

pub const COLORS: [Color; 8] = [
    Color::Red,
    Color::Green,
    Color::Blue,
    Color::Yellow,
    Color::Purple,
    Color::Orange,
    Color::Black,
    Color::White,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Medium,
    Large,
}

pub const SIZES: [SizeClass; 3] = [SizeClass::Small, SizeClass::Medium, SizeClass::Large];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Accessory {
    Crown,
    Collar,
}

pub const ACCESSORIES: [Accessory; 2] = [Accessory::Crown, Accessory::Collar];

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
    pub fn from_word(w: &str) -> Option<Self> {
        SHAPES.iter().copied().find(|s| s.word() == w)
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::Purple => "purple",
            Color::Orange => "orange",
            Color::Black => "black",
            Color::White => "white",
        }
    }
    pub fn from_word(w: &str) -> Option<Self> {
        COLORS.iter().copied().find(|c| c.word() == w)
    }
    /// 8-bit RGB, so rasterized pixels are exactly k/255.
    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 30, 30],
            Color::Green => [30, 160, 60],
            Color::Blue => [40, 70, 220],
            Color::Yellow => [235, 200, 30],
            Color::Purple => [140, 60, 180],
            Color::Orange => [240, 140, 30],
            Color::Black => [25, 25, 25],
            Color::White => [250, 250, 250],
        }
    }
}

impl SizeClass {
    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Medium => "medium",
            SizeClass::Large => "large",
        }
    }
    pub fn from_word(w: &str) -> Option<Self> {
        SIZES.iter().copied().find(|s| s.word() == w)
    }
    /// Half-extent in pixels; objects are centered in their grid cell.
    pub fn half_extent(self) -> f64 {
        match self {
            SizeClass::Small => 4.0,
            SizeClass::Medium => 6.0,
            SizeClass::Large => 8.0,
        }
    }
}

impl Accessory {
    pub fn word(self) -> &'static str {
        match self {
            Accessory::Crown => "crown",
            Accessory::Collar => "collar",
        }
    }
    pub fn from_word(w: &str) -> Option<Self> {
        ACCESSORIES.iter().copied().find(|a| a.word() == w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub color: Color,
    pub size: SizeClass,
    /// (row, col) on the placement grid.
    pub cell: (usize, usize),
    pub accessory: Option<Accessory>,
}

impl SceneObject {
    fn center(&self) -> (f64, f64) {
        (
            self.cell.1 as f64 * CELL_PX as f64 + CELL_PX as f64 / 2.0,
            self.cell.0 as f64 * CELL_PX as f64 + CELL_PX as f64 / 2.0,
        )
    }

    fn covers(&self, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center();
        let e = self.size.half_extent();
        match self.kind {
            ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= e * e,
            ShapeKind::Square => (px - cx).abs() <= e && (py - cy).abs() <= e,
            ShapeKind::Triangle => {
                // upward triangle: apex (cx, cy-e), base y = cy+e from cx-e to cx+e
                let t = (py - (cy - e)) / (2.0 * e);
                (0.0..=1.0).contains(&t) && (px - cx).abs() <= t * e
            }
        }
    }
}

/// The scene: object list order is caption order. Generated scenes are
/// sorted in raster order; edits append, so captions and scenes stay in
/// step after editing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneGraph {
    pub canvas: usize,
    pub objects: Vec<SceneObject>,
}

impl SceneGraph {
    pub fn empty() -> Self {
        SceneGraph {
            canvas: CANVAS,
            objects: Vec::new(),
        }
    }

    pub fn occupied(&self, cell: (usize, usize)) -> bool {
        self.objects.iter().any(|o| o.cell == cell)
    }

    pub fn free_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for r in 0..GRID {
            for c in 0..GRID {
                if !self.occupied((r, c)) {
                    cells.push((r, c));
                }
            }
        }
        cells
    }

    /// First object (caption order) matching color + shape.
    pub fn find_target(&self, color: Color, kind: ShapeKind) -> Option<usize> {
        self.objects
            .iter()
            .position(|o| o.color == color && o.kind == kind)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, o) in self.objects.iter().enumerate() {
            if o.cell.0 >= GRID || o.cell.1 >= GRID {
                return Err(Error::Contract(format!("object {i} off the grid")));
            }
            let (cx, cy) = o.center();
            let e = o.size.half_extent();
            if cx - e < 0.0
                || cy - e < 0.0
                || cx + e > self.canvas as f64
                || cy + e > self.canvas as f64
            {
                return Err(Error::Contract(format!("object {i} leaves the canvas")));
            }
            for other in &self.objects[..i] {
                if other.cell == o.cell {
                    return Err(Error::Contract(format!("object {i} shares a cell")));
                }
            }
        }
        Ok(())
    }
}

/// One object-level change, shared by the instruction grammar and the
/// oracle-edit generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EditOp {
    Add {
        size: SizeClass,
        color: Color,
        kind: ShapeKind,
        accessory: Option<Accessory>,
    },
    Remove {
        color: Color,
        kind: ShapeKind,
    },
    ChangeColor {
        color: Color,
        kind: ShapeKind,
        new_color: Color,
    },
    GiveAccessory {
        color: Color,
        kind: ShapeKind,
        accessory: Accessory,
    },
}

/// Coarse taxonomy used by `make_oracle_edit`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleOpKind {
    Add,
    Remove,
    Change,
}

/// Apply an edit to the scene. Adds land in the first free cell in
/// raster order and append to the object list.
pub fn apply_edit(scene: &SceneGraph, op: &EditOp) -> Result<SceneGraph> {
    let mut edited = scene.clone();
    match op {
        EditOp::Add {
            size,
            color,
            kind,
            accessory,
        } => {
            let cell = *scene
                .free_cells()
                .first()
                .ok_or_else(|| Error::InfeasibleEdit("add: no free grid cell".into()))?;
            edited.objects.push(SceneObject {
                kind: *kind,
                color: *color,
                size: *size,
                cell,
                accessory: *accessory,
            });
        }
        EditOp::Remove { color, kind } => {
            let i = scene.find_target(*color, *kind).ok_or_else(|| {
                Error::UnresolvedTarget(format!("no {} {} in scene", color.word(), kind.word()))
            })?;
            edited.objects.remove(i);
        }
        EditOp::ChangeColor {
            color,
            kind,
            new_color,
        } => {
            let i = scene.find_target(*color, *kind).ok_or_else(|| {
                Error::UnresolvedTarget(format!("no {} {} in scene", color.word(), kind.word()))
            })?;
            if new_color == color {
                return Err(Error::InfeasibleEdit("change to the same color".into()));
            }
            edited.objects[i].color = *new_color;
        }
        EditOp::GiveAccessory {
            color,
            kind,
            accessory,
        } => {
            let i = scene.find_target(*color, *kind).ok_or_else(|| {
                Error::UnresolvedTarget(format!("no {} {} in scene", color.word(), kind.word()))
            })?;
            if scene.objects[i].accessory == Some(*accessory) {
                return Err(Error::InfeasibleEdit(format!(
                    "target already has a {}",
                    accessory.word()
                )));
            }
            edited.objects[i].accessory = Some(*accessory);
        }
    }
    Ok(edited)
}

// ---- rasterization ----

const CROWN_RGB: [u8; 3] = [250, 215, 50];
const COLLAR_RGB: [u8; 3] = [60, 40, 20];

fn put(pix: &mut [f64], x: usize, y: usize, rgb: [u8; 3]) {
    let p = (y * CANVAS + x) * 3;
    for c in 0..3 {
        pix[p + c] = rgb[c] as f64 / 255.0;
    }
}

/// Hard-edged rasterization onto the fixed light-gray background.
pub fn rasterize(scene: &SceneGraph) -> Tensor {
    let mut pix = Vec::with_capacity(CANVAS * CANVAS * 3);
    for _ in 0..CANVAS * CANVAS {
        pix.extend_from_slice(&BACKGROUND);
    }
    for o in &scene.objects {
        let (cx, cy) = o.center();
        let e = o.size.half_extent();
        let x0 = (cx - e).floor().max(0.0) as usize;
        let x1 = ((cx + e).ceil() as usize).min(CANVAS);
        let y0 = (cy - e).floor().max(0.0) as usize;
        let y1 = ((cy + e).ceil() as usize).min(CANVAS);
        for y in y0..y1 {
            for x in x0..x1 {
                if o.covers(x as f64 + 0.5, y as f64 + 0.5) {
                    put(&mut pix, x, y, o.color.rgb());
                }
            }
        }
        match o.accessory {
            Some(Accessory::Crown) => {
                // three 2x2 studs sitting on top of the shape's bounding box
                let top = (cy - e) as usize;
                for k in 0..3 {
                    let sx = (cx as isize - 4 + 3 * k) as usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let (x, y) = (sx + dx, top.saturating_sub(2) + dy);
                            if x < CANVAS && y < CANVAS {
                                put(&mut pix, x, y, CROWN_RGB);
                            }
                        }
                    }
                }
            }
            Some(Accessory::Collar) => {
                // a 2-px band through the lower third of the shape
                let band_y = (cy + e * 0.4) as usize;
                for y in band_y..(band_y + 2).min(CANVAS) {
                    for x in (cx - e) as usize..((cx + e) as usize).min(CANVAS) {
                        if o.covers(x as f64 + 0.5, y as f64 + 0.5) {
                            put(&mut pix, x, y, COLLAR_RGB);
                        }
                    }
                }
            }
            None => {}
        }
    }
    Tensor::new(vec![CANVAS, CANVAS, 3], pix).expect("raster buffer sized to canvas")
}

// ---- corpus ----

#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: u64,
    pub scene: SceneGraph,
    pub pixels: Tensor,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn sample_scene(rng: &mut Prng) -> SceneGraph {
    let n = rng.gen_range(1..=3usize);
    let mut cells: Vec<(usize, usize)> = (0..GRID * GRID).map(|i| (i / GRID, i % GRID)).collect();
    cells.shuffle(rng);
    let mut objects: Vec<SceneObject> = (0..n)
        .map(|i| SceneObject {
            kind: SHAPES[rng.gen_range(0..SHAPES.len())],
            color: COLORS[rng.gen_range(0..COLORS.len())],
            size: SIZES[rng.gen_range(0..SIZES.len())],
            cell: cells[i],
            accessory: match rng.gen_range(0..10) {
                0 | 1 => Some(Accessory::Crown),
                2 | 3 => Some(Accessory::Collar),
                _ => None,
            },
        })
        .collect();
    objects.sort_by_key(|o| o.cell);
    SceneGraph {
        canvas: CANVAS,
        objects,
    }
}

pub fn generate_sample(id: u64) -> ImageSample {
    let mut rng = rng::seeded(splitmix64(id ^ fnv(GENERATOR_VERSION)));
    let scene = sample_scene(&mut rng);
    let pixels = rasterize(&scene);
    ImageSample { id, scene, pixels }
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Deterministic corpus; ids are a bijective mix of (seed, index), so they
/// never collide within one seed.
pub fn generate_corpus(count: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if count == 0 {
        return Err(Error::Contract("generate_corpus: count must be >= 1".into()));
    }
    Ok((0..count as u64)
        .map(|i| generate_sample(splitmix64(seed.wrapping_mul(0x2545f4914f6cdd1d).wrapping_add(i))))
        .collect())
}

// ---- oracle edits ----

#[derive(Debug, Clone)]
pub struct OracleEdit {
    pub op: EditOp,
    pub edited_scene: SceneGraph,
    /// {0,1} mask over pixels, `[h, w]`.
    pub mask: Tensor,
    pub edited_pixels: Tensor,
}

/// Pixels that differ between the two rasters, dilated by 1 px
/// (8-neighborhood) to absorb boundary ambiguity.
pub fn diff_mask(a: &Tensor, b: &Tensor) -> Tensor {
    let (h, w) = (a.shape()[0], a.shape()[1]);
    let mut raw = vec![false; h * w];
    for p in 0..h * w {
        if (0..3).any(|c| a.data()[p * 3 + c] != b.data()[p * 3 + c]) {
            raw[p] = true;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            'probe: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (yy, xx) = (y as isize + dy, x as isize + dx);
                    if yy >= 0
                        && xx >= 0
                        && (yy as usize) < h
                        && (xx as usize) < w
                        && raw[yy as usize * w + xx as usize]
                    {
                        out[y * w + x] = 1.0;
                        break 'probe;
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w], out).expect("mask buffer sized to image")
}

pub fn oracle_from_edit(sample: &ImageSample, op: EditOp) -> Result<OracleEdit> {
    let edited_scene = apply_edit(&sample.scene, &op)?;
    let edited_pixels = rasterize(&edited_scene);
    let mask = diff_mask(&sample.pixels, &edited_pixels);
    Ok(OracleEdit {
        op,
        edited_scene,
        mask,
        edited_pixels,
    })
}

/// Sample a feasible edit of the given kind, deterministically from the
/// sample id.
pub fn make_oracle_edit(sample: &ImageSample, kind: OracleOpKind) -> Result<OracleEdit> {
    let mut rng = rng::substream(sample.id, "oracle-edit");
    let op = sample_edit_op(&sample.scene, Some(kind), &mut rng)?;
    oracle_from_edit(sample, op)
}

/// Draw a feasible edit; `kind` restricts the taxonomy when given.
pub fn sample_edit_op(
    scene: &SceneGraph,
    kind: Option<OracleOpKind>,
    rng: &mut Prng,
) -> Result<EditOp> {
    let pick_target = |rng: &mut Prng| -> Option<&SceneObject> {
        // targets are addressed by (color, shape); only unambiguous-first
        // semantics are used downstream, so any object works
        scene.objects.as_slice().choose(rng)
    };
    let choices: Vec<u8> = match kind {
        Some(OracleOpKind::Add) => vec![0],
        Some(OracleOpKind::Remove) => vec![1],
        Some(OracleOpKind::Change) => vec![2, 3],
        None => vec![0, 1, 2, 3],
    };
    for _ in 0..64 {
        match choices[rng.gen_range(0..choices.len())] {
            0 => {
                if scene.free_cells().is_empty() {
                    continue;
                }
                let accessory = match rng.gen_range(0..6) {
                    0 => Some(Accessory::Crown),
                    1 => Some(Accessory::Collar),
                    _ => None,
                };
                return Ok(EditOp::Add {
                    size: SIZES[rng.gen_range(0..SIZES.len())],
                    color: COLORS[rng.gen_range(0..COLORS.len())],
                    kind: SHAPES[rng.gen_range(0..SHAPES.len())],
                    accessory,
                });
            }
            1 => {
                if let Some(o) = pick_target(rng) {
                    return Ok(EditOp::Remove {
                        color: o.color,
                        kind: o.kind,
                    });
                }
            }
            2 => {
                if let Some(o) = pick_target(rng) {
                    let others: Vec<Color> =
                        COLORS.iter().copied().filter(|c| *c != o.color).collect();
                    return Ok(EditOp::ChangeColor {
                        color: o.color,
                        kind: o.kind,
                        new_color: others[rng.gen_range(0..others.len())],
                    });
                }
            }
            _ => {
                if let Some(o) = pick_target(rng) {
                    let acc = ACCESSORIES[rng.gen_range(0..ACCESSORIES.len())];
                    if o.accessory != Some(acc) {
                        let (color, kind) = (o.color, o.kind);
                        // first (color, shape) match must be this object,
                        // otherwise the edit lands elsewhere
                        if scene.find_target(color, kind)
                            == scene.objects.iter().position(|x| x == o)
                        {
                            return Ok(EditOp::GiveAccessory {
                                color,
                                kind,
                                accessory: acc,
                            });
                        }
                    }
                }
            }
        }
    }
    Err(Error::InfeasibleEdit(
        "no feasible edit for this scene".into(),
    ))
}

// ---- scene (de)serialization ----

impl fmt::Display for SceneObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "shape={};color={};size={};cell={},{};acc={}",
            self.kind.word(),
            self.color.word(),
            self.size.word(),
            self.cell.0,
            self.cell.1,
            self.accessory.map_or("none", |a| a.word()),
        )
    }
}

pub fn scene_to_string(scene: &SceneGraph) -> String {
    if scene.objects.is_empty() {
        return "empty".to_string();
    }
    scene
        .objects
        .iter()
        .map(|o| o.to_string())
        .collect::<Vec<_>>()
        .join("|")
}

pub fn scene_from_string(s: &str) -> Result<SceneGraph> {
    if s == "empty" {
        return Ok(SceneGraph::empty());
    }
    let mut objects = Vec::new();
    for part in s.split('|') {
        let mut kind = None;
        let mut color = None;
        let mut size = None;
        let mut cell = None;
        let mut acc: Option<Accessory> = None;
        for field in part.split(';') {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("bad scene field `{field}`")))?;
            match k {
                "shape" => kind = ShapeKind::from_word(v),
                "color" => color = Color::from_word(v),
                "size" => size = SizeClass::from_word(v),
                "cell" => {
                    let (r, c) = v
                        .split_once(',')
                        .ok_or_else(|| Error::Data(format!("bad cell `{v}`")))?;
                    cell = Some((
                        r.parse().map_err(|_| Error::Data(format!("bad cell `{v}`")))?,
                        c.parse().map_err(|_| Error::Data(format!("bad cell `{v}`")))?,
                    ));
                }
                "acc" => {
                    acc = if v == "none" {
                        None
                    } else {
                        Some(
                            Accessory::from_word(v)
                                .ok_or_else(|| Error::Data(format!("bad accessory `{v}`")))?,
                        )
                    }
                }
                _ => return Err(Error::Data(format!("unknown scene field `{k}`"))),
            }
        }
        objects.push(SceneObject {
            kind: kind.ok_or_else(|| Error::Data("missing shape".into()))?,
            color: color.ok_or_else(|| Error::Data("missing color".into()))?,
            size: size.ok_or_else(|| Error::Data("missing size".into()))?,
            cell: cell.ok_or_else(|| Error::Data("missing cell".into()))?,
            accessory: acc,
        });
    }
    Ok(SceneGraph {
        canvas: CANVAS,
        objects,
    })
}

// ---- on-disk corpus ----

pub fn save_corpus(dir: &Path, samples: &[ImageSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut idx = String::new();
    for s in samples {
        idx.push_str(&format!("{} {}\n", s.id, scene_to_string(&s.scene)));
        img_io::write_ppm(&dir.join(format!("{}.ppm", s.id)), &s.pixels)?;
    }
    fs::write(dir.join("corpus.idx"), idx)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Vec<ImageSample>> {
    let idx = fs::read_to_string(dir.join("corpus.idx"))
        .map_err(|_| Error::Data(format!("missing corpus.idx in {}", dir.display())))?;
    let mut samples = Vec::new();
    for line in idx.lines() {
        let (id, scene) = line
            .split_once(' ')
            .ok_or_else(|| Error::Data(format!("bad index line `{line}`")))?;
        let id: u64 = id
            .parse()
            .map_err(|_| Error::Data(format!("bad id `{id}`")))?;
        let scene = scene_from_string(scene)?;
        let pixels = img_io::read_ppm(&dir.join(format!("{id}.ppm")))?;
        samples.push(ImageSample { id, scene, pixels });
    }
    Ok(samples)
}
