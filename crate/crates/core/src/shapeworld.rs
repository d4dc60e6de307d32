//! Procedural scene generator: 32x32 scenes of flat-colored geometric
//! objects on muted backgrounds, bounding-box masks around a designated
//! target object, and object-centric outline sketches on a 64x64 canvas.
//! No anti-aliasing anywhere, so palette-codec round trips are exact on
//! rendered content.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{SketchImage, SKETCH_SIZE};
use crate::netpbm::{GrayImage, RgbImage};
use crate::substrate::{stream_hash, Rng};

pub const IMG_SIZE: usize = 32;

/// Saturated fill colors. The scene's background id picks the paired fill,
/// so the object color is always inferable from visible context.
pub const OBJECT_COLORS: [[u8; 3]; 12] = [
    [220, 40, 40],
    [240, 140, 20],
    [230, 220, 40],
    [40, 180, 60],
    [20, 190, 170],
    [60, 200, 230],
    [40, 90, 220],
    [130, 60, 200],
    [220, 60, 200],
    [250, 150, 180],
    [150, 90, 40],
    [245, 245, 245],
];

/// Muted, dark backgrounds, disjoint from the fill palette.
pub const BACKGROUNDS: [[u8; 3]; 12] = [
    [40, 40, 40],
    [70, 80, 90],
    [25, 35, 70],
    [30, 60, 35],
    [70, 30, 35],
    [80, 80, 30],
    [45, 55, 80],
    [25, 70, 70],
    [70, 40, 75],
    [60, 45, 30],
    [100, 105, 115],
    [10, 10, 10],
];

const STREAM_SCENE: u64 = 0x7363656e; // "scen"
const STREAM_JITTER: u64 = 0x6a697474; // "jitt"
const PLACEMENT_RETRIES: usize = 100;
/// Pairwise gap between object bounding boxes; keeps every mask and its
/// one-pixel border ring free of other objects.
const PLACEMENT_GAP: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
}

impl ShapeClass {
    pub fn from_index(i: u64) -> Self {
        match i % 3 {
            0 => ShapeClass::Circle,
            1 => ShapeClass::Square,
            _ => ShapeClass::Triangle,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub class: ShapeClass,
    pub cx: i32,
    pub cy: i32,
    /// Half-extent in pixels (circle radius / square half-side / triangle
    /// half-height).
    pub size: i32,
    /// Degrees; squares and circles stay at 0, triangles rotate in
    /// quarter turns (the silhouette probe relies on axis-aligned fill
    /// ratios).
    pub rotation: i32,
    pub color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub background_id: u8,
    pub objects: Vec<ObjectSpec>,
    pub target: usize,
}

impl SceneSpec {
    pub fn background(&self) -> [u8; 3] {
        BACKGROUNDS[self.background_id as usize]
    }

    pub fn target_object(&self) -> &ObjectSpec {
        &self.objects[self.target]
    }
}

/// One dataset example: scene image, target bounding-box mask (dilated one
/// pixel), and the target's outline sketch.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: RgbImage,
    pub mask: GrayImage,
    pub sketch: SketchImage,
    pub meta: SceneSpec,
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl Rect {
    pub fn expand(&self, by: i32) -> Rect {
        Rect {
            x0: self.x0 - by,
            y0: self.y0 - by,
            x1: self.x1 + by,
            y1: self.y1 + by,
        }
    }

    pub fn clamp_to_canvas(&self) -> Rect {
        Rect {
            x0: self.x0.max(0),
            y0: self.y0.max(0),
            x1: self.x1.min(IMG_SIZE as i32 - 1),
            y1: self.y1.min(IMG_SIZE as i32 - 1),
        }
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.x0 <= other.x1 && other.x0 <= self.x1 && self.y0 <= other.y1 && other.y0 <= self.y1
    }

    pub fn width(&self) -> i32 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> i32 {
        self.y1 - self.y0 + 1
    }
}

/// Shape membership test in doubled coordinates: `(x2, y2)` is the query
/// point scaled by 2, so integer arithmetic covers both the 32x32 render
/// (even coordinates) and the 2x sketch canvas.
fn contains_scaled(obj: &ObjectSpec, x2: i32, y2: i32) -> bool {
    let dx = x2 - 2 * obj.cx;
    let dy = y2 - 2 * obj.cy;
    let s2 = 2 * obj.size;
    match obj.class {
        ShapeClass::Circle => dx * dx + dy * dy <= s2 * s2,
        ShapeClass::Square => dx.abs() <= s2 && dy.abs() <= s2,
        ShapeClass::Triangle => {
            // Inverse-rotate the query point by quarter turns, then test the
            // apex-up triangle: |dx| <= (dy + h) / 2 for dy in [-h, h].
            let (rx, ry) = match obj.rotation.rem_euclid(360) {
                0 => (dx, dy),
                90 => (-dy, dx),
                180 => (-dx, -dy),
                270 => (dy, -dx),
                _ => (dx, dy),
            };
            ry >= -s2 && ry <= s2 && 2 * rx.abs() <= ry + s2
        }
    }
}

fn contains(obj: &ObjectSpec, x: i32, y: i32) -> bool {
    contains_scaled(obj, 2 * x, 2 * y)
}

/// Tight bounding box of the rasterized object.
pub fn object_bbox(obj: &ObjectSpec) -> Rect {
    let reach = obj.size + 1;
    let mut r = Rect {
        x0: i32::MAX,
        y0: i32::MAX,
        x1: i32::MIN,
        y1: i32::MIN,
    };
    for y in (obj.cy - reach)..=(obj.cy + reach) {
        for x in (obj.cx - reach)..=(obj.cx + reach) {
            if contains(obj, x, y) {
                r.x0 = r.x0.min(x);
                r.y0 = r.y0.min(y);
                r.x1 = r.x1.max(x);
                r.y1 = r.y1.max(y);
            }
        }
    }
    r
}

/// The inpainting mask rectangle: target bbox dilated one pixel.
pub fn mask_rect(spec: &SceneSpec) -> Rect {
    object_bbox(spec.target_object()).expand(1).clamp_to_canvas()
}

fn size_range(class: ShapeClass, is_target: bool) -> (i64, i64) {
    if is_target {
        match class {
            ShapeClass::Circle => (6, 8),
            ShapeClass::Square => (5, 7),
            ShapeClass::Triangle => (6, 8),
        }
    } else {
        (3, 4)
    }
}

/// Deterministic scene synthesis. Shape classes, sizes, positions, and the
/// background id come from documented uniform ranges; the fill color is the
/// background's paired entry in `OBJECT_COLORS`. Placement rejection keeps
/// object boxes pairwise separated; after bounded retries the object count
/// is relaxed.
pub fn gen_scene(seed: u64) -> SceneSpec {
    let mut rng = Rng::new(seed, STREAM_SCENE);
    let background_id = rng.below(12) as u8;
    let color = OBJECT_COLORS[background_id as usize];
    let mut n = 1 + rng.below(3) as usize;
    let mut target = rng.below(n as u64) as usize;

    // Classes and sizes are fixed up front; retries only move objects, so
    // class frequencies stay uniform under relaxation.
    let mut classes = Vec::with_capacity(n);
    let mut sizes = Vec::with_capacity(n);
    for i in 0..n {
        let class = ShapeClass::from_index(rng.below(3));
        let (lo, hi) = size_range(class, i == target);
        classes.push(class);
        sizes.push(rng.range_i64(lo, hi) as i32);
    }

    loop {
        'attempt: for _ in 0..PLACEMENT_RETRIES {
            let mut objects: Vec<ObjectSpec> = Vec::with_capacity(n);
            for i in 0..n {
                let size = sizes[i];
                // One-pixel margin beyond the dilated mask keeps every mask
                // and border ring inside the canvas.
                let lo = (size + 2) as i64;
                let hi = (IMG_SIZE as i64 - 1) - lo;
                let rotation = match classes[i] {
                    ShapeClass::Triangle => 90 * rng.below(4) as i32,
                    _ => 0,
                };
                objects.push(ObjectSpec {
                    class: classes[i],
                    cx: rng.range_i64(lo, hi) as i32,
                    cy: rng.range_i64(lo, hi) as i32,
                    size,
                    rotation,
                    color,
                });
            }
            let boxes: Vec<Rect> = objects.iter().map(object_bbox).collect();
            for i in 0..n {
                for j in (i + 1)..n {
                    if boxes[i].expand(PLACEMENT_GAP).intersects(&boxes[j]) {
                        continue 'attempt;
                    }
                }
            }
            return SceneSpec {
                seed,
                background_id,
                objects,
                target,
            };
        }
        // Relax: drop the last object and retry.
        n -= 1;
        classes.truncate(n);
        sizes.truncate(n);
        if target >= n {
            target = n - 1;
            // The relaxed target needs a target-sized shape.
            let (lo, hi) = size_range(classes[target], true);
            sizes[target] = ((lo + hi) / 2) as i32;
        }
    }
}

/// Painter's-order rasterization, no anti-aliasing.
pub fn render(spec: &SceneSpec) -> RgbImage {
    let mut img = RgbImage::filled(IMG_SIZE, IMG_SIZE, spec.background());
    for obj in &spec.objects {
        for y in 0..IMG_SIZE as i32 {
            for x in 0..IMG_SIZE as i32 {
                if contains(obj, x, y) {
                    img.set(x as usize, y as usize, obj.color);
                }
            }
        }
    }
    img
}

/// Binary mask image for the target's dilated bounding box.
pub fn render_mask(spec: &SceneSpec) -> GrayImage {
    let rect = mask_rect(spec);
    let mut mask = GrayImage::filled(IMG_SIZE, IMG_SIZE, 0);
    for y in rect.y0..=rect.y1 {
        for x in rect.x0..=rect.x1 {
            mask.set(x as usize, y as usize, 255);
        }
    }
    mask
}

/// Canvas placement shared by sketches and edge maps: image pixel (x, y)
/// maps to doubled coordinates centered on the mask rectangle.
struct CanvasMap {
    dcx: i32,
    dcy: i32,
}

impl CanvasMap {
    fn new(rect: &Rect) -> Self {
        CanvasMap {
            dcx: rect.x0 + rect.x1 + 1,
            dcy: rect.y0 + rect.y1 + 1,
        }
    }

    /// Doubled image coordinate -> canvas coordinate.
    fn to_canvas(&self, x2: i32, y2: i32) -> (i32, i32) {
        (
            x2 - self.dcx + SKETCH_SIZE as i32 / 2,
            y2 - self.dcy + SKETCH_SIZE as i32 / 2,
        )
    }

    /// Canvas coordinate -> doubled image coordinate.
    fn to_doubled(&self, u: i32, v: i32) -> (i32, i32) {
        (
            u + self.dcx - SKETCH_SIZE as i32 / 2,
            v + self.dcy - SKETCH_SIZE as i32 / 2,
        )
    }
}

/// Un-jittered outline: the target silhouette rasterized at 2x onto the
/// 64x64 canvas (centered on the mask region), reduced to its one-pixel
/// boundary. Exposed for the closure and fidelity tests.
pub fn rasterize_sketch_clean(spec: &SceneSpec) -> SketchImage {
    let obj = spec.target_object();
    let map = CanvasMap::new(&mask_rect(spec));
    let size = SKETCH_SIZE as i32;
    let filled = |u: i32, v: i32| -> bool {
        let (x2, y2) = map.to_doubled(u, v);
        contains_scaled(obj, x2, y2)
    };
    let mut sketch = SketchImage::blank();
    for v in 0..size {
        for u in 0..size {
            if !filled(u, v) {
                continue;
            }
            let boundary = !(filled(u - 1, v) && filled(u + 1, v) && filled(u, v - 1) && filled(u, v + 1));
            if boundary {
                sketch.pixels[(v * size + u) as usize] = 0;
            }
        }
    }
    sketch
}

/// Hand-drawn-style sketch: the clean outline with each stroke pixel
/// displaced by at most one pixel, seeded from the scene.
pub fn rasterize_sketch(spec: &SceneSpec) -> SketchImage {
    let clean = rasterize_sketch_clean(spec);
    let mut rng = Rng::new(spec.seed, STREAM_JITTER);
    let size = SKETCH_SIZE as i32;
    let mut sketch = SketchImage::blank();
    for v in 0..size {
        for u in 0..size {
            if clean.pixels[(v * size + u) as usize] != 0 {
                continue;
            }
            let du = rng.below(3) as i32 - 1;
            let dv = rng.below(3) as i32 - 1;
            let (nu, nv) = ((u + du).clamp(0, size - 1), (v + dv).clamp(0, size - 1));
            sketch.pixels[(nv * size + nu) as usize] = 0;
        }
    }
    sketch
}

/// Edge-map conditioning: a 3x3 Laplacian over the masked region of the
/// grayscale image, thresholded at nonzero magnitude, scaled 2x onto the
/// canvas with the same mask-centered placement as sketches.
pub fn rasterize_edgemap(image: &RgbImage, mask: &GrayImage) -> SketchImage {
    let w = image.width as i32;
    let h = image.height as i32;
    let gray = |x: i32, y: i32| -> i32 {
        let p = image.get(x as usize, y as usize);
        (p[0] as i32 + p[1] as i32 + p[2] as i32) / 3
    };

    // Mask bounding box drives canvas placement.
    let mut rect = Rect {
        x0: i32::MAX,
        y0: i32::MAX,
        x1: i32::MIN,
        y1: i32::MIN,
    };
    for y in 0..h {
        for x in 0..w {
            if mask.get(x as usize, y as usize) > 0 {
                rect.x0 = rect.x0.min(x);
                rect.y0 = rect.y0.min(y);
                rect.x1 = rect.x1.max(x);
                rect.y1 = rect.y1.max(y);
            }
        }
    }
    let mut sketch = SketchImage::blank();
    if rect.x0 > rect.x1 {
        return sketch; // empty mask -> empty edge map
    }
    let map = CanvasMap::new(&rect);
    let size = SKETCH_SIZE as i32;
    for y in 0..h {
        for x in 0..w {
            if mask.get(x as usize, y as usize) == 0 {
                continue;
            }
            let mut resp = 0i32;
            let center = gray(x, y);
            for (nx, ny) in [(x - 1, y), (x + 1, y), (x, y - 1), (x, y + 1)] {
                if nx >= 0 && nx < w && ny >= 0 && ny < h {
                    resp += gray(nx, ny) - center;
                }
            }
            if resp != 0 {
                let (u0, v0) = map.to_canvas(2 * x, 2 * y);
                for dv in 0..2 {
                    for du in 0..2 {
                        let (u, v) = (u0 + du, v0 + dv);
                        if u >= 0 && u < size && v >= 0 && v < size {
                            sketch.pixels[(v * size + u) as usize] = 0;
                        }
                    }
                }
            }
        }
    }
    sketch
}

pub fn make_example(seed: u64) -> Example {
    let meta = gen_scene(seed);
    Example {
        image: render(&meta),
        mask: render_mask(&meta),
        sketch: rasterize_sketch(&meta),
        meta,
    }
}

// ── dataset files ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: usize,
    pub image: String,
    pub mask: String,
    pub sketch: String,
    pub shape_class: String,
    pub bbox: [i32; 4],
    pub seed: u64,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Deterministic split: example i is validation iff i % 10 == 0.
    pub fn train_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| i % 10 != 0).collect()
    }

    pub fn val_ids(&self) -> Vec<usize> {
        (0..self.len()).filter(|i| i % 10 == 0).collect()
    }

    pub fn load_example(&self, idx: usize) -> Result<Example> {
        let entry = self
            .entries
            .get(idx)
            .ok_or_else(|| Error::Data {
                index: idx,
                msg: "index out of range".into(),
            })?;
        let wrap = |e: Error| Error::Data {
            index: idx,
            msg: e.to_string(),
        };
        let image = RgbImage::load(&self.dir.join(&entry.image)).map_err(wrap)?;
        let mask = GrayImage::load(&self.dir.join(&entry.mask)).map_err(wrap)?;
        let sketch_img = GrayImage::load(&self.dir.join(&entry.sketch)).map_err(wrap)?;
        let sketch = SketchImage::from_gray(&sketch_img).map_err(wrap)?;
        Ok(Example {
            image,
            mask,
            sketch,
            meta: entry.scene.clone(),
        })
    }

    pub fn iter_examples(&self) -> impl Iterator<Item = Result<Example>> + '_ {
        (0..self.len()).map(|i| self.load_example(i))
    }
}

/// Generate n examples into `dir`: image_%06d.ppm, mask_%06d.pgm,
/// sketch_%06d.pgm and manifest.jsonl. Byte-identical for identical
/// (n, seed).
pub fn write_dataset(n: usize, seed: u64, dir: &Path) -> Result<Dataset> {
    if n < 1 {
        return Err(Error::contract("dataset needs at least one example"));
    }
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::fs::File::create(dir.join("manifest.jsonl"))?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let scene_seed = stream_hash(&[seed, i as u64]);
        let example = make_example(scene_seed);
        let entry = ManifestEntry {
            id: i,
            image: format!("image_{i:06}.ppm"),
            mask: format!("mask_{i:06}.pgm"),
            sketch: format!("sketch_{i:06}.pgm"),
            shape_class: example.meta.target_object().class.name().to_string(),
            bbox: {
                let r = mask_rect(&example.meta);
                [r.x0, r.y0, r.x1, r.y1]
            },
            seed: scene_seed,
            scene: example.meta.clone(),
        };
        example.image.save(&dir.join(&entry.image))?;
        example.mask.save(&dir.join(&entry.mask))?;
        example.sketch.to_gray().save(&dir.join(&entry.sketch))?;
        let line = serde_json::to_string(&entry)?;
        manifest.write_all(line.as_bytes())?;
        manifest.write_all(b"\n")?;
        entries.push(entry);
    }
    manifest.sync_all()?;
    Ok(Dataset {
        dir: dir.to_path_buf(),
        entries,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(dir.join("manifest.jsonl"))?;
    let reader = std::io::BufReader::new(file);
    let mut entries = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Data {
            index: i,
            msg: format!("bad manifest line: {e}"),
        })?;
        entries.push(entry);
    }
    Ok(Dataset {
        dir: dir.to_path_buf(),
        entries,
    })
}
