//! Seed-deterministic synthetic scenes and few-shot concept sets.
//!
//! Images are `H×W×4` grids in `[0, 1]`: three color channels and one
//! texture channel that is zero everywhere in base scenes. Placement uses
//! integer arithmetic only, so every platform rasterizes identical pixels.

use serde::{Deserialize, Serialize};
use tokensplit_tensor::Tensor;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

pub const CHANNELS: usize = 4;
pub const MAX_OBJECTS: usize = 3;
const PLACEMENT_ATTEMPTS: usize = 200;
const RESTART_EVERY: usize = 40;

/// Base palette: word and RGB.
pub const PALETTE: [(&str, [f64; 3]); 5] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.2]),
    ("blue", [0.15, 0.25, 0.9]),
    ("yellow", [0.9, 0.85, 0.1]),
    ("white", [0.95, 0.95, 0.95]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether offset `(dx, dy)` from the center lies inside a shape of
    /// half-extent `r`.
    pub fn contains(self, dx: i64, dy: i64, r: i64) -> bool {
        match self {
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
            Shape::Circle => dx * dx + dy * dy <= r * r + r,
            // apex up, base on the bottom row
            Shape::Triangle => dy.abs() <= r && 2 * dx.abs() <= dy + r + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Background {
    Plain { level: u8 },
    Gradient { from: u8, to: u8 },
}

impl Background {
    fn value(self, x: usize, width: usize) -> f64 {
        match self {
            Background::Plain { level } => level as f64 / 255.0,
            Background::Gradient { from, to } => {
                let f = x as f64 / (width.max(2) - 1) as f64;
                (from as f64 + (to as f64 - from as f64) * f) / 255.0
            }
        }
    }

    fn random(rng: &mut SplitMix64) -> Self {
        if rng.chance(0.5) {
            Background::Plain {
                level: rng.range(0, 70) as u8,
            }
        } else {
            let from = rng.range(0, 40) as u8;
            Background::Gradient {
                from,
                to: from + rng.range(30, 70) as u8,
            }
        }
    }

    pub fn word(self) -> &'static str {
        match self {
            Background::Plain { .. } => "plain",
            Background::Gradient { .. } => "gradient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Index into [`PALETTE`].
    pub color: usize,
    pub center: (i64, i64),
    /// Half-extent; the bounding box is `2·size + 1` cells wide.
    pub size: i64,
}

impl SceneObject {
    fn bbox(&self) -> (i64, i64, i64, i64) {
        let (cx, cy) = self.center;
        (cx - self.size, cy - self.size, cx + self.size, cy + self.size)
    }

    /// Bounding boxes separated by at least `gap` empty cells.
    pub fn overlaps(&self, other: &SceneObject, gap: i64) -> bool {
        let (ax0, ay0, ax1, ay1) = self.bbox();
        let (bx0, by0, bx1, by1) = other.bbox();
        ax0 <= bx1 + gap && bx0 <= ax1 + gap && ay0 <= by1 + gap && by0 <= ay1 + gap
    }

    /// Canvas cells covered by the object, row-major `(y, x)`.
    pub fn cells(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let (x0, y0, x1, y1) = self.bbox();
        let mut out = Vec::new();
        for y in y0.max(0)..=y1.min(height as i64 - 1) {
            for x in x0.max(0)..=x1.min(width as i64 - 1) {
                if self.shape.contains(x - self.center.0, y - self.center.1, self.size) {
                    out.push((y as usize, x as usize));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[H, W, 4]`, values in `[0, 1]`.
    pub canvas: Tensor<f64>,
    pub caption: Vec<String>,
    pub objects: Vec<SceneObject>,
    pub background: Background,
}

fn blank(height: usize, width: usize, bg: Background) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[height, width, CHANNELS]);
    let data = t.data_mut();
    for y in 0..height {
        for x in 0..width {
            let v = bg.value(x, width);
            let o = (y * width + x) * CHANNELS;
            data[o..o + 3].fill(v);
        }
    }
    t
}

fn paint(canvas: &mut Tensor<f64>, cells: &[(usize, usize)], mut pixel: impl FnMut(usize, usize) -> [f64; 4]) {
    let width = canvas.shape()[1];
    let data = canvas.data_mut();
    for &(y, x) in cells {
        let o = (y * width + x) * CHANNELS;
        data[o..o + CHANNELS].copy_from_slice(&pixel(y, x));
    }
}

fn place(
    rng: &mut SplitMix64,
    count: usize,
    height: usize,
    width: usize,
    min_size: i64,
    max_size: i64,
    mut make: impl FnMut(&mut SplitMix64, i64, (i64, i64)) -> SceneObject,
) -> Result<Vec<SceneObject>> {
    let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
    let mut attempts = 0;
    while objects.len() < count {
        attempts += 1;
        if attempts > PLACEMENT_ATTEMPTS {
            return Err(Error::Placement {
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
        // early objects can block the rest; start over periodically
        if attempts % RESTART_EVERY == 0 {
            objects.clear();
        }
        let size = rng.range(min_size, max_size);
        let (h, w) = (height as i64, width as i64);
        if 2 * size + 1 > h || 2 * size + 1 > w {
            continue;
        }
        let center = (rng.range(size, w - 1 - size), rng.range(size, h - 1 - size));
        let obj = make(rng, size, center);
        if objects.iter().all(|o| !o.overlaps(&obj, 1)) {
            objects.push(obj);
        }
    }
    Ok(objects)
}

/// Half-extent range; busier scenes use smaller objects.
fn size_range(height: usize, width: usize, count: usize) -> (i64, i64) {
    let side = height.min(width) as i64;
    let lo = (side / 8).max(1);
    (lo, (side / (3 + count as i64)).max(lo))
}

/// One base-training scene with `count` objects.
pub fn gen_scene(seed: u64, count: usize, height: usize, width: usize) -> Result<Scene> {
    if count == 0 || count > MAX_OBJECTS {
        return Err(Error::config(
            "scene.objects",
            format!("object count must be 1..={MAX_OBJECTS}, got {count}"),
        ));
    }
    let mut rng = SplitMix64::stream(seed, 0x5CE1E);
    let background = Background::random(&mut rng);
    let (lo, hi) = size_range(height, width, count);
    let objects = place(&mut rng, count, height, width, lo, hi, |rng, size, center| {
        SceneObject {
            shape: Shape::ALL[rng.below(3) as usize],
            color: rng.below(PALETTE.len() as u64) as usize,
            center,
            size,
        }
    })?;
    let mut canvas = blank(height, width, background);
    for o in &objects {
        let [r, g, b] = PALETTE[o.color].1;
        paint(&mut canvas, &o.cells(height, width), |_, _| [r, g, b, 0.0]);
    }
    let with_color = !rng.chance(0.25);
    let mut caption = Vec::new();
    for (i, o) in objects.iter().enumerate() {
        if i > 0 {
            caption.push("and".to_owned());
        }
        caption.push("a".to_owned());
        if with_color {
            caption.push(PALETTE[o.color].0.to_owned());
        }
        caption.push(o.shape.word().to_owned());
    }
    if rng.chance(0.5) {
        for w in ["on", "a", background.word(), "background"] {
            caption.push(w.to_owned());
        }
    }
    Ok(Scene {
        canvas,
        caption,
        objects,
        background,
    })
}

/// Surface pattern that marks a personalized concept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    Checker,
    Stripes,
}

/// Few-shot concept: a shape with a texture and two-color signature that
/// never occurs in base scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub name: String,
    /// Prompt word the concept's adapter binds to.
    pub word: String,
    pub shape: Shape,
    pub texture: Texture,
    pub primary: [f64; 3],
    pub secondary: [f64; 3],
}

impl ConceptSpec {
    pub fn checker() -> Self {
        ConceptSpec {
            name: "checker".into(),
            word: "square".into(),
            shape: Shape::Square,
            texture: Texture::Checker,
            primary: [0.9, 0.2, 0.8],
            secondary: [0.1, 0.75, 0.75],
        }
    }

    pub fn stripes() -> Self {
        ConceptSpec {
            name: "stripes".into(),
            word: "circle".into(),
            shape: Shape::Circle,
            texture: Texture::Stripes,
            primary: [1.0, 0.55, 0.0],
            secondary: [0.3, 0.15, 0.05],
        }
    }

    fn pixel(&self, y: usize, x: usize) -> [f64; 4] {
        let on = match self.texture {
            Texture::Checker => (x + y).is_multiple_of(2),
            Texture::Stripes => y.is_multiple_of(2),
        };
        let [r, g, b] = if on { self.primary } else { self.secondary };
        [r, g, b, if on { 1.0 } else { 0.0 }]
    }

    /// Mean pixel (including the texture channel) of a large patch.
    pub fn signature(&self) -> [f64; 4] {
        let mut acc = [0.0; 4];
        let n = 16;
        for y in 0..n {
            for x in 0..n {
                for (a, v) in acc.iter_mut().zip(self.pixel(y, x)) {
                    *a += v;
                }
            }
        }
        acc.map(|a| a / (n * n) as f64)
    }
}

/// Few-shot image of a concept.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptImage {
    pub canvas: Tensor<f64>,
    pub object: SceneObject,
}

/// `count` images of the concept on varied backgrounds.
pub fn gen_concept_set(
    spec: &ConceptSpec,
    count: usize,
    seed: u64,
    height: usize,
    width: usize,
) -> Result<Vec<ConceptImage>> {
    (0..count)
        .map(|i| {
            let mut rng = SplitMix64::stream(seed, 0xC0C0 + i as u64);
            let background = Background::random(&mut rng);
            let (lo, hi) = size_range(height, width, 1);
            let object = place(&mut rng, 1, height, width, lo + 1, hi, |_, size, center| SceneObject {
                shape: spec.shape,
                color: 0,
                center,
                size,
            })?[0];
            let mut canvas = blank(height, width, background);
            paint(&mut canvas, &object.cells(height, width), |y, x| spec.pixel(y, x));
            Ok(ConceptImage { canvas, object })
        })
        .collect()
}

/// Entry of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub caption: String,
    /// Array name inside the bundle container.
    pub file: String,
}

/// Image plus caption used for denoiser training.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor<f64>,
    pub caption: Vec<String>,
}

/// Scenes for seeds `first_seed..first_seed + count`, object counts cycling
/// through 1, 2, 3.
pub fn gen_scenes(first_seed: u64, count: usize, height: usize, width: usize) -> Result<Vec<(u64, Scene)>> {
    (0..count as u64)
        .map(|i| {
            let seed = first_seed + i;
            Ok((seed, gen_scene(seed, 1 + (i % 3) as usize, height, width)?))
        })
        .collect()
}

pub fn manifest(scenes: &[(u64, Scene)]) -> Vec<ManifestEntry> {
    scenes
        .iter()
        .map(|(seed, s)| ManifestEntry {
            seed: *seed,
            caption: s.caption.join(" "),
            file: format!("scene/{seed}"),
        })
        .collect()
}

const BUNDLE_KIND: &str = "dataset";

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    kind: String,
    height: usize,
    width: usize,
    manifest: Vec<ManifestEntry>,
}

/// Scenes packed into one container: the manifest in the metadata, one
/// `[H, W, 4]` array per scene.
pub fn bundle(scenes: &[(u64, Scene)], height: usize, width: usize) -> Result<Container<f64>> {
    let meta = BundleMeta {
        kind: BUNDLE_KIND.into(),
        height,
        width,
        manifest: manifest(scenes),
    };
    let mut c = Container::new(serde_json::to_value(meta)?);
    for ((_, scene), entry) in scenes.iter().zip(manifest(scenes)) {
        c.push(entry.file, scene.canvas.clone());
    }
    Ok(c)
}

/// Training examples from a bundle, with the canvas size it was built at.
pub fn unbundle(c: &Container<f64>) -> Result<(usize, usize, Vec<Example>)> {
    let meta: BundleMeta = serde_json::from_value(c.meta.clone())?;
    if meta.kind != BUNDLE_KIND {
        return Err(Error::Format(format!(
            "expected a dataset bundle, found `{}`",
            meta.kind
        )));
    }
    let examples = meta
        .manifest
        .iter()
        .map(|e| {
            Ok(Example {
                image: c.require(&e.file)?.clone(),
                caption: e.caption.split_whitespace().map(str::to_string).collect(),
            })
        })
        .collect::<Result<_>>()?;
    Ok((meta.height, meta.width, examples))
}
