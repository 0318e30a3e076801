//! Procedural scenes with pixel-exact oracle masks.
//!
//! A scene is one foreground shape (colour + texture) composited onto a
//! background. Every output is a pure function of `(SceneSpec, seed)`. In
//! correlated mode the background class is a fixed function of the shape
//! class, which is what the background-overfitting experiment trains on.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use maskctl_tensor::archive::{format_key_values, parse_key_values};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::raster::{Image, Mask};

pub const MIN_FOREGROUND: f64 = 0.01;
pub const MAX_FOREGROUND: f64 = 0.60;
const MAX_PLACEMENT_TRIES: usize = 1000;

macro_rules! vocab_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $word:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $word),+ }
            }

            pub fn index(self) -> usize {
                Self::ALL.iter().position(|&v| v == self).expect("listed")
            }
        }

        impl FromStr for $name {
            type Err = CoreError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($word => Ok($name::$variant),)+
                    other => Err(CoreError::Vocabulary(vec![other.to_string()])),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }
    };
}

vocab_enum!(ShapeClass {
    Circle => "circle",
    Square => "square",
    Triangle => "triangle",
    Star => "star",
});

vocab_enum!(TextureClass {
    Solid => "solid",
    Stripes => "stripes",
    Dots => "dots",
});

vocab_enum!(BackgroundClass {
    Solid => "solid",
    Gradient => "gradient",
    Checker => "checker",
});

vocab_enum!(ColorName {
    Red => "red",
    Green => "green",
    Blue => "blue",
    Yellow => "yellow",
    Purple => "purple",
    Orange => "orange",
});

impl ColorName {
    pub fn rgb(self) -> [f32; 3] {
        match self {
            ColorName::Red => [0.90, 0.12, 0.12],
            ColorName::Green => [0.15, 0.80, 0.25],
            ColorName::Blue => [0.15, 0.25, 0.90],
            ColorName::Yellow => [0.95, 0.85, 0.10],
            ColorName::Purple => [0.60, 0.20, 0.75],
            ColorName::Orange => [0.98, 0.55, 0.05],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrelationMode {
    Independent,
    Correlated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub image_size: usize,
    pub shape_classes: Vec<ShapeClass>,
    pub texture_classes: Vec<TextureClass>,
    pub background_classes: Vec<BackgroundClass>,
    pub correlation_mode: CorrelationMode,
    /// Shape -> background; consulted only in correlated mode.
    pub correlation_table: BTreeMap<ShapeClass, BackgroundClass>,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            shape_classes: ShapeClass::ALL.to_vec(),
            texture_classes: TextureClass::ALL.to_vec(),
            background_classes: BackgroundClass::ALL.to_vec(),
            correlation_mode: CorrelationMode::Independent,
            correlation_table: BTreeMap::new(),
        }
    }
}

impl SceneSpec {
    /// Default classes with every shape pinned to one background.
    pub fn correlated() -> Self {
        let table = [
            (ShapeClass::Circle, BackgroundClass::Checker),
            (ShapeClass::Square, BackgroundClass::Gradient),
            (ShapeClass::Triangle, BackgroundClass::Solid),
            (ShapeClass::Star, BackgroundClass::Checker),
        ];
        Self {
            correlation_mode: CorrelationMode::Correlated,
            correlation_table: table.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_multiple_of(8) {
            return Err(CoreError::Config(format!(
                "image_size must be >= 16 and a multiple of 8, got {}",
                self.image_size
            )));
        }
        if self.shape_classes.is_empty() {
            return Err(CoreError::Config("shape_classes is empty".into()));
        }
        if self.texture_classes.is_empty() {
            return Err(CoreError::Config("texture_classes is empty".into()));
        }
        if self.background_classes.is_empty() {
            return Err(CoreError::Config("background_classes is empty".into()));
        }
        if self.correlation_mode == CorrelationMode::Correlated {
            for s in &self.shape_classes {
                if !self.correlation_table.contains_key(s) {
                    return Err(CoreError::Config(format!(
                        "correlation_table has no entry for shape `{s}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> String {
        let join = |v: Vec<&str>| v.join(",");
        let mut kv = BTreeMap::new();
        kv.insert("image_size".to_string(), self.image_size.to_string());
        kv.insert("shapes".into(), join(self.shape_classes.iter().map(|s| s.name()).collect()));
        kv.insert("textures".into(), join(self.texture_classes.iter().map(|s| s.name()).collect()));
        kv.insert(
            "backgrounds".into(),
            join(self.background_classes.iter().map(|s| s.name()).collect()),
        );
        kv.insert(
            "correlation".into(),
            match self.correlation_mode {
                CorrelationMode::Independent => "independent",
                CorrelationMode::Correlated => "correlated",
            }
            .into(),
        );
        kv.insert(
            "table".into(),
            self.correlation_table
                .iter()
                .map(|(s, b)| format!("{s}:{b}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        format_key_values(&kv)
    }

    pub fn from_key_values(text: &str) -> Result<Self> {
        let kv = parse_key_values(text);
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| CoreError::Config(format!("scene spec is missing `{k}`")))
        };
        fn list<T: FromStr<Err = CoreError>>(s: &str) -> Result<Vec<T>> {
            s.split(',').filter(|w| !w.is_empty()).map(T::from_str).collect()
        }
        let image_size = get("image_size")?
            .parse()
            .map_err(|_| CoreError::Config("image_size is not an integer".into()))?;
        let correlation_mode = match get("correlation")?.as_str() {
            "independent" => CorrelationMode::Independent,
            "correlated" => CorrelationMode::Correlated,
            other => return Err(CoreError::Config(format!("unknown correlation mode `{other}`"))),
        };
        let mut correlation_table = BTreeMap::new();
        for pair in kv.get("table").map(|s| s.as_str()).unwrap_or("").split(',') {
            if pair.is_empty() {
                continue;
            }
            let (s, b) = pair
                .split_once(':')
                .ok_or_else(|| CoreError::Config(format!("bad table entry `{pair}`")))?;
            correlation_table.insert(s.parse()?, b.parse()?);
        }
        let spec = Self {
            image_size,
            shape_classes: list(get("shapes")?)?,
            texture_classes: list(get("textures")?)?,
            background_classes: list(get("backgrounds")?)?,
            correlation_mode,
            correlation_table,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn background_for(&self, shape: ShapeClass, rng: &mut ChaCha8Rng) -> BackgroundClass {
        match self.correlation_mode {
            CorrelationMode::Correlated => self.correlation_table[&shape],
            CorrelationMode::Independent => *self.background_classes.choose(rng).expect("non-empty"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneMetadata {
    pub shape_class: ShapeClass,
    pub color_name: ColorName,
    pub texture_class: TextureClass,
    pub background_class: BackgroundClass,
    /// `(x0, y0, x1, y1)`, end-exclusive.
    pub object_bbox: [usize; 4],
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub image: Image,
    pub mask: Mask,
    pub metadata: SceneMetadata,
}

impl SceneRecord {
    pub fn check_invariants(&self) -> Result<()> {
        if self.image.size() != self.mask.size() {
            return Err(CoreError::InvalidData("image and mask sizes differ".into()));
        }
        let f = self.mask.fraction();
        if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f) {
            return Err(CoreError::InvalidData(format!("foreground fraction {f:.4} out of bounds")));
        }
        let [x0, y0, x1, y1] = self.metadata.object_bbox;
        if x1 > self.image.width() || y1 > self.image.height() || x0 >= x1 || y0 >= y1 {
            return Err(CoreError::InvalidData("bbox outside the image".into()));
        }
        for y in 0..self.mask.height() {
            for x in 0..self.mask.width() {
                if self.mask.get(x, y) && !(x0..x1).contains(&x) | !(y0..y1).contains(&y) {
                    return Err(CoreError::InvalidData("mask pixel outside bbox".into()));
                }
            }
        }
        Ok(())
    }
}

/// Several non-overlapping objects on one background, one mask each.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositeScene {
    pub image: Image,
    pub masks: Vec<Mask>,
    pub metadata: Vec<SceneMetadata>,
}

// ----- rendering -----------------------------------------------------------

fn jitter(rgb: [f32; 3], amount: f32, rng: &mut ChaCha8Rng) -> [f32; 3] {
    rgb.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn scaled(rgb: [f32; 3], s: f32) -> [f32; 3] {
    rgb.map(|c| c * s)
}

enum BackgroundStyle {
    Flat([f32; 3]),
    Vertical([f32; 3], [f32; 3]),
    Checker {
        a: [f32; 3],
        b: [f32; 3],
        cell: usize,
        phase: (usize, usize),
    },
}

impl BackgroundStyle {
    fn sample(class: BackgroundClass, size: usize, rng: &mut ChaCha8Rng) -> Self {
        match class {
            BackgroundClass::Solid => {
                let palette = [[0.82, 0.78, 0.70], [0.74, 0.72, 0.76], [0.86, 0.84, 0.78]];
                let base = *palette.choose(rng).expect("non-empty");
                BackgroundStyle::Flat(jitter(base, 0.02, rng))
            }
            BackgroundClass::Gradient => BackgroundStyle::Vertical(
                jitter([0.10, 0.28, 0.45], 0.03, rng),
                jitter([0.55, 0.78, 0.92], 0.03, rng),
            ),
            BackgroundClass::Checker => {
                let cell = (size / 8).max(2);
                BackgroundStyle::Checker {
                    a: jitter([0.22, 0.36, 0.16], 0.02, rng),
                    b: jitter([0.46, 0.60, 0.30], 0.02, rng),
                    cell,
                    phase: (rng.random_range(0..cell), rng.random_range(0..cell)),
                }
            }
        }
    }

    fn at(&self, x: usize, y: usize, size: usize) -> [f32; 3] {
        match self {
            BackgroundStyle::Flat(c) => *c,
            BackgroundStyle::Vertical(top, bottom) => {
                let t = y as f32 / (size - 1) as f32;
                [0, 1, 2].map(|i| top[i] + (bottom[i] - top[i]) * t)
            }
            BackgroundStyle::Checker { a, b, cell, phase } => {
                if ((x + phase.0) / cell + (y + phase.1) / cell).is_multiple_of(2) {
                    *a
                } else {
                    *b
                }
            }
        }
    }
}

fn texture_at(texture: TextureClass, color: [f32; 3], x: usize, y: usize, size: usize) -> [f32; 3] {
    let period = (size / 8).max(4);
    match texture {
        TextureClass::Solid => color,
        TextureClass::Stripes => {
            if ((x + y) / (period / 2)) % 2 == 1 {
                scaled(color, 0.45)
            } else {
                color
            }
        }
        TextureClass::Dots => {
            let c = period as f32 / 2.0;
            let dx = (x % period) as f32 + 0.5 - c;
            let dy = (y % period) as f32 + 0.5 - c;
            if dx * dx + dy * dy <= (period as f32 / 4.0).powi(2) {
                scaled(color, 0.4)
            } else {
                color
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Placement {
    cx: f32,
    cy: f32,
    r: f32,
}

fn inside_polygon(px: f32, py: f32, verts: &[(f32, f32)]) -> bool {
    let mut inside = false;
    let mut j = verts.len() - 1;
    for i in 0..verts.len() {
        let (xi, yi) = verts[i];
        let (xj, yj) = verts[j];
        if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

fn shape_vertices(shape: ShapeClass, p: Placement) -> Vec<(f32, f32)> {
    let ring = |n: usize, radius: &dyn Fn(usize) -> f32| {
        (0..n)
            .map(|k| {
                let a = -std::f32::consts::FRAC_PI_2 + k as f32 * std::f32::consts::TAU / n as f32;
                (p.cx + radius(k) * a.cos(), p.cy + radius(k) * a.sin())
            })
            .collect()
    };
    match shape {
        ShapeClass::Triangle => ring(3, &|_| p.r),
        ShapeClass::Star => ring(10, &|k| if k % 2 == 0 { p.r } else { 0.45 * p.r }),
        ShapeClass::Circle | ShapeClass::Square => Vec::new(),
    }
}

fn render_mask(shape: ShapeClass, p: Placement, size: usize) -> Mask {
    let verts = shape_vertices(shape, p);
    Mask::from_fn(size, size, |x, y| {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        let (dx, dy) = (px - p.cx, py - p.cy);
        match shape {
            ShapeClass::Circle => dx * dx + dy * dy <= p.r * p.r,
            ShapeClass::Square => dx.abs() <= 0.8 * p.r && dy.abs() <= 0.8 * p.r,
            ShapeClass::Triangle | ShapeClass::Star => inside_polygon(px, py, &verts),
        }
    })
}

fn sample_placement(size: usize, r_range: (f32, f32), rng: &mut ChaCha8Rng) -> Placement {
    let s = size as f32;
    let r = rng.random_range(r_range.0 * s..=r_range.1 * s);
    let lo = r + 1.0;
    let hi = (s - r - 1.0).max(lo);
    Placement {
        cx: rng.random_range(lo..=hi),
        cy: rng.random_range(lo..=hi),
        r,
    }
}

struct ObjectDraw {
    shape: ShapeClass,
    color_name: ColorName,
    color: [f32; 3],
    texture: TextureClass,
}

impl ObjectDraw {
    fn sample(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let shape = *spec.shape_classes.choose(rng).expect("non-empty");
        let color_name = *ColorName::ALL.choose(rng).expect("non-empty");
        let texture = *spec.texture_classes.choose(rng).expect("non-empty");
        let color = jitter(color_name.rgb(), 0.03, rng);
        Self {
            shape,
            color_name,
            color,
            texture,
        }
    }
}

fn composite(image: &mut Image, mask: &Mask, obj: &ObjectDraw) {
    let size = image.width();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                image.set_pixel(x, y, texture_at(obj.texture, obj.color, x, y, size));
            }
        }
    }
}

fn paint_background(style: &BackgroundStyle, size: usize) -> Image {
    let mut image = Image::filled(size, size, [0.0; 3]);
    for y in 0..size {
        for x in 0..size {
            image.set_pixel(x, y, style.at(x, y, size));
        }
    }
    image
}

/// Renders the scene for `seed`. Images are quantized to 8 bits so that a
/// record survives a PNG round trip unchanged.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<SceneRecord> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obj = ObjectDraw::sample(spec, &mut rng);
    let background = spec.background_for(obj.shape, &mut rng);
    let style = BackgroundStyle::sample(background, size, &mut rng);
    let mut mask = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let p = sample_placement(size, (0.14, 0.30), &mut rng);
        let m = render_mask(obj.shape, p, size);
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&m.fraction()) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.ok_or_else(|| {
        CoreError::Config(format!("no placement within foreground bounds for seed {seed}"))
    })?;
    let mut image = paint_background(&style, size);
    composite(&mut image, &mask, &obj);
    image.quantize();
    let object_bbox = mask.bbox().expect("non-empty mask");
    Ok(SceneRecord {
        image,
        mask,
        metadata: SceneMetadata {
            shape_class: obj.shape,
            color_name: obj.color_name,
            texture_class: obj.texture,
            background_class: background,
            object_bbox,
            seed,
        },
    })
}

/// `objects` non-overlapping shapes (at least one pixel apart) on a shared
/// background. Correlated specs take the background from the first shape.
pub fn generate_composite_scene(spec: &SceneSpec, seed: u64, objects: usize) -> Result<CompositeScene> {
    spec.validate()?;
    if objects == 0 {
        return Err(CoreError::Argument("objects must be >= 1".into()));
    }
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<ObjectDraw> = (0..objects).map(|_| ObjectDraw::sample(spec, &mut rng)).collect();
    let background = spec.background_for(draws[0].shape, &mut rng);
    let style = BackgroundStyle::sample(background, size, &mut rng);
    let mut occupied = Mask::filled(size, size, false);
    let mut masks = Vec::with_capacity(objects);
    for obj in &draws {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let p = sample_placement(size, (0.12, 0.20), &mut rng);
            let m = render_mask(obj.shape, p, size);
            let f = m.fraction();
            if !(MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f) {
                continue;
            }
            let [x0, y0, x1, y1] = m.bbox().expect("non-empty");
            let clash = (y0.saturating_sub(1)..(y1 + 1).min(size))
                .any(|y| (x0.saturating_sub(1)..(x1 + 1).min(size)).any(|x| occupied.get(x, y)));
            if !clash {
                placed = Some(m);
                break;
            }
        }
        let m = placed.ok_or_else(|| {
            CoreError::Config(format!("cannot place {objects} disjoint objects for seed {seed}"))
        })?;
        for y in 0..size {
            for x in 0..size {
                if m.get(x, y) {
                    occupied.set(x, y, true);
                }
            }
        }
        masks.push(m);
    }
    let mut image = paint_background(&style, size);
    for (m, obj) in masks.iter().zip(&draws) {
        composite(&mut image, m, obj);
    }
    image.quantize();
    let metadata = masks
        .iter()
        .zip(&draws)
        .map(|(m, obj)| SceneMetadata {
            shape_class: obj.shape,
            color_name: obj.color_name,
            texture_class: obj.texture,
            background_class: background,
            object_bbox: m.bbox().expect("non-empty"),
            seed,
        })
        .collect();
    Ok(CompositeScene {
        image,
        masks,
        metadata,
    })
}

/// Caption template standing in for an image captioner.
pub fn caption_from_metadata(meta: &SceneMetadata) -> String {
    caption_for(meta.color_name, meta.texture_class, meta.shape_class, meta.background_class)
}

pub fn caption_for(
    color: ColorName,
    texture: TextureClass,
    shape: ShapeClass,
    background: BackgroundClass,
) -> String {
    format!("a {color} {texture} {shape} on a {background} background")
}

/// Every word a caption can contain, in a fixed order.
pub fn caption_vocabulary() -> Vec<&'static str> {
    let mut words = vec!["a", "on", "background"];
    let classes = ColorName::ALL
        .iter()
        .map(|c| c.name())
        .chain(TextureClass::ALL.iter().map(|c| c.name()))
        .chain(ShapeClass::ALL.iter().map(|c| c.name()))
        .chain(BackgroundClass::ALL.iter().map(|c| c.name()));
    for w in classes {
        if !words.contains(&w) {
            words.push(w);
        }
    }
    words
}

// ----- datasets ------------------------------------------------------------

/// Per-record seed derived from the dataset seed; kept below 2^63.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    crate::seeding::mix(crate::seeding::mix(dataset_seed, crate::seeding::stream::SCENES), index as u64) >> 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    /// Paths relative to the dataset directory.
    pub image: String,
    pub mask: String,
    pub metadata: SceneMetadata,
}

impl ManifestEntry {
    fn to_line(&self) -> String {
        let m = &self.metadata;
        let [x0, y0, x1, y1] = m.object_bbox;
        format!(
            "index={}\timage={}\tmask={}\tshape={}\tcolor={}\ttexture={}\tbackground={}\tbbox={x0},{y0},{x1},{y1}\tseed={}",
            self.index, self.image, self.mask, m.shape_class, m.color_name, m.texture_class, m.background_class, m.seed
        )
    }

    fn parse(line: &str) -> Result<Self> {
        let fields: BTreeMap<&str, &str> = line.split('\t').filter_map(|f| f.split_once('=')).collect();
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| CoreError::InvalidData(format!("manifest line lacks `{k}`: {line}")))
        };
        let int = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|_| CoreError::InvalidData(format!("`{k}` is not an integer: {line}")))
        };
        let bbox: Vec<usize> = get("bbox")?
            .split(',')
            .map(|v| v.parse().map_err(|_| CoreError::InvalidData(format!("bad bbox: {line}"))))
            .collect::<Result<_>>()?;
        let object_bbox: [usize; 4] = bbox
            .try_into()
            .map_err(|_| CoreError::InvalidData(format!("bbox needs 4 values: {line}")))?;
        Ok(Self {
            index: int("index")? as usize,
            image: get("image")?.to_string(),
            mask: get("mask")?.to_string(),
            metadata: SceneMetadata {
                shape_class: get("shape")?.parse()?,
                color_name: get("color")?.parse()?,
                texture_class: get("texture")?.parse()?,
                background_class: get("background")?.parse()?,
                object_bbox,
                seed: int("seed")?,
            },
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub spec: SceneSpec,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const SPEC_FILE: &str = "spec.txt";

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        self.entries.iter().map(|e| e.to_line() + "\n").collect()
    }

    /// SHA-256 of the manifest text.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        let spec = SceneSpec::from_key_values(&std::fs::read_to_string(dir.join(SPEC_FILE))?)?;
        let entries = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(ManifestEntry::parse)
            .collect::<Result<_>>()?;
        Ok(Self {
            root: dir.to_path_buf(),
            spec,
            entries,
        })
    }

    pub fn load_record(&self, entry: &ManifestEntry) -> Result<SceneRecord> {
        let record = SceneRecord {
            image: Image::load_png(self.root.join(&entry.image))?,
            mask: Mask::load_png(self.root.join(&entry.mask))?,
            metadata: entry.metadata.clone(),
        };
        record.check_invariants()?;
        Ok(record)
    }

    pub fn load_records(&self) -> Result<Vec<SceneRecord>> {
        self.entries.iter().map(|e| self.load_record(e)).collect()
    }
}

/// Writes `count` scenes (images/NNNNN.png, masks/NNNNN.png), the scene spec
/// and a manifest to `out`. Each record touches only its own files.
pub fn build_dataset(spec: &SceneSpec, count: usize, seed: u64, out: impl AsRef<Path>) -> Result<DatasetManifest> {
    if count < 1 {
        return Err(CoreError::Argument("count must be >= 1".into()));
    }
    spec.validate()?;
    let out = out.as_ref();
    std::fs::create_dir_all(out.join("images"))?;
    std::fs::create_dir_all(out.join("masks"))?;
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let record = generate_scene(spec, scene_seed(seed, index))?;
        let image = format!("images/{index:05}.png");
        let mask = format!("masks/{index:05}.png");
        record.image.save_png(out.join(&image))?;
        record.mask.save_png(out.join(&mask))?;
        entries.push(ManifestEntry {
            index,
            image,
            mask,
            metadata: record.metadata,
        });
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        spec: spec.clone(),
        entries,
    };
    std::fs::write(out.join(SPEC_FILE), spec.to_key_values())?;
    std::fs::write(out.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(manifest)
}

/// In-memory equivalent of [`build_dataset`] followed by loading.
pub fn generate_records(spec: &SceneSpec, count: usize, seed: u64) -> Result<Vec<SceneRecord>> {
    (0..count).map(|i| generate_scene(spec, scene_seed(seed, i))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let spec = SceneSpec::default();
        assert_eq!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 7).unwrap());
        assert_ne!(generate_scene(&spec, 7).unwrap(), generate_scene(&spec, 8).unwrap());
    }

    #[test]
    fn records_satisfy_invariants() {
        for size in [16, 32, 64] {
            let spec = SceneSpec {
                image_size: size,
                ..SceneSpec::default()
            };
            for seed in 0..150 {
                let r = generate_scene(&spec, seed).unwrap();
                r.check_invariants().unwrap();
                let f = r.mask.fraction();
                assert!((0.01..=0.60).contains(&f), "size {size} seed {seed}: {f}");
            }
        }
    }

    #[test]
    fn mask_matches_composited_pixels() {
        // Re-render the background alone; every pixel that differs from it
        // must be under the mask, and no pixel outside the mask may differ.
        for seed in 0..40 {
            let spec = SceneSpec::default();
            let r = generate_scene(&spec, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let obj = ObjectDraw::sample(&spec, &mut rng);
            let bg = spec.background_for(obj.shape, &mut rng);
            let style = BackgroundStyle::sample(bg, 64, &mut rng);
            let mut plain = paint_background(&style, 64);
            plain.quantize();
            for y in 0..64 {
                for x in 0..64 {
                    if !r.mask.get(x, y) {
                        assert_eq!(r.image.pixel(x, y), plain.pixel(x, y));
                    } else {
                        let mut want = Image::filled(1, 1, texture_at(obj.texture, obj.color, x, y, 64));
                        want.quantize();
                        assert_eq!(r.image.pixel(x, y), want.pixel(0, 0));
                    }
                }
            }
        }
    }

    #[test]
    fn correlated_mode_uses_table() {
        let spec = SceneSpec::correlated();
        for seed in 0..60 {
            let r = generate_scene(&spec, seed).unwrap();
            assert_eq!(r.metadata.background_class, spec.correlation_table[&r.metadata.shape_class]);
        }
        let circle_only = SceneSpec {
            shape_classes: vec![ShapeClass::Circle],
            ..SceneSpec::correlated()
        };
        let r = generate_scene(&circle_only, 3).unwrap();
        assert_eq!(r.metadata.background_class, BackgroundClass::Checker);
    }

    #[test]
    fn invalid_specs_name_the_invariant() {
        let bad = SceneSpec {
            image_size: 60,
            ..SceneSpec::default()
        };
        let e = generate_scene(&bad, 0).unwrap_err().to_string();
        assert!(e.contains("multiple of 8"), "{e}");
        let mut bad = SceneSpec::correlated();
        bad.correlation_table.remove(&ShapeClass::Star);
        let e = bad.validate().unwrap_err().to_string();
        assert!(e.contains("star"), "{e}");
        let bad = SceneSpec {
            texture_classes: vec![],
            ..SceneSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn caption_template() {
        let meta = SceneMetadata {
            shape_class: ShapeClass::Circle,
            color_name: ColorName::Red,
            texture_class: TextureClass::Solid,
            background_class: BackgroundClass::Checker,
            object_bbox: [0, 0, 1, 1],
            seed: 0,
        };
        assert_eq!(caption_from_metadata(&meta), "a red solid circle on a checker background");
        assert_eq!(caption_from_metadata(&meta), caption_from_metadata(&meta));
    }

    #[test]
    fn every_caption_word_is_in_vocabulary() {
        let vocab = caption_vocabulary();
        for &c in ColorName::ALL {
            for &t in TextureClass::ALL {
                for &s in ShapeClass::ALL {
                    for &b in BackgroundClass::ALL {
                        for w in caption_for(c, t, s, b).split_whitespace() {
                            assert!(vocab.contains(&w), "{w}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn unknown_identifier_is_vocabulary_error() {
        assert!(matches!("hexagon".parse::<ShapeClass>(), Err(CoreError::Vocabulary(w)) if w == ["hexagon"]));
    }

    #[test]
    fn spec_key_values_roundtrip() {
        for spec in [SceneSpec::default(), SceneSpec::correlated()] {
            assert_eq!(SceneSpec::from_key_values(&spec.to_key_values()).unwrap(), spec);
        }
    }

    #[test]
    fn composite_masks_are_disjoint() {
        let spec = SceneSpec::default();
        for seed in 0..20 {
            let c = generate_composite_scene(&spec, seed, 2).unwrap();
            assert_eq!(c.masks.len(), 2);
            let overlap = (0..64 * 64).filter(|&i| c.masks[0].data()[i] == 1 && c.masks[1].data()[i] == 1).count();
            assert_eq!(overlap, 0);
        }
    }

    #[test]
    fn build_dataset_rejects_zero_count() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            build_dataset(&SceneSpec::default(), 0, 0, dir.path()),
            Err(CoreError::Argument(_))
        ));
    }
}
