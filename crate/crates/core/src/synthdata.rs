//! Procedural paired try-on data: stick-figure people wearing textured
//! garments, the matching flat garment images, keypoints and parsing maps.
//!
//! Geometry is laid out for a 64×64 canvas (the person occupies the central
//! 48 columns) and scaled to other sizes. Rendering is crisp so images are
//! exactly representable as 8-bit PNGs.

use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conditioning::{Keypoint, PoseKeypoints};
use crate::error::{Error, Result};
use crate::maskgen::{BinaryGrid, Category, ParsingLabel, ParsingMap, Rect};
use crate::tensor::Tensor;

pub const BACKGROUND: [u8; 3] = [235, 235, 235];
pub const FLAT_BACKGROUND: [u8; 3] = [255, 255, 255];

const SKIN_TONES: [[u8; 3]; 4] = [[241, 194, 125], [224, 172, 105], [198, 134, 66], [141, 85, 36]];
const NEUTRALS: [[u8; 3]; 3] = [[70, 70, 74], [110, 110, 116], [150, 150, 156]];
const SHOE: [u8; 3] = [40, 30, 22];
/// Saturated garment colors, kept away from skin, neutrals and backgrounds.
const GARMENT_COLORS: [[u8; 3]; 10] = [
    [200, 30, 40],
    [30, 60, 200],
    [30, 160, 60],
    [235, 205, 20],
    [130, 40, 170],
    [245, 120, 10],
    [20, 185, 205],
    [215, 40, 155],
    [10, 110, 110],
    [160, 220, 40],
];

/// Skin, neutral-garment and shoe colors: everything a person can show
/// besides the target garment and the background.
pub fn reference_colors() -> Vec<[u8; 3]> {
    SKIN_TONES.iter().chain(&NEUTRALS).copied().chain(std::iter::once(SHOE)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextureKind {
    Stripes,
    Checker,
    Glyphs,
    Solid,
}

impl TextureKind {
    pub const ALL: [TextureKind; 4] =
        [TextureKind::Stripes, TextureKind::Checker, TextureKind::Glyphs, TextureKind::Solid];
}

/// Everything needed to regenerate a garment texture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextureDescriptor {
    pub kind: TextureKind,
    /// Pixels per full cycle (stripes, checker).
    pub period: u32,
    /// Stripe orientation in degrees: 0 horizontal bands, 90 vertical, 45
    /// diagonal.
    pub angle: u32,
    pub colors: [[u8; 3]; 2],
    pub glyph_seed: u64,
}

/// 3×5 block letters, rows top to bottom, bit 2 is the left column.
const GLYPHS: [[u8; 5]; 10] = [
    [0b010, 0b101, 0b111, 0b101, 0b101], // A
    [0b110, 0b101, 0b110, 0b101, 0b110], // B
    [0b111, 0b100, 0b110, 0b100, 0b111], // E
    [0b111, 0b100, 0b110, 0b100, 0b100], // F
    [0b101, 0b101, 0b111, 0b101, 0b101], // H
    [0b100, 0b100, 0b100, 0b100, 0b111], // L
    [0b111, 0b101, 0b101, 0b101, 0b111], // O
    [0b111, 0b010, 0b010, 0b010, 0b010], // T
    [0b101, 0b101, 0b010, 0b101, 0b101], // X
    [0b111, 0b001, 0b010, 0b100, 0b111], // Z
];
const GLYPH_CELL: (i64, i64) = (4, 6);

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of sample `index` under a dataset seed.
pub fn sample_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

impl TextureDescriptor {
    /// Color at texture-local coordinates.
    pub fn color_at(&self, x: i64, y: i64) -> [u8; 3] {
        let half = (self.period / 2).max(1) as i64;
        let pick = |b: bool| self.colors[b as usize];
        match self.kind {
            TextureKind::Solid => self.colors[0],
            TextureKind::Stripes => {
                let coord = match self.angle {
                    0 => y,
                    90 => x,
                    _ => x + y,
                };
                pick(coord.div_euclid(half) % 2 == 1)
            }
            TextureKind::Checker => pick((x.div_euclid(half) + y.div_euclid(half)) % 2 == 1),
            TextureKind::Glyphs => {
                let (cw, ch) = GLYPH_CELL;
                let (cx, cy) = (x.div_euclid(cw), y.div_euclid(ch));
                let (gx, gy) = (x.rem_euclid(cw), y.rem_euclid(ch));
                if gx >= 3 || gy >= 5 {
                    return self.colors[0];
                }
                let h = mix64(self.glyph_seed ^ mix64((cx as u64) << 32 ^ (cy as u64 & 0xFFFF_FFFF)));
                let glyph = GLYPHS[(h % GLYPHS.len() as u64) as usize];
                pick(glyph[gy as usize] >> (2 - gx) & 1 == 1)
            }
        }
    }

    /// Every color the texture can produce.
    pub fn palette(&self) -> Vec<[u8; 3]> {
        match self.kind {
            TextureKind::Solid => vec![self.colors[0]],
            _ => self.colors.to_vec(),
        }
    }

    pub fn render_tile(&self, width: usize, height: usize) -> RgbImage {
        RgbImage::from_fn(width as u32, height as u32, |x, y| Rgb(self.color_at(x as i64, y as i64)))
    }
}

/// Draws a texture of the given kind and renders a `size × size` tile.
pub fn gen_garment_texture<R: Rng + ?Sized>(
    rng: &mut R,
    kind: TextureKind,
    size: usize,
) -> (TextureDescriptor, RgbImage) {
    let desc = draw_texture(rng, kind);
    let tile = desc.render_tile(size, size);
    (desc, tile)
}

fn draw_texture<R: Rng + ?Sized>(rng: &mut R, kind: TextureKind) -> TextureDescriptor {
    let a = rng.random_range(0..GARMENT_COLORS.len());
    let mut b = rng.random_range(0..GARMENT_COLORS.len() - 1);
    if b >= a {
        b += 1;
    }
    let period = [4u32, 8, 16][rng.random_range(0..3)];
    let angle = [0u32, 90, 45][rng.random_range(0..3)];
    let glyph_seed = rng.random::<u64>();
    TextureDescriptor { kind, period, angle, colors: [GARMENT_COLORS[a], GARMENT_COLORS[b]], glyph_seed }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthClass {
    Short,
    Medium,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseClass {
    ArmsDown,
    ArmsOut,
}

/// Pixel-center shape primitives in canvas coordinates.
#[derive(Clone, Debug)]
enum Shape {
    Polygon(Vec<(f32, f32)>),
    Capsule { a: (f32, f32), b: (f32, f32), r: f32 },
    Circle { c: (f32, f32), r: f32 },
    Clipped { shape: Box<Shape>, y0: f32, y1: f32 },
    Union(Vec<Shape>),
}

impl Shape {
    fn contains(&self, px: f32, py: f32) -> bool {
        match self {
            Shape::Polygon(pts) => {
                let mut inside = false;
                let n = pts.len();
                for i in 0..n {
                    let (xi, yi) = pts[i];
                    let (xj, yj) = pts[(i + n - 1) % n];
                    if (yi > py) != (yj > py) && px < (xj - xi) * (py - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
            Shape::Capsule { a, b, r } => {
                let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            }
            Shape::Circle { c, r } => (px - c.0).powi(2) + (py - c.1).powi(2) <= r * r,
            Shape::Clipped { shape, y0, y1 } => py >= *y0 && py <= *y1 && shape.contains(px, py),
            Shape::Union(parts) => parts.iter().any(|s| s.contains(px, py)),
        }
    }

    fn rasterize(&self, width: usize, height: usize) -> BinaryGrid {
        let mut g = BinaryGrid::new(width, height);
        for y in 0..height {
            for x in 0..width {
                g.set(x, y, self.contains(x as f32 + 0.5, y as f32 + 0.5));
            }
        }
        g
    }
}

/// Body geometry in canvas pixels.
#[derive(Clone, Debug)]
struct Body {
    height: usize,
    width: usize,
    cx: f32,
    sy: f32,
    head: (f32, f32, f32),
    shoulder_y: f32,
    shoulder_half: f32,
    hip_y: f32,
    hip_half: f32,
    keypoints: PoseKeypoints,
    skin: [u8; 3],
    pose: PoseClass,
}

fn clamp_point(x: f32, y: f32, width: usize, height: usize) -> Keypoint {
    Keypoint::new(x.clamp(0.5, width as f32 - 0.5), y.clamp(0.5, height as f32 - 0.5))
}

fn draw_body<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, pose: PoseClass) -> Body {
    let sx = width as f32 / 64.0;
    let sy = height as f32 / 64.0;
    let u = |rng: &mut R, lo: f32, hi: f32| rng.random_range(lo..=hi);
    let cx = (32.0 + u(rng, -2.0, 2.0)) * sx;
    let head_y = (7.0 + u(rng, -1.0, 1.0)) * sy;
    let head_r = (4.0 + u(rng, 0.0, 1.0)) * sy;
    let shoulder_y = (15.0 + u(rng, -1.0, 1.0)) * sy;
    let shoulder_half = (8.0 + u(rng, -1.0, 1.5)) * sx;
    let hip_y = shoulder_y + (18.0 + u(rng, -1.0, 2.0)) * sy;
    let hip_half = (5.5 + u(rng, -0.5, 1.0)) * sx;
    let feet_y = (59.0 + u(rng, -1.0, 1.5)) * sy;
    let mut hands = [Keypoint::default(); 2];
    let mut feet = [Keypoint::default(); 2];
    for (i, side) in [-1.0f32, 1.0].into_iter().enumerate() {
        let (hx, hy) = match pose {
            PoseClass::ArmsDown => (
                cx + side * (shoulder_half + u(rng, 1.0, 4.0) * sx),
                hip_y - u(rng, 2.0, 6.0) * sy,
            ),
            PoseClass::ArmsOut => (
                cx + side * (shoulder_half + u(rng, 9.0, 13.0) * sx),
                shoulder_y + u(rng, -6.0, 4.0) * sy,
            ),
        };
        hands[i] = clamp_point(hx, hy, width, height);
        let fx = cx + side * (hip_half + u(rng, -1.0, 3.0) * sx);
        feet[i] = clamp_point(fx, feet_y, width, height);
    }
    let keypoints = PoseKeypoints {
        hands,
        feet,
        shoulders: [
            clamp_point(cx - shoulder_half, shoulder_y, width, height),
            clamp_point(cx + shoulder_half, shoulder_y, width, height),
        ],
        hips: [
            clamp_point(cx - hip_half, hip_y, width, height),
            clamp_point(cx + hip_half, hip_y, width, height),
        ],
        head: clamp_point(cx, head_y, width, height),
    };
    let skin = SKIN_TONES[rng.random_range(0..SKIN_TONES.len())];
    Body {
        height,
        width,
        cx,
        sy,
        head: (cx, head_y, head_r),
        shoulder_y,
        shoulder_half,
        hip_y,
        hip_half,
        keypoints,
        skin,
        pose,
    }
}

impl Body {
    fn sx(&self) -> f32 {
        self.width as f32 / 64.0
    }

    fn feet_y(&self) -> f32 {
        self.keypoints.feet[0].y.max(self.keypoints.feet[1].y)
    }

    fn torso(&self) -> Shape {
        let (c, sh, hh) = (self.cx, self.shoulder_half, self.hip_half);
        Shape::Polygon(vec![
            (c - sh, self.shoulder_y),
            (c + sh, self.shoulder_y),
            (c + hh, self.hip_y),
            (c - hh, self.hip_y),
        ])
    }

    fn legs(&self) -> Shape {
        let kp = &self.keypoints;
        let r = 2.2 * self.sx();
        Shape::Union(
            (0..2)
                .map(|i| Shape::Capsule { a: (kp.hips[i].x, kp.hips[i].y), b: (kp.feet[i].x, kp.feet[i].y), r })
                .collect(),
        )
    }

    fn arms(&self) -> Shape {
        let kp = &self.keypoints;
        let r = 1.3 * self.sx();
        Shape::Union(
            (0..2)
                .map(|i| Shape::Capsule {
                    a: (kp.shoulders[i].x, kp.shoulders[i].y),
                    b: (kp.hands[i].x, kp.hands[i].y),
                    r,
                })
                .collect(),
        )
    }

    fn shoes(&self) -> Shape {
        let kp = &self.keypoints;
        let (w, h) = (2.6 * self.sx(), 1.6 * self.sy);
        Shape::Union(
            (0..2)
                .map(|i| {
                    let (x, y) = (kp.feet[i].x, kp.feet[i].y);
                    Shape::Polygon(vec![(x - w, y - h), (x + w, y - h), (x + w, y + h), (x - w, y + h)])
                })
                .collect(),
        )
    }

    fn head_shape(&self) -> Shape {
        Shape::Circle { c: (self.head.0, self.head.1), r: self.head.2 }
    }

    /// Bottom edge of a garment of the given category and length.
    fn garment_bottom<R: Rng + ?Sized>(&self, rng: &mut R, cat: Category, len: LengthClass) -> f32 {
        let s = self.sy;
        let u = |rng: &mut R, lo: f32, hi: f32| rng.random_range(lo..=hi);
        let feet = self.feet_y();
        match (cat, len) {
            (Category::Upper, LengthClass::Short) => self.hip_y - u(rng, 4.0, 7.0) * s,
            (Category::Upper, LengthClass::Medium) => self.hip_y + u(rng, 0.0, 3.0) * s,
            (Category::Upper, LengthClass::Long) => self.hip_y + u(rng, 10.0, 15.0) * s,
            (Category::Lower, LengthClass::Short) => self.hip_y + u(rng, 7.0, 10.0) * s,
            (Category::Lower, LengthClass::Medium) => self.hip_y + u(rng, 13.0, 17.0) * s,
            (Category::Lower, LengthClass::Long) => feet - u(rng, 1.0, 3.0) * s,
            (Category::Dress, LengthClass::Short) => self.hip_y + u(rng, 7.0, 10.0) * s,
            (Category::Dress, LengthClass::Medium) => self.hip_y + u(rng, 14.0, 18.0) * s,
            (Category::Dress, LengthClass::Long) => feet - u(rng, 2.0, 4.0) * s,
        }
    }

    fn garment_shape(&self, cat: Category, bottom: f32) -> Shape {
        let (c, sx, sy) = (self.cx, self.sx(), self.sy);
        let top = self.shoulder_y - 1.0 * sy;
        match cat {
            Category::Upper => {
                let top_half = self.shoulder_half + 1.5 * sx;
                let hip_half = self.hip_half + 2.0 * sx;
                let half_at = |y: f32| {
                    if y <= self.hip_y {
                        let f = (y - top) / (self.hip_y - top);
                        top_half + f * (hip_half - top_half)
                    } else {
                        hip_half + (y - self.hip_y) * 0.25
                    }
                };
                let mut pts = vec![(c - top_half, top), (c + top_half, top)];
                if bottom > self.hip_y {
                    pts.push((c + hip_half, self.hip_y));
                }
                pts.push((c + half_at(bottom), bottom));
                pts.push((c - half_at(bottom), bottom));
                if bottom > self.hip_y {
                    pts.push((c - hip_half, self.hip_y));
                }
                Shape::Polygon(pts)
            }
            Category::Lower => {
                let waist = self.hip_y - 2.0 * sy;
                let crotch = (self.hip_y + 4.0 * sy).min(bottom);
                let half = self.hip_half + 2.0 * sx;
                let kp = &self.keypoints;
                let block = Shape::Polygon(vec![
                    (c - half, waist),
                    (c + half, waist),
                    (c + half, crotch),
                    (c - half, crotch),
                ]);
                let legs = (0..2).map(|i| Shape::Capsule {
                    a: (kp.hips[i].x, kp.hips[i].y),
                    b: (kp.feet[i].x, kp.feet[i].y),
                    r: 3.0 * sx,
                });
                Shape::Clipped {
                    shape: Box::new(Shape::Union(std::iter::once(block).chain(legs).collect())),
                    y0: waist,
                    y1: bottom,
                }
            }
            Category::Dress => {
                let top_half = self.shoulder_half + 1.5 * sx;
                let waist = self.hip_y - 4.0 * sy;
                let waist_half = self.hip_half + 1.0 * sx;
                let flare = |y: f32| self.hip_half + 2.0 * sx + (y - self.hip_y).max(0.0) * 0.45;
                Shape::Polygon(vec![
                    (c - top_half, top),
                    (c + top_half, top),
                    (c + waist_half, waist),
                    (c + flare(bottom), bottom),
                    (c - flare(bottom), bottom),
                    (c - waist_half, waist),
                ])
            }
        }
    }
}

/// One paired record.
#[derive(Clone, Debug, PartialEq)]
pub struct TryOnSample {
    pub person: RgbImage,
    pub garment: RgbImage,
    pub keypoints: PoseKeypoints,
    pub parsing: ParsingMap,
    pub category: Category,
    pub texture: TextureDescriptor,
    pub length: LengthClass,
    pub pose: PoseClass,
}

impl TryOnSample {
    pub fn width(&self) -> usize {
        self.person.width() as usize
    }

    pub fn height(&self) -> usize {
        self.person.height() as usize
    }

    /// Parsing region of the sample's own garment.
    pub fn garment_region(&self) -> BinaryGrid {
        self.parsing.region(self.category.parsing_label())
    }

    /// Silhouette of the flat garment (non-white pixels).
    pub fn flat_garment_mask(&self) -> BinaryGrid {
        let (w, h) = (self.width(), self.height());
        BinaryGrid {
            width: w,
            height: h,
            data: self.garment.pixels().map(|p| p.0 != FLAT_BACKGROUND).collect(),
        }
    }

    pub fn meta(&self) -> SampleMeta {
        SampleMeta { category: self.category, texture: self.texture, length: self.length, pose: self.pose }
    }
}

/// Optional overrides for [`gen_sample_with`].
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleSpec {
    pub length: Option<LengthClass>,
    pub pose: Option<PoseClass>,
    pub texture: Option<TextureKind>,
}

/// Stick figure without the target garment, and its keypoints.
pub fn gen_person<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> (RgbImage, PoseKeypoints) {
    let pose = if rng.random_bool(0.5) { PoseClass::ArmsDown } else { PoseClass::ArmsOut };
    let body = draw_body(rng, height, width, pose);
    let (img, _) = render(&body, &[]);
    (img, body.keypoints)
}

fn check_canvas(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
        return Err(Error::Config(format!("canvas {height}x{width} must be positive multiples of 16")));
    }
    Ok(())
}

struct Layer<'a> {
    grid: BinaryGrid,
    label: ParsingLabel,
    paint: Box<dyn Fn(usize, usize) -> [u8; 3] + 'a>,
}

fn render(body: &Body, garments: &[Layer<'_>]) -> (RgbImage, ParsingMap) {
    let (w, h) = (body.width, body.height);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb(BACKGROUND));
    let mut parsing = ParsingMap::new(w, h);
    let mut paint = |grid: &BinaryGrid, label: ParsingLabel, f: &dyn Fn(usize, usize) -> [u8; 3]| {
        for y in 0..h {
            for x in 0..w {
                if grid.get(x, y) {
                    img.put_pixel(x as u32, y as u32, Rgb(f(x, y)));
                    parsing.labels[y * w + x] = label;
                }
            }
        }
    };
    let skin = body.skin;
    paint(&body.legs().rasterize(w, h), ParsingLabel::Skin, &|_, _| skin);
    paint(&body.shoes().rasterize(w, h), ParsingLabel::Other, &|_, _| SHOE);
    paint(&body.torso().rasterize(w, h), ParsingLabel::Skin, &|_, _| skin);
    for g in garments {
        paint(&g.grid, g.label, &*g.paint);
    }
    paint(&body.arms().rasterize(w, h), ParsingLabel::Skin, &|_, _| skin);
    paint(&body.head_shape().rasterize(w, h), ParsingLabel::Skin, &|_, _| skin);
    (img, parsing)
}

/// Generates a sample with random length, pose and texture.
pub fn gen_sample<R: Rng + ?Sized>(
    rng: &mut R,
    category: Category,
    height: usize,
    width: usize,
) -> Result<TryOnSample> {
    gen_sample_with(rng, category, height, width, SampleSpec::default())
}

pub fn gen_sample_with<R: Rng + ?Sized>(
    rng: &mut R,
    category: Category,
    height: usize,
    width: usize,
    spec: SampleSpec,
) -> Result<TryOnSample> {
    check_canvas(height, width)?;
    // fixed draw order keeps overrides from shifting later draws
    let pose_draw = if rng.random_bool(0.5) { PoseClass::ArmsDown } else { PoseClass::ArmsOut };
    let len_draw = [LengthClass::Short, LengthClass::Medium, LengthClass::Long][rng.random_range(0..3)];
    let kind_draw = {
        let r: f64 = rng.random();
        if r < 0.35 {
            TextureKind::Stripes
        } else if r < 0.6 {
            TextureKind::Checker
        } else if r < 0.85 {
            TextureKind::Glyphs
        } else {
            TextureKind::Solid
        }
    };
    let pose = spec.pose.unwrap_or(pose_draw);
    let length = spec.length.unwrap_or(len_draw);
    let kind = spec.texture.unwrap_or(kind_draw);
    let texture = draw_texture(rng, kind);
    let body = draw_body(rng, height, width, pose);
    let bottom = body.garment_bottom(rng, category, length);
    let neutral = NEUTRALS[rng.random_range(0..NEUTRALS.len())];

    let silhouette = body.garment_shape(category, bottom).rasterize(width, height);
    let bbox = silhouette.bbox().ok_or_else(|| Error::Domain("empty garment silhouette".into()))?;
    let mut layers = Vec::new();
    match category {
        Category::Upper => {
            let pants_bottom = body.feet_y() - 2.0 * body.sy;
            layers.push(Layer {
                grid: body.garment_shape(Category::Lower, pants_bottom).rasterize(width, height),
                label: ParsingLabel::LowerGarment,
                paint: Box::new(move |_, _| neutral),
            });
        }
        Category::Lower => {
            let top_bottom = body.hip_y + 1.0 * body.sy;
            layers.push(Layer {
                grid: body.garment_shape(Category::Upper, top_bottom).rasterize(width, height),
                label: ParsingLabel::UpperGarment,
                paint: Box::new(move |_, _| neutral),
            });
        }
        Category::Dress => {}
    }
    let (x0, y0) = (bbox.x0, bbox.y0);
    layers.push(Layer {
        grid: silhouette.clone(),
        label: category.parsing_label(),
        paint: Box::new(move |x, y| texture.color_at(x as i64 - x0, y as i64 - y0)),
    });
    let (person, parsing) = render(&body, &layers);
    let garment = flat_garment(&silhouette, bbox, &texture, width, height);
    Ok(TryOnSample {
        person,
        garment,
        keypoints: body.keypoints,
        parsing,
        category,
        texture,
        length,
        pose: body.pose,
    })
}

/// Silhouette translated to the canvas centre on a white background.
fn flat_garment(silhouette: &BinaryGrid, bbox: Rect, tex: &TextureDescriptor, w: usize, h: usize) -> RgbImage {
    let dx = (w as i64 - bbox.width()) / 2 - bbox.x0;
    let dy = (h as i64 - bbox.height()) / 2 - bbox.y0;
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb(FLAT_BACKGROUND));
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if silhouette.get(x as usize, y as usize) {
                let (fx, fy) = (x + dx, y + dy);
                if fx >= 0 && fy >= 0 && fx < w as i64 && fy < h as i64 {
                    let c = tex.color_at(x - bbox.x0, y - bbox.y0);
                    img.put_pixel(fx as u32, fy as u32, Rgb(c));
                }
            }
        }
    }
    img
}

/// `[3, H, W]` tensor in `[-1, 1]`.
pub fn image_to_latent(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = p.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("well-formed image")
}

/// Inverse of [`image_to_latent`], clamping and rounding to 8 bits.
pub fn latent_to_image(t: &Tensor) -> Result<RgbImage> {
    let d = t.dims();
    if d.len() != 3 || d[0] != 3 {
        return Err(crate::error::shape_err!("expected [3, H, W], got {d:?}"));
    }
    let (h, w) = (d[1], d[2]);
    let v = t.data();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        let px = |c: usize| ((v[c * w * h + i] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

/// Per-sample metadata kept in the manifest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub category: Category,
    pub texture: TextureDescriptor,
    pub length: LengthClass,
    pub pose: PoseClass,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub count: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub splits: Splits,
    /// `unpaired[i]` is the index of the garment worn in the unpaired
    /// setting; never `i`.
    pub unpaired: Vec<usize>,
    pub samples: Vec<SampleMeta>,
    /// SHA-256 over every sample file in index order.
    pub content_hash: String,
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<TryOnSample>,
}

fn split_indices(count: usize) -> Splits {
    let n_val = (count / 10).max(1);
    let n_test = (count / 10).max(1);
    let n_train = count - n_val - n_test;
    Splits {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..count).collect(),
    }
}

/// Derangement within each split, falling back to the whole set for
/// single-element splits.
fn unpaired_indices(splits: &Splits, count: usize, seed: u64) -> Vec<usize> {
    let mut out = vec![0; count];
    let all: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 0xA5A5));
    for part in [&splits.train, &splits.val, &splits.test] {
        let pool = if part.len() >= 2 { part } else { &all };
        let n = pool.len();
        for &i in part.iter() {
            let k = pool.iter().position(|&p| p == i).expect("member of pool");
            let off = 1 + rng.random_range(0..n - 1);
            out[i] = pool[(k + off) % n];
        }
    }
    out
}

/// Deterministic dataset from `(seed, count, height, width)`.
pub fn generate_dataset(seed: u64, count: usize, height: usize, width: usize) -> Result<Dataset> {
    check_canvas(height, width)?;
    if count < 3 {
        return Err(Error::Config("a dataset needs at least 3 samples".into()));
    }
    let samples = (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, i as u64));
            let cat = Category::ALL[rng.random_range(0..3)];
            gen_sample(&mut rng, cat, height, width)
        })
        .collect::<Result<Vec<_>>>()?;
    let splits = split_indices(count);
    let unpaired = unpaired_indices(&splits, count, seed);
    let mut manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        count,
        seed,
        height,
        width,
        splits,
        unpaired,
        samples: samples.iter().map(TryOnSample::meta).collect(),
        content_hash: String::new(),
    };
    let mut hasher = Sha256::new();
    for s in &samples {
        for bytes in encode_sample(s)? {
            hasher.update(&bytes);
        }
    }
    manifest.content_hash = hex::encode(hasher.finalize());
    Ok(Dataset { manifest, samples })
}

impl Dataset {
    pub fn split(&self, which: &[usize]) -> Vec<&TryOnSample> {
        which.iter().map(|&i| &self.samples[i]).collect()
    }

    pub fn train(&self) -> Vec<&TryOnSample> {
        self.split(&self.manifest.splits.train)
    }

    pub fn val(&self) -> Vec<&TryOnSample> {
        self.split(&self.manifest.splits.val)
    }

    pub fn test(&self) -> Vec<&TryOnSample> {
        self.split(&self.manifest.splits.test)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["person", "garment", "parsing", "pose"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        for (i, s) in self.samples.iter().enumerate() {
            let [person, garment, parsing, pose] = encode_sample(s)?;
            for (path, bytes) in sample_paths(dir, i).into_iter().zip([person, garment, parsing, pose]) {
                fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
            }
        }
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&self.manifest)?).map_err(|e| Error::io(&path, e))
    }

    /// Reads a dataset and validates every invariant plus the content hash.
    pub fn read(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.json");
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset { path: mpath.clone(), reason: e.to_string() })?;
        let bad = |reason: String| Error::Dataset { path: mpath.clone(), reason };
        if manifest.version != MANIFEST_VERSION {
            return Err(bad(format!("unsupported manifest version {}", manifest.version)));
        }
        if manifest.samples.len() != manifest.count || manifest.unpaired.len() != manifest.count {
            return Err(bad("sample count does not match metadata".into()));
        }
        if let Some(i) = (0..manifest.count).find(|&i| manifest.unpaired[i] == i || manifest.unpaired[i] >= manifest.count) {
            return Err(bad(format!("unpaired index of sample {i} is invalid")));
        }
        let mut hasher = Sha256::new();
        let mut samples = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let paths = sample_paths(dir, i);
            let mut raw = Vec::with_capacity(4);
            for p in &paths {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                hasher.update(&bytes);
                raw.push(bytes);
            }
            let decode_rgb = |bytes: &[u8], path: &Path| -> Result<RgbImage> {
                let img = image::load_from_memory(bytes).map_err(|e| Error::image(path, e))?.to_rgb8();
                if img.width() as usize != manifest.width || img.height() as usize != manifest.height {
                    return Err(Error::Dataset { path: path.into(), reason: "image size differs from manifest".into() });
                }
                Ok(img)
            };
            let person = decode_rgb(&raw[0], &paths[0])?;
            let garment = decode_rgb(&raw[1], &paths[1])?;
            let gray = image::load_from_memory(&raw[2]).map_err(|e| Error::image(&paths[2], e))?.to_luma8();
            let parsing = ParsingMap::from_image(&gray, &paths[2])?;
            let text = std::str::from_utf8(&raw[3]).map_err(|_| Error::Dataset {
                path: paths[3].clone(),
                reason: "keypoints are not UTF-8".into(),
            })?;
            let keypoints = PoseKeypoints::from_json(text)
                .map_err(|e| Error::Dataset { path: paths[3].clone(), reason: e.to_string() })?;
            if !keypoints.within(manifest.width, manifest.height) {
                return Err(Error::Dataset { path: paths[3].clone(), reason: "keypoint outside the image".into() });
            }
            let meta = manifest.samples[i];
            samples.push(TryOnSample {
                person,
                garment,
                keypoints,
                parsing,
                category: meta.category,
                texture: meta.texture,
                length: meta.length,
                pose: meta.pose,
            });
        }
        let hash = hex::encode(hasher.finalize());
        if hash != manifest.content_hash {
            return Err(bad(format!("content hash {hash} does not match manifest")));
        }
        Ok(Dataset { manifest, samples })
    }
}

fn sample_paths(dir: &Path, i: usize) -> [PathBuf; 4] {
    [
        dir.join(format!("person/{i:06}.png")),
        dir.join(format!("garment/{i:06}.png")),
        dir.join(format!("parsing/{i:06}.png")),
        dir.join(format!("pose/{i:06}.json")),
    ]
}

pub(crate) fn encode_png<P, C>(img: &image::ImageBuffer<P, C>) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::image("<memory>", e))?;
    Ok(buf.into_inner())
}

fn encode_sample(s: &TryOnSample) -> Result<[Vec<u8>; 4]> {
    Ok([
        encode_png(&s.person)?,
        encode_png(&s.garment)?,
        encode_png(&s.parsing.to_image())?,
        s.keypoints.to_json()?.into_bytes(),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn same_seed_same_sample() {
        let a = gen_sample(&mut rng(5), Category::Dress, 64, 64).unwrap();
        let b = gen_sample(&mut rng(5), Category::Dress, 64, 64).unwrap();
        assert_eq!(a, b);
        let (p1, k1) = gen_person(&mut rng(9), 64, 64);
        let (p2, k2) = gen_person(&mut rng(9), 64, 64);
        assert_eq!(p1, p2);
        assert_eq!(k1, k2);
    }

    #[test]
    fn keypoints_inside_canvas() {
        for seed in 0..200 {
            for cat in Category::ALL {
                let s = gen_sample(&mut rng(seed), cat, 64, 64).unwrap();
                assert!(s.keypoints.within(64, 64));
            }
        }
        for seed in 0..50 {
            let (_, kp) = gen_person(&mut rng(seed), 128, 96);
            assert!(kp.within(96, 128));
        }
    }

    #[test]
    fn arms_down_hands_between_shoulders_and_hips() {
        for seed in 0..100 {
            let spec = SampleSpec { pose: Some(PoseClass::ArmsDown), ..Default::default() };
            let s = gen_sample_with(&mut rng(seed), Category::Upper, 64, 64, spec).unwrap();
            for i in 0..2 {
                assert!(s.keypoints.hands[i].y < s.keypoints.hips[i].y);
                assert!(s.keypoints.hands[i].y > s.keypoints.shoulders[i].y);
            }
        }
    }

    #[test]
    fn parsing_region_nonempty_and_textured() {
        for seed in 0..60 {
            for cat in Category::ALL {
                let s = gen_sample(&mut rng(seed), cat, 64, 64).unwrap();
                let region = s.garment_region();
                assert!(region.count() > 20, "seed {seed} {cat}");
                let palette = s.texture.palette();
                for y in 0..64 {
                    for x in 0..64 {
                        if region.get(x, y) {
                            assert!(palette.contains(&s.person.get_pixel(x as u32, y as u32).0));
                        }
                    }
                }
                // flat garment uses only the same colors
                for p in s.garment.pixels() {
                    assert!(p.0 == FLAT_BACKGROUND || palette.contains(&p.0));
                }
            }
        }
    }

    #[test]
    fn long_coats_pass_hips_vests_do_not() {
        for seed in 0..60 {
            let long = gen_sample_with(
                &mut rng(seed),
                Category::Upper,
                64,
                64,
                SampleSpec { length: Some(LengthClass::Long), ..Default::default() },
            )
            .unwrap();
            let short = gen_sample_with(
                &mut rng(seed),
                Category::Upper,
                64,
                64,
                SampleSpec { length: Some(LengthClass::Short), ..Default::default() },
            )
            .unwrap();
            let hip = long.keypoints.hips[0].y.max(long.keypoints.hips[1].y);
            assert!(long.garment_region().bbox().unwrap().y1 as f32 > hip);
            let hip = short.keypoints.hips[0].y.min(short.keypoints.hips[1].y);
            assert!((short.garment_region().bbox().unwrap().y1 as f32) < hip);
        }
    }

    #[test]
    fn solid_texture_is_constant() {
        let (d, tile) = gen_garment_texture(&mut rng(1), TextureKind::Solid, 32);
        assert!(tile.pixels().all(|p| p.0 == d.colors[0]));
        let (g1, _) = gen_garment_texture(&mut rng(4), TextureKind::Glyphs, 32);
        let (g2, _) = gen_garment_texture(&mut rng(4), TextureKind::Glyphs, 32);
        assert_eq!(g1.render_tile(24, 24), g2.render_tile(24, 24));
    }

    #[test]
    fn latent_round_trip() {
        let s = gen_sample(&mut rng(2), Category::Lower, 64, 64).unwrap();
        let back = latent_to_image(&image_to_latent(&s.person)).unwrap();
        assert_eq!(back, s.person);
    }

    #[test]
    fn unpaired_is_derangement() {
        let splits = split_indices(50);
        let u = unpaired_indices(&splits, 50, 3);
        for (i, &j) in u.iter().enumerate() {
            assert_ne!(i, j);
        }
    }

    #[test]
    fn canvas_must_be_multiple_of_16() {
        assert!(gen_sample(&mut rng(0), Category::Upper, 60, 64).is_err());
    }
}
