//! Dilated-relaxed agnostic masks.
//!
//! The mask is the smallest axis-aligned rectangle enclosing the
//! category's keypoints and its parsing region, with each edge pushed
//! outward by an independent random amount and clamped to the image.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::GrayImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{Keypoint, PoseKeypoints};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Upper,
    Lower,
    Dress,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Upper, Category::Lower, Category::Dress];

    pub fn parsing_label(self) -> ParsingLabel {
        match self {
            Category::Upper => ParsingLabel::UpperGarment,
            Category::Lower => ParsingLabel::LowerGarment,
            Category::Dress => ParsingLabel::Dress,
        }
    }

    /// Keypoints that must lie inside the mask, with their names.
    pub fn required_keypoints(self, kp: &PoseKeypoints) -> Vec<(&'static str, Keypoint)> {
        let hands = [("left hand", kp.hands[0]), ("right hand", kp.hands[1])];
        let feet = [("left foot", kp.feet[0]), ("right foot", kp.feet[1])];
        match self {
            Category::Upper => hands.to_vec(),
            Category::Lower => feet.to_vec(),
            Category::Dress => hands.into_iter().chain(feet).collect(),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Upper => "upper",
            Category::Lower => "lower",
            Category::Dress => "dress",
        })
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "upper" => Ok(Category::Upper),
            "lower" => Ok(Category::Lower),
            "dress" => Ok(Category::Dress),
            other => Err(Error::Config(format!("unknown category `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParsingLabel {
    Background,
    UpperGarment,
    LowerGarment,
    Dress,
    Skin,
    Other,
}

impl ParsingLabel {
    pub const ALL: [ParsingLabel; 6] = [
        ParsingLabel::Background,
        ParsingLabel::UpperGarment,
        ParsingLabel::LowerGarment,
        ParsingLabel::Dress,
        ParsingLabel::Skin,
        ParsingLabel::Other,
    ];

    /// Gray value used in parsing PNGs.
    pub fn gray(self) -> u8 {
        match self {
            ParsingLabel::Background => 0,
            ParsingLabel::UpperGarment => 50,
            ParsingLabel::LowerGarment => 100,
            ParsingLabel::Dress => 150,
            ParsingLabel::Skin => 200,
            ParsingLabel::Other => 250,
        }
    }

    pub fn from_gray(v: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|l| l.gray() == v)
    }
}

/// Binary `width × height` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryGrid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl BinaryGrid {
    pub fn new(width: usize, height: usize) -> Self {
        BinaryGrid { width, height, data: vec![false; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    /// Inclusive bounding box of the set pixels.
    pub fn bbox(&self) -> Option<Rect> {
        let mut r: Option<Rect> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let (x, y) = (x as i64, y as i64);
                    r = Some(match r {
                        None => Rect { x0: x, y0: y, x1: x, y1: y },
                        Some(r) => Rect {
                            x0: r.x0.min(x),
                            y0: r.y0.min(y),
                            x1: r.x1.max(x),
                            y1: r.y1.max(y),
                        },
                    });
                }
            }
        }
        r
    }

    /// Every set pixel of `other` is set here.
    pub fn contains(&self, other: &BinaryGrid) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| a || !b)
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }])
        })
    }

    pub fn from_image(img: &GrayImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        BinaryGrid { width: w, height: h, data: img.pixels().map(|p| p.0[0] >= 128).collect() }
    }
}

/// Inclusive pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
}

impl Rect {
    pub fn width(&self) -> i64 {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> i64 {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> i64 {
        self.width() * self.height()
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn fill(&self, width: usize, height: usize) -> BinaryGrid {
        let mut g = BinaryGrid::new(width, height);
        for y in 0..height {
            for x in 0..width {
                g.set(x, y, self.contains(x as i64, y as i64));
            }
        }
        g
    }
}

/// Per-pixel human parsing labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParsingMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<ParsingLabel>,
}

impl ParsingMap {
    pub fn new(width: usize, height: usize) -> Self {
        ParsingMap { width, height, labels: vec![ParsingLabel::Background; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> ParsingLabel {
        self.labels[y * self.width + x]
    }

    pub fn region(&self, label: ParsingLabel) -> BinaryGrid {
        BinaryGrid {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| l == label).collect(),
        }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([self.get(x as usize, y as usize).gray()])
        })
    }

    /// Decodes the gray palette; the error names the first bad value.
    pub fn from_image(img: &GrayImage, path: &Path) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut labels = Vec::with_capacity(w * h);
        for (i, p) in img.pixels().enumerate() {
            let label = ParsingLabel::from_gray(p.0[0]).ok_or_else(|| Error::Dataset {
                path: path.to_path_buf(),
                reason: format!(
                    "parsing value {} at ({}, {}) is not in the label palette",
                    p.0[0],
                    i % w,
                    i / w
                ),
            })?;
            labels.push(label);
        }
        Ok(ParsingMap { width: w, height: h, labels })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_luma8();
        Self::from_image(&img, path)
    }
}

/// Pixel amounts each edge was moved outward, before clamping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeDilation {
    pub left: u32,
    pub top: u32,
    pub right: u32,
    pub bottom: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DilationRange {
    pub min: u32,
    pub max: u32,
}

impl DilationRange {
    pub fn new(min: u32, max: u32) -> Result<Self> {
        if min > max {
            return Err(Error::Config(format!("dilation range {min}:{max} has min > max")));
        }
        Ok(DilationRange { min, max })
    }

    /// Default `[4, 16]` at 64 px, scaled with the image height.
    pub fn default_for(height: usize) -> Self {
        let s = height as f64 / 64.0;
        DilationRange { min: (4.0 * s).round() as u32, max: (16.0 * s).round() as u32 }
    }

    /// Maps a uniform draw in `[0, 1)` to an amount; monotone in both
    /// bounds for a fixed draw.
    fn amount(&self, u: f64) -> u32 {
        let span = (self.max - self.min + 1) as f64;
        self.min + ((u * span).floor() as u32).min(self.max - self.min)
    }
}

impl Default for DilationRange {
    fn default() -> Self {
        DilationRange { min: 4, max: 16 }
    }
}

impl FromStr for DilationRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("dilation `{s}` is not MIN:MAX")))?;
        let parse = |v: &str| {
            v.trim().parse::<u32>().map_err(|_| Error::Config(format!("bad dilation bound `{v}`")))
        };
        DilationRange::new(parse(a)?, parse(b)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskProvenance {
    pub category: Category,
    pub enclosing: Rect,
    pub dilation: EdgeDilation,
    pub rect: Rect,
    pub keypoints_used: Vec<(String, f32, f32)>,
    pub parsing_bbox: Rect,
}

/// Binary inpainting mask: exactly the filled dilated rectangle.
#[derive(Clone, Debug, PartialEq)]
pub struct AgnosticMask {
    pub grid: BinaryGrid,
    pub provenance: MaskProvenance,
}

impl AgnosticMask {
    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.grid.to_f32()
    }

    /// A mask that covers the whole image, used when no parsing exists.
    pub fn full(width: usize, height: usize, category: Category) -> Self {
        let r = Rect { x0: 0, y0: 0, x1: width as i64 - 1, y1: height as i64 - 1 };
        AgnosticMask {
            grid: r.fill(width, height),
            provenance: MaskProvenance {
                category,
                enclosing: r,
                dilation: EdgeDilation { left: 0, top: 0, right: 0, bottom: 0 },
                rect: r,
                keypoints_used: Vec::new(),
                parsing_bbox: r,
            },
        }
    }
}

/// Smallest rectangle covering every point and the region's bounding box.
pub fn enclosing_rect(points: &[(i64, i64)], region: &BinaryGrid) -> Result<Rect> {
    let mut r = region.bbox();
    for &(x, y) in points {
        r = Some(match r {
            None => Rect { x0: x, y0: y, x1: x, y1: y },
            Some(r) => Rect { x0: r.x0.min(x), y0: r.y0.min(y), x1: r.x1.max(x), y1: r.y1.max(y) },
        });
    }
    r.ok_or_else(|| Error::MissingInput("no points and an empty region".into()))
}

/// Moves each edge outward by an independent amount drawn from `range`,
/// then clamps to a `width × height` image.
pub fn dilate_relax<R: Rng + ?Sized>(
    rect: Rect,
    rng: &mut R,
    range: DilationRange,
    width: usize,
    height: usize,
) -> (Rect, EdgeDilation) {
    let mut draw = || range.amount(rng.random::<f64>());
    let d = EdgeDilation { left: draw(), top: draw(), right: draw(), bottom: draw() };
    let r = Rect {
        x0: (rect.x0 - d.left as i64).max(0),
        y0: (rect.y0 - d.top as i64).max(0),
        x1: (rect.x1 + d.right as i64).min(width as i64 - 1),
        y1: (rect.y1 + d.bottom as i64).min(height as i64 - 1),
    };
    (r, d)
}

/// Builds the agnostic mask for `category` from keypoints and parsing.
pub fn build_agnostic_mask<R: Rng + ?Sized>(
    category: Category,
    kp: &PoseKeypoints,
    parsing: &ParsingMap,
    rng: &mut R,
    range: DilationRange,
) -> Result<AgnosticMask> {
    let (w, h) = (parsing.width, parsing.height);
    let required = category.required_keypoints(kp);
    let missing: Vec<&str> = required.iter().filter(|(_, k)| !k.visible).map(|(n, _)| *n).collect();
    if !missing.is_empty() {
        return Err(Error::MissingInput(format!(
            "{category} mask needs visible {}",
            missing.join(", ")
        )));
    }
    let region = parsing.region(category.parsing_label());
    let parsing_bbox = region.bbox().ok_or_else(|| {
        Error::MissingInput(format!("parsing map has no {category} garment region"))
    })?;
    let mut points = Vec::with_capacity(required.len());
    for (name, k) in &required {
        let (x, y) = k.pixel();
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            return Err(shape_err!("{name} at ({}, {}) lies outside the {w}x{h} image", k.x, k.y));
        }
        points.push((x, y));
    }
    let enclosing = enclosing_rect(&points, &region)?;
    let (rect, dilation) = dilate_relax(enclosing, rng, range, w, h);
    Ok(AgnosticMask {
        grid: rect.fill(w, h),
        provenance: MaskProvenance {
            category,
            enclosing,
            dilation,
            rect,
            keypoints_used: required.iter().map(|(n, k)| (n.to_string(), k.x, k.y)).collect(),
            parsing_bbox,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn region(w: usize, h: usize, r: Rect) -> BinaryGrid {
        r.fill(w, h)
    }

    #[test]
    fn enclosing_examples() {
        let reg = region(100, 100, Rect { x0: 15, y0: 25, x1: 40, y1: 70 });
        let r = enclosing_rect(&[(10, 20), (50, 80)], &reg).unwrap();
        assert_eq!(r, Rect { x0: 10, y0: 20, x1: 50, y1: 80 });
        assert_eq!(enclosing_rect(&[], &reg).unwrap(), Rect { x0: 15, y0: 25, x1: 40, y1: 70 });
        let empty = BinaryGrid::new(100, 100);
        let r = enclosing_rect(&[(7, 9)], &empty).unwrap();
        assert_eq!(r.area(), 1);
        assert!(enclosing_rect(&[], &empty).is_err());
    }

    #[test]
    fn dilation_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = Rect { x0: 20, y0: 20, x1: 40, y1: 40 };
        let (same, _) = dilate_relax(r, &mut rng, DilationRange::new(0, 0).unwrap(), 64, 64);
        assert_eq!(same, r);
        let (five, d) = dilate_relax(r, &mut rng, DilationRange::new(5, 5).unwrap(), 64, 64);
        assert_eq!(five, Rect { x0: 15, y0: 15, x1: 45, y1: 45 });
        assert_eq!(d, EdgeDilation { left: 5, top: 5, right: 5, bottom: 5 });
        let edge = Rect { x0: 0, y0: 2, x1: 63, y1: 60 };
        let (c, _) = dilate_relax(edge, &mut rng, DilationRange::new(8, 8).unwrap(), 64, 64);
        assert_eq!(c, Rect { x0: 0, y0: 0, x1: 63, y1: 63 });
    }

    #[test]
    fn dilation_range_parsing() {
        assert_eq!("4:16".parse::<DilationRange>().unwrap(), DilationRange { min: 4, max: 16 });
        assert!("9:2".parse::<DilationRange>().is_err());
        assert!("abc".parse::<DilationRange>().is_err());
        assert_eq!(DilationRange::default_for(128), DilationRange { min: 8, max: 32 });
    }

    #[test]
    fn palette_round_trip() {
        for l in ParsingLabel::ALL {
            assert_eq!(ParsingLabel::from_gray(l.gray()), Some(l));
        }
        assert_eq!(ParsingLabel::from_gray(51), None);
    }

    #[test]
    fn missing_inputs_are_named() {
        let mut parsing = ParsingMap::new(32, 32);
        let kp = PoseKeypoints {
            hands: [Keypoint::new(3.0, 3.0), Keypoint::hidden()],
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = build_agnostic_mask(Category::Upper, &kp, &parsing, &mut rng, DilationRange::default())
            .unwrap_err();
        assert!(err.to_string().contains("right hand"), "{err}");

        let kp = PoseKeypoints {
            hands: [Keypoint::new(3.0, 3.0), Keypoint::new(5.0, 5.0)],
            ..Default::default()
        };
        let err = build_agnostic_mask(Category::Upper, &kp, &parsing, &mut rng, DilationRange::default())
            .unwrap_err();
        assert!(err.to_string().contains("upper garment region"), "{err}");

        parsing.labels[4 * 32 + 4] = ParsingLabel::UpperGarment;
        let m = build_agnostic_mask(Category::Upper, &kp, &parsing, &mut rng, DilationRange::new(0, 0).unwrap())
            .unwrap();
        assert_eq!(m.provenance.rect, Rect { x0: 3, y0: 3, x1: 5, y1: 5 });
    }
}
