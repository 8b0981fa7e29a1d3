//! Attention-parameter distribution over resolutions and spectrum
//! comparison reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{GrayImage, Luma, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::maskgen::BinaryGrid;
use crate::spectral::{
    image_spectral_distance, magnitude_spectrum_image, masked_residual_spectrum, normalize_unit, FrequencyWeighting, RealGrid,
};

/// Attention counting rule, repeated in every ratio table.
pub const COUNTING_RULE: &str =
    "attention parameters per block = 4*C^2 (query, key, value, output projections) + 4*C biases when declared; norms and MLPs excluded";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub divisor: usize,
    pub blocks: usize,
    pub width: usize,
    pub attention: bool,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default)]
    pub attn_bias: bool,
}

fn default_mlp_ratio() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDescription {
    pub name: String,
    #[serde(default)]
    pub approximate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub input_h: usize,
    pub input_w: usize,
    pub stages: Vec<Stage>,
}

impl Stage {
    pub fn attention_params(&self) -> u128 {
        if !self.attention {
            return 0;
        }
        let c = self.width as u128;
        let per = 4 * c * c + if self.attn_bias { 4 * c } else { 0 };
        per * self.blocks as u128
    }
}

impl ArchDescription {
    pub fn from_json(s: &str) -> Result<Self> {
        let a: ArchDescription = serde_json::from_str(s)?;
        a.validate()?;
        Ok(a)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config(format!("{}: no stages", self.name)));
        }
        if self.input_h == 0 || self.input_w == 0 {
            return Err(Error::Config(format!("{}: zero input size", self.name)));
        }
        if let Some(s) = self.stages.iter().find(|s| s.divisor == 0) {
            return Err(Error::Config(format!("{}: stage divisor {} must be positive", self.name, s.divisor)));
        }
        Ok(())
    }

    /// Same stages at another input size.
    pub fn with_input(&self, h: usize, w: usize) -> Self {
        ArchDescription { input_h: h, input_w: w, ..self.clone() }
    }

    /// Every stage width multiplied by `k`.
    pub fn scaled(&self, k: usize) -> Self {
        let stages = self.stages.iter().map(|s| Stage { width: s.width * k, ..s.clone() }).collect();
        ArchDescription { stages, ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub divisor: usize,
    pub height: usize,
    pub width: usize,
    pub attention_params: u128,
    pub share: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioTable {
    pub name: String,
    pub approximate: bool,
    pub counting_rule: String,
    pub total_attention_params: u128,
    /// Rows in order of increasing divisor, i.e. decreasing resolution.
    pub rows: Vec<RatioRow>,
}

impl RatioTable {
    /// Row holding the largest share.
    pub fn argmax(&self) -> &RatioRow {
        self.rows
            .iter()
            .max_by(|a, b| a.share.total_cmp(&b.share))
            .expect("tables have at least one row")
    }
}

/// Share of attention parameters per resolution.
pub fn attention_param_ratio(arch: &ArchDescription) -> Result<RatioTable> {
    arch.validate()?;
    let mut by_div: BTreeMap<usize, u128> = BTreeMap::new();
    for s in &arch.stages {
        *by_div.entry(s.divisor).or_default() += s.attention_params();
    }
    let total: u128 = by_div.values().sum();
    if total == 0 {
        return Err(Error::Domain(format!("{} has no attention parameters; ratio undefined", arch.name)));
    }
    let rows = by_div
        .into_iter()
        .map(|(d, n)| RatioRow {
            divisor: d,
            height: arch.input_h / d,
            width: arch.input_w / d,
            attention_params: n,
            share: n as f64 / total as f64,
        })
        .collect();
    Ok(RatioTable {
        name: arch.name.clone(),
        approximate: arch.approximate,
        counting_rule: COUNTING_RULE.to_string(),
        total_attention_params: total,
        rows,
    })
}

/// Shipped approximate descriptions: single-resolution transformer and
/// two hierarchical U-Nets.
pub fn reference_archs() -> Vec<ArchDescription> {
    [
        include_str!("../data/arch/sd3_like.json"),
        include_str!("../data/arch/sdxl_like.json"),
        include_str!("../data/arch/sd15_like.json"),
    ]
    .iter()
    .map(|s| ArchDescription::from_json(s).expect("shipped descriptions parse"))
    .collect()
}

/// One compared image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub name: String,
    pub distance: f64,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub width: usize,
    pub height: usize,
    /// Rows sorted by distance to the real image, rank 1 first.
    pub rows: Vec<SpectrumRow>,
    #[serde(skip)]
    pub real_spectrum: GrayImage,
    #[serde(skip)]
    pub spectra: Vec<(String, GrayImage)>,
}

fn luminance(img: &RgbImage) -> RealGrid {
    RealGrid::from_fn(img.width() as usize, img.height() as usize, |x, y| {
        let p = img.get_pixel(x as u32, y as u32).0;
        (p[0] as f64 + p[1] as f64 + p[2] as f64) / (3.0 * 255.0)
    })
}

fn spectrum_png(img: &RgbImage) -> GrayImage {
    let g = magnitude_spectrum_image(&luminance(img));
    GrayImage::from_fn(g.width as u32, g.height as u32, |x, y| {
        Luma([(g.at(x as usize, y as usize) * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

fn planes(img: &RgbImage) -> Vec<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f32; 3 * w * h];
    for (i, p) in img.pixels().enumerate() {
        for c in 0..3 {
            out[c * w * h + i] = p.0[c] as f32 / 255.0;
        }
    }
    out
}

/// Masked spectral distance of each generated image to the real one,
/// ranked ascending, plus log-magnitude spectra of all images.
pub fn spectrum_report(real: &RgbImage, generated: &[(String, RgbImage)], mask: Option<&BinaryGrid>) -> Result<SpectrumReport> {
    let (w, h) = (real.width() as usize, real.height() as usize);
    if let Some((n, g)) = generated.iter().find(|(_, g)| g.dimensions() != real.dimensions()) {
        return Err(shape_err!("{n} is {:?}, real image is {:?}", g.dimensions(), real.dimensions()));
    }
    let mk = match mask {
        Some(m) if (m.width, m.height) != (w, h) => return Err(shape_err!("mask size differs from image")),
        Some(m) => m.to_f32(),
        None => vec![1.0; w * h],
    };
    let rp = planes(real);
    let mut rows = generated
        .iter()
        .map(|(name, g)| {
            let d = image_spectral_distance(&planes(g), &rp, &mk, 3, h, w, FrequencyWeighting::Uniform)?;
            Ok(SpectrumRow { name: name.clone(), distance: d, rank: 0 })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.name.cmp(&b.name)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    Ok(SpectrumReport {
        width: w,
        height: h,
        rows,
        real_spectrum: spectrum_png(real),
        spectra: generated.iter().map(|(n, g)| (n.clone(), spectrum_png(g))).collect(),
    })
}

impl SpectrumReport {
    /// `report.json`, `real_spectrum.png` and one `<name>_spectrum.png` per
    /// generated image.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        written.push(json);
        let real = dir.join("real_spectrum.png");
        self.real_spectrum.save(&real).map_err(|e| Error::image(&real, e))?;
        written.push(real);
        for (n, img) in &self.spectra {
            let p = dir.join(format!("{n}_spectrum.png"));
            img.save(&p).map_err(|e| Error::image(&p, e))?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Spectral comparison of two images under one mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSpectrum {
    pub width: usize,
    pub height: usize,
    /// `Σ_c Σ_{u,v} |F_{a⊙m} − F_{b⊙m}|²` over RGB in `[0, 1]`.
    pub l_f_sum: f64,
    /// `l_f_sum / (3·(MN)²)`, the normalization used in training.
    pub l_f_mean: f64,
    /// `Σ_c Σ_{x,y} (m·(a − b))²`.
    pub masked_pixel_l2: f64,
    /// `|l_f_sum − MN·masked_pixel_l2| / (MN·masked_pixel_l2)`.
    pub parseval_check_rel_err: f64,
    #[serde(skip)]
    pub a_spectrum: GrayImage,
    #[serde(skip)]
    pub b_spectrum: GrayImage,
    /// `log(1 + Σ_c |ΔF|²)`, DC-centred and scaled to 8 bits.
    #[serde(skip)]
    pub diff_heatmap: GrayImage,
}

pub fn spectrum_pair(a: &RgbImage, b: &RgbImage, mask: Option<&BinaryGrid>) -> Result<PairSpectrum> {
    if a.dimensions() != b.dimensions() {
        return Err(shape_err!("images are {:?} and {:?}", a.dimensions(), b.dimensions()));
    }
    let (w, h) = (a.width() as usize, a.height() as usize);
    let mk = match mask {
        Some(m) if (m.width, m.height) != (w, h) => return Err(shape_err!("mask size differs from image")),
        Some(m) => m.to_f32(),
        None => vec![1.0; w * h],
    };
    let mg = RealGrid::new(w, h, mk.iter().map(|&v| v as f64).collect())?;
    let (pa, pb) = (planes(a), planes(b));
    let plane = w * h;
    let mut bins = vec![0.0f64; plane];
    let mut pixel = 0.0;
    for c in 0..3 {
        let grid = |p: &[f32]| RealGrid::new(w, h, p[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect());
        let (ga, gb) = (grid(&pa)?, grid(&pb)?);
        for (bin, f) in bins.iter_mut().zip(masked_residual_spectrum(&ga, &gb, &mg)?) {
            *bin += f.norm_sqr();
        }
        pixel += ga.data.iter().zip(&gb.data).zip(&mg.data).map(|((x, y), m)| (m * (x - y)).powi(2)).sum::<f64>();
    }
    let sum: f64 = bins.iter().sum();
    let mn = plane as f64;
    let parseval = if pixel > 0.0 { (sum - mn * pixel).abs() / (mn * pixel) } else { sum.abs() };
    let mut heat = vec![0.0f64; plane];
    for y in 0..h {
        for x in 0..w {
            let u = (x + w - w / 2) % w;
            let v = (y + h - h / 2) % h;
            heat[y * w + x] = bins[v * w + u].ln_1p();
        }
    }
    normalize_unit(&mut heat);
    Ok(PairSpectrum {
        width: w,
        height: h,
        l_f_sum: sum,
        l_f_mean: sum / (3.0 * mn * mn),
        masked_pixel_l2: pixel,
        parseval_check_rel_err: parseval,
        a_spectrum: spectrum_png(a),
        b_spectrum: spectrum_png(b),
        diff_heatmap: GrayImage::from_fn(w as u32, h as u32, |x, y| {
            Luma([(heat[y as usize * w + x as usize] * 255.0).round() as u8])
        }),
    })
}

impl PairSpectrum {
    /// `report.json`, `a_spectrum.png`, `b_spectrum.png` and
    /// `diff_heatmap.png`.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("report.json");
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let mut written = vec![json];
        for (name, img) in [("a_spectrum", &self.a_spectrum), ("b_spectrum", &self.b_spectrum), ("diff_heatmap", &self.diff_heatmap)] {
            let p = dir.join(format!("{name}.png"));
            img.save(&p).map_err(|e| Error::image(&p, e))?;
            written.push(p);
        }
        Ok(written)
    }
}

/// Separable gaussian blur with edge clamping.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.into_iter().map(|v| v / s).collect();
    let (w, h) = (img.width() as i64, img.height() as i64);
    let pass = |src: &RgbImage, dx: i64, dy: i64| {
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let mut acc = [0.0f64; 3];
            for (j, &kv) in k.iter().enumerate() {
                let o = j as i64 - r;
                let sx = (x as i64 + o * dx).clamp(0, w - 1) as u32;
                let sy = (y as i64 + o * dy).clamp(0, h - 1) as u32;
                let p = src.get_pixel(sx, sy).0;
                for c in 0..3 {
                    acc[c] += kv * p[c] as f64;
                }
            }
            image::Rgb(acc.map(|v| v.round().clamp(0.0, 255.0) as u8))
        })
    };
    let tmp = pass(img, 1, 0);
    pass(&tmp, 0, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(divisor: usize, blocks: usize, width: usize, attention: bool) -> Stage {
        Stage { divisor, blocks, width, attention, mlp_ratio: 4, attn_bias: false }
    }

    fn arch(stages: Vec<Stage>) -> ArchDescription {
        ArchDescription { name: "t".into(), approximate: false, note: None, input_h: 64, input_w: 64, stages }
    }

    #[test]
    fn single_stage_takes_everything() {
        let t = attention_param_ratio(&arch(vec![stage(2, 3, 16, true)])).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].share, 1.0);
        assert_eq!(t.rows[0].height, 32);
    }

    #[test]
    fn stage_without_attention_has_zero_share() {
        let t = attention_param_ratio(&arch(vec![stage(1, 2, 8, false), stage(2, 2, 8, true)])).unwrap();
        assert_eq!(t.rows[0].share, 0.0);
        assert_eq!(t.rows[1].share, 1.0);
    }

    #[test]
    fn no_attention_is_an_error() {
        assert!(attention_param_ratio(&arch(vec![stage(1, 2, 8, false)])).is_err());
        assert!(ArchDescription::from_json(r#"{"name":"x","input_h":8,"input_w":8,"stages":[{"divisor":0,"blocks":1,"width":4,"attention":true}]}"#).is_err());
    }

    #[test]
    fn biases_are_counted_when_declared() {
        let s = Stage { attn_bias: true, ..stage(1, 1, 8, true) };
        assert_eq!(s.attention_params(), 4 * 64 + 32);
    }

    #[test]
    fn pair_spectrum_single_pixel_difference() {
        let a = RgbImage::from_pixel(8, 4, image::Rgb([10, 20, 30]));
        let mut b = a.clone();
        b.put_pixel(3, 1, image::Rgb([10, 20, 30 + 51]));
        let r = spectrum_pair(&a, &b, None).unwrap();
        // one channel differs by 0.2 at one pixel: flat spectrum of MN bins of 0.04
        assert!((r.masked_pixel_l2 - 0.04).abs() < 1e-7);
        assert!((r.l_f_sum - 32.0 * r.masked_pixel_l2).abs() < 1e-12);
        assert!((r.l_f_mean - r.l_f_sum / (3.0 * 32.0 * 32.0)).abs() < 1e-15);
        assert!(r.parseval_check_rel_err < 1e-12);
        assert_eq!(r.diff_heatmap.dimensions(), (8, 4));
        let mut m = BinaryGrid::new(8, 4);
        m.set(0, 0, true);
        let masked = spectrum_pair(&a, &b, Some(&m)).unwrap();
        assert_eq!(masked.l_f_sum, 0.0);
    }

    #[test]
    fn shipped_descriptions_parse() {
        let refs = reference_archs();
        assert_eq!(refs.len(), 3);
        assert!(refs.iter().all(|a| a.approximate));
    }
}
