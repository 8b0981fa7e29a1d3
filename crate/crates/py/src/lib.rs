//! Python bindings. Images cross the boundary as PNG paths; numeric grids
//! as flat row-major lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fitdit::analysis::{attention_param_ratio as ratio, reference_archs as refs, ArchDescription};
use fitdit::conditioning::PoseKeypoints;
use fitdit::dit::{self, init_denoiser_params, init_garment_params};
use fitdit::maskgen::{build_agnostic_mask, BinaryGrid, Category, DilationRange, ParsingMap};
use fitdit::nn::attention_hybrid as hybrid;
use fitdit::pipeline::{self, InferenceOptions, PreparedSample, TrainConfig};
use fitdit::rflow;
use fitdit::spectral::{self, RealGrid};
use fitdit::synthdata::{self, image_to_latent};
use fitdit::tensor::{Tape, Tensor};

fn err(e: fitdit::Error) -> PyErr {
    match e {
        fitdit::Error::Io { .. } | fitdit::Error::Image { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(dims: &[usize], data: Vec<f32>) -> PyResult<Tensor> {
    Tensor::new(dims, data).map_err(err)
}

fn grid(data: Vec<f64>, width: usize, height: usize) -> PyResult<RealGrid> {
    RealGrid::new(width, height, data).map_err(err)
}

fn category(s: &str) -> PyResult<Category> {
    s.parse().map_err(err)
}

fn read_rgb(path: &str) -> PyResult<image::RgbImage> {
    Ok(image::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?.to_rgb8())
}

fn read_mask(path: &str) -> PyResult<BinaryGrid> {
    let img = image::open(path).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))?;
    Ok(BinaryGrid::from_image(&img.to_luma8()))
}

/// Model hyperparameters.
#[pyclass(name = "ModelConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: dit::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (h=64, w=64, patch=2, width=128, depth=6, heads=4, d_emb=256, channel_factor=0.125, mlp_ratio=4))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        h: usize,
        w: usize,
        patch: usize,
        width: usize,
        depth: usize,
        heads: usize,
        d_emb: usize,
        channel_factor: f32,
        mlp_ratio: usize,
    ) -> PyResult<Self> {
        let inner = dit::ModelConfig { h, w, patch, width, depth, heads, d_emb, channel_factor, mlp_ratio };
        inner.validate().map_err(err)?;
        Ok(PyModelConfig { inner })
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyModelConfig { inner: dit::ModelConfig::from_json(s).map_err(err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    fn tokens(&self) -> usize {
        self.inner.tokens()
    }

    fn latent_channels(&self) -> usize {
        self.inner.latent_channels()
    }

    #[getter]
    fn h(&self) -> usize {
        self.inner.h
    }

    #[getter]
    fn w(&self) -> usize {
        self.inner.w
    }

    #[getter]
    fn patch(&self) -> usize {
        self.inner.patch
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Writes a synthetic dataset and returns its manifest as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, count, height=64, width=64, seed=0))]
fn generate_dataset(out_dir: PathBuf, count: usize, height: usize, width: usize, seed: u64) -> PyResult<String> {
    let ds = synthdata::generate_dataset(seed, count, height, width).map_err(err)?;
    std::fs::create_dir_all(&out_dir).map_err(|e| PyIOError::new_err(e.to_string()))?;
    ds.write(&out_dir).map_err(err)?;
    serde_json::to_string(&ds.manifest).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// 2-D DFT of a `height × width` grid as `(re, im)` pairs.
#[pyfunction]
fn fft2d(data: Vec<f64>, width: usize, height: usize) -> PyResult<Vec<(f64, f64)>> {
    let s = spectral::fft2d(&grid(data, width, height)?);
    Ok(s.values.iter().map(|c| (c.re, c.im)).collect())
}

#[pyfunction]
fn dft2d_bruteforce(data: Vec<f64>, width: usize, height: usize) -> PyResult<Vec<(f64, f64)>> {
    let s = spectral::dft2d_bruteforce(&grid(data, width, height)?).map_err(err)?;
    Ok(s.values.iter().map(|c| (c.re, c.im)).collect())
}

/// Masked spectral distance between two grids.
#[pyfunction]
fn spectral_distance(a: Vec<f64>, b: Vec<f64>, mask: Vec<f64>, width: usize, height: usize) -> PyResult<f64> {
    spectral::spectral_distance(&grid(a, width, height)?, &grid(b, width, height)?, &grid(mask, width, height)?)
        .map_err(err)
}

#[pyfunction]
fn forward_interpolate(z0: Vec<f32>, eps: Vec<f32>, t: f32) -> PyResult<Vec<f32>> {
    let n = z0.len();
    Ok(rflow::forward_interpolate(&tensor(&[n], z0)?, &tensor(&[eps.len()], eps)?, t).map_err(err)?.into_data())
}

#[pyfunction]
fn estimate_clean(zt: Vec<f32>, eps: Vec<f32>, t: f32) -> PyResult<Vec<f32>> {
    let n = zt.len();
    Ok(rflow::estimate_clean(&tensor(&[n], zt)?, &tensor(&[eps.len()], eps)?, t).map_err(err)?.into_data())
}

/// `[3, H, W]` image (flat) to `[T, 3p²]` tokens (flat).
#[pyfunction]
fn patchify(image: Vec<f32>, height: usize, width: usize, patch: usize) -> PyResult<Vec<f32>> {
    Ok(dit::patchify(&tensor(&[3, height, width], image)?, patch).map_err(err)?.into_data())
}

#[pyfunction]
fn unpatchify(tokens: Vec<f32>, height: usize, width: usize, patch: usize) -> PyResult<Vec<f32>> {
    let t = (height / patch.max(1)) * (width / patch.max(1));
    let tok = tensor(&[t, tokens.len() / t.max(1)], tokens)?;
    Ok(dit::unpatchify(&tok, 3, height, width, patch).map_err(err)?.into_data())
}

/// Multi-head attention over `[T, C]` rows with an optional cached
/// `(k_r, v_r)` pair appended on the token axis.
#[pyfunction]
#[pyo3(signature = (q, k, v, heads, cache=None))]
fn attention_hybrid(
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    heads: usize,
    cache: Option<(Vec<Vec<f64>>, Vec<Vec<f64>>)>,
) -> PyResult<Vec<Vec<f64>>> {
    let mut tape: Tape<f64> = Tape::new();
    let mut load = |rows: Vec<Vec<f64>>| {
        let (r, c) = (rows.len(), rows.first().map_or(0, Vec::len));
        tape.constant_raw(&[r, c], rows.into_iter().flatten().collect()).map_err(err)
    };
    let (qv, kv, vv) = (load(q)?, load(k)?, load(v)?);
    let cv = match cache {
        Some((kr, vr)) => Some((load(kr)?, load(vr)?)),
        None => None,
    };
    let out = hybrid(&mut tape, qv, kv, vv, cv, heads).map_err(err)?;
    let c = tape.dims(out)[1];
    Ok(tape.value(out).chunks(c.max(1)).map(<[f64]>::to_vec).collect())
}

/// Agnostic mask for a parsing PNG and keypoint JSON; returns
/// `(width, height, row-major 0/1 values, provenance JSON)`.
#[pyfunction]
#[pyo3(signature = (parsing, pose, category_name, seed=0, dilation=None))]
fn agnostic_mask(
    parsing: PathBuf,
    pose: PathBuf,
    category_name: &str,
    seed: u64,
    dilation: Option<(u32, u32)>,
) -> PyResult<(usize, usize, Vec<u8>, String)> {
    let map = ParsingMap::read(&parsing).map_err(err)?;
    let kp = PoseKeypoints::read(&pose).map_err(err)?;
    let range = match dilation {
        Some((a, b)) => DilationRange::new(a, b).map_err(err)?,
        None => DilationRange::default_for(map.height),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = build_agnostic_mask(category(category_name)?, &kp, &map, &mut rng, range).map_err(err)?;
    let prov = serde_json::to_string(&m.provenance).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((m.grid.width, m.grid.height, m.grid.data.iter().map(|&b| b as u8).collect(), prov))
}

/// Mean SSIM of two PNGs, optionally restricted to a mask PNG.
#[pyfunction]
#[pyo3(signature = (a, b, mask=None))]
fn ssim(a: &str, b: &str, mask: Option<&str>) -> PyResult<f64> {
    let m = mask.map(read_mask).transpose()?;
    pipeline::ssim(&read_rgb(a)?, &read_rgb(b)?, m.as_ref()).map_err(err)
}

/// Attention share table of an architecture JSON, as JSON.
#[pyfunction]
fn attention_param_ratio(arch_json: &str) -> PyResult<String> {
    let arch = ArchDescription::from_json(arch_json).map_err(err)?;
    let table = ratio(&arch).map_err(err)?;
    serde_json::to_string(&table).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// The shipped reference architecture descriptions as JSON strings.
#[pyfunction]
fn reference_archs() -> PyResult<Vec<String>> {
    refs().iter().map(|a| serde_json::to_string(a).map_err(|e| PyValueError::new_err(e.to_string()))).collect()
}

fn train_config(steps: usize, batch: usize, lr: f32, seed: u64) -> TrainConfig {
    TrainConfig { steps, batch, lr, seed, ..TrainConfig::default() }
}

/// Stage 1 on a dataset directory; writes the checkpoint and returns the
/// per-step total losses.
#[pyfunction]
#[pyo3(signature = (data_dir, out, config, steps=100, batch=4, lr=3e-5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_garment(
    py: Python<'_>,
    data_dir: PathBuf,
    out: PathBuf,
    config: PyRef<'_, PyModelConfig>,
    steps: usize,
    batch: usize,
    lr: f32,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let cfg = config.inner.clone();
    py.detach(move || {
        let ds = synthdata::Dataset::read(&data_dir)?;
        let garments: Vec<_> = ds.train().iter().map(|s| image_to_latent(&s.garment)).collect();
        let mut store = init_garment_params(&cfg, seed)?;
        let log = pipeline::train_garment_prior(&cfg, &garments, &mut store, &train_config(steps, batch, lr, seed), |_| {})?;
        pipeline::save_checkpoint(&out, &cfg, &store)?;
        Ok(log.records.iter().map(|r| r.total).collect())
    })
    .map_err(err)
}

/// Stage 2 against a frozen garment checkpoint; returns per-step total
/// losses.
#[pyfunction]
#[pyo3(signature = (data_dir, garment_ckpt, out, steps=100, batch=4, lr=3e-5, lambda_freq=pipeline::DEFAULT_LAMBDA_FREQ, seed=0))]
#[allow(clippy::too_many_arguments)]
fn train_tryon(
    py: Python<'_>,
    data_dir: PathBuf,
    garment_ckpt: PathBuf,
    out: PathBuf,
    steps: usize,
    batch: usize,
    lr: f32,
    lambda_freq: f32,
    seed: u64,
) -> PyResult<Vec<f64>> {
    py.detach(move || {
        let ds = synthdata::Dataset::read(&data_dir)?;
        let (cfg, gstore) = pipeline::load_checkpoint(&garment_ckpt)?;
        let train: Vec<PreparedSample> =
            ds.train().into_iter().map(|s| PreparedSample::new(&cfg, s)).collect::<fitdit::Result<_>>()?;
        let mut store = init_denoiser_params(&cfg, seed)?;
        let tcfg = TrainConfig { lambda_freq, ..train_config(steps, batch, lr, seed) };
        let log = pipeline::train_tryon(&cfg, &train, &gstore, &mut store, &tcfg, |_| {})?;
        pipeline::save_checkpoint(&out, &cfg, &store)?;
        Ok(log.records.iter().map(|r| r.total).collect())
    })
    .map_err(err)
}

/// Try-on inference; writes the composited PNG to `out`.
#[pyfunction]
#[pyo3(signature = (person, garment, pose, parsing, category_name, denoiser_ckpt, garment_ckpt, out, steps=25, seed=0))]
#[allow(clippy::too_many_arguments)]
fn tryon(
    py: Python<'_>,
    person: &str,
    garment: &str,
    pose: PathBuf,
    parsing: PathBuf,
    category_name: &str,
    denoiser_ckpt: PathBuf,
    garment_ckpt: PathBuf,
    out: PathBuf,
    steps: usize,
    seed: u64,
) -> PyResult<()> {
    let (p, g) = (read_rgb(person)?, read_rgb(garment)?);
    let cat = category(category_name)?;
    py.detach(move || {
        let (cfg, den) = pipeline::load_checkpoint(&denoiser_ckpt)?;
        let (_, gstore) = pipeline::load_checkpoint(&garment_ckpt)?;
        let kp = PoseKeypoints::read(&pose)?;
        let map = ParsingMap::read(&parsing)?;
        let opts = InferenceOptions { steps, seed, ..Default::default() };
        let r = pipeline::infer_tryon(&cfg, &den, &gstore, &p, &g, &kp, &map, cat, &opts)?;
        r.image.save(&out).map_err(|e| fitdit::Error::Config(format!("{}: {e}", out.display())))
    })
    .map_err(err)
}

#[pymodule(name = "fitdit")]
fn fitdit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fft2d, m)?)?;
    m.add_function(wrap_pyfunction!(dft2d_bruteforce, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_distance, m)?)?;
    m.add_function(wrap_pyfunction!(forward_interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_clean, m)?)?;
    m.add_function(wrap_pyfunction!(patchify, m)?)?;
    m.add_function(wrap_pyfunction!(unpatchify, m)?)?;
    m.add_function(wrap_pyfunction!(attention_hybrid, m)?)?;
    m.add_function(wrap_pyfunction!(agnostic_mask, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(attention_param_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(reference_archs, m)?)?;
    m.add_function(wrap_pyfunction!(train_garment, m)?)?;
    m.add_function(wrap_pyfunction!(train_tryon, m)?)?;
    m.add_function(wrap_pyfunction!(tryon, m)?)?;
    Ok(())
}
