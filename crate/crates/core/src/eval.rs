//! Image quality metrics, absolute-difference images and the arm comparison
//! report.
//!
//! Reports measure images in unit space: network outputs and labels are
//! mapped from `[-1, 1]` to `[0, 1]` and compared with data range 1.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::image::{Image, Pgm16};
use crate::loss::sobel_edge_map;
use crate::projector::dataset::{load_pairs, Manifest, Split};
use crate::train::{samples, Checkpoint};

/// Default edge threshold on the normalized Sobel map of the label.
pub const EDGE_THRESHOLD: f64 = 0.2;
/// Side length of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 8;

fn same_shape(l: &Image, g: &Image) -> Result<()> {
    if l.width() != g.width() || l.height() != g.height() {
        return Err(Error::Dimension(format!(
            "images differ in size: {}x{} vs {}x{}",
            l.width(),
            l.height(),
            g.width(),
            g.height()
        )));
    }
    Ok(())
}

pub fn mse(l: &Image, g: &Image) -> Result<f64> {
    same_shape(l, g)?;
    let s: f64 = l.data().iter().zip(g.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(s / l.data().len() as f64)
}

pub fn mae(l: &Image, g: &Image) -> Result<f64> {
    same_shape(l, g)?;
    let s: f64 = l.data().iter().zip(g.data()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
    Ok(s / l.data().len() as f64)
}

/// `10·log10(range² / MSE)` in dB; identical images give `f64::INFINITY`.
pub fn psnr(l: &Image, g: &Image, data_range: f64) -> Result<f64> {
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("data range must be positive, got {data_range}")));
    }
    let m = mse(l, g)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (data_range * data_range / m).log10())
}

/// Mean SSIM over every 8×8 window position (uniform weights, population
/// statistics) with stabilizers `(0.01·range)²` and `(0.03·range)²`.
pub fn ssim(l: &Image, g: &Image, data_range: f64) -> Result<f64> {
    same_shape(l, g)?;
    if !(data_range > 0.0) {
        return Err(Error::Config(format!("data range must be positive, got {data_range}")));
    }
    let (w, h, k) = (l.width(), l.height(), SSIM_WINDOW);
    if w < k || h < k {
        return Err(Error::Dimension(format!("image {w}x{h} is smaller than the {k}x{k} SSIM window")));
    }
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let n = (k * k) as f64;
    let mut total = 0.0;
    for r0 in 0..=h - k {
        for c0 in 0..=w - k {
            let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + k {
                for c in c0..c0 + k {
                    let (x, y) = (l.get(r, c) as f64, g.get(r, c) as f64);
                    sx += x;
                    sy += y;
                    sxx += x * x;
                    syy += y * y;
                    sxy += x * y;
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let vx = (sxx / n - mx * mx).max(0.0);
            let vy = (syy / n - my * my).max(0.0);
            let cov = sxy / n - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}

/// Edge map of `l` in `[0, 1]`, as used by the loss.
pub fn edge_map(l: &Image) -> Result<Image> {
    Image::from_tensor(&sobel_edge_map(&l.to_tensor::<f64>())?)
}

/// MAE over pixels whose edge strength exceeds `tau`; `None` when no pixel
/// qualifies.
pub fn edge_region_mae(l: &Image, g: &Image, edges: &Image, tau: f64) -> Result<Option<f64>> {
    same_shape(l, g)?;
    same_shape(l, edges)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for ((&a, &b), &e) in l.data().iter().zip(g.data()).zip(edges.data()) {
        if e as f64 > tau {
            sum += (a as f64 - b as f64).abs();
            count += 1;
        }
    }
    Ok((count > 0).then(|| sum / count as f64))
}

/// Sidecar path holding the scale of an absolute-difference PGM.
pub fn scale_path(pgm: &Path) -> PathBuf {
    let mut s = pgm.as_os_str().to_owned();
    s.push(".scale");
    PathBuf::from(s)
}

/// Writes `|l − g|` as a 16-bit PGM where the largest difference maps to
/// 65535, plus a `scale <max>` sidecar line. Returns the scale.
pub fn abs_diff_image(l: &Image, g: &Image, path: &Path) -> Result<f64> {
    same_shape(l, g)?;
    let diff: Vec<f32> = l.data().iter().zip(g.data()).map(|(&a, &b)| (a - b).abs()).collect();
    let max = diff.iter().copied().fold(0.0f32, f32::max);
    let img = Image::new(l.width(), l.height(), diff)?;
    img.to_pgm16(0.0, if max > 0.0 { max } else { 1.0 }).save(path)?;
    let side = scale_path(path);
    fs::write(&side, format!("scale {max}\n")).map_err(|e| Error::io(&side, e))?;
    Ok(max as f64)
}

/// Reads an absolute-difference PGM back into difference units.
pub fn read_abs_diff(path: &Path) -> Result<Image> {
    let pgm = Pgm16::load(path)?;
    let side = scale_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let scale: f32 = text
        .trim()
        .strip_prefix("scale ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::format(&side, "expected 'scale <value>'"))?;
    let data = pgm.pixels.iter().map(|&p| p as f32 / 65535.0 * scale).collect();
    Image::new(pgm.width, pgm.height, data)
}

/// Metrics of one arm on one test pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub arm: String,
    pub pair: String,
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
    pub edge_mae: Option<f64>,
}

/// Mean and population standard deviation; `None` without values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if mean.is_finite() {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
        } else {
            f64::NAN
        };
        Some(Stat {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub psnr: Option<Stat>,
    pub ssim: Option<Stat>,
    pub mae: Option<Stat>,
    /// Over pairs with a non-empty edge region only.
    pub edge_mae: Option<Stat>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<PairMetrics>,
    pub arms: Vec<ArmSummary>,
    pub diff_images: Vec<PathBuf>,
    pub panels: Vec<PathBuf>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".to_string(), |x| x.to_string())
}

fn fmt_stat(s: &Option<Stat>) -> String {
    s.map_or("NA".to_string(), |s| format!("{:.6} ± {:.6} (n={})", s.mean, s.std, s.count))
}

impl EvalReport {
    /// Per-arm aggregates of `rows`, arms in first-appearance order.
    pub fn aggregate(rows: &[PairMetrics]) -> Vec<ArmSummary> {
        let mut names: Vec<&str> = Vec::new();
        for r in rows {
            if !names.contains(&r.arm.as_str()) {
                names.push(&r.arm);
            }
        }
        names
            .into_iter()
            .map(|arm| {
                let mine: Vec<&PairMetrics> = rows.iter().filter(|r| r.arm == arm).collect();
                let col = |f: &dyn Fn(&PairMetrics) -> Option<f64>| -> Vec<f64> { mine.iter().filter_map(|r| f(r)).collect() };
                ArmSummary {
                    arm: arm.to_string(),
                    psnr: Stat::of(&col(&|r| Some(r.psnr))),
                    ssim: Stat::of(&col(&|r| Some(r.ssim))),
                    mae: Stat::of(&col(&|r| Some(r.mae))),
                    edge_mae: Stat::of(&col(&|r| r.edge_mae)),
                }
            })
            .collect()
    }

    pub fn arm(&self, name: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == name)
    }

    /// One header line and one line per (arm, pair); `inf` and `NA` mark
    /// identical images and empty edge regions.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("arm\tpair\tpsnr_db\tssim\tmae\tedge_mae\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.arm,
                r.pair,
                r.psnr,
                r.ssim,
                r.mae,
                fmt_opt(r.edge_mae)
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for a in &self.arms {
            let _ = writeln!(out, "arm {}", a.arm);
            let _ = writeln!(out, "  psnr_db   {}", fmt_stat(&a.psnr));
            let _ = writeln!(out, "  ssim      {}", fmt_stat(&a.ssim));
            let _ = writeln!(out, "  mae       {}", fmt_stat(&a.mae));
            let _ = writeln!(out, "  edge_mae  {}", fmt_stat(&a.edge_mae));
        }
        out
    }
}

/// Maps a `[1,1,H,W]` network-space tensor to a unit-space image.
fn unit(t: &crate::tensor::Tensor<f32>) -> Result<Image> {
    Ok(Image::from_tensor(t)?.map(|v| (v + 1.0) / 2.0))
}

/// Metrics of `g` against label `l`, both in unit space.
pub fn pair_metrics(arm: &str, pair: &str, l: &Image, g: &Image, tau: f64) -> Result<PairMetrics> {
    Ok(PairMetrics {
        arm: arm.to_string(),
        pair: pair.to_string(),
        psnr: psnr(l, g, 1.0)?,
        ssim: ssim(l, g, 1.0)?,
        mae: mae(l, g)?,
        edge_mae: edge_region_mae(l, g, &edge_map(l)?, tau)?,
    })
}

fn tile(panel: &mut [f32], pw: usize, img: &Image, x0: usize) {
    for r in 0..img.height() {
        for c in 0..img.width() {
            panel[r * pw + x0 + c] = img.get(r, c);
        }
    }
}

/// Evaluates every arm on the test pairs of `manifest` and writes
/// `report.tsv`, `summary.txt`, one absolute-difference image per arm and
/// pair, and one panel per pair (input | label | arm outputs | |label − last
/// arm|) to `out_dir`.
pub fn evaluate_arms(arms: &[(String, Checkpoint)], manifest: &Manifest, dir: &Path, out_dir: &Path, tau: f64) -> Result<EvalReport> {
    if arms.is_empty() {
        return Err(Error::Config("nothing to evaluate".into()));
    }
    let hash = manifest.hash();
    for (name, c) in arms {
        if c.state.manifest_hash != hash {
            return Err(Error::Config(format!(
                "arm '{name}' was trained on dataset {} but the comparison uses {hash}",
                c.state.manifest_hash
            )));
        }
    }
    let test = samples(manifest, &load_pairs(manifest, dir, Split::Test)?);
    if test.is_empty() {
        return Err(Error::Config("manifest has no test pairs".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let generators: Vec<_> = arms.iter().map(|(_, c)| c.generator()).collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut diff_images = Vec::new();
    let mut panels = Vec::new();
    for s in &test {
        let input = unit(&s.input)?;
        let label = unit(&s.label)?;
        let mut outputs = Vec::new();
        for ((name, _), g) in arms.iter().zip(&generators) {
            let out = unit(&g.infer(&s.input)?)?;
            rows.push(pair_metrics(name, &s.id, &label, &out, tau)?);
            let path = out_dir.join(format!("{name}_{}_absdiff.pgm", s.id));
            abs_diff_image(&label, &out, &path)?;
            diff_images.push(path);
            outputs.push(out);
        }
        let last = outputs.last().expect("at least one arm");
        let diff = Image::new(
            label.width(),
            label.height(),
            label.data().iter().zip(last.data()).map(|(&a, &b)| (a - b).abs()).collect(),
        )?;
        let tiles: Vec<&Image> = [&input, &label].into_iter().chain(&outputs).chain([&diff]).collect();
        let (w, h, gap) = (label.width(), label.height(), 2);
        let pw = tiles.len() * (w + gap) - gap;
        let mut panel = vec![1.0f32; pw * h];
        for (i, t) in tiles.iter().enumerate() {
            tile(&mut panel, pw, t, i * (w + gap));
        }
        let path = out_dir.join(format!("panel_{}.pgm", s.id));
        Image::new(pw, h, panel)?.to_pgm16(0.0, 1.0).save(&path)?;
        panels.push(path);
    }
    let report = EvalReport {
        arms: EvalReport::aggregate(&rows),
        rows,
        diff_images,
        panels,
    };
    let tsv = out_dir.join("report.tsv");
    fs::write(&tsv, report.to_tsv()).map_err(|e| Error::io(&tsv, e))?;
    let sum = out_dir.join("summary.txt");
    fs::write(&sum, report.summary()).map_err(|e| Error::io(&sum, e))?;
    Ok(report)
}

/// Compares at least two checkpoints trained on the same dataset.
pub fn compare_arms(arms: &[(String, Checkpoint)], manifest: &Manifest, dir: &Path, out_dir: &Path, tau: f64) -> Result<EvalReport> {
    if arms.len() < 2 {
        return Err(Error::Config(format!("a comparison needs at least two arms, got {}", arms.len())));
    }
    evaluate_arms(arms, manifest, dir, out_dir, tau)
}
