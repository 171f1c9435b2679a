//! Paired projection datasets split by phantom.
//!
//! A manifest is a line-based text file:
//!
//! ```text
//! manifest v1
//! norm mr <p1> <p99>
//! norm xray <p1> <p99>
//! pair <id> <mr_path> <xray_path> <train|test>
//! ```
//!
//! Pair ids have the form `ph<phantom>_a<angle>`; paths are relative to the
//! manifest's directory. Images are stored raw, and the percentile record
//! maps them to `[0, 1]`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};

use super::phantom::{generate_phantom, PhantomSpec};
use super::{project_pair, BeamMode, MarchOptions, ProjectionGeometry};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::seeds;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Percentile scaling `v -> (v - p1) / (p99 - p1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Norm {
    pub p1: f64,
    pub p99: f64,
}

impl Norm {
    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.p1) / (self.p99 - self.p1)
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.p1 + u * (self.p99 - self.p1)
    }

    /// Nearest-rank 1st and 99th percentiles of `values`.
    pub fn from_values(values: &mut [f32]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("cannot compute percentiles of an empty set".into()));
        }
        values.sort_by(f32::total_cmp);
        let at = |q: f64| values[(q * (values.len() - 1) as f64).round() as usize] as f64;
        let norm = Norm {
            p1: at(0.01),
            p99: at(0.99),
        };
        if !(norm.p99 > norm.p1) {
            return Err(Error::Config(format!(
                "degenerate intensity range: p1 {} >= p99 {}",
                norm.p1, norm.p99
            )));
        }
        Ok(norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub id: String,
    pub phantom: usize,
    pub mr_path: String,
    pub xray_path: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub mr_norm: Norm,
    pub xray_norm: Norm,
    pub pairs: Vec<PairRecord>,
}

pub fn pair_id(phantom: usize, angle: usize) -> String {
    format!("ph{phantom}_a{angle:02}")
}

fn phantom_of(id: &str) -> Option<usize> {
    id.strip_prefix("ph")?.split('_').next()?.parse().ok()
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::from("manifest v1\n");
        s.push_str(&format!("norm mr {} {}\n", self.mr_norm.p1, self.mr_norm.p99));
        s.push_str(&format!("norm xray {} {}\n", self.xray_norm.p1, self.xray_norm.p99));
        for p in &self.pairs {
            s.push_str(&format!("pair {} {} {} {}\n", p.id, p.mr_path, p.xray_path, p.split));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("manifest v1") {
            return Err(Error::format(path, "expected 'manifest v1' header"));
        }
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::format(path, format!("bad number '{s}': {e}")))
        };
        let mut mr_norm = None;
        let mut xray_norm = None;
        let mut pairs = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(' ').collect();
            match f[..] {
                ["norm", which, p1, p99] => {
                    let n = Norm {
                        p1: num(p1)?,
                        p99: num(p99)?,
                    };
                    match which {
                        "mr" => mr_norm = Some(n),
                        "xray" => xray_norm = Some(n),
                        _ => return Err(Error::format(path, format!("unknown norm record '{which}'"))),
                    }
                }
                ["pair", id, mr, xray, split] => {
                    let split = match split {
                        "train" => Split::Train,
                        "test" => Split::Test,
                        _ => return Err(Error::format(path, format!("unknown split '{split}'"))),
                    };
                    let phantom = phantom_of(id)
                        .ok_or_else(|| Error::format(path, format!("pair id '{id}' lacks a phantom prefix")))?;
                    pairs.push(PairRecord {
                        id: id.to_string(),
                        phantom,
                        mr_path: mr.to_string(),
                        xray_path: xray.to_string(),
                        split,
                    });
                }
                _ => return Err(Error::format(path, format!("unrecognized manifest line '{line}'"))),
            }
        }
        let manifest = Manifest {
            mr_norm: mr_norm.ok_or_else(|| Error::format(path, "missing 'norm mr' record"))?,
            xray_norm: xray_norm.ok_or_else(|| Error::format(path, "missing 'norm xray' record"))?,
            pairs,
        };
        manifest.check_isolation()?;
        Ok(manifest)
    }

    /// Errors when a phantom contributes pairs to both splits.
    pub fn check_isolation(&self) -> Result<()> {
        let train: BTreeSet<usize> = self.phantoms(Split::Train);
        if let Some(p) = self.phantoms(Split::Test).intersection(&train).next() {
            return Err(Error::Config(format!("phantom {p} appears in both train and test splits")));
        }
        Ok(())
    }

    pub fn phantoms(&self, split: Split) -> BTreeSet<usize> {
        self.pairs
            .iter()
            .filter(|p| p.split == split)
            .map(|p| p.phantom)
            .collect()
    }

    pub fn pairs_in(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.pairs.iter().filter(move |p| p.split == split)
    }

    /// Content hash of the manifest text.
    pub fn hash(&self) -> String {
        seeds::content_hash(self.to_text().as_bytes())
    }

    /// Copy restricted to one split.
    pub fn only(&self, split: Split) -> Manifest {
        Manifest {
            pairs: self.pairs_in(split).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// A manifest pair with both raw images loaded.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub id: String,
    pub phantom: usize,
    pub mr: Image,
    pub xray: Image,
}

/// Loads the images of every pair of `split`; paths resolve against `dir`.
pub fn load_pairs(manifest: &Manifest, dir: &Path, split: Split) -> Result<Vec<LoadedPair>> {
    manifest
        .pairs_in(split)
        .map(|p| {
            Ok(LoadedPair {
                id: p.id.clone(),
                phantom: p.phantom,
                mr: Image::load(&dir.join(&p.mr_path))?,
                xray: Image::load(&dir.join(&p.xray_path))?,
            })
        })
        .collect()
}

/// Everything needed to synthesize a dataset.
#[derive(Clone, Debug)]
pub struct DatasetPlan {
    pub phantoms: Vec<PhantomSpec>,
    pub geometries: Vec<ProjectionGeometry>,
    /// `(train phantoms, test phantoms)`; the first phantoms go to training.
    pub split: (usize, usize),
    pub march: MarchOptions,
    /// Standard deviation of additive Gaussian noise on the X-ray line
    /// integrals; zero disables noise.
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

/// Field of view of desk-scale phantoms, mm.
pub const DESK_FOV_MM: f64 = 192.0;

impl DatasetPlan {
    /// Desk-scale plan: `phantoms` head phantoms on a `pixels³` grid covering
    /// the desk field of view, each projected at `angles` cone-beam views
    /// spread over half a turn onto a `pixels²` detector. Phantom shapes are
    /// drawn from the `phantom/<k>` substreams of `seed`.
    pub fn desk(seed: u64, phantoms: usize, split: (usize, usize), angles: usize, pixels: usize) -> Self {
        let spacing = DESK_FOV_MM / pixels as f64;
        DatasetPlan {
            phantoms: (0..phantoms)
                .map(|k| PhantomSpec {
                    size: pixels,
                    spacing,
                    ..PhantomSpec::with_seed(seeds::derive(seed, &format!("phantom/{k}")))
                })
                .collect(),
            geometries: angular_sweep(default_geometry(pixels, pixels, spacing), angles, std::f64::consts::PI),
            split,
            march: MarchOptions::default(),
            noise_sigma: 0.0,
            noise_seed: seed,
        }
    }
}

/// `count` copies of `base` evenly spaced over `arc` radians.
pub fn angular_sweep(base: ProjectionGeometry, count: usize, arc: f64) -> Vec<ProjectionGeometry> {
    (0..count)
        .map(|j| ProjectionGeometry {
            angle: base.angle + arc * j as f64 / count as f64,
            ..base
        })
        .collect()
}

/// Cone-beam detector of `pixels²` whose field of view at the isocenter
/// matches a `size³` phantom grid of `spacing` mm.
pub fn default_geometry(pixels: usize, size: usize, spacing: f64) -> ProjectionGeometry {
    let (sad, sdd) = (750.0, 1200.0);
    let fov = size as f64 * spacing;
    let d = fov / pixels as f64 * sdd / sad;
    ProjectionGeometry {
        mode: BeamMode::Cone { sad, sdd },
        nu: pixels,
        nv: pixels,
        du: d,
        dv: d,
        angle: 0.0,
    }
}

/// Generates phantoms, projects them and writes images plus `manifest.txt`
/// into `out_dir`.
pub fn build_dataset(plan: &DatasetPlan, out_dir: &Path) -> Result<Manifest> {
    let (n_train, n_test) = plan.split;
    if n_train + n_test != plan.phantoms.len() {
        return Err(Error::Config(format!(
            "split {n_train}:{n_test} does not cover {} phantoms",
            plan.phantoms.len()
        )));
    }
    if n_train == 0 {
        return Err(Error::Config("split needs at least one training phantom".into()));
    }
    if plan.geometries.is_empty() {
        return Err(Error::Config("dataset needs at least one projection geometry".into()));
    }
    if !(plan.noise_sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {}", plan.noise_sigma)));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let noise = Normal::new(0.0, plan.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(format!("noise model: {e}")))?;
    let mut noise_rng = seeds::rng(plan.noise_seed, "noise");

    let mut pairs = Vec::new();
    let mut train_mr = Vec::new();
    let mut train_xray = Vec::new();
    for (k, spec) in plan.phantoms.iter().enumerate() {
        let vol = generate_phantom(spec)?;
        let split = if k < n_train { Split::Train } else { Split::Test };
        for (j, geom) in plan.geometries.iter().enumerate() {
            let (mr, mut xray) = project_pair(&vol, geom, plan.march)?;
            if plan.noise_sigma > 0.0 {
                for v in xray.data_mut() {
                    *v += noise.sample(&mut noise_rng) as f32;
                }
            }
            let id = pair_id(k, j);
            let mr_path = format!("{id}_mr.img");
            let xray_path = format!("{id}_xray.img");
            mr.save(&out_dir.join(&mr_path))?;
            xray.save(&out_dir.join(&xray_path))?;
            if split == Split::Train {
                train_mr.extend_from_slice(mr.data());
                train_xray.extend_from_slice(xray.data());
            }
            pairs.push(PairRecord {
                id,
                phantom: k,
                mr_path,
                xray_path,
                split,
            });
        }
    }
    let manifest = Manifest {
        mr_norm: Norm::from_values(&mut train_mr)?,
        xray_norm: Norm::from_values(&mut train_xray)?,
        pairs,
    };
    manifest.save(&out_dir.join("manifest.txt"))?;
    Ok(manifest)
}

/// Conventional manifest location inside a dataset directory.
pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}
