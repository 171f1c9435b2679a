//! Deterministic training: Adam, the epoch loop, checkpoints and the
//! three-arm ablation.
//!
//! All randomness comes from named substreams of `train.seed`: `init`
//! (weights), `shuffle/<epoch>` (batch order) and `patch/<step>` (crops).
//! A run is a pure function of configuration, seed and dataset contents.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufReader, Cursor, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::loss::{perceptual_loss_on_tape, pixel_loss_on_tape, FeatureExtractor, LabelTargets, LossConfig, LossNorm, PixelNorm};
use crate::netgen::{preset, Generator, GeneratorConfig, Param};
use crate::projector::dataset::{load_pairs, LoadedPair, Manifest, Norm, Split};
use crate::seeds;
use crate::tensor::io::{read_line, read_named_records, write_named};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Perceptual,
    Pixel(PixelNorm),
}

impl Objective {
    fn name(&self) -> &'static str {
        match self {
            Objective::Perceptual => "perceptual",
            Objective::Pixel(PixelNorm::L1) => "pixel_l1",
            Objective::Pixel(PixelNorm::L2) => "pixel_l2",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "perceptual" => Ok(Objective::Perceptual),
            "pixel_l1" => Ok(Objective::Pixel(PixelNorm::L1)),
            "pixel_l2" => Ok(Objective::Pixel(PixelNorm::L2)),
            _ => Err(Error::Config(format!(
                "unknown objective '{s}' (expected perceptual, pixel_l1 or pixel_l2)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub loss: LossConfig,
    pub objective: Objective,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Square crop size; 0 trains on full images.
    pub patch_size: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    /// Evaluate the test loss every this many epochs; 0 never.
    pub eval_every: usize,
    /// Abort when the batch loss exceeds this multiple of the first one.
    pub divergence_factor: f64,
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|p| parse_num(key, p)).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Defaults with the proposed generator and edge-weighted perceptual loss.
    pub fn with_seed(seed: u64) -> Self {
        TrainConfig {
            generator: crate::netgen::preset_proposed(),
            loss: LossConfig::default(),
            objective: Objective::Perceptual,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 200,
            batch_size: 4,
            patch_size: 0,
            seed,
            checkpoint_every: 0,
            max_steps: 0,
            eval_every: 1,
            divergence_factor: 1e3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.loss.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{k} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.epochs == 0 && self.max_steps == 0 {
            return bad("need at least one epoch or a step limit".into());
        }
        if !(self.divergence_factor > 1.0) {
            return bad(format!("divergence factor must exceed 1, got {}", self.divergence_factor));
        }
        if self.patch_size > 0 {
            let m = self.generator.size_multiple().max(8);
            if self.patch_size % m != 0 {
                return bad(format!("patch size {} must be a multiple of {m}", self.patch_size));
            }
        }
        Ok(())
    }

    /// Every setting as `key=value`, in a fixed order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = self
            .generator
            .to_kv()
            .into_iter()
            .map(|(k, v)| (format!("generator.{k}"), v))
            .collect();
        let l = &self.loss;
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        push("loss.objective", self.objective.name().into());
        push("loss.layers", join(&l.layers));
        push("loss.edge_weighting", l.edge_weighting.to_string());
        push("loss.epsilon", l.epsilon.to_string());
        push("loss.norm", l.norm.to_string());
        push("loss.layer_weights", join(&l.layer_weights));
        push("train.lr", self.lr.to_string());
        push("train.beta1", self.beta1.to_string());
        push("train.beta2", self.beta2.to_string());
        push("train.adam_eps", self.adam_eps.to_string());
        push("train.epochs", self.epochs.to_string());
        push("train.batch_size", self.batch_size.to_string());
        push("train.patch_size", self.patch_size.to_string());
        push("train.seed", self.seed.to_string());
        push("train.checkpoint_every", self.checkpoint_every.to_string());
        push("train.max_steps", self.max_steps.to_string());
        push("train.eval_every", self.eval_every.to_string());
        push("train.divergence_factor", self.divergence_factor.to_string());
        kv
    }

    /// Every accepted key, including the `generator.preset` shorthand.
    pub fn keys() -> Vec<String> {
        let mut keys = vec!["generator.preset".to_string()];
        keys.extend(Self::with_seed(0).to_kv().into_iter().map(|(k, _)| k));
        keys
    }

    /// Sets one key. `generator.preset` replaces the whole generator section.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some(gk) = key.strip_prefix("generator.") {
            if gk == "preset" {
                self.generator = preset(v)?;
                return Ok(());
            }
            if !self.generator.to_kv().iter().any(|(k, _)| k == gk) {
                return Err(Error::Config(format!("unknown key '{key}'")));
            }
            // only the combination is validated, so levels and block lists can
            // be changed one key at a time
            let g = &mut self.generator;
            match gk {
                "in_channels" => g.in_channels = parse_num(key, v)?,
                "out_channels" => g.out_channels = parse_num(key, v)?,
                "base_width" => g.base_width = parse_num(key, v)?,
                "levels" => g.levels = parse_num(key, v)?,
                "res_blocks_per_level" => g.res_blocks_per_level = parse_list(key, v)?,
                "upsample_mode" => g.upsample_mode = v.parse()?,
                "outer_kernel" => g.outer_kernel = parse_num(key, v)?,
                "inner_kernel" => g.inner_kernel = parse_num(key, v)?,
                "norm_affine" => g.norm_affine = parse_num(key, v)?,
                _ => unreachable!("keys come from to_kv"),
            }
            return Ok(());
        }
        match key {
            "loss.objective" => self.objective = Objective::parse(v)?,
            "loss.layers" => {
                self.loss.layers = parse_list(key, v)?;
                if self.loss.layer_weights.len() != self.loss.layers.len() {
                    self.loss.layer_weights = vec![1.0; self.loss.layers.len()];
                }
            }
            "loss.edge_weighting" => self.loss.edge_weighting = parse_num(key, v)?,
            "loss.epsilon" => self.loss.epsilon = parse_num(key, v)?,
            "loss.norm" => self.loss.norm = v.parse::<LossNorm>()?,
            "loss.layer_weights" => self.loss.layer_weights = parse_list(key, v)?,
            "train.lr" => self.lr = parse_num(key, v)?,
            "train.beta1" => self.beta1 = parse_num(key, v)?,
            "train.beta2" => self.beta2 = parse_num(key, v)?,
            "train.adam_eps" => self.adam_eps = parse_num(key, v)?,
            "train.epochs" => self.epochs = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "train.patch_size" => self.patch_size = parse_num(key, v)?,
            "train.seed" => self.seed = parse_num(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse_num(key, v)?,
            "train.max_steps" => self.max_steps = parse_num(key, v)?,
            "train.eval_every" => self.eval_every = parse_num(key, v)?,
            "train.divergence_factor" => self.divergence_factor = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Rebuilds a configuration from `to_kv` output; every key is required.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = Self::with_seed(0);
        for (k, _) in cfg.to_kv() {
            let v = kv
                .get(&k)
                .ok_or_else(|| Error::Config(format!("configuration lacks '{k}'")))?;
            cfg.set(&k, v)?;
        }
        if let Some(extra) = kv.keys().find(|k| !Self::keys().contains(k)) {
            return Err(Error::Config(format!("unknown key '{extra}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {}: expected 'key = value'", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Optimizer and bookkeeping state carried across steps and checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Optimizer steps taken.
    pub step: usize,
    pub first_moment: Vec<Tensor<f32>>,
    pub second_moment: Vec<Tensor<f32>>,
    /// Loss of the first batch, the divergence reference.
    pub initial_loss: Option<f64>,
    /// Sum of batch losses and batch count of the epoch in progress.
    pub epoch_loss_sum: f64,
    pub epoch_batches: usize,
    pub manifest_hash: String,
    pub bundle_id: String,
}

impl TrainState {
    fn fresh(params: &[Param], manifest_hash: String, bundle_id: String) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        TrainState {
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
            initial_loss: None,
            epoch_loss_sum: 0.0,
            epoch_batches: 0,
            manifest_hash,
            bundle_id,
        }
    }
}

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// One bias-corrected Adam update; `t` is the 1-based step number. Aborts on
/// a non-finite gradient, naming the step and the parameter.
pub fn adam_step(
    params: &mut [Param],
    grads: &[Tensor<f32>],
    m: &mut [Tensor<f32>],
    v: &mut [Tensor<f32>],
    hp: AdamParams,
    t: usize,
) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(Error::Contract("adam_step needs one gradient and moment pair per weight".into()));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "gradient {:?} does not match weight '{}' {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!("non-finite gradient at step {t} in layer '{}'", p.name)));
        }
    }
    let c1 = 1.0 - hp.beta1.powi(t as i32);
    let c2 = 1.0 - hp.beta2.powi(t as i32);
    for i in 0..params.len() {
        let (w, g) = (params[i].value.data_mut(), grads[i].data());
        let (mi, vi) = (m[i].data_mut(), v[i].data_mut());
        for j in 0..w.len() {
            let gj = g[j] as f64;
            let mj = hp.beta1 * mi[j] as f64 + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * vi[j] as f64 + (1.0 - hp.beta2) * gj * gj;
            mi[j] = mj as f32;
            vi[j] = vj as f32;
            let update = hp.lr * (mj / c1) / ((vj / c2).sqrt() + hp.eps);
            w[j] = (w[j] as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Generator weights plus everything needed to continue or reproduce a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
    pub weights: Vec<Param>,
}

impl Checkpoint {
    /// `ckpt v1`, `key=value` lines, `end`, then named `tensor v1` records
    /// (`weight.*`, `adam_m.*`, `adam_v.*`).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = String::from("ckpt v1\n");
        for (k, v) in self.config.to_kv() {
            let _ = writeln!(head, "{k}={v}");
        }
        let s = &self.state;
        let _ = writeln!(head, "state.step={}", s.step);
        let _ = writeln!(
            head,
            "state.initial_loss={}",
            s.initial_loss.map_or("none".to_string(), |v| v.to_string())
        );
        let _ = writeln!(head, "state.epoch_loss_sum={}", s.epoch_loss_sum);
        let _ = writeln!(head, "state.epoch_batches={}", s.epoch_batches);
        let _ = writeln!(head, "state.manifest_hash={}", s.manifest_hash);
        let _ = writeln!(head, "state.bundle_id={}", s.bundle_id);
        head.push_str("end\n");
        let mut out = head.into_bytes();
        for p in &self.weights {
            write_named(&mut out, &format!("weight.{}", p.name), &p.value).expect("writing to memory");
        }
        for (p, m) in self.weights.iter().zip(&s.first_moment) {
            write_named(&mut out, &format!("adam_m.{}", p.name), m).expect("writing to memory");
        }
        for (p, v) in self.weights.iter().zip(&s.second_moment) {
            write_named(&mut out, &format!("adam_v.{}", p.name), v).expect("writing to memory");
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = BufReader::new(Cursor::new(bytes));
        if read_line(&mut r, path)?.as_deref() != Some("ckpt v1") {
            return Err(Error::format(path, "expected 'ckpt v1' header"));
        }
        let mut kv = BTreeMap::new();
        let mut state_kv = BTreeMap::new();
        loop {
            let line = read_line(&mut r, path)?.ok_or_else(|| Error::format(path, "checkpoint header lacks 'end'"))?;
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad header line '{line}'")))?;
            if let Some(sk) = k.strip_prefix("state.") {
                state_kv.insert(sk.to_string(), v.to_string());
            } else {
                kv.insert(k.to_string(), v.to_string());
            }
        }
        let config = TrainConfig::from_kv(&kv).map_err(|e| Error::format(path, e.to_string()))?;
        let get = |k: &str| {
            state_kv
                .get(k)
                .cloned()
                .ok_or_else(|| Error::format(path, format!("checkpoint lacks 'state.{k}'")))
        };
        let num = |k: &str| -> Result<f64> {
            let v = get(k)?;
            v.parse().map_err(|_| Error::format(path, format!("bad state.{k} '{v}'")))
        };
        let step = get("step")?
            .parse()
            .map_err(|_| Error::format(path, "bad state.step"))?;
        let epoch_batches = get("epoch_batches")?
            .parse()
            .map_err(|_| Error::format(path, "bad state.epoch_batches"))?;
        let initial_loss = match get("initial_loss")?.as_str() {
            "none" => None,
            _ => Some(num("initial_loss")?),
        };
        let skeleton = Generator::build(&config.generator, 0).map_err(|e| Error::format(path, e.to_string()))?;
        let n = skeleton.params().len();
        let records = read_named_records(&mut r, path)?;
        if records.len() != 3 * n {
            return Err(Error::Load(format!(
                "{}: expected {} tensor records, found {}",
                path.display(),
                3 * n,
                records.len()
            )));
        }
        let mut it = records.into_iter();
        let mut section = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            skeleton
                .params()
                .iter()
                .map(|p| {
                    let (name, t) = it.next().expect("counted");
                    let want = format!("{prefix}.{}", p.name);
                    if name != want || t.shape() != p.value.shape() {
                        return Err(Error::Load(format!(
                            "{}: record '{name}' {:?} where '{want}' {:?} was expected",
                            path.display(),
                            t.shape(),
                            p.value.shape()
                        )));
                    }
                    Ok(t)
                })
                .collect()
        };
        let weights: Vec<Param> = skeleton
            .params()
            .iter()
            .zip(section("weight")?)
            .map(|(p, value)| Param {
                name: p.name.clone(),
                value,
            })
            .collect();
        let first_moment = section("adam_m")?;
        let second_moment = section("adam_v")?;
        Ok(Checkpoint {
            config,
            state: TrainState {
                step,
                first_moment,
                second_moment,
                initial_loss,
                epoch_loss_sum: num("epoch_loss_sum")?,
                epoch_batches,
                manifest_hash: get("manifest_hash")?,
                bundle_id: get("bundle_id")?,
            },
            weights,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn generator(&self) -> Result<Generator> {
        Generator::from_params(
            &self.config.generator,
            self.weights.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        )
    }

    pub fn hash(&self) -> String {
        seeds::content_hash(&self.to_bytes())
    }
}

/// One image pair in network space (`[-1, 1]`).
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub input: Tensor<f32>,
    pub label: Tensor<f32>,
}

/// Maps a raw image to network space through its modality's norm record.
pub fn to_network(img: &crate::image::Image, norm: &Norm) -> Tensor<f32> {
    img.map(|v| (2.0 * norm.normalize(v as f64) - 1.0) as f32).to_tensor()
}

/// Inverse of [`to_network`].
pub fn from_network(t: &Tensor<f32>, norm: &Norm) -> Result<crate::image::Image> {
    let img = crate::image::Image::from_tensor(t)?;
    Ok(img.map(|u| norm.denormalize((u as f64 + 1.0) / 2.0) as f32))
}

pub fn samples(manifest: &Manifest, pairs: &[LoadedPair]) -> Vec<Sample> {
    pairs
        .iter()
        .map(|p| Sample {
            id: p.id.clone(),
            input: to_network(&p.mr, &manifest.mr_norm),
            label: to_network(&p.xray, &manifest.xray_norm),
        })
        .collect()
}

/// What the trainer reports while running.
#[derive(Clone, Debug)]
pub enum Event<'a> {
    /// An optimizer step used these training pairs.
    Step { step: usize, ids: &'a [String], loss: f64 },
    /// The test loss was evaluated on these pairs without gradients.
    Evaluated { epoch: usize, ids: &'a [String], loss: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub test_loss: Option<f64>,
}

pub struct Trainer {
    config: TrainConfig,
    generator: Generator,
    state: TrainState,
    fe: FeatureExtractor,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

impl Trainer {
    /// Starts a run on in-memory samples.
    pub fn new(config: TrainConfig, train: Vec<Sample>, test: Vec<Sample>, manifest_hash: String) -> Result<Self> {
        config.validate()?;
        let generator = Generator::build(&config.generator, config.seed)?;
        let fe = FeatureExtractor::shipped();
        let state = TrainState::fresh(generator.params(), manifest_hash, fe.bundle_id().to_string());
        Self::assemble(config, generator, state, fe, train, test)
    }

    /// Starts a run on the pairs of a manifest; test pairs are only evaluated.
    pub fn from_manifest(config: TrainConfig, manifest: &Manifest, dir: &Path) -> Result<Self> {
        let train = samples(manifest, &load_pairs(manifest, dir, Split::Train)?);
        let test = samples(manifest, &load_pairs(manifest, dir, Split::Test)?);
        Self::new(config, train, test, manifest.hash())
    }

    /// Continues the run saved in `ckpt`.
    pub fn resume(ckpt: Checkpoint, train: Vec<Sample>, test: Vec<Sample>, manifest_hash: &str) -> Result<Self> {
        if ckpt.state.manifest_hash != manifest_hash {
            return Err(Error::Config(format!(
                "checkpoint was trained on dataset {} but {} was given",
                ckpt.state.manifest_hash, manifest_hash
            )));
        }
        let fe = FeatureExtractor::shipped();
        if ckpt.state.bundle_id != fe.bundle_id() {
            return Err(Error::Config("checkpoint used a different feature bundle".into()));
        }
        let generator = ckpt.generator()?;
        Self::assemble(ckpt.config, generator, ckpt.state, fe, train, test)
    }

    fn assemble(
        config: TrainConfig,
        generator: Generator,
        state: TrainState,
        fe: FeatureExtractor,
        train: Vec<Sample>,
        test: Vec<Sample>,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let shape = train[0].input.shape().to_vec();
        for s in train.iter().chain(&test) {
            if s.input.shape() != shape.as_slice() || s.label.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "pair '{}' has shape {:?}, expected {shape:?}",
                    s.id,
                    s.input.shape()
                )));
            }
        }
        let (h, w) = (shape[2], shape[3]);
        if config.patch_size > h.min(w) {
            return Err(Error::Config(format!(
                "patch size {} exceeds image size {h}x{w}",
                config.patch_size
            )));
        }
        Ok(Trainer {
            config,
            generator,
            state,
            fe,
            train,
            test,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train.len().div_ceil(self.config.batch_size)
    }

    /// Total steps the run will take.
    pub fn total_steps(&self) -> usize {
        let by_epochs = self.config.epochs * self.steps_per_epoch();
        match (self.config.epochs, self.config.max_steps) {
            (0, m) => m,
            (_, 0) => by_epochs,
            (_, m) => m.min(by_epochs),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            state: self.state.clone(),
            weights: self.generator.params().to_vec(),
        }
    }

    fn batch_indices(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, b) = (step / spe, step % spe);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut seeds::rng(self.config.seed, &format!("shuffle/{epoch}")));
        let bs = self.config.batch_size;
        order[b * bs..((b + 1) * bs).min(order.len())].to_vec()
    }

    fn crop(&self, t: &Tensor<f32>, y: usize, x: usize) -> Tensor<f32> {
        let p = self.config.patch_size;
        let (_, c, _, w) = t.dims4().expect("rank-4 samples");
        let h = t.shape()[2];
        let mut data = Vec::with_capacity(c * p * p);
        for ch in 0..c {
            for r in y..y + p {
                let row = ch * h * w + r * w;
                data.extend_from_slice(&t.data()[row + x..row + x + p]);
            }
        }
        Tensor::new(&[1, c, p, p], data).expect("crop inside image")
    }

    fn batch(&self, step: usize, idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut inputs = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        let p = self.config.patch_size;
        let mut rng = seeds::rng(self.config.seed, &format!("patch/{step}"));
        for &i in idx {
            let s = &self.train[i];
            if p == 0 {
                inputs.push(s.input.clone());
                labels.push(s.label.clone());
            } else {
                let (h, w) = (s.input.shape()[2], s.input.shape()[3]);
                let (y, x) = (rng.gen_range(0..=h - p), rng.gen_range(0..=w - p));
                inputs.push(self.crop(&s.input, y, x));
                labels.push(self.crop(&s.label, y, x));
            }
        }
        Ok((Tensor::stack_batch(&inputs)?, Tensor::stack_batch(&labels)?))
    }

    fn loss_on_tape(&self, tape: &mut Tape<f32>, generated: Var, label: &Tensor<f32>) -> Result<Var> {
        match self.config.objective {
            Objective::Pixel(norm) => {
                let l = tape.constant(label.clone());
                pixel_loss_on_tape(tape, l, generated, norm)
            }
            Objective::Perceptual => {
                let n = label.shape()[0];
                let per: Vec<LabelTargets<f32>> = (0..n)
                    .map(|i| LabelTargets::new(&label.sample(i)?, &self.fe, &self.config.loss))
                    .collect::<Result<_>>()?;
                let targets = LabelTargets::stack(&per.iter().collect::<Vec<_>>())?;
                let bound = self.fe.bind(tape);
                perceptual_loss_on_tape(tape, &self.fe, &bound, generated, &targets, &self.config.loss)
            }
        }
    }

    /// Loss of the current generator on one sample, without gradients.
    pub fn evaluate(&self, sample: &Sample) -> Result<f64> {
        let mut tape = Tape::new();
        let params = self.generator.bind_frozen(&mut tape);
        let x = tape.constant(sample.input.clone());
        let y = self.generator.forward(&mut tape, &params, x)?;
        let loss = self.loss_on_tape(&mut tape, y, &sample.label)?;
        Ok(tape.value(loss).data()[0] as f64)
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self, observe: &mut dyn FnMut(Event)) -> Result<f64> {
        let step = self.state.step;
        let idx = self.batch_indices(step);
        let (x, label) = self.batch(step, &idx)?;
        let mut tape = Tape::new();
        let params = self.generator.bind(&mut tape);
        let xv = tape.constant(x);
        let y = self.generator.forward(&mut tape, &params, xv)?;
        let loss = self.loss_on_tape(&mut tape, y, &label)?;
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {}", step + 1)));
        }
        let initial = *self.state.initial_loss.get_or_insert(value);
        if value > self.config.divergence_factor * initial {
            return Err(Error::Numerical(format!(
                "loss diverged at step {}: {value} exceeds {} x initial loss {initial}",
                step + 1,
                self.config.divergence_factor
            )));
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = params
            .iter()
            .map(|&p| tape.grad(p).expect("weights are trainable leaves"))
            .collect();
        drop(tape);
        let hp = AdamParams {
            lr: self.config.lr,
            beta1: self.config.beta1,
            beta2: self.config.beta2,
            eps: self.config.adam_eps,
        };
        adam_step(
            self.generator.params_mut(),
            &grads,
            &mut self.state.first_moment,
            &mut self.state.second_moment,
            hp,
            step + 1,
        )?;
        self.state.step += 1;
        self.state.epoch_loss_sum += value;
        self.state.epoch_batches += 1;
        let ids: Vec<String> = idx.iter().map(|&i| self.train[i].id.clone()).collect();
        observe(Event::Step {
            step: step + 1,
            ids: &ids,
            loss: value,
        });
        Ok(value)
    }

    /// Mean loss over the test pairs, if any.
    pub fn test_loss(&self, epoch: usize, observe: &mut dyn FnMut(Event)) -> Result<Option<f64>> {
        if self.test.is_empty() {
            return Ok(None);
        }
        let mut sum = 0.0;
        for s in &self.test {
            sum += self.evaluate(s)?;
        }
        let mean = sum / self.test.len() as f64;
        let ids: Vec<String> = self.test.iter().map(|s| s.id.clone()).collect();
        observe(Event::Evaluated {
            epoch,
            ids: &ids,
            loss: mean,
        });
        Ok(Some(mean))
    }

    /// Trains until the configured budget is spent. With `out_dir`, appends
    /// `metrics.tsv` (deterministic) and `timing.tsv` (wall clock) lines and
    /// writes checkpoints there.
    pub fn run(&mut self, out_dir: Option<&Path>, observe: &mut dyn FnMut(Event)) -> Result<Vec<EpochRecord>> {
        let total = self.total_steps();
        let spe = self.steps_per_epoch();
        let mut records = Vec::new();
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            for (name, header) in [
                ("metrics.tsv", "epoch\tstep\ttrain_loss\ttest_loss\n"),
                ("timing.tsv", "epoch\tseconds\n"),
            ] {
                let path = dir.join(name);
                if !path.exists() || self.state.step == 0 {
                    fs::write(&path, header).map_err(|e| Error::io(&path, e))?;
                }
            }
        }
        let mut clock = Instant::now();
        while self.state.step < total {
            self.step(observe)?;
            let epoch_done = self.state.step % spe == 0;
            if !epoch_done && self.state.step < total {
                continue;
            }
            let epoch = self.state.step.div_ceil(spe);
            let train_loss = self.state.epoch_loss_sum / self.state.epoch_batches as f64;
            let due = self.config.eval_every > 0 && (epoch % self.config.eval_every == 0 || self.state.step == total);
            let test_loss = if due { self.test_loss(epoch, observe)? } else { None };
            let rec = EpochRecord {
                epoch,
                step: self.state.step,
                train_loss,
                test_loss,
            };
            self.state.epoch_loss_sum = 0.0;
            self.state.epoch_batches = 0;
            if let Some(dir) = out_dir {
                let line = format!(
                    "{}\t{}\t{}\t{}\n",
                    rec.epoch,
                    rec.step,
                    rec.train_loss,
                    rec.test_loss.map_or("NA".to_string(), |v| v.to_string())
                );
                append(&dir.join("metrics.tsv"), &line)?;
                append(&dir.join("timing.tsv"), &format!("{epoch}\t{:.3}\n", clock.elapsed().as_secs_f64()))?;
                clock = Instant::now();
                let every = self.config.checkpoint_every;
                if every > 0 && epoch % every == 0 && self.state.step < total {
                    self.checkpoint().save(&dir.join(format!("epoch{epoch:04}.ckpt")))?;
                }
            }
            records.push(rec);
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(&dir.join("final.ckpt"))?;
        }
        Ok(records)
    }
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// The three arms of the ablation: `(name, preset, edge weighting)`.
pub const ARMS: [(&str, &str, bool); 3] = [
    ("baseline_edge", "baseline", true),
    ("proposed_plain", "proposed", false),
    ("proposed_edge", "proposed", true),
];

/// Configuration of one ablation arm derived from `base`: only the generator
/// layout (keeping the base width) and the edge weighting change.
pub fn arm_config(base: &TrainConfig, preset_name: &str, edge_weighting: bool) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    let mut g = preset(preset_name)?;
    g.base_width = base.generator.base_width;
    g.norm_affine = base.generator.norm_affine;
    cfg.generator = g;
    cfg.objective = Objective::Perceptual;
    cfg.loss.edge_weighting = edge_weighting;
    cfg.validate()?;
    Ok(cfg)
}

/// Output of [`run_ablation`].
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    pub checkpoints: Vec<(String, PathBuf)>,
    pub report: crate::eval::EvalReport,
}

/// Trains the three arms on one dataset with identical seeds and budgets,
/// then compares them on the test split. Artifacts go to `out_dir/<arm>/`
/// and `out_dir/report/`.
pub fn run_ablation(manifest: &Manifest, dir: &Path, base: &TrainConfig, out_dir: &Path) -> Result<AblationOutcome> {
    let train = samples(manifest, &load_pairs(manifest, dir, Split::Train)?);
    let test = samples(manifest, &load_pairs(manifest, dir, Split::Test)?);
    let mut checkpoints = Vec::new();
    for (name, preset_name, edge) in ARMS {
        let cfg = arm_config(base, preset_name, edge)?;
        let mut trainer = Trainer::new(cfg, train.clone(), test.clone(), manifest.hash())?;
        let arm_dir = out_dir.join(name);
        trainer.run(Some(&arm_dir), &mut |_| {})?;
        checkpoints.push((name.to_string(), arm_dir.join("final.ckpt")));
    }
    let arms: Vec<(String, Checkpoint)> = checkpoints
        .iter()
        .map(|(n, p)| Ok((n.clone(), Checkpoint::load(p)?)))
        .collect::<Result<_>>()?;
    let report = crate::eval::compare_arms(&arms, manifest, dir, &out_dir.join("report"), crate::eval::EDGE_THRESHOLD)?;
    Ok(AblationOutcome { checkpoints, report })
}
