//! Edge-weighted perceptual loss and its baselines.
//!
//! The label's Sobel edge map, pooled to each feature resolution and floored
//! at `epsilon`, weights the per-element feature differences, so errors at
//! edges count fully while errors in homogeneous regions are attenuated.

use std::io::{BufReader, Cursor};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::io::{read_named_records, write_named};
use crate::tensor::kernels;
use crate::tensor::{Padding, Real, Tape, Tensor, Var};

/// Channel widths of the feature extractor's stages.
pub const STAGE_WIDTHS: [usize; 4] = [8, 16, 32, 64];

/// Seed of the shipped feature-extractor weights.
pub const BUNDLE_SEED: u64 = 20_190_417;

static SHIPPED_BUNDLE: &[u8] = include_bytes!("../assets/feature_extractor.tv1");

/// Sobel gradient magnitude `sqrt(Gx² + Gy²)` of each image of a
/// `[N,1,H,W]` batch with reflect padding, unnormalized.
pub fn sobel_magnitude<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = image.dims4()?;
    if c != 1 {
        return Err(Error::Dimension(format!("sobel_edge_map needs 1 channel, got {c}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::Dimension(format!("sobel_edge_map needs at least 2x2 pixels, got {h}x{w}")));
    }
    let padded = kernels::pad_planes(image.data(), n, h, w, 1, Padding::Reflect);
    let (ph, pw) = (h + 2, w + 2);
    let mut out = vec![T::zero(); n * h * w];
    for b in 0..n {
        let plane = &padded[b * ph * pw..(b + 1) * ph * pw];
        for y in 0..h {
            for x in 0..w {
                let p = |dy: usize, dx: usize| plane[(y + dy) * pw + x + dx];
                let two = T::lit(2.0);
                // each kernel as a difference of two identically ordered
                // [1 2 1] sums, so a constant neighbourhood gives exactly 0
                let gx = (p(0, 2) + two * p(1, 2) + p(2, 2)) - (p(0, 0) + two * p(1, 0) + p(2, 0));
                let gy = (p(2, 0) + two * p(2, 1) + p(2, 2)) - (p(0, 0) + two * p(0, 1) + p(0, 2));
                out[b * h * w + y * w + x] = (gx * gx + gy * gy).sqrt();
            }
        }
    }
    Tensor::new(&[n, 1, h, w], out)
}

/// Sobel magnitude normalized per image to a maximum of 1; an image without
/// gradient maps to all zeros.
pub fn sobel_edge_map<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let mut m = sobel_magnitude(image)?;
    let plane = m.shape()[2] * m.shape()[3];
    for img in m.data_mut().chunks_exact_mut(plane) {
        let max = img.iter().copied().fold(T::zero(), T::max);
        if max > T::zero() {
            img.iter_mut().for_each(|v| *v = *v / max);
        }
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossNorm {
    WeightedL1,
    WeightedL2,
    /// Literal signed reading of the weighted difference; for experiments only.
    Signed,
}

impl std::str::FromStr for LossNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted_l1" => Ok(LossNorm::WeightedL1),
            "weighted_l2" => Ok(LossNorm::WeightedL2),
            "signed" => Ok(LossNorm::Signed),
            _ => Err(Error::Config(format!(
                "unknown loss norm '{s}' (expected weighted_l1, weighted_l2 or signed)"
            ))),
        }
    }
}

impl std::fmt::Display for LossNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossNorm::WeightedL1 => "weighted_l1",
            LossNorm::WeightedL2 => "weighted_l2",
            LossNorm::Signed => "signed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    /// Feature stages used (indices into [`STAGE_WIDTHS`]).
    pub layers: Vec<usize>,
    pub edge_weighting: bool,
    pub epsilon: f64,
    pub norm: LossNorm,
    /// One weight per entry of `layers`.
    pub layer_weights: Vec<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            layers: vec![0, 1, 2, 3],
            edge_weighting: true,
            epsilon: 0.1,
            norm: LossNorm::WeightedL1,
            layer_weights: vec![1.0; 4],
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Config("loss layer set is empty".into()));
        }
        if let Some(l) = self.layers.iter().find(|&&l| l >= STAGE_WIDTHS.len()) {
            return Err(Error::Config(format!(
                "loss layer {l} out of range (extractor has {} stages)",
                STAGE_WIDTHS.len()
            )));
        }
        if self.layer_weights.len() != self.layers.len() {
            return Err(Error::Config(format!(
                "{} layer weights given for {} layers",
                self.layer_weights.len(),
                self.layers.len()
            )));
        }
        if self.layer_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config("layer weights must be finite and non-negative".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Fixed-weight multi-scale feature stack: four stages of 3x3 convolution
/// (zero padding) and relu with 2x average pooling between stages. Stage `s`
/// runs at `1 / 2^s` of the input resolution.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    weights: Vec<(Tensor<f32>, Tensor<f32>)>,
    bundle_id: String,
}

impl FeatureExtractor {
    /// The weight bundle shipped with the library.
    pub fn shipped() -> Self {
        Self::from_bundle(SHIPPED_BUNDLE, Path::new("<shipped feature bundle>"))
            .expect("shipped feature bundle is valid")
    }

    /// Draws a bundle with He-uniform weights and zero biases.
    pub fn generate(seed: u64) -> Self {
        let mut rng = seeds::rng(seed, "features");
        let mut weights = Vec::new();
        let mut cin = 1;
        for &cout in &STAGE_WIDTHS {
            let fan = cin * 9;
            let bound = (6.0 / fan as f64).sqrt();
            let w: Vec<f32> = (0..cout * fan).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            weights.push((
                Tensor::new(&[cout, cin, 3, 3], w).expect("stage weight shape"),
                Tensor::zeros(&[cout]),
            ));
            cin = cout;
        }
        let mut fe = FeatureExtractor {
            weights,
            bundle_id: String::new(),
        };
        fe.bundle_id = seeds::content_hash(&fe.to_bundle());
        fe
    }

    pub fn to_bundle(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (s, (w, b)) in self.weights.iter().enumerate() {
            write_named(&mut out, &format!("stage{s}.weight"), w).expect("writing to memory");
            write_named(&mut out, &format!("stage{s}.bias"), b).expect("writing to memory");
        }
        out
    }

    /// Parses a bundle of named `tensor v1` records; any name or shape
    /// mismatch is a load error.
    pub fn from_bundle(bytes: &[u8], path: &Path) -> Result<Self> {
        let records = read_named_records(&mut BufReader::new(Cursor::new(bytes)), path)
            .map_err(|e| Error::Load(e.to_string()))?;
        if records.len() != 2 * STAGE_WIDTHS.len() {
            return Err(Error::Load(format!(
                "{}: expected {} records, found {}",
                path.display(),
                2 * STAGE_WIDTHS.len(),
                records.len()
            )));
        }
        let mut weights = Vec::new();
        let mut cin = 1;
        let mut it = records.into_iter();
        for (s, &cout) in STAGE_WIDTHS.iter().enumerate() {
            let (wn, w) = it.next().expect("counted");
            let (bn, b) = it.next().expect("counted");
            let expect = [
                (format!("stage{s}.weight"), vec![cout, cin, 3, 3], &wn, &w),
                (format!("stage{s}.bias"), vec![cout], &bn, &b),
            ];
            for (name, shape, got_name, t) in expect {
                if *got_name != name || t.shape() != shape.as_slice() {
                    return Err(Error::Load(format!(
                        "{}: record '{got_name}' {:?} where '{name}' {shape:?} was expected",
                        path.display(),
                        t.shape()
                    )));
                }
            }
            weights.push((w, b));
            cin = cout;
        }
        Ok(FeatureExtractor {
            weights,
            bundle_id: seeds::content_hash(bytes),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bundle(&bytes, path)
    }

    /// Content hash of the weight bundle.
    pub fn bundle_id(&self) -> &str {
        &self.bundle_id
    }

    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    /// Spatial downsampling factor of stage `s`.
    pub fn factor(&self, stage: usize) -> usize {
        1 << stage
    }

    /// Records the weights on `tape` as constants.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Vec<(Var, Var)> {
        self.weights
            .iter()
            .map(|(w, b)| (tape.constant(w.cast()), tape.constant(b.cast())))
            .collect()
    }

    /// Features of every stage up to the deepest one in `layers`, in stage
    /// order.
    pub fn extract<T: Real>(&self, tape: &mut Tape<T>, bound: &[(Var, Var)], image: Var, deepest: usize) -> Result<Vec<Var>> {
        let (_, c, h, w) = tape.value(image).dims4()?;
        if c != 1 {
            return Err(Error::Dimension(format!("feature extractor needs 1 channel, got {c}")));
        }
        let f = self.factor(deepest);
        if h % f != 0 || w % f != 0 {
            return Err(Error::Dimension(format!(
                "feature stage {deepest} needs image dims divisible by {f}, got {h}x{w}"
            )));
        }
        let mut feats = Vec::with_capacity(deepest + 1);
        let mut x = image;
        for (s, &(wv, bv)) in bound.iter().enumerate().take(deepest + 1) {
            if s > 0 {
                x = tape.avg_pool(x, 2)?;
            }
            let y = tape.conv2d(x, wv, Some(bv), 1, Padding::Zero, 1)?;
            x = tape.relu(y)?;
            feats.push(x);
        }
        Ok(feats)
    }

    /// Features of a constant image, evaluated on a scratch tape.
    pub fn features<T: Real>(&self, image: &Tensor<T>, deepest: usize) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let x = tape.constant(image.clone());
        let feats = self.extract(&mut tape, &bound, x, deepest)?;
        Ok(feats.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}

/// Per-layer edge weights `E_s = eps + (1 - eps) · avgpool(edge_map, 2^s)`,
/// in the order of `cfg.layers`.
pub fn edge_pyramid<T: Real>(edge_map: &Tensor<T>, cfg: &LossConfig) -> Result<Vec<Tensor<T>>> {
    cfg.validate()?;
    let (n, c, h, w) = edge_map.dims4()?;
    if c != 1 {
        return Err(Error::Dimension(format!("edge map must have 1 channel, got {c}")));
    }
    let eps = T::lit(cfg.epsilon);
    cfg.layers
        .iter()
        .map(|&s| {
            let f = 1 << s;
            if h % f != 0 || w % f != 0 {
                return Err(Error::Dimension(format!(
                    "edge map {h}x{w} cannot be pooled by {f} for layer {s}"
                )));
            }
            let pooled = kernels::avg_pool(edge_map.data(), n, h, w, f);
            let data = pooled.into_iter().map(|v| eps + (T::one() - eps) * v).collect();
            Tensor::new(&[n, 1, h / f, w / f], data)
        })
        .collect()
}

/// Label-side quantities of the loss; constant during training.
#[derive(Clone, Debug)]
pub struct LabelTargets<T> {
    /// Features per entry of `cfg.layers`.
    pub features: Vec<Tensor<T>>,
    /// Edge weights per entry of `cfg.layers` (`None` without edge weighting).
    pub weights: Option<Vec<Tensor<T>>>,
}

impl<T: Real> LabelTargets<T> {
    pub fn new(label: &Tensor<T>, fe: &FeatureExtractor, cfg: &LossConfig) -> Result<Self> {
        cfg.validate()?;
        let deepest = *cfg.layers.iter().max().expect("validated non-empty");
        let all = fe.features(label, deepest)?;
        let features = cfg.layers.iter().map(|&s| all[s].clone()).collect();
        let weights = if cfg.edge_weighting {
            Some(edge_pyramid(&sobel_edge_map(label)?, cfg)?)
        } else {
            None
        };
        Ok(LabelTargets { features, weights })
    }

    /// Batches per-sample targets along the first axis.
    pub fn stack(items: &[&LabelTargets<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("cannot stack zero label targets".into()))?;
        let stack_at = |get: &dyn Fn(&LabelTargets<T>) -> Tensor<T>| -> Result<Tensor<T>> {
            let parts: Vec<Tensor<T>> = items.iter().map(|t| get(t)).collect();
            Tensor::stack_batch(&parts)
        };
        let features = (0..first.features.len())
            .map(|i| stack_at(&|t| t.features[i].clone()))
            .collect::<Result<_>>()?;
        let weights = match &first.weights {
            Some(ws) => Some(
                (0..ws.len())
                    .map(|i| stack_at(&|t| t.weights.as_ref().expect("uniform targets")[i].clone()))
                    .collect::<Result<_>>()?,
            ),
            None => None,
        };
        Ok(LabelTargets { features, weights })
    }
}

/// Perceptual loss of generated images `generated` against precomputed label
/// targets. Differentiable with respect to `generated` only.
pub fn perceptual_loss_on_tape<T: Real>(
    tape: &mut Tape<T>,
    fe: &FeatureExtractor,
    bound: &[(Var, Var)],
    generated: Var,
    targets: &LabelTargets<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let deepest = *cfg.layers.iter().max().expect("validated non-empty");
    let feats = fe.extract(tape, bound, generated, deepest)?;
    let mut total: Option<Var> = None;
    for (i, (&s, &w)) in cfg.layers.iter().zip(&cfg.layer_weights).enumerate() {
        let label = tape.constant(targets.features[i].clone());
        let diff = tape.sub(label, feats[s])?;
        let mut term = match cfg.norm {
            LossNorm::WeightedL1 => tape.abs(diff)?,
            LossNorm::WeightedL2 => tape.square(diff)?,
            LossNorm::Signed => diff,
        };
        if cfg.edge_weighting {
            let e = targets
                .weights
                .as_ref()
                .ok_or_else(|| Error::Contract("edge weighting needs label edge weights".into()))?;
            let ev = tape.constant(e[i].clone());
            term = tape.hadamard(term, ev)?;
        }
        let m = tape.mean(term)?;
        let m = tape.scale(m, w)?;
        total = Some(match total {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    Ok(total.expect("validated non-empty"))
}

/// Scalar perceptual loss of `generated` against `label` (both `[N,1,H,W]`).
pub fn perceptual_loss<T: Real>(label: &Tensor<T>, generated: &Tensor<T>, fe: &FeatureExtractor, cfg: &LossConfig) -> Result<T> {
    if label.shape() != generated.shape() {
        return Err(Error::Dimension(format!(
            "label {:?} and generated {:?} differ in shape",
            label.shape(),
            generated.shape()
        )));
    }
    let targets = LabelTargets::new(label, fe, cfg)?;
    let mut tape = Tape::new();
    let bound = fe.bind(&mut tape);
    let g = tape.constant(generated.clone());
    let loss = perceptual_loss_on_tape(&mut tape, fe, &bound, g, &targets, cfg)?;
    Ok(tape.value(loss).data()[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelNorm {
    L1,
    L2,
}

/// `mean |L - G|` or `mean (L - G)²` on the tape.
pub fn pixel_loss_on_tape<T: Real>(tape: &mut Tape<T>, label: Var, generated: Var, norm: PixelNorm) -> Result<Var> {
    let d = tape.sub(generated, label)?;
    let e = match norm {
        PixelNorm::L1 => tape.abs(d)?,
        PixelNorm::L2 => tape.square(d)?,
    };
    tape.mean(e)
}

pub fn pixel_loss<T: Real>(label: &Tensor<T>, generated: &Tensor<T>, norm: PixelNorm) -> Result<T> {
    let mut tape = Tape::new();
    let l = tape.constant(label.clone());
    let g = tape.constant(generated.clone());
    let v = pixel_loss_on_tape(&mut tape, l, g, norm)?;
    Ok(tape.value(v).data()[0])
}
