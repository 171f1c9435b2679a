//! Encoder/decoder generator with configurable residual-block placement.
//!
//! One parametric architecture covers both the baseline (all residual blocks
//! at the lowest resolution, transposed-convolution upsampling) and the
//! proposed layout (blocks spread over every resolution, bilinear
//! upsampling followed by a convolution).
//!
//! Layout for `levels = L` with widths `w_l = base_width · 2^l`:
//!
//! ```text
//! stem   conv KxK (reflect) -> IN -> relu                       in -> w_0
//! enc l  [l > 0: conv 3x3 stride 2 (reflect) -> IN -> relu]     w_{l-1} -> w_l
//!        res_blocks_per_level[l] residual blocks
//! dec l  upsample unit -> IN -> relu                            w_{l+1} -> w_l
//!        res_blocks_per_level[l] residual blocks                (l < L-1 only)
//! head   conv KxK (reflect) -> tanh                             w_0 -> out
//! ```
//!
//! Levels above the bottleneck get their blocks on both the encoder and the
//! decoder side; the bottleneck level gets its blocks once.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::gradcheck::{self, GradCheckConfig, SuiteReport};
use crate::tensor::{Padding, Real, Tape, Tensor, Var};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    BilinearConv,
    TransposedConv,
}

impl fmt::Display for UpsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpsampleMode::BilinearConv => "bilinear_conv",
            UpsampleMode::TransposedConv => "transposed_conv",
        })
    }
}

impl FromStr for UpsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear_conv" => Ok(UpsampleMode::BilinearConv),
            "transposed_conv" => Ok(UpsampleMode::TransposedConv),
            _ => Err(Error::Config(format!(
                "unknown upsample mode '{s}' (expected bilinear_conv or transposed_conv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub levels: usize,
    pub res_blocks_per_level: Vec<usize>,
    pub upsample_mode: UpsampleMode,
    /// Kernel of the stem and head convolutions.
    pub outer_kernel: usize,
    /// Kernel of residual-block and upsampling convolutions.
    pub inner_kernel: usize,
    /// Learnable per-channel gain and shift after every instance norm.
    pub norm_affine: bool,
}

pub fn preset_proposed() -> GeneratorConfig {
    GeneratorConfig {
        in_channels: 1,
        out_channels: 1,
        base_width: 32,
        levels: 3,
        res_blocks_per_level: vec![3, 3, 3],
        upsample_mode: UpsampleMode::BilinearConv,
        outer_kernel: 7,
        inner_kernel: 3,
        norm_affine: true,
    }
}

pub fn preset_baseline() -> GeneratorConfig {
    GeneratorConfig {
        res_blocks_per_level: vec![0, 0, 9],
        upsample_mode: UpsampleMode::TransposedConv,
        ..preset_proposed()
    }
}

/// Looks up a preset by name (`proposed` or `baseline`).
pub fn preset(name: &str) -> Result<GeneratorConfig> {
    match name {
        "proposed" => Ok(preset_proposed()),
        "baseline" => Ok(preset_baseline()),
        _ => Err(Error::Config(format!("unknown preset '{name}' (expected proposed or baseline)"))),
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return bad("channel counts and base width must be positive".into());
        }
        if self.levels == 0 {
            return bad("levels must be at least 1".into());
        }
        if self.res_blocks_per_level.len() != self.levels {
            return bad(format!(
                "res_blocks_per_level has {} entries for {} levels",
                self.res_blocks_per_level.len(),
                self.levels
            ));
        }
        if self.res_blocks_per_level.iter().sum::<usize>() == 0 {
            return bad("at least one residual block is required".into());
        }
        for (name, k) in [("outer_kernel", self.outer_kernel), ("inner_kernel", self.inner_kernel)] {
            if k % 2 == 0 {
                return bad(format!("{name} must be odd, got {k}"));
            }
        }
        if self.levels > 1 && self.upsample_mode == UpsampleMode::TransposedConv && self.inner_kernel < 3 {
            return bad("transposed upsampling needs inner_kernel >= 3".into());
        }
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_width << level
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    /// Total residual blocks instantiated (decoder-side copies included).
    pub fn total_res_blocks(&self) -> usize {
        let l = self.levels;
        self.res_blocks_per_level[..l - 1].iter().sum::<usize>() * 2 + self.res_blocks_per_level[l - 1]
    }

    /// `key=value` serialization, one entry per field.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let blocks: Vec<String> = self.res_blocks_per_level.iter().map(|b| b.to_string()).collect();
        vec![
            ("in_channels".into(), self.in_channels.to_string()),
            ("out_channels".into(), self.out_channels.to_string()),
            ("base_width".into(), self.base_width.to_string()),
            ("levels".into(), self.levels.to_string()),
            ("res_blocks_per_level".into(), blocks.join(",")),
            ("upsample_mode".into(), self.upsample_mode.to_string()),
            ("outer_kernel".into(), self.outer_kernel.to_string()),
            ("inner_kernel".into(), self.inner_kernel.to_string()),
            ("norm_affine".into(), self.norm_affine.to_string()),
        ]
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            kv.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Config(format!("generator config lacks '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            let v = get(k)?;
            v.parse()
                .map_err(|_| Error::Config(format!("generator '{k}' must be a non-negative integer, got '{v}'")))
        };
        let blocks = get("res_blocks_per_level")?
            .split(',')
            .map(|b| {
                b.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad residual block count '{b}'")))
            })
            .collect::<Result<Vec<usize>>>()?;
        let affine = get("norm_affine")?;
        let cfg = GeneratorConfig {
            in_channels: num("in_channels")?,
            out_channels: num("out_channels")?,
            base_width: num("base_width")?,
            levels: num("levels")?,
            res_blocks_per_level: blocks,
            upsample_mode: get("upsample_mode")?.parse()?,
            outer_kernel: num("outer_kernel")?,
            inner_kernel: num("inner_kernel")?,
            norm_affine: affine
                .parse()
                .map_err(|_| Error::Config(format!("norm_affine must be true or false, got '{affine}'")))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ConvKind {
    Plain { stride: usize, pad: usize },
    Transposed,
    UpsampleConv { pad: usize },
}

#[derive(Clone, Copy, Debug)]
struct NormRef {
    channels: usize,
    /// Indices of (gain, shift) when affine.
    affine: Option<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
struct ConvUnit {
    weight: usize,
    bias: Option<usize>,
    kind: ConvKind,
    norm: Option<NormRef>,
    act: Act,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Act {
    None,
    Relu,
    Tanh,
}

#[derive(Clone, Copy, Debug)]
enum Unit {
    Conv(ConvUnit),
    Residual(ConvUnit, ConvUnit),
}

/// A named learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor<f32>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    params: Vec<Param>,
    /// Initialization fan-in per parameter; `None` keeps the fill value.
    fans: Vec<Option<usize>>,
    units: Vec<Unit>,
    /// First unit of the decoder path.
    decoder_start: usize,
}

struct Builder<'a> {
    params: Vec<Param>,
    fans: Vec<Option<usize>>,
    cfg: &'a GeneratorConfig,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], fan_in: Option<usize>, fill: f32) -> usize {
        self.params.push(Param {
            name,
            value: Tensor::full(shape, fill),
        });
        self.fans.push(fan_in);
        self.params.len() - 1
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> NormRef {
        let affine = self.cfg.norm_affine.then(|| {
            (
                self.add(format!("{prefix}.norm.gain"), &[channels], None, 1.0),
                self.add(format!("{prefix}.norm.shift"), &[channels], None, 0.0),
            )
        });
        NormRef { channels, affine }
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, kind: ConvKind, norm: bool, act: Act) -> ConvUnit {
        // transposed weights are [Cin, Cout, K, K]; fan-in counts the taps
        // feeding one output, as for a plain convolution
        let (shape, fan) = match kind {
            ConvKind::Transposed => ([cin, cout, k, k], cin * k * k),
            _ => ([cout, cin, k, k], cin * k * k),
        };
        let weight = self.add(format!("{prefix}.conv.weight"), &shape, Some(fan), 0.0);
        // a bias in front of an instance norm would be cancelled by it
        let bias = (!norm).then(|| self.add(format!("{prefix}.conv.bias"), &[cout], Some(fan), 0.0));
        let norm = norm.then(|| self.norm(prefix, cout));
        ConvUnit {
            weight,
            bias,
            kind,
            norm,
            act,
        }
    }

    fn residual(&mut self, prefix: &str, c: usize) -> Unit {
        let k = self.cfg.inner_kernel;
        let kind = ConvKind::Plain { stride: 1, pad: k / 2 };
        let a = self.conv(&format!("{prefix}.a"), c, c, k, kind, true, Act::Relu);
        let b = self.conv(&format!("{prefix}.b"), c, c, k, kind, true, Act::None);
        Unit::Residual(a, b)
    }
}

impl Generator {
    /// Builds the network with scaled uniform fan-in initialization drawn from
    /// the `init` substream of `seed`.
    pub fn build(config: &GeneratorConfig, seed: u64) -> Result<Self> {
        let mut g = Self::skeleton(config)?;
        g.initialize(seed);
        Ok(g)
    }

    fn skeleton(config: &GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let cfg = config;
        let mut b = Builder {
            params: Vec::new(),
            fans: Vec::new(),
            cfg,
        };
        let mut units = Vec::new();
        let ko = cfg.outer_kernel;
        let ki = cfg.inner_kernel;
        let l_max = cfg.levels - 1;
        units.push(Unit::Conv(b.conv(
            "stem",
            cfg.in_channels,
            cfg.width(0),
            ko,
            ConvKind::Plain { stride: 1, pad: ko / 2 },
            true,
            Act::Relu,
        )));
        for l in 0..cfg.levels {
            if l > 0 {
                units.push(Unit::Conv(b.conv(
                    &format!("enc{l}.down"),
                    cfg.width(l - 1),
                    cfg.width(l),
                    3,
                    ConvKind::Plain { stride: 2, pad: 1 },
                    true,
                    Act::Relu,
                )));
            }
            for r in 0..cfg.res_blocks_per_level[l] {
                units.push(b.residual(&format!("enc{l}.res{r}"), cfg.width(l)));
            }
        }
        let decoder_start = units.len();
        for l in (0..l_max).rev() {
            let kind = match cfg.upsample_mode {
                UpsampleMode::BilinearConv => ConvKind::UpsampleConv { pad: ki / 2 },
                UpsampleMode::TransposedConv => ConvKind::Transposed,
            };
            units.push(Unit::Conv(b.conv(
                &format!("dec{l}.up"),
                cfg.width(l + 1),
                cfg.width(l),
                ki,
                kind,
                true,
                Act::Relu,
            )));
            for r in 0..cfg.res_blocks_per_level[l] {
                units.push(b.residual(&format!("dec{l}.res{r}"), cfg.width(l)));
            }
        }
        units.push(Unit::Conv(b.conv(
            "head",
            cfg.width(0),
            cfg.out_channels,
            ko,
            ConvKind::Plain { stride: 1, pad: ko / 2 },
            false,
            Act::Tanh,
        )));
        Ok(Generator {
            config: cfg.clone(),
            params: b.params,
            fans: b.fans,
            units,
            decoder_start,
        })
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = seeds::rng(seed, "init");
        for (p, fan) in self.params.iter_mut().zip(&self.fans) {
            if let Some(fan) = fan {
                let bound = (1.0 / *fan as f64).sqrt();
                for v in p.value.data_mut() {
                    *v = rng.gen_range(-bound..bound) as f32;
                }
            }
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces all weights with `values` (same order, names and shapes).
    pub fn load_params(&mut self, values: Vec<(String, Tensor<f32>)>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Load(format!(
                "expected {} weight tensors, found {}",
                self.params.len(),
                values.len()
            )));
        }
        for (p, (name, t)) in self.params.iter().zip(&values) {
            if &p.name != name || p.value.shape() != t.shape() {
                return Err(Error::Load(format!(
                    "weight '{name}' {:?} does not match expected '{}' {:?}",
                    t.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
        }
        for (p, (_, t)) in self.params.iter_mut().zip(values) {
            p.value = t;
        }
        Ok(())
    }

    /// Builds an untrained generator and fills it with `values`.
    pub fn from_params(config: &GeneratorConfig, values: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut g = Self::skeleton(config)?;
        g.load_params(values)?;
        Ok(g)
    }

    /// Zeroes the second convolution of every residual block, turning each
    /// block into the identity map.
    pub fn zero_residual_branches(&mut self) {
        let targets: Vec<usize> = self
            .units
            .iter()
            .filter_map(|u| match u {
                Unit::Residual(_, b) => Some(b.weight),
                Unit::Conv(_) => None,
            })
            .collect();
        for i in targets {
            self.params[i].value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Records all weights on `tape` as trainable leaves, in `params()` order.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.value.cast())).collect()
    }

    /// Records all weights on `tape` as constants.
    pub fn bind_frozen<T: Real>(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.constant(p.value.cast())).collect()
    }

    fn check_input(&self, dims: (usize, usize, usize, usize)) -> Result<()> {
        let (_, c, h, w) = dims;
        if c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "generator expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Dimension(format!(
                "input {h}x{w} is not divisible by {m}; pad to {}x{}",
                h.div_ceil(m) * m,
                w.div_ceil(m) * m
            )));
        }
        Ok(())
    }

    /// Forward pass with weights bound to `params` (see [`Generator::bind`]).
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "forward needs {} bound weights, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.check_input(tape.value(input).dims4()?)?;
        self.run(tape, params, input, &self.units)
    }

    /// Runs only the decoder path (upsampling units, decoder residual blocks
    /// and head) on a bottleneck feature map.
    pub fn forward_decoder<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], features: Var) -> Result<Var> {
        self.run(tape, params, features, &self.units[self.decoder_start..])
    }

    /// Shape `[1, C, H, W]` of the bottleneck features for a `h x w` input.
    pub fn bottleneck_shape(&self, h: usize, w: usize) -> [usize; 4] {
        let m = self.config.size_multiple();
        [1, self.config.width(self.config.levels - 1), h / m, w / m]
    }

    fn run<T: Real>(&self, tape: &mut Tape<T>, params: &[Var], input: Var, units: &[Unit]) -> Result<Var> {
        let mut x = input;
        for unit in units {
            x = match *unit {
                Unit::Conv(c) => apply(tape, params, &c, x)?,
                Unit::Residual(a, b) => {
                    let h = apply(tape, params, &a, x)?;
                    let h = apply(tape, params, &b, h)?;
                    tape.add(x, h)?
                }
            };
        }
        Ok(x)
    }

    /// Inference on a single-precision batch.
    pub fn infer(&self, input: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let params = self.bind_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(y).clone())
    }
}

fn apply<T: Real>(tape: &mut Tape<T>, params: &[Var], c: &ConvUnit, x: Var) -> Result<Var> {
    let (w, b) = (params[c.weight], c.bias.map(|b| params[b]));
    let mut y = match c.kind {
        ConvKind::Plain { stride, pad } => tape.conv2d(x, w, b, stride, Padding::Reflect, pad)?,
        ConvKind::Transposed => tape.conv_transpose2d(x, w, b, 2)?,
        ConvKind::UpsampleConv { pad } => {
            let up = tape.bilinear_upsample2x(x)?;
            tape.conv2d(up, w, b, 1, Padding::Reflect, pad)?
        }
    };
    if let Some(n) = c.norm {
        let (g, s) = match n.affine {
            Some((g, s)) => (params[g], params[s]),
            None => (
                tape.constant(Tensor::full(&[n.channels], T::one())),
                tape.constant(Tensor::zeros(&[n.channels])),
            ),
        };
        y = tape.instance_norm(y, g, s, NORM_EPS)?;
    }
    match c.act {
        Act::None => Ok(y),
        Act::Relu => tape.relu(y),
        Act::Tanh => tape.tanh(y),
    }
}

/// Exact learnable-scalar count of a configuration, by layer arithmetic.
pub fn param_count(cfg: &GeneratorConfig) -> Result<usize> {
    cfg.validate()?;
    // normalized convolutions carry no bias; only the head has one
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k;
    let norm = |c: usize| if cfg.norm_affine { 2 * c } else { 0 };
    let res = |c: usize| 2 * (conv(c, c, cfg.inner_kernel) + norm(c));
    let (ko, ki) = (cfg.outer_kernel, cfg.inner_kernel);
    let mut n = conv(cfg.in_channels, cfg.width(0), ko) + norm(cfg.width(0));
    n += conv(cfg.width(0), cfg.out_channels, ko) + cfg.out_channels;
    for l in 0..cfg.levels {
        let copies = if l + 1 == cfg.levels { 1 } else { 2 };
        n += copies * cfg.res_blocks_per_level[l] * res(cfg.width(l));
        if l > 0 {
            n += conv(cfg.width(l - 1), cfg.width(l), 3) + norm(cfg.width(l));
            n += conv(cfg.width(l), cfg.width(l - 1), ki) + norm(cfg.width(l - 1));
        }
    }
    Ok(n)
}

/// Energy of the 2-D spectrum of a `h x w` image in the band whose radial
/// frequency is at least `band` times the Nyquist frequency.
pub fn high_frequency_energy(image: &[f32], h: usize, w: usize, band: f64) -> f64 {
    assert_eq!(image.len(), h * w, "image buffer does not match {h}x{w}");
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex<f64>> = image.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for c in 0..w {
        for r in 0..h {
            col[r] = buf[r * w + c];
        }
        col_fft.process(&mut col);
        for r in 0..h {
            buf[r * w + c] = col[r];
        }
    }
    let freq = |i: usize, n: usize| {
        let k = if i <= n / 2 { i as f64 } else { i as f64 - n as f64 };
        k / n as f64
    };
    let mut energy = 0.0;
    for r in 0..h {
        for c in 0..w {
            let rho = (freq(r, h).powi(2) + freq(c, w).powi(2)).sqrt() / 0.5;
            if rho >= band {
                energy += buf[r * w + c].norm_sqr();
            }
        }
    }
    energy / (h * w) as f64
}

/// Top-quartile spectral energy of the decoder path's output for a constant
/// (all-ones) bottleneck feature map, for a `size x size` image.
pub fn decoder_checkerboard_energy(g: &Generator, size: usize) -> Result<f64> {
    let mut tape: Tape<f32> = Tape::new();
    let params = g.bind_frozen(&mut tape);
    let shape = g.bottleneck_shape(size, size);
    let feat = tape.constant(Tensor::full(&shape, 1.0));
    let y = g.forward_decoder(&mut tape, &params, feat)?;
    let out = tape.value(y);
    let (_, c, h, w) = out.dims4()?;
    let plane = h * w;
    Ok((0..c)
        .map(|ch| high_frequency_energy(&out.data()[ch * plane..(ch + 1) * plane], h, w, 0.75))
        .sum())
}

/// Finite-difference check of the whole generator `cfg` in double precision
/// on a random `size`×`size` input, sampling two coordinates per tensor.
pub fn generator_gradcheck(cfg: &GeneratorConfig, size: usize, seed: u64) -> Result<SuiteReport> {
    let g = Generator::build(cfg, seed)?;
    let mut rng = seeds::rng(seed, "gradcheck");
    let numel = cfg.in_channels * size * size;
    let x = Tensor::new(
        &[1, cfg.in_channels, size, size],
        (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )?;
    let mut inputs = vec![x];
    inputs.extend(g.params().iter().map(|p| p.value.cast::<f64>()));
    let wrt = vec![true; inputs.len()];
    // Thousands of relu units sit downstream of every weight; the small step
    // makes a sign change between the two evaluations rare. Some norm
    // shifts have an exactly zero gradient (a later norm cancels them), so
    // the guard sets an absolute floor of 1e-6 against rounding noise.
    let check_cfg = GradCheckConfig {
        step: 1e-6,
        guard: 1e-3,
        tolerance: 1e-3,
        max_coords: Some(2),
    };
    let outcome = gradcheck::check(
        &inputs,
        &wrt,
        |tape: &mut Tape<f64>, vars| g.forward(tape, &vars[1..], vars[0]),
        &check_cfg,
        &mut rng,
    )?;
    Ok(SuiteReport {
        name: "generator".into(),
        trials: 1,
        outcome,
        tolerance: check_cfg.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig {
            base_width: 2,
            levels: 2,
            res_blocks_per_level: vec![1, 1],
            outer_kernel: 3,
            ..preset_proposed()
        }
    }

    #[test]
    fn presets_match_their_description() {
        let p = preset_proposed();
        assert_eq!(p.upsample_mode, UpsampleMode::BilinearConv);
        assert_eq!(p.levels, 3);
        assert_eq!(p.res_blocks_per_level.iter().sum::<usize>(), 9);
        let b = preset_baseline();
        assert_eq!(b.upsample_mode, UpsampleMode::TransposedConv);
        assert_eq!(b.res_blocks_per_level, vec![0, 0, 9]);
        let (np, nb) = (param_count(&p).unwrap(), param_count(&b).unwrap());
        let ratio = np.max(nb) as f64 / np.min(nb) as f64;
        assert!(ratio < 2.0, "{np} vs {nb}");
    }

    #[test]
    fn closed_form_count_of_smallest_model() {
        let cfg = GeneratorConfig {
            base_width: 1,
            levels: 1,
            res_blocks_per_level: vec![1],
            outer_kernel: 3,
            norm_affine: false,
            ..preset_proposed()
        };
        // stem 9, block 2x9, head 9 + 1 bias
        assert_eq!(param_count(&cfg).unwrap(), 37);
        assert_eq!(Generator::build(&cfg, 0).unwrap().param_count(), 37);
    }

    #[test]
    fn walked_count_matches_formula() {
        for cfg in [preset_proposed(), preset_baseline(), tiny()] {
            let g = Generator::build(&cfg, 1).unwrap();
            assert_eq!(g.param_count(), param_count(&cfg).unwrap());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = tiny();
        c.res_blocks_per_level = vec![1];
        assert!(matches!(Generator::build(&c, 0), Err(Error::Config(_))));
        let mut c = tiny();
        c.res_blocks_per_level = vec![0, 0];
        assert!(Generator::build(&c, 0).is_err());
        let mut c = tiny();
        c.inner_kernel = 4;
        assert!(Generator::build(&c, 0).is_err());
    }

    #[test]
    fn kv_round_trip() {
        for cfg in [preset_proposed(), preset_baseline(), tiny()] {
            let kv: BTreeMap<String, String> = cfg.to_kv().into_iter().collect();
            assert_eq!(GeneratorConfig::from_kv(&kv).unwrap(), cfg);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let a = Generator::build(&tiny(), 9).unwrap();
        let b = Generator::build(&tiny(), 9).unwrap();
        assert_eq!(a.params(), b.params());
        let c = Generator::build(&tiny(), 10).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn shape_and_range() {
        let g = Generator::build(&tiny(), 3).unwrap();
        let x = Tensor::new(&[2, 1, 8, 12], (0..192).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let y = g.infer(&x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 8, 12]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        let odd = Tensor::zeros(&[1, 1, 7, 8]);
        let err = g.infer(&odd).unwrap_err().to_string();
        assert!(err.contains("pad to 8x8"), "{err}");
    }

    #[test]
    fn zeroed_residual_branch_is_identity() {
        let cfg = GeneratorConfig {
            levels: 1,
            res_blocks_per_level: vec![2],
            ..tiny()
        };
        let mut g = Generator::build(&cfg, 4).unwrap();
        g.zero_residual_branches();
        let mut tape: Tape<f64> = Tape::new();
        let params = g.bind_frozen(&mut tape);
        let x = tape.constant(Tensor::new(&[1, 2, 4, 4], (0..32).map(|i| i as f64 * 0.1 - 1.0).collect()).unwrap());
        let out = g.run(&mut tape, &params, x, &g.units[1..2]).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn spectrum_of_checkerboard_is_high_band() {
        let cb: Vec<f32> = (0..64).map(|i| if (i / 8 + i % 8) % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let e = high_frequency_energy(&cb, 8, 8, 0.75);
        assert!((e - 64.0).abs() < 1e-9, "{e}");
        let flat = vec![0.5f32; 64];
        assert!(high_frequency_energy(&flat, 8, 8, 0.75) < 1e-20);
    }
}
