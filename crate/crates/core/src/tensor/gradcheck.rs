//! Central finite-difference verification of tape gradients.
//!
//! The reference derivative is computed from forward evaluations only, so it
//! shares no code path with the backward rules it checks.

use rand::seq::index::sample;
use rand::Rng;

use super::{Padding, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so exactly-zero gradients
    /// compare on an absolute scale.
    pub guard: f64,
    /// Check at most this many coordinates per input (all when `None`).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-4,
            tolerance: 1e-4,
            guard: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckOutcome {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// `(input index, flat coordinate, analytic, numeric)` of the worst mismatch.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckOutcome {
    pub fn merge(&mut self, other: GradCheckOutcome) {
        self.coords_checked += other.coords_checked;
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() && other.max_rel_error >= self.max_rel_error {
                self.worst = other.worst;
            }
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64, guard: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(guard)
}

/// Evaluates `f` with `inputs` registered as leaves and reduces a non-scalar
/// result with a fixed random projection.
fn evaluate<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    wrt: &[bool],
    projection: Option<&Tensor<f64>>,
) -> Result<(Tape<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .zip(wrt)
        .map(|(t, &g)| tape.leaf(t.clone(), g))
        .collect();
    let out = f(&mut tape, &vars)?;
    let root = match projection {
        Some(p) => {
            let p = tape.constant(p.clone());
            let weighted = tape.hadamard(out, p)?;
            tape.sum(weighted)?
        }
        None => out,
    };
    Ok((tape, vars, root))
}

/// Compares backward gradients of `f` against central differences for every
/// input flagged in `wrt`.
pub fn check<F, R>(
    inputs: &[Tensor<f64>],
    wrt: &[bool],
    f: F,
    cfg: &GradCheckConfig,
    rng: &mut R,
) -> Result<GradCheckOutcome>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    if inputs.len() != wrt.len() {
        return Err(Error::Contract("one wrt flag per input required".into()));
    }
    let (probe, _, out) = evaluate(&f, inputs, wrt, None)?;
    let out_shape = probe.value(out).shape().to_vec();
    drop(probe);
    let projection = (out_shape.iter().product::<usize>() != 1).then(|| {
        let numel = out_shape.iter().product();
        Tensor::new(&out_shape, (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .expect("projection shape")
    });
    let projection = projection.as_ref();
    let scalar = |xs: &[Tensor<f64>]| -> Result<f64> {
        let (tape, _, root) = evaluate(&f, xs, wrt, projection)?;
        Ok(tape.value(root).data()[0])
    };

    let (mut tape, vars, root) = evaluate(&f, inputs, wrt, projection)?;
    tape.backward(root)?;

    let mut outcome = GradCheckOutcome::default();
    let mut perturbed = inputs.to_vec();
    for (idx, (&want, &var)) in wrt.iter().zip(&vars).enumerate() {
        if !want {
            continue;
        }
        let analytic = tape
            .grad(var)
            .ok_or_else(|| Error::Tape(format!("input {idx} received no gradient")))?;
        let numel = inputs[idx].numel();
        let coords: Vec<usize> = match cfg.max_coords {
            Some(m) if m < numel => sample(rng, numel, m).into_vec(),
            _ => (0..numel).collect(),
        };
        for j in coords {
            let x0 = inputs[idx].data()[j];
            let a = analytic.data()[j];
            let (mut err, mut numeric) = (f64::INFINITY, f64::NAN);
            // A kink (relu, abs) inside the stencil spoils the difference at
            // one step but not at a smaller one, while a wrong backward rule
            // disagrees at every step.
            for shrink in [1.0, 0.1, 0.01] {
                let h = cfg.step * shrink;
                perturbed[idx].data_mut()[j] = x0 + h;
                let plus = scalar(&perturbed)?;
                perturbed[idx].data_mut()[j] = x0 - h;
                let minus = scalar(&perturbed)?;
                perturbed[idx].data_mut()[j] = x0;
                let n = (plus - minus) / (2.0 * h);
                let e = rel_error(a, n, cfg.guard);
                if e < err {
                    (err, numeric) = (e, n);
                }
                if err <= cfg.tolerance {
                    break;
                }
            }
            outcome.coords_checked += 1;
            if err > outcome.max_rel_error || outcome.worst.is_none() {
                outcome.max_rel_error = outcome.max_rel_error.max(err);
                outcome.worst = Some((idx, j, a, numeric));
            }
        }
    }
    Ok(outcome)
}

/// Result of one randomized per-operation suite.
#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub name: String,
    pub trials: usize,
    pub outcome: GradCheckOutcome,
    pub tolerance: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.outcome.max_rel_error < self.tolerance
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    let numel = shape.iter().product();
    Tensor::new(shape, (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Values bounded away from zero so kinks of relu/abs stay outside the stencil.
fn off_kink<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape).map(|v| if v >= 0.0 { 0.05 + 0.95 * v } else { -0.05 + 0.95 * v })
}

fn positive<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape).map(|v| 0.5 + 0.5 * v.abs())
}

type TrialFn = fn(&mut dyn rand::RngCore, &GradCheckConfig) -> Result<GradCheckOutcome>;

/// Names of the per-operation suites, in execution order.
pub const OP_SUITES: &[&str] = &[
    "conv2d",
    "conv_transpose2d",
    "bilinear_upsample2x",
    "instance_norm",
    "relu",
    "tanh",
    "abs",
    "square",
    "add",
    "sub",
    "hadamard",
    "scale",
    "sum",
    "mean",
    "avg_pool",
];

fn trial_fn(name: &str) -> Option<TrialFn> {
    let f: TrialFn = match name {
        "conv2d" => |rng, cfg| {
            let n = rng.gen_range(1..=2);
            let cin = rng.gen_range(1..=3);
            let cout = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let k = [1, 3, 5][rng.gen_range(stride - 1..3)];
            let h = rng.gen_range(k.max(3)..=7);
            let w = rng.gen_range(k.max(3)..=7);
            let padding = if rng.gen_bool(0.5) { Padding::Reflect } else { Padding::Zero };
            let pad = if stride == 2 { k / 2 } else { rng.gen_range(0..=(k / 2).min(h - 1).min(w - 1)) };
            let inputs = vec![
                uniform(rng, &[n, cin, h, w]),
                uniform(rng, &[cout, cin, k, k]),
                uniform(rng, &[cout]),
            ];
            check(
                &inputs,
                &[true, true, true],
                move |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, padding, pad),
                cfg,
                rng,
            )
        },
        "conv_transpose2d" => |rng, cfg| {
            let n = rng.gen_range(1..=2);
            let cin = rng.gen_range(1..=3);
            let cout = rng.gen_range(1..=3);
            let stride = rng.gen_range(1..=2);
            let k = rng.gen_range(stride..=4);
            let h = rng.gen_range(1..=4);
            let w = rng.gen_range(1..=4);
            let inputs = vec![
                uniform(rng, &[n, cin, h, w]),
                uniform(rng, &[cin, cout, k, k]),
                uniform(rng, &[cout]),
            ];
            check(
                &inputs,
                &[true, true, true],
                move |t, v| t.conv_transpose2d(v[0], v[1], Some(v[2]), stride),
                cfg,
                rng,
            )
        },
        "bilinear_upsample2x" => |rng, cfg| {
            let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(2..=5), rng.gen_range(2..=5)];
            check(&[uniform(rng, &shape)], &[true], |t, v| t.bilinear_upsample2x(v[0]), cfg, rng)
        },
        "instance_norm" => |rng, cfg| {
            let c = rng.gen_range(1..=3);
            let shape = [rng.gen_range(1..=2), c, rng.gen_range(2..=5), rng.gen_range(2..=5)];
            let inputs = vec![uniform(rng, &shape), positive(rng, &[c]), uniform(rng, &[c])];
            check(
                &inputs,
                &[true, true, true],
                |t, v| t.instance_norm(v[0], v[1], v[2], 1e-5),
                cfg,
                rng,
            )
        },
        "relu" => |rng, cfg| {
            let x = { let shape = [rng.gen_range(1..=3), rng.gen_range(1..=5)]; off_kink(rng, &shape) };
            check(&[x], &[true], |t, v| t.relu(v[0]), cfg, rng)
        },
        "tanh" => |rng, cfg| {
            let x = { let shape = [rng.gen_range(1..=3), rng.gen_range(1..=5)]; uniform(rng, &shape) }.map(|v| 2.0 * v);
            check(&[x], &[true], |t, v| t.tanh(v[0]), cfg, rng)
        },
        "abs" => |rng, cfg| {
            let x = { let shape = [rng.gen_range(1..=3), rng.gen_range(1..=5)]; off_kink(rng, &shape) };
            check(&[x], &[true], |t, v| t.abs(v[0]), cfg, rng)
        },
        "square" => |rng, cfg| {
            let x = { let shape = [rng.gen_range(1..=3), rng.gen_range(1..=5)]; uniform(rng, &shape) };
            check(&[x], &[true], |t, v| t.square(v[0]), cfg, rng)
        },
        "add" => |rng, cfg| {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)];
            let inputs = vec![uniform(rng, &shape), uniform(rng, &shape)];
            check(&inputs, &[true, true], |t, v| t.add(v[0], v[1]), cfg, rng)
        },
        "sub" => |rng, cfg| {
            let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)];
            let inputs = vec![uniform(rng, &shape), uniform(rng, &shape)];
            check(&inputs, &[true, true], |t, v| t.sub(v[0], v[1]), cfg, rng)
        },
        "hadamard" => |rng, cfg| {
            let (n, h, w) = (rng.gen_range(1..=2), rng.gen_range(1..=4), rng.gen_range(1..=4));
            let c = if rng.gen_bool(0.5) { 3 } else { rng.gen_range(1..=3) };
            let wc = if rng.gen_bool(0.7) { 1 } else { c };
            let inputs = vec![uniform(rng, &[n, c, h, w]), uniform(rng, &[n, wc, h, w])];
            check(&inputs, &[true, true], |t, v| t.hadamard(v[0], v[1]), cfg, rng)
        },
        "scale" => |rng, cfg| {
            let factor = rng.gen_range(-2.0..2.0);
            let x = { let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)]; uniform(rng, &shape) };
            check(&[x], &[true], move |t, v| t.scale(v[0], factor), cfg, rng)
        },
        "sum" => |rng, cfg| {
            let x = { let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)]; uniform(rng, &shape) };
            check(&[x], &[true], |t, v| t.sum(v[0]), cfg, rng)
        },
        "mean" => |rng, cfg| {
            let x = { let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4)]; uniform(rng, &shape) };
            check(&[x], &[true], |t, v| t.mean(v[0]), cfg, rng)
        },
        "avg_pool" => |rng, cfg| {
            let f = rng.gen_range(1..=3);
            let shape = [rng.gen_range(1..=2), rng.gen_range(1..=3), f * rng.gen_range(1..=3), f * rng.gen_range(1..=3)];
            check(&[uniform(rng, &shape)], &[true], move |t, v| t.avg_pool(v[0], f), cfg, rng)
        },
        _ => return None,
    };
    Some(f)
}

/// Runs `trials` randomized finite-difference checks of operation `name`.
pub fn run_op_suite(
    name: &str,
    trials: usize,
    cfg: &GradCheckConfig,
    rng: &mut dyn rand::RngCore,
) -> Result<SuiteReport> {
    let f = trial_fn(name).ok_or_else(|| Error::Config(format!("unknown gradcheck op '{name}'")))?;
    let mut outcome = GradCheckOutcome::default();
    for _ in 0..trials {
        outcome.merge(f(rng, cfg)?);
    }
    Ok(SuiteReport {
        name: name.to_string(),
        trials,
        outcome,
        tolerance: cfg.tolerance,
    })
}
