//! Synthetic MR/X-ray projection pairs.
//!
//! Two-channel phantoms are generated procedurally ([`phantom`]), projected
//! with a trilinear ray marcher ([`forward_project`]) and collected into
//! train/test datasets ([`dataset`]).

pub mod dataset;
mod geometry;
pub mod phantom;
mod volume;
pub mod volume_io;

pub use geometry::{BeamMode, ProjectionGeometry, Ray};
pub use volume::{Channel, Ellipsoid, Volume};

use crate::error::Result;
use crate::image::Image;

/// Options of the ray marcher.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MarchOptions {
    /// Integration step in mm; defaults to half the smallest voxel spacing.
    pub step: Option<f64>,
}

impl MarchOptions {
    pub fn with_step(step: f64) -> Self {
        MarchOptions { step: Some(step) }
    }

    fn step_for(&self, vol: &Volume) -> f64 {
        self.step
            .unwrap_or_else(|| vol.spacing().iter().copied().fold(f64::INFINITY, f64::min) / 2.0)
    }
}

/// Line integrals of each requested channel along one ray (composite
/// midpoint rule over the part of the ray inside the volume box).
fn integrate(vol: &Volume, ray: &Ray, h: f64, channels: &[Channel], out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let (lo, hi) = vol.bounds();
    let Some((t0, t1)) = ray.clip(lo, hi) else { return };
    let len = t1 - t0;
    let n = (len / h).ceil().max(1.0) as usize;
    let dt = len / n as f64;
    for k in 0..n {
        let p = ray.at(t0 + (k as f64 + 0.5) * dt);
        for (o, &ch) in out.iter_mut().zip(channels) {
            *o += vol.sample(ch, p);
        }
    }
    out.iter_mut().for_each(|v| *v *= dt);
}

fn project(vol: &Volume, channels: &[Channel], geom: &ProjectionGeometry, opts: MarchOptions) -> Result<Vec<Image>> {
    geom.validate_for(vol)?;
    let h = opts.step_for(vol);
    if !(h > 0.0 && h.is_finite()) {
        return Err(crate::Error::Geometry(format!("integration step must be positive, got {h}")));
    }
    let mut images: Vec<Image> = channels.iter().map(|_| Image::zeros(geom.nu, geom.nv)).collect();
    let mut acc = vec![0.0; channels.len()];
    for row in 0..geom.nv {
        for col in 0..geom.nu {
            integrate(vol, &geom.ray(row, col), h, channels, &mut acc);
            for (img, v) in images.iter_mut().zip(&acc) {
                img.data_mut()[row * geom.nu + col] = *v as f32;
            }
        }
    }
    Ok(images)
}

/// Projection image of one volume channel, in channel-unit·mm.
///
/// Rays that miss the volume yield exactly zero.
pub fn forward_project(vol: &Volume, channel: Channel, geom: &ProjectionGeometry, opts: MarchOptions) -> Result<Image> {
    Ok(project(vol, &[channel], geom, opts)?.remove(0))
}

/// Raw `(mr, xray)` projections of a volume over one shared ray set. The
/// X-ray image is the line integral of attenuation (log domain).
pub fn project_pair(vol: &Volume, geom: &ProjectionGeometry, opts: MarchOptions) -> Result<(Image, Image)> {
    let mut imgs = project(vol, &[Channel::Mr, Channel::Attenuation], geom, opts)?;
    let xray = imgs.pop().expect("two channels");
    let mr = imgs.pop().expect("two channels");
    Ok((mr, xray))
}

/// Detector intensity `exp(-line integral)` of a log-domain projection.
pub fn to_intensity(line_integral: &Image) -> Image {
    line_integral.map(|v| (-v).exp())
}
