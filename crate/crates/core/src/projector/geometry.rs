use std::f64::consts::TAU;

use super::volume::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BeamMode {
    Parallel,
    /// Point source at `sad` mm from the isocenter, detector at `sdd` mm from the source.
    Cone { sad: f64, sdd: f64 },
}

/// Acquisition geometry rotating about the world z axis.
///
/// At `angle = 0` rays travel along +x, detector columns run along +y and
/// detector rows along -z (row 0 is the top of the image).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionGeometry {
    pub mode: BeamMode,
    /// Detector columns.
    pub nu: usize,
    /// Detector rows.
    pub nv: usize,
    pub du: f64,
    pub dv: f64,
    pub angle: f64,
}

/// A ray `origin + t * direction`, `direction` of unit length.
#[derive(Clone, Copy, Debug)]
pub struct Ray {
    pub origin: [f64; 3],
    pub direction: [f64; 3],
}

impl ProjectionGeometry {
    pub fn parallel(nu: usize, nv: usize, du: f64, dv: f64, angle: f64) -> Self {
        ProjectionGeometry {
            mode: BeamMode::Parallel,
            nu,
            nv,
            du,
            dv,
            angle,
        }
    }

    pub fn cone(nu: usize, nv: usize, du: f64, dv: f64, angle: f64, sad: f64, sdd: f64) -> Self {
        ProjectionGeometry {
            mode: BeamMode::Cone { sad, sdd },
            nu,
            nv,
            du,
            dv,
            angle,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nu == 0 || self.nv == 0 {
            return Err(Error::Geometry(format!(
                "detector must have positive size, got {}x{}",
                self.nu, self.nv
            )));
        }
        if !(self.du > 0.0 && self.dv > 0.0 && self.du.is_finite() && self.dv.is_finite()) {
            return Err(Error::Geometry(format!(
                "detector spacing must be positive, got {}x{}",
                self.du, self.dv
            )));
        }
        if !self.angle.is_finite() {
            return Err(Error::Geometry("projection angle must be finite".into()));
        }
        if let BeamMode::Cone { sad, sdd } = self.mode {
            if !(sad > 0.0 && sdd > sad && sdd.is_finite()) {
                return Err(Error::Geometry(format!(
                    "cone beam needs 0 < SAD < SDD, got SAD {sad}, SDD {sdd}"
                )));
            }
        }
        Ok(())
    }

    /// Validates the geometry against the volume it will project.
    pub fn validate_for(&self, vol: &Volume) -> Result<()> {
        self.validate()?;
        if let BeamMode::Cone { sad, .. } = self.mode {
            let r = vol.bounding_radius();
            if sad <= r {
                return Err(Error::Geometry(format!(
                    "cone source at {sad} mm lies inside the volume bounding sphere (radius {r:.3} mm)"
                )));
            }
        }
        Ok(())
    }

    fn frame(&self) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let a = self.angle.rem_euclid(TAU);
        let (s, c) = a.sin_cos();
        ([c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, -1.0])
    }

    /// The ray through the center of detector pixel (`row`, `col`).
    pub fn ray(&self, row: usize, col: usize) -> Ray {
        let (d, eu, ev) = self.frame();
        let u = (col as f64 - (self.nu as f64 - 1.0) / 2.0) * self.du;
        let v = (row as f64 - (self.nv as f64 - 1.0) / 2.0) * self.dv;
        let offset = [u * eu[0] + v * ev[0], u * eu[1] + v * ev[1], u * eu[2] + v * ev[2]];
        match self.mode {
            BeamMode::Parallel => Ray {
                origin: offset,
                direction: d,
            },
            BeamMode::Cone { sad, sdd } => {
                let src = [-sad * d[0], -sad * d[1], -sad * d[2]];
                let det = sdd - sad;
                let p = [det * d[0] + offset[0], det * d[1] + offset[1], det * d[2] + offset[2]];
                let dir = [p[0] - src[0], p[1] - src[1], p[2] - src[2]];
                let len = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
                Ray {
                    origin: src,
                    direction: [dir[0] / len, dir[1] / len, dir[2] / len],
                }
            }
        }
    }
}

impl Ray {
    /// Parameter interval where the (infinite) line crosses the box, if any.
    pub fn clip(&self, lo: [f64; 3], hi: [f64; 3]) -> Option<(f64, f64)> {
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = self.origin[a];
            let d = self.direction[a];
            if d.abs() < 1e-15 {
                if o < lo[a] || o > hi[a] {
                    return None;
                }
                continue;
            }
            let (ta, tb) = ((lo[a] - o) / d, (hi[a] - o) / d);
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
        (t1 > t0).then_some((t0, t1))
    }

    pub fn at(&self, t: f64) -> [f64; 3] {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}
