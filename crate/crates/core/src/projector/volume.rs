use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    /// MR signal intensity, arbitrary units.
    Mr,
    /// Linear attenuation coefficient, 1/mm.
    Attenuation,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Mr => "mr",
            Channel::Attenuation => "mu",
        }
    }
}

/// Two-channel scalar grid; `x` varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    mr: Vec<f32>,
    mu: Vec<f32>,
}

/// An ellipsoid rotated by `yaw` radians about the z axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub yaw: f64,
}

impl Ellipsoid {
    pub fn sphere(center: [f64; 3], radius: f64) -> Self {
        Ellipsoid {
            center,
            semi_axes: [radius; 3],
            yaw: 0.0,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let local = [c * d[0] + s * d[1], -s * d[0] + c * d[1], d[2]];
        local
            .iter()
            .zip(&self.semi_axes)
            .map(|(x, a)| (x / a) * (x / a))
            .sum::<f64>()
            <= 1.0
    }

    fn bounding_radius(&self) -> f64 {
        self.semi_axes.iter().copied().fold(0.0, f64::max)
    }
}

impl Volume {
    /// An all-zero volume centered on the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let origin = [
            -((dims[0] as f64 - 1.0) / 2.0) * spacing[0],
            -((dims[1] as f64 - 1.0) / 2.0) * spacing[1],
            -((dims[2] as f64 - 1.0) / 2.0) * spacing[2],
        ];
        Self::zeros(dims, spacing, origin)
    }

    pub fn zeros(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        let n = dims.iter().product();
        Self::from_channels(dims, spacing, origin, vec![0.0; n], vec![0.0; n])
    }

    pub fn from_channels(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mr: Vec<f32>,
        mu: Vec<f32>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Dimension(format!("volume dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Geometry(format!("volume spacing must be positive, got {spacing:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Geometry(format!("volume origin must be finite, got {origin:?}")));
        }
        let n: usize = dims.iter().product();
        for (name, ch) in [("mr", &mr), ("mu", &mu)] {
            if ch.len() != n {
                return Err(Error::Dimension(format!(
                    "channel {name} has {} voxels, dims {dims:?} need {n}",
                    ch.len()
                )));
            }
            if ch.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Spec(format!("channel {name} has negative or non-finite values")));
            }
        }
        Ok(Volume {
            dims,
            spacing,
            origin,
            mr,
            mu,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn channel(&self, ch: Channel) -> &[f32] {
        match ch {
            Channel::Mr => &self.mr,
            Channel::Attenuation => &self.mu,
        }
    }

    pub fn channel_mut(&mut self, ch: Channel) -> &mut [f32] {
        match ch {
            Channel::Mr => &mut self.mr,
            Channel::Attenuation => &mut self.mu,
        }
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Axis-aligned box spanned by the outer voxel faces.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.origin[a] - 0.5 * self.spacing[a];
            hi[a] = self.origin[a] + (self.dims[a] as f64 - 0.5) * self.spacing[a];
        }
        (lo, hi)
    }

    /// Radius of the smallest origin-centered sphere enclosing [`Volume::bounds`].
    pub fn bounding_radius(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (0..3)
            .map(|a| lo[a].abs().max(hi[a].abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Returns a copy with both channels multiplied by `factor`.
    pub fn scaled(&self, factor: f32) -> Self {
        let mut out = self.clone();
        out.mr.iter_mut().chain(out.mu.iter_mut()).for_each(|v| *v *= factor);
        out
    }

    /// Blends `(mr, mu)` into every voxel by the fraction of its volume the
    /// ellipsoid covers, estimated on a `supersample³` sub-grid.
    pub fn paint(&mut self, shape: &Ellipsoid, mr: f64, mu: f64, supersample: usize) {
        let ss = supersample.max(1);
        let r = shape.bounding_radius();
        let mut range = [(0usize, 0usize); 3];
        for a in 0..3 {
            let lo = ((shape.center[a] - r - self.origin[a]) / self.spacing[a]).floor() - 1.0;
            let hi = ((shape.center[a] + r - self.origin[a]) / self.spacing[a]).ceil() + 1.0;
            let lo = lo.max(0.0) as usize;
            let hi = (hi.max(-1.0) + 1.0).min(self.dims[a] as f64) as usize;
            range[a] = (lo, hi);
        }
        let total = (ss * ss * ss) as f64;
        let offsets: Vec<f64> = (0..ss).map(|i| (i as f64 + 0.5) / ss as f64 - 0.5).collect();
        for z in range[2].0..range[2].1 {
            for y in range[1].0..range[1].1 {
                for x in range[0].0..range[0].1 {
                    let c = self.voxel_center(x, y, z);
                    let mut inside = 0usize;
                    for oz in &offsets {
                        for oy in &offsets {
                            for ox in &offsets {
                                let p = [
                                    c[0] + ox * self.spacing[0],
                                    c[1] + oy * self.spacing[1],
                                    c[2] + oz * self.spacing[2],
                                ];
                                inside += shape.contains(p) as usize;
                            }
                        }
                    }
                    if inside == 0 {
                        continue;
                    }
                    let f = inside as f64 / total;
                    let i = self.index(x, y, z);
                    self.mr[i] = ((1.0 - f) * self.mr[i] as f64 + f * mr) as f32;
                    self.mu[i] = ((1.0 - f) * self.mu[i] as f64 + f * mu) as f32;
                }
            }
        }
    }

    /// Trilinear interpolation of `ch` at world point `p`, zero outside the
    /// lattice of voxel centers.
    #[inline]
    pub fn sample(&self, ch: Channel, p: [f64; 3]) -> f64 {
        let data = self.channel(ch);
        let mut base = [0isize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin[a]) / self.spacing[a];
            let fl = f.floor();
            if fl < -1.0 || fl > self.dims[a] as f64 - 1.0 {
                return 0.0;
            }
            base[a] = fl as isize;
            frac[a] = f - fl;
        }
        let (nx, ny, nz) = (self.dims[0] as isize, self.dims[1] as isize, self.dims[2] as isize);
        let mut acc = 0.0;
        for dz in 0..2 {
            let z = base[2] + dz;
            if z < 0 || z >= nz {
                continue;
            }
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            for dy in 0..2 {
                let y = base[1] + dy;
                if y < 0 || y >= ny {
                    continue;
                }
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                for dx in 0..2 {
                    let x = base[0] + dx;
                    if x < 0 || x >= nx {
                        continue;
                    }
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    let v = data[((z * ny + y) * nx + x) as usize] as f64;
                    acc += wx * wy * wz * v;
                }
            }
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_negative_values() {
        let err = Volume::from_channels([1, 1, 2], [1.0; 3], [0.0; 3], vec![0.0, -1.0], vec![0.0; 2]);
        assert!(matches!(err, Err(Error::Spec(_))));
    }

    #[test]
    fn trilinear_hits_voxel_centers_and_midpoints() {
        let mut v = Volume::zeros([2, 1, 1], [2.0, 1.0, 1.0], [0.0; 3]).unwrap();
        v.channel_mut(Channel::Mr).copy_from_slice(&[1.0, 3.0]);
        assert_eq!(v.sample(Channel::Mr, [0.0, 0.0, 0.0]), 1.0);
        assert_eq!(v.sample(Channel::Mr, [1.0, 0.0, 0.0]), 2.0);
        assert_eq!(v.sample(Channel::Mr, [3.0, 0.0, 0.0]), 1.5);
        assert_eq!(v.sample(Channel::Mr, [-1.0, 0.0, 0.0]), 0.5);
        assert_eq!(v.sample(Channel::Mr, [5.0, 0.0, 0.0]), 0.0);
    }

    #[test]
    fn painting_conserves_partial_volume() {
        let mut v = Volume::centered([24, 24, 24], [1.0; 3]).unwrap();
        let r = 8.0;
        v.paint(&Ellipsoid::sphere([0.3, -0.2, 0.1], r), 1.0, 2.0, 6);
        let mass: f64 = v.channel(Channel::Mr).iter().map(|&x| x as f64).sum();
        let exact = 4.0 / 3.0 * std::f64::consts::PI * r * r * r;
        assert!((mass - exact).abs() / exact < 0.01, "{mass} vs {exact}");
        let mu: f64 = v.channel(Channel::Attenuation).iter().map(|&x| x as f64).sum();
        assert!((mu - 2.0 * mass).abs() < 1e-3 * mass);
    }
}
