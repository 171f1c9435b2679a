//! Procedural head-like phantoms with registered MR and attenuation channels.

use rand::Rng;

use super::{Ellipsoid, Volume};
use crate::error::{Error, Result};
use crate::seeds;

/// MR intensity and linear attenuation (1/mm) of one tissue class.
#[derive(Clone, Debug, PartialEq)]
pub struct Tissue {
    pub name: String,
    pub mr: f64,
    pub mu: f64,
}

impl Tissue {
    pub fn new(name: &str, mr: f64, mu: f64) -> Self {
        Tissue {
            name: name.to_string(),
            mr,
            mu,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    /// Voxels per axis (cubic grid).
    pub size: usize,
    /// Isotropic voxel spacing, mm.
    pub spacing: f64,
    /// Inclusive range of the number of random interior ellipsoids.
    pub ellipsoids: (usize, usize),
    /// Inclusive range of interior ellipsoid semi-axes, mm.
    pub semi_axis_mm: (f64, f64),
    /// Classes drawn for the interior ellipsoids.
    pub tissues: Vec<Tissue>,
    /// Paint a scalp / bone / brain envelope. The bone layer is bright in
    /// attenuation and nearly invisible in MR.
    pub skull_shell: bool,
    /// Semi-axes of the outer head envelope, mm (jittered by up to 5%).
    pub head_semi_axes: [f64; 3],
    pub scalp: Tissue,
    pub bone: Tissue,
    pub brain: Tissue,
    pub supersample: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 64,
            spacing: 3.0,
            ellipsoids: (6, 12),
            semi_axis_mm: (6.0, 22.0),
            tissues: vec![
                Tissue::new("grey_matter", 0.80, 0.0205),
                Tissue::new("white_matter", 0.62, 0.0210),
                Tissue::new("csf", 1.00, 0.0195),
                Tissue::new("fat", 0.90, 0.0180),
                Tissue::new("calcification", 0.03, 0.0450),
                Tissue::new("air", 0.0, 0.0),
            ],
            skull_shell: true,
            head_semi_axes: [72.0, 86.0, 80.0],
            scalp: Tissue::new("scalp", 0.45, 0.0200),
            bone: Tissue::new("bone", 0.02, 0.0500),
            brain: Tissue::new("brain", 0.70, 0.0207),
            supersample: 2,
            seed: 0,
        }
    }
}

const SCALP_MM: f64 = 4.0;
const SKULL_MM: f64 = 7.0;

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        PhantomSpec {
            seed,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(Error::Spec(format!(
                "phantom grid must be positive, got {} voxels at {} mm",
                self.size, self.spacing
            )));
        }
        if self.ellipsoids.0 > self.ellipsoids.1 {
            return Err(Error::Spec(format!(
                "ellipsoid count range {}..{} has min > max",
                self.ellipsoids.0, self.ellipsoids.1
            )));
        }
        let (lo, hi) = self.semi_axis_mm;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Spec(format!("semi-axis range {lo}..{hi} is degenerate")));
        }
        if self.ellipsoids.1 > 0 && self.tissues.is_empty() {
            return Err(Error::Spec("interior ellipsoids need at least one tissue class".into()));
        }
        for t in self.tissues.iter().chain([&self.scalp, &self.bone, &self.brain]) {
            if !(t.mr >= 0.0 && t.mu >= 0.0 && t.mr.is_finite() && t.mu.is_finite()) {
                return Err(Error::Spec(format!("tissue '{}' has negative or non-finite values", t.name)));
            }
        }
        if self.head_semi_axes.iter().any(|&a| a <= SCALP_MM + SKULL_MM) {
            return Err(Error::Spec("head envelope too small for scalp and skull layers".into()));
        }
        Ok(())
    }
}

fn shrink(e: &Ellipsoid, by: f64) -> Ellipsoid {
    Ellipsoid {
        semi_axes: e.semi_axes.map(|a| a - by),
        ..*e
    }
}

/// Builds the phantom described by `spec`; identical specs give bit-identical volumes.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = seeds::rng(spec.seed, "phantom");
    let mut vol = Volume::centered([spec.size; 3], [spec.spacing; 3])?;
    let ss = spec.supersample;

    let jitter = |rng: &mut rand_chacha::ChaCha8Rng, a: f64| a * rng.gen_range(0.95..1.05);
    let head = Ellipsoid {
        center: [0.0; 3],
        semi_axes: [
            jitter(&mut rng, spec.head_semi_axes[0]),
            jitter(&mut rng, spec.head_semi_axes[1]),
            jitter(&mut rng, spec.head_semi_axes[2]),
        ],
        yaw: rng.gen_range(-0.15..0.15),
    };
    let brain = shrink(&head, SCALP_MM + SKULL_MM);
    if spec.skull_shell {
        vol.paint(&head, spec.scalp.mr, spec.scalp.mu, ss);
        vol.paint(&shrink(&head, SCALP_MM), spec.bone.mr, spec.bone.mu, ss);
        vol.paint(&brain, spec.brain.mr, spec.brain.mu, ss);
    }

    let count = rng.gen_range(spec.ellipsoids.0..=spec.ellipsoids.1);
    let region = if spec.skull_shell { brain } else { head };
    for _ in 0..count {
        let tissue = &spec.tissues[rng.gen_range(0..spec.tissues.len())];
        // centers inside 60% of the region so structures stay mostly interior
        let dir = loop {
            let p: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            if p.iter().map(|c| c * c).sum::<f64>() <= 1.0 {
                break p;
            }
        };
        let (c, s) = (region.yaw.cos(), region.yaw.sin());
        let local = [
            0.6 * dir[0] * region.semi_axes[0],
            0.6 * dir[1] * region.semi_axes[1],
            0.6 * dir[2] * region.semi_axes[2],
        ];
        let center = [c * local[0] - s * local[1], s * local[0] + c * local[1], local[2]];
        let (lo, hi) = spec.semi_axis_mm;
        let shape = Ellipsoid {
            center,
            semi_axes: [rng.gen_range(lo..=hi), rng.gen_range(lo..=hi), rng.gen_range(lo..=hi)],
            yaw: rng.gen_range(0.0..std::f64::consts::PI),
        };
        vol.paint(&shape, tissue.mr, tissue.mu, ss);
    }
    Ok(vol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::Channel;

    fn small(seed: u64) -> PhantomSpec {
        PhantomSpec {
            size: 32,
            spacing: 6.0,
            ..PhantomSpec::with_seed(seed)
        }
    }

    #[test]
    fn same_seed_same_volume() {
        let a = generate_phantom(&small(11)).unwrap();
        let b = generate_phantom(&small(11)).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&small(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn bone_shell_is_visible_in_one_channel_only() {
        let spec = small(5);
        let vol = generate_phantom(&spec).unwrap();
        let mr = vol.channel(Channel::Mr);
        let mu = vol.channel(Channel::Attenuation);
        let mr_max = mr.iter().copied().fold(0.0f32, f32::max) as f64;
        let hits = mr
            .iter()
            .zip(mu)
            .filter(|(&m, &a)| a as f64 > 0.9 * spec.bone.mu && (m as f64) < 0.05 * mr_max)
            .count();
        assert!(hits > 0);
    }

    #[test]
    fn nothing_to_paint_gives_zero_volume() {
        let spec = PhantomSpec {
            ellipsoids: (0, 0),
            skull_shell: false,
            ..small(3)
        };
        let vol = generate_phantom(&spec).unwrap();
        assert!(vol.channel(Channel::Mr).iter().all(|&v| v == 0.0));
        assert!(vol.channel(Channel::Attenuation).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_ranges_are_spec_errors() {
        let spec = PhantomSpec {
            ellipsoids: (5, 2),
            ..small(1)
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
        let spec = PhantomSpec {
            semi_axis_mm: (9.0, 3.0),
            ..small(1)
        };
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
        let mut spec = small(1);
        spec.tissues[0].mu = -1.0;
        assert!(matches!(generate_phantom(&spec), Err(Error::Spec(_))));
    }
}
