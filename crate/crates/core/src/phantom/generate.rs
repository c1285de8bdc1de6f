use std::f64::consts::PI;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Mask, Volume};
use crate::error::{Error, Result};

/// Mean intensity of each tissue class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contrast {
    pub background: f64,
    pub nulled_wall: f64,
    pub blood: f64,
    pub scar: f64,
}

impl Default for Contrast {
    fn default() -> Self {
        Contrast {
            background: 0.25,
            nulled_wall: 0.05,
            blood: 0.55,
            scar: 1.0,
        }
    }
}

impl Contrast {
    /// Smallest gap in the scar > blood ≥ nulled wall ordering.
    pub fn min_gap(&self) -> f64 {
        (self.scar - self.blood).min(self.blood - self.nulled_wall)
    }
}

/// Parameters of one synthetic atrium. Lengths are in voxels; ranges are
/// inclusive `[min, max]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `[nx, ny, nz]`
    pub extents: [usize; 3],
    /// mm per voxel along x, y, z
    pub spacing: [f64; 3],
    /// Maximum offset of the body centre from the volume centre, as a
    /// fraction of each extent.
    pub center_jitter: f64,
    pub semi_axes_min: [f64; 3],
    pub semi_axes_max: [f64; 3],
    pub tube_count: [usize; 2],
    pub tube_radius: [f64; 2],
    /// How far each vein stub reaches past the body surface.
    pub tube_length: [f64; 2],
    pub wall_thickness: f64,
    pub scar_patches: [usize; 2],
    /// Voxels per scar patch.
    pub scar_patch_size: [usize; 2],
    pub contrast: Contrast,
    pub noise_std: f64,
}

const SPECKLE_NOISE: f64 = 0.3;

impl PhantomSpec {
    /// Cubic phantom of side `size`, with geometry scaled from the 32-voxel default.
    pub fn desk(size: usize, seed: u64) -> Self {
        let s = size as f64 / 32.0;
        let patch = |v: f64| ((v * s * s).round() as usize).max(1);
        PhantomSpec {
            seed,
            extents: [size; 3],
            spacing: [0.75, 0.75, 2.0],
            center_jitter: 0.06,
            semi_axes_min: [7.0 * s, 7.0 * s, 6.0 * s],
            semi_axes_max: [9.0 * s, 9.0 * s, 8.0 * s],
            tube_count: [2, 4],
            tube_radius: [(1.5 * s).max(1.0), (2.0 * s).max(1.2)],
            tube_length: [3.0 * s, 6.0 * s],
            wall_thickness: 2.0,
            scar_patches: [3, 6],
            scar_patch_size: [patch(10.0), patch(30.0)],
            contrast: Contrast::default(),
            noise_std: 0.05,
        }
    }

    /// Harder phantom for intensity-only methods: the desk geometry with
    /// scar scattered as many small patches (about 5% of the wall) under
    /// heavy noise.
    pub fn speckle(size: usize, seed: u64) -> Self {
        let s = size as f64 / 16.0;
        let patch = |v: f64| ((v * s * s).round() as usize).max(1);
        PhantomSpec {
            scar_patches: [6, 10],
            scar_patch_size: [patch(2.0), patch(5.0)],
            noise_std: SPECKLE_NOISE,
            ..PhantomSpec::desk(size, seed)
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        PhantomSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if let Some(e) = self.extents.iter().find(|&&e| e == 0 || e % 8 != 0) {
            return bad(format!("phantom extents must be positive multiples of 8, got {e} in {:?}", self.extents));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return bad(format!("spacing must be finite and positive, got {:?}", self.spacing));
        }
        let c = &self.contrast;
        let levels = [c.background, c.nulled_wall, c.blood, c.scar];
        if levels.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("contrast levels must be finite and non-negative".into());
        }
        if !(c.scar > c.blood && c.blood >= c.nulled_wall) {
            return bad(format!(
                "contrast must satisfy scar > blood >= nulled wall, got {} / {} / {}",
                c.scar, c.blood, c.nulled_wall
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return bad(format!("noise std must be finite and >= 0, got {}", self.noise_std));
        }
        if !(0.0..0.5).contains(&self.center_jitter) {
            return bad(format!("center jitter {} outside [0, 0.5)", self.center_jitter));
        }
        if !(self.wall_thickness.is_finite() && self.wall_thickness >= 1.0) {
            return bad(format!("wall thickness must be >= 1 voxel, got {}", self.wall_thickness));
        }
        for i in 0..3 {
            let (lo, hi) = (self.semi_axes_min[i], self.semi_axes_max[i]);
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("semi-axis range {i} is [{lo}, {hi}]"));
            }
        }
        let ranges_f = [("tube radius", self.tube_radius), ("tube length", self.tube_length)];
        for (name, [lo, hi]) in ranges_f {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} range is [{lo}, {hi}]"));
            }
        }
        let ranges_u = [
            ("tube count", self.tube_count),
            ("scar patch count", self.scar_patches),
            ("scar patch size", self.scar_patch_size),
        ];
        for (name, [lo, hi]) in ranges_u {
            if lo > hi {
                return bad(format!("{name} range is [{lo}, {hi}]"));
            }
        }
        if self.scar_patch_size[0] == 0 && self.scar_patches[1] > 0 {
            return bad("scar patches need at least one voxel".into());
        }
        Ok(())
    }
}

/// Vein stub: a capsule from `start` to `end`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tube {
    pub start: [f64; 3],
    pub end: [f64; 3],
    pub radius: f64,
}

/// Sampled shape of the atrium.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub tubes: Vec<Tube>,
}

impl Geometry {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let e: f64 = (0..3).map(|i| ((p[i] - self.center[i]) / self.semi_axes[i]).powi(2)).sum();
        e <= 1.0 || self.tubes.iter().any(|t| segment_distance(p, t.start, t.end) <= t.radius)
    }

    pub fn mask(&self, extents: [usize; 3]) -> Mask {
        Mask::from_fn((extents[0], extents[1], extents[2]), |x, y, z| {
            self.contains([x as f64, y as f64, z as f64])
        })
    }
}

fn segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: Vec<f64> = (0..3).map(|i| b[i] - a[i]).collect();
    let ap: Vec<f64> = (0..3).map(|i| p[i] - a[i]).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if len2 == 0.0 {
        0.0
    } else {
        (ab.iter().zip(&ap).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0)
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum::<f64>().sqrt()
}

fn sample_f(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

pub fn sample_geometry(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Geometry {
    let mut center = [0.0; 3];
    let mut semi_axes = [0.0; 3];
    for i in 0..3 {
        let mid = (spec.extents[i] as f64 - 1.0) / 2.0;
        let j = spec.center_jitter * spec.extents[i] as f64;
        center[i] = mid + sample_f(rng, [-j, j]);
        semi_axes[i] = sample_f(rng, [spec.semi_axes_min[i], spec.semi_axes_max[i]]);
    }
    let count = rng.random_range(spec.tube_count[0]..=spec.tube_count[1]);
    let tubes = (0..count)
        .map(|_| {
            let azimuth = rng.random_range(0.0..2.0 * PI);
            let elevation = rng.random_range(-0.3..=0.3f64);
            let d = [
                elevation.cos() * azimuth.cos(),
                elevation.cos() * azimuth.sin(),
                elevation.sin(),
            ];
            // distance from the centre to the ellipsoid surface along d
            let reach = 1.0 / (0..3).map(|i| (d[i] / semi_axes[i]).powi(2)).sum::<f64>().sqrt();
            let len = reach + sample_f(rng, spec.tube_length);
            Tube {
                start: center,
                end: [center[0] + len * d[0], center[1] + len * d[1], center[2] + len * d[2]],
                radius: sample_f(rng, spec.tube_radius),
            }
        })
        .collect();
    Geometry {
        center,
        semi_axes,
        tubes,
    }
}

/// Outer wall: voxels outside the atrium within `thickness` of it.
pub fn wall_shell(la: &Mask, thickness: f64) -> Mask {
    la.dilate(thickness).and_not(la).expect("same extents")
}

/// Synthesises one volume with ground-truth LA/PV and scar masks.
pub fn generate(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let geometry = sample_geometry(spec, &mut rng);
    let la = geometry.mask(spec.extents);
    if la.count() == 0 {
        return Err(Error::Infeasible("atrium body covers no voxel centre".into()));
    }
    let wall = wall_shell(&la, spec.wall_thickness);
    let scar = grow_scar(spec, &wall, &mut rng)?;

    let c = spec.contrast;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let intensities = (0..la.len())
        .map(|i| {
            let base = if scar.data()[i] {
                c.scar
            } else if la.data()[i] {
                c.blood
            } else if wall.data()[i] {
                c.nulled_wall
            } else {
                c.background
            };
            let n = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            (base + n).max(0.0)
        })
        .collect();
    let ext = (spec.extents[0], spec.extents[1], spec.extents[2]);
    Volume::new(ext, spec.spacing, intensities)?.with_la_pv(la)?.with_scar(scar)
}

const PATCH_ATTEMPTS: usize = 64;

fn grow_scar(spec: &PhantomSpec, wall: &Mask, rng: &mut ChaCha8Rng) -> Result<Mask> {
    let mut scar = Mask::empty(wall.extents());
    let count = rng.random_range(spec.scar_patches[0]..=spec.scar_patches[1]);
    let sizes: Vec<usize> = (0..count)
        .map(|_| rng.random_range(spec.scar_patch_size[0]..=spec.scar_patch_size[1]))
        .collect();
    let total: usize = sizes.iter().sum();
    let available = wall.count();
    if total > available {
        return Err(Error::Infeasible(format!(
            "{total} scar voxels requested but the wall shell has only {available}"
        )));
    }
    for (p, &size) in sizes.iter().enumerate() {
        let mut placed = false;
        for _ in 0..PATCH_ATTEMPTS {
            let free: Vec<usize> = (0..wall.len()).filter(|&i| wall.data()[i] && !scar.data()[i]).collect();
            let Some(&seed) = free.choose(rng) else { break };
            if let Some(patch) = grow_patch(seed, size, wall, &scar, rng) {
                for i in patch {
                    scar.set_index(i, true);
                }
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Infeasible(format!(
                "could not place scar patch {p} of {size} voxels within the wall shell"
            )));
        }
    }
    Ok(scar)
}

/// Random 6-connected growth from `seed` over free wall voxels.
fn grow_patch(seed: usize, size: usize, wall: &Mask, scar: &Mask, rng: &mut ChaCha8Rng) -> Option<Vec<usize>> {
    let mut taken = vec![seed];
    let mut in_patch = std::collections::HashSet::from([seed]);
    let mut frontier: Vec<usize> = Vec::new();
    let push_neighbours = |i: usize, frontier: &mut Vec<usize>, in_patch: &std::collections::HashSet<usize>| {
        for j in wall.neighbors6(i) {
            if wall.data()[j] && !scar.data()[j] && !in_patch.contains(&j) && !frontier.contains(&j) {
                frontier.push(j);
            }
        }
    };
    push_neighbours(seed, &mut frontier, &in_patch);
    while taken.len() < size {
        if frontier.is_empty() {
            return None;
        }
        let k = rng.random_range(0..frontier.len());
        let i = frontier.swap_remove(k);
        taken.push(i);
        in_patch.insert(i);
        push_neighbours(i, &mut frontier, &in_patch);
    }
    Some(taken)
}
