//! Seeded phantom volumes: one small irregular target made of overlapping
//! ellipsoids, surrounded by clutter ellipsoids whose intensities overlap
//! the target's, on a noisy background.
//!
//! All randomness comes from [`SplitMix64`], so a [`PhantomSpec`] fully
//! determines its output.

mod corpus;

pub use corpus::{generate_corpus, load_corpus, write_corpus, Case, CorpusEntry, CorpusManifest};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{derive_seed, SplitMix64};
use crate::volume::{LabelMask, Volume};

const MAX_TARGET_FRACTION: f64 = 0.05;
const MIN_EXTENT: usize = 32;

/// Parameters of one phantom.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub extents: [usize; 3],
    /// Inclusive range for the fraction of voxels covered by the target.
    pub target_fraction: [f64; 2],
    /// Inclusive range for the number of clutter objects.
    pub clutter_count: [usize; 2],
    pub noise_sigma: f64,
    pub target_band: [f64; 2],
    pub clutter_band: [f64; 2],
    pub background_band: [f64; 2],
    pub seed: u64,
}

impl PhantomSpec {
    /// The 64-cubed configuration used by the reference experiments.
    pub fn reference(seed: u64) -> Self {
        Self {
            extents: [64, 64, 64],
            target_fraction: [0.008, 0.015],
            clutter_count: [6, 10],
            noise_sigma: 0.05,
            target_band: [0.55, 0.65],
            clutter_band: [0.5, 0.9],
            background_band: [0.15, 0.3],
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extents.iter().any(|&e| e < MIN_EXTENT) {
            return Err(invalid!(
                "phantom extents {:?} must be at least {MIN_EXTENT}",
                self.extents
            ));
        }
        let [lo, hi] = self.target_fraction;
        if !(lo > 0.0 && lo <= hi && hi <= MAX_TARGET_FRACTION) {
            return Err(invalid!(
                "target fraction range [{lo}, {hi}] must lie in (0, {MAX_TARGET_FRACTION}]"
            ));
        }
        if self.clutter_count[0] > self.clutter_count[1] {
            return Err(invalid!(
                "clutter count range {:?} is reversed",
                self.clutter_count
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid!(
                "noise sigma {} must be finite and non-negative",
                self.noise_sigma
            ));
        }
        for (name, [a, b]) in [
            ("target", self.target_band),
            ("clutter", self.clutter_band),
            ("background", self.background_band),
        ] {
            if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a > b {
                return Err(invalid!(
                    "{name} band [{a}, {b}] must be an ordered range in [0, 1]"
                ));
            }
        }
        Ok(())
    }
}

/// A solid ellipsoid in voxel coordinates. Voxel `(x, y, z)` is inside when
/// its center satisfies `|A^T (p - c) / r|^2 <= 1`, with `A` the rotation
/// whose columns are the principal directions.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub rotation: [[f64; 3]; 3],
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

impl Ellipsoid {
    pub fn axis_aligned(center: [f64; 3], semi_axes: [f64; 3]) -> Self {
        Self {
            center,
            semi_axes,
            rotation: IDENTITY,
        }
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        let mut acc = 0.0;
        for (k, r) in self.semi_axes.iter().enumerate() {
            let u = d[0] * self.rotation[0][k]
                + d[1] * self.rotation[1][k]
                + d[2] * self.rotation[2][k];
            acc += (u / r) * (u / r);
        }
        acc <= 1.0
    }

    /// Inclusive voxel bounds of the bounding sphere, clipped to `extents`.
    fn bounds(&self, extents: [usize; 3]) -> Option<[(usize, usize); 3]> {
        let r = self.semi_axes.iter().cloned().fold(0.0, f64::max);
        let mut out = [(0, 0); 3];
        for d in 0..3 {
            let lo = (self.center[d] - r).ceil().max(0.0);
            let hi = (self.center[d] + r).floor().min(extents[d] as f64 - 1.0);
            if lo > hi {
                return None;
            }
            out[d] = (lo as usize, hi as usize);
        }
        Some(out)
    }

    /// Ellipsoid scaled by `s` about `origin`.
    fn scaled(&self, origin: [f64; 3], s: f64) -> Self {
        Self {
            center: std::array::from_fn(|d| origin[d] + s * (self.center[d] - origin[d])),
            semi_axes: self.semi_axes.map(|r| r * s),
            rotation: self.rotation,
        }
    }
}

/// Visit every voxel inside at least one ellipsoid, once.
fn for_each_voxel(parts: &[Ellipsoid], extents: [usize; 3], mut f: impl FnMut(usize)) {
    let [w, h, _] = extents;
    let mut seen = vec![false; extents.iter().product()];
    for e in parts {
        let Some([(x0, x1), (y0, y1), (z0, z1)]) = e.bounds(extents) else {
            continue;
        };
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let i = x + w * (y + h * z);
                    if !seen[i] && e.contains([x as f64, y as f64, z as f64]) {
                        seen[i] = true;
                        f(i);
                    }
                }
            }
        }
    }
}

/// Binary mask of the union of `parts`.
pub fn rasterize(parts: &[Ellipsoid], extents: [usize; 3]) -> LabelMask {
    let mut data = vec![0u8; extents.iter().product()];
    for_each_voxel(parts, extents, |i| data[i] = 1);
    LabelMask::new(extents, data).expect("mask data is binary and sized to extents")
}

fn count_voxels(parts: &[Ellipsoid], extents: [usize; 3]) -> usize {
    let mut n = 0;
    for_each_voxel(parts, extents, |_| n += 1);
    n
}

fn random_rotation(rng: &mut SplitMix64) -> [[f64; 3]; 3] {
    // Normalized Gaussian quaternion.
    let q: [f64; 4] = std::array::from_fn(|_| rng.normal());
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let [a, b, c, d] = q.map(|v| v / n);
    [
        [
            a * a + b * b - c * c - d * d,
            2.0 * (b * c - a * d),
            2.0 * (b * d + a * c),
        ],
        [
            2.0 * (b * c + a * d),
            a * a - b * b + c * c - d * d,
            2.0 * (c * d - a * b),
        ],
        [
            2.0 * (b * d - a * c),
            2.0 * (c * d + a * b),
            a * a - b * b - c * c + d * d,
        ],
    ]
}

/// Unscaled target: 2 to 4 ellipsoids whose centers sit inside each other
/// around a common origin, so every scaled copy stays star-shaped about it.
fn target_parts(spec: &PhantomSpec, rng: &mut SplitMix64) -> ([f64; 3], Vec<Ellipsoid>) {
    let origin: [f64; 3] = std::array::from_fn(|d| {
        let e = spec.extents[d] as f64;
        rng.uniform(0.35 * e, 0.65 * e)
    });
    let n = rng.range_inclusive(2, 4);
    let parts = (0..n)
        .map(|_| {
            let semi_axes: [f64; 3] = std::array::from_fn(|_| rng.uniform(0.6, 1.4));
            let rotation = random_rotation(rng);
            // Offset within half of each semi-axis along the principal directions.
            let local: [f64; 3] = std::array::from_fn(|k| rng.uniform(-0.5, 0.5) * semi_axes[k]);
            let center = std::array::from_fn(|d| {
                origin[d] + (0..3).map(|k| rotation[d][k] * local[k]).sum::<f64>()
            });
            Ellipsoid {
                center,
                semi_axes,
                rotation,
            }
        })
        .collect();
    (origin, parts)
}

/// Scale the target so its voxel count falls in the requested range.
fn fit_target(spec: &PhantomSpec, origin: [f64; 3], parts: &[Ellipsoid]) -> Result<Vec<Ellipsoid>> {
    let total = spec.extents.iter().product::<usize>() as f64;
    let lo = (spec.target_fraction[0] * total).ceil() as usize;
    let hi = (spec.target_fraction[1] * total).floor() as usize;
    if lo > hi {
        return Err(invalid!(
            "target fraction range admits no integer voxel count"
        ));
    }
    let goal = (lo + hi) / 2;
    let scale = |s: f64| -> Vec<Ellipsoid> { parts.iter().map(|e| e.scaled(origin, s)).collect() };

    let (mut a, mut b) = (0.0, spec.extents.iter().cloned().max().unwrap_or(0) as f64);
    if count_voxels(&scale(b), spec.extents) < lo {
        return Err(invalid!(
            "target cannot reach {lo} voxels inside {:?}",
            spec.extents
        ));
    }
    for _ in 0..80 {
        let m = 0.5 * (a + b);
        let n = count_voxels(&scale(m), spec.extents);
        if (lo..=hi).contains(&n) && n.abs_diff(goal) * 4 <= hi - lo {
            return Ok(scale(m));
        }
        if n < goal {
            a = m;
        } else {
            b = m;
        }
    }
    let fitted = scale(0.5 * (a + b));
    let n = count_voxels(&fitted, spec.extents);
    if (lo..=hi).contains(&n) {
        Ok(fitted)
    } else {
        Err(invalid!(
            "target voxel count cannot be fitted into [{lo}, {hi}]"
        ))
    }
}

/// Generate one phantom volume and its target mask.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, LabelMask)> {
    spec.validate()?;
    let extents = spec.extents;
    let [w, h, l] = extents;
    let mut shape_rng = SplitMix64::new(derive_seed(spec.seed, 1));
    let mut paint_rng = SplitMix64::new(derive_seed(spec.seed, 2));
    let mut noise_rng = SplitMix64::new(derive_seed(spec.seed, 3));

    let (origin, parts) = target_parts(spec, &mut shape_rng);
    let target = fit_target(spec, origin, &parts)?;
    let mask = rasterize(&target, extents);

    // Keep clutter at least two voxels away from the target.
    let mut halo = target.clone();
    for e in &mut halo {
        e.semi_axes = e.semi_axes.map(|r| r + 2.0);
    }

    let band = |rng: &mut SplitMix64, [a, b]: [f64; 2]| rng.uniform(a, b);
    let background = band(&mut paint_rng, spec.background_band);
    let mut data = vec![background; w * h * l];

    let n_clutter = shape_rng.range_inclusive(spec.clutter_count[0], spec.clutter_count[1]);
    for _ in 0..n_clutter {
        for _attempt in 0..50 {
            let semi_axes: [f64; 3] = std::array::from_fn(|_| shape_rng.uniform(2.0, 6.0));
            let center: [f64; 3] =
                std::array::from_fn(|d| shape_rng.uniform(4.0, extents[d] as f64 - 5.0));
            let e = Ellipsoid {
                center,
                semi_axes,
                rotation: random_rotation(&mut shape_rng),
            };
            let mut clash = false;
            for_each_voxel(std::slice::from_ref(&e), extents, |i| {
                let (x, y, z) = (i % w, (i / w) % h, i / (w * h));
                clash |= halo
                    .iter()
                    .any(|t| t.contains([x as f64, y as f64, z as f64]));
            });
            if clash {
                continue;
            }
            let value = band(&mut paint_rng, spec.clutter_band);
            for_each_voxel(std::slice::from_ref(&e), extents, |i| data[i] = value);
            break;
        }
    }

    let value = band(&mut paint_rng, spec.target_band);
    for (d, &m) in data.iter_mut().zip(mask.data()) {
        if m == 1 {
            *d = value;
        }
    }
    if spec.noise_sigma > 0.0 {
        for d in &mut data {
            *d += spec.noise_sigma * noise_rng.normal();
        }
    }
    let data = data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Ok((Volume::new(extents, [1.0; 3], data)?, mask))
}
