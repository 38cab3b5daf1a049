//! Training-time augmentation of normalized records.
//!
//! Geometric transforms resample the image (and any uncertainty map)
//! trilinearly and the masks by nearest neighbour, with zero fill outside
//! the field of view. Every transform preserves shape, spacing and label
//! availability. Meta entries (including any stored ground truth) are
//! carried over untouched.

use ndarray::{s, Array3, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dims, IntensityUnit, Mask, OrganId, ScanRecord};
use crate::error::{Error, Result};

/// Largest rotation per axis, degrees.
pub const MAX_ROTATION_DEG: f64 = 10.0;
/// Largest brightness shift and contrast change.
pub const MAX_INTENSITY_CHANGE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Tier {
    /// Brightness/contrast and rotation.
    Basic,
    /// Basic plus flipping, organ masking and elastic deformation.
    Additional,
}

/// Fire probability of each transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FireProbabilities {
    pub brightness_contrast: f64,
    pub rotation: f64,
    pub flip: f64,
    pub organ_mask: f64,
    pub elastic_global: f64,
    pub elastic_organ: f64,
}

impl FireProbabilities {
    pub const fn uniform(p: f64) -> Self {
        FireProbabilities {
            brightness_contrast: p,
            rotation: p,
            flip: p,
            organ_mask: p,
            elastic_global: p,
            elastic_organ: p,
        }
    }

    fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("brightness_contrast", self.brightness_contrast),
            ("rotation", self.rotation),
            ("flip", self.flip),
            ("organ_mask", self.organ_mask),
            ("elastic_global", self.elastic_global),
            ("elastic_organ", self.elastic_organ),
        ]
    }
}

impl Default for FireProbabilities {
    fn default() -> Self {
        Self::uniform(0.5)
    }
}

/// Random displacement field parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticSpec {
    /// Distance between control points.
    pub control_spacing_mm: f64,
    /// Upper bound on the length of any displacement vector.
    pub max_displacement_mm: f64,
    /// Width of the envelope for organ-centred deformation. `None` uses the
    /// organ's bounding-box radius.
    pub envelope_sigma_mm: Option<f64>,
}

impl Default for ElasticSpec {
    fn default() -> Self {
        ElasticSpec {
            control_spacing_mm: 20.0,
            max_displacement_mm: 5.0,
            envelope_sigma_mm: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub tier: Tier,
    pub probabilities: FireProbabilities,
    /// Brightness shift drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast change drawn from `[-c, c]`.
    pub contrast: f64,
    /// Rotation per axis drawn from `[-r, r]` degrees.
    pub rotation_deg: f64,
    pub elastic: ElasticSpec,
    /// Range of the intensity painted over a masked organ.
    pub organ_intensity: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            tier: Tier::Basic,
            probabilities: FireProbabilities::default(),
            brightness: MAX_INTENSITY_CHANGE,
            contrast: MAX_INTENSITY_CHANGE,
            rotation_deg: MAX_ROTATION_DEG,
            elastic: ElasticSpec::default(),
            organ_intensity: [0.0, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn with_tier(tier: Tier) -> Self {
        AugmentConfig {
            tier,
            ..Self::default()
        }
    }

    /// Never changes a record.
    pub fn disabled() -> Self {
        AugmentConfig {
            probabilities: FireProbabilities::uniform(0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in self.probabilities.named() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("probabilities.{name}"), format!("{p} is not in [0, 1]")));
            }
        }
        let within = |field: &str, v: f64, max: f64| {
            if (0.0..=max).contains(&v) {
                Ok(())
            } else {
                Err(Error::config(field, format!("{v} is not in [0, {max}]")))
            }
        };
        within("brightness", self.brightness, MAX_INTENSITY_CHANGE)?;
        within("contrast", self.contrast, MAX_INTENSITY_CHANGE)?;
        within("rotation_deg", self.rotation_deg, MAX_ROTATION_DEG)?;
        let e = &self.elastic;
        if !(e.control_spacing_mm > 0.0 && e.control_spacing_mm.is_finite()) {
            return Err(Error::config("elastic.control_spacing_mm", "must be positive"));
        }
        if !(e.max_displacement_mm >= 0.0 && e.max_displacement_mm.is_finite()) {
            return Err(Error::config("elastic.max_displacement_mm", "must be non-negative"));
        }
        if let Some(sigma) = e.envelope_sigma_mm {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::config("elastic.envelope_sigma_mm", "must be positive"));
            }
        }
        let [lo, hi] = self.organ_intensity;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config("organ_intensity", "need 0 <= lo <= hi <= 1"));
        }
        Ok(())
    }
}

/// Per-axis displacement (mm) at every control point, with grid spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlGrid {
    pub spacing_mm: f64,
    pub displacement: Array3<[f64; 3]>,
}

impl ControlGrid {
    /// Grid covering a volume of `shape` voxels, with no displacement.
    pub fn zeros(shape: [usize; 3], voxel_mm: [f64; 3], spacing_mm: f64) -> Self {
        let n = |a: usize| ((shape[a].saturating_sub(1)) as f64 * voxel_mm[a] / spacing_mm).ceil() as usize + 2;
        ControlGrid {
            spacing_mm,
            displacement: Array3::from_elem((n(0), n(1), n(2)), [0.0; 3]),
        }
    }

    /// Random displacements with length at most `max_mm`.
    pub fn random(shape: [usize; 3], voxel_mm: [f64; 3], spec: &ElasticSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut grid = Self::zeros(shape, voxel_mm, spec.control_spacing_mm);
        let max = spec.max_displacement_mm;
        for d in grid.displacement.iter_mut() {
            let v: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0) * max);
            let len = v.iter().map(|c| c * c).sum::<f64>().sqrt();
            let scale = if len > max { max / len } else { 1.0 };
            *d = v.map(|c| c * scale);
        }
        grid
    }

    /// Trilinear interpolation at a physical position (mm from voxel 0).
    fn at(&self, p: [f64; 3]) -> [f64; 3] {
        let (nz, ny, nx) = self.displacement.dim();
        let n = [nz, ny, nx];
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let g = (p[a] / self.spacing_mm).clamp(0.0, (n[a] - 1) as f64);
            let i = (g.floor() as usize).min(n[a] - 2);
            base[a] = i;
            frac[a] = g - i as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let off = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
            let w: f64 = (0..3)
                .map(|a| if off[a] == 1 { frac[a] } else { 1.0 - frac[a] })
                .product();
            if w == 0.0 {
                continue;
            }
            let d = self.displacement[[base[0] + off[0], base[1] + off[1], base[2] + off[2]]];
            for a in 0..3 {
                out[a] += w * d[a];
            }
        }
        out
    }
}

/// Gaussian window about an organ centroid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Envelope {
    pub center_mm: [f64; 3],
    pub sigma_mm: f64,
}

impl Envelope {
    /// Centred on the organ's centroid. `None` if the mask is empty.
    pub fn around(mask: &Mask, voxel_mm: [f64; 3], sigma_mm: Option<f64>) -> Option<Self> {
        let mut sum = [0.0; 3];
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut n = 0usize;
        for ((z, y, x), &m) in mask.indexed_iter() {
            if m {
                let idx = [z, y, x];
                for a in 0..3 {
                    sum[a] += idx[a] as f64;
                    lo[a] = lo[a].min(idx[a]);
                    hi[a] = hi[a].max(idx[a]);
                }
                n += 1;
            }
        }
        if n == 0 {
            return None;
        }
        let center_mm = std::array::from_fn(|a| sum[a] / n as f64 * voxel_mm[a]);
        let radius = (0..3)
            .map(|a| (hi[a] - lo[a] + 1) as f64 * voxel_mm[a] / 2.0)
            .fold(0.0, f64::max);
        Some(Envelope {
            center_mm,
            sigma_mm: sigma_mm.unwrap_or(radius),
        })
    }

    fn weight(&self, p: [f64; 3]) -> f64 {
        let d2: f64 = (0..3).map(|a| (p[a] - self.center_mm[a]).powi(2)).sum();
        (-d2 / (2.0 * self.sigma_mm * self.sigma_mm)).exp()
    }
}

/// One drawn transform with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    FlipLr,
    Rotate { degrees: [f64; 3] },
    Elastic { grid: ControlGrid, center: Option<OrganId> },
    OrganIntensity { organ: OrganId, value: f32 },
    BrightnessContrast { brightness: f64, contrast: f64 },
}

impl Transform {
    pub fn apply(&self, record: &ScanRecord, config: &AugmentConfig) -> Result<ScanRecord> {
        match self {
            Transform::FlipLr => Ok(flip_lr(record)),
            Transform::Rotate { degrees } => rotate(record, *degrees),
            Transform::Elastic { grid, center } => elastic_deform(record, grid, *center, config.elastic.envelope_sigma_mm),
            Transform::OrganIntensity { organ, value } => organ_mask_intensity(record, *organ, *value),
            Transform::BrightnessContrast { brightness, contrast } => {
                let mut out = record.clone();
                out.image.data = brightness_contrast(&record.image.data, *brightness, *contrast)?;
                Ok(out)
            }
        }
    }
}

/// `clamp((v - 0.5)(1 + c) + 0.5 + b, 0, 1)` for every voxel.
pub fn brightness_contrast(image: &Array3<f32>, brightness: f64, contrast: f64) -> Result<Array3<f32>> {
    for (name, v) in [("brightness", brightness), ("contrast", contrast)] {
        if !(v.abs() <= MAX_INTENSITY_CHANGE + 1e-12) {
            return Err(Error::validation(name, format!("{v} is outside +-{MAX_INTENSITY_CHANGE}")));
        }
    }
    Ok(image.mapv(|v| ((v as f64 - 0.5) * (1.0 + contrast) + 0.5 + brightness).clamp(0.0, 1.0) as f32))
}

/// Mirrors along x.
pub fn flip_lr(record: &ScanRecord) -> ScanRecord {
    let mut out = record.clone();
    let flip = s![.., .., ..;-1];
    out.image.data = record.image.data.slice(flip).to_owned();
    for (dst, src) in out.labels.masks.iter_mut().zip(&record.labels.masks) {
        *dst = src.slice(flip).to_owned();
    }
    if let Some(u) = &record.uncertainty {
        out.uncertainty = Some(u.slice(flip).to_owned());
    }
    out
}

/// Paints `value` over the organ's voxels. Labels are untouched.
pub fn organ_mask_intensity(record: &ScanRecord, organ: OrganId, value: f32) -> Result<ScanRecord> {
    if !record.labels.is_available(organ) {
        return Err(Error::validation("organ", format!("{organ} is not available in {}", record.id)));
    }
    if !(0.0..=1.0).contains(&value) {
        return Err(Error::validation("value", format!("{value} is not in [0, 1]")));
    }
    let mut out = record.clone();
    Zip::from(&mut out.image.data)
        .and(record.labels.mask(organ))
        .for_each(|v, &m| {
            if m {
                *v = value;
            }
        });
    Ok(out)
}

/// Rotates about the volume centre by `degrees` around the z, y and x axes
/// (applied in that order, z last).
pub fn rotate(record: &ScanRecord, degrees: [f64; 3]) -> Result<ScanRecord> {
    if let Some(a) = degrees.iter().find(|a| !(a.abs() <= MAX_ROTATION_DEG + 1e-12)) {
        return Err(Error::validation("angle", format!("{a} exceeds {MAX_ROTATION_DEG} degrees")));
    }
    if degrees == [0.0; 3] {
        return Ok(record.clone());
    }
    let shape = record.shape();
    let mm = record.spacing().0;
    let rot = rotation_matrix(degrees);
    let center: [f64; 3] = std::array::from_fn(|a| (shape[a] as f64 - 1.0) / 2.0);
    // Pull-back: output point p reads from R^T p.
    Ok(warp(record, |idx| {
        let p: [f64; 3] = std::array::from_fn(|a| (idx[a] - center[a]) * mm[a]);
        std::array::from_fn(|a| {
            let q: f64 = (0..3).map(|b| rot[b][a] * p[b]).sum();
            q / mm[a] + center[a]
        })
    }))
}

/// Rotation in (z, y, x) coordinates: `Rz * Ry * Rx`, where `Rz` turns the
/// (y, x) plane.
fn rotation_matrix(degrees: [f64; 3]) -> [[f64; 3]; 3] {
    let [az, ay, ax] = degrees.map(f64::to_radians);
    let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| -> [[f64; 3]; 3] {
        std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
    };
    let (sz, cz) = az.sin_cos();
    let (sy, cy) = ay.sin_cos();
    let (sx, cx) = ax.sin_cos();
    let rz = [[1.0, 0.0, 0.0], [0.0, cz, -sz], [0.0, sz, cz]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[cx, -sx, 0.0], [sx, cx, 0.0], [0.0, 0.0, 1.0]];
    mul(rz, mul(ry, rx))
}

/// Displaces every voxel by the interpolated control-grid field. With a
/// `center` organ the field is windowed by a Gaussian about its centroid;
/// if that organ is unavailable or empty the record is returned unchanged.
pub fn elastic_deform(
    record: &ScanRecord,
    grid: &ControlGrid,
    center: Option<OrganId>,
    sigma_mm: Option<f64>,
) -> Result<ScanRecord> {
    let mm = record.spacing().0;
    let envelope = match center {
        None => None,
        Some(organ) => {
            if !record.labels.is_available(organ) {
                return Ok(record.clone());
            }
            match Envelope::around(record.labels.mask(organ), mm, sigma_mm) {
                Some(e) => Some(e),
                None => return Ok(record.clone()),
            }
        }
    };
    if grid.displacement.iter().all(|d| *d == [0.0; 3]) {
        return Ok(record.clone());
    }
    Ok(warp(record, |idx| {
        let p: [f64; 3] = std::array::from_fn(|a| idx[a] * mm[a]);
        let d = grid.at(p);
        let w = envelope.map_or(1.0, |e| e.weight(p));
        std::array::from_fn(|a| idx[a] + w * d[a] / mm[a])
    }))
}

/// Resamples a record through `source`, which maps an output voxel index to
/// a continuous source index.
fn warp(record: &ScanRecord, source: impl Fn([f64; 3]) -> [f64; 3]) -> ScanRecord {
    let shape = record.shape();
    let mut out = record.clone();
    let mut nearest: Array3<Option<(usize, usize, usize)>> = Array3::from_elem(shape, None);
    for ((z, y, x), v) in out.image.data.indexed_iter_mut() {
        let q = source([z as f64, y as f64, x as f64]);
        *v = trilinear(&record.image.data, q);
        nearest[[z, y, x]] = nearest_index(shape, q);
    }
    if record.image.unit == IntensityUnit::Normalized {
        out.image.data.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    for (dst, src) in out.labels.masks.iter_mut().zip(&record.labels.masks) {
        Zip::from(dst)
            .and(&nearest)
            .for_each(|m, n| *m = n.is_some_and(|i| src[i]));
    }
    if let Some(u) = &record.uncertainty {
        out.uncertainty = Some(Array3::from_shape_fn(shape, |(z, y, x)| {
            trilinear(u, source([z as f64, y as f64, x as f64])).max(0.0)
        }));
    }
    out
}

fn nearest_index(shape: [usize; 3], q: [f64; 3]) -> Option<(usize, usize, usize)> {
    let mut i = [0usize; 3];
    for a in 0..3 {
        let r = q[a].round();
        if r < 0.0 || r > (shape[a] - 1) as f64 {
            return None;
        }
        i[a] = r as usize;
    }
    Some((i[0], i[1], i[2]))
}

/// Trilinear sample at a continuous index; neighbours outside the volume
/// read as zero.
fn trilinear(a: &Array3<f32>, q: [f64; 3]) -> f32 {
    let shape = dims(a);
    let base = q.map(f64::floor);
    let frac: [f64; 3] = std::array::from_fn(|k| q[k] - base[k]);
    let mut acc = 0.0f64;
    for corner in 0..8 {
        let off = [corner >> 2 & 1, corner >> 1 & 1, corner & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for k in 0..3 {
            w *= if off[k] == 1 { frac[k] } else { 1.0 - frac[k] };
            let i = base[k] as i64 + off[k] as i64;
            if i < 0 || i >= shape[k] as i64 {
                inside = false;
            } else {
                idx[k] = i as usize;
            }
        }
        if w != 0.0 && inside {
            acc += w * a[idx] as f64;
        }
    }
    acc as f32
}

/// Draws which transforms fire and their parameters, in application order.
/// The draw sequence depends only on the config, the record's label
/// availability and `rng`.
pub fn draw_transforms(record: &ScanRecord, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Vec<Transform> {
    let p = &config.probabilities;
    let mut fires = |prob: f64| rng.gen_bool(prob.clamp(0.0, 1.0));
    let mut plan = Vec::new();
    let extra = config.tier == Tier::Additional;
    if extra && fires(p.flip) {
        plan.push(Transform::FlipLr);
    }
    if fires(p.rotation) {
        let r = config.rotation_deg;
        let degrees = std::array::from_fn(|_| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 });
        plan.push(Transform::Rotate { degrees });
    }
    if extra {
        let mm = record.spacing().0;
        if rng.gen_bool(p.elastic_global) {
            let grid = ControlGrid::random(record.shape(), mm, &config.elastic, rng);
            plan.push(Transform::Elastic { grid, center: None });
        }
        if rng.gen_bool(p.elastic_organ) {
            let organ = if rng.gen_bool(0.5) { OrganId::BowelBag } else { OrganId::Bladder };
            let grid = ControlGrid::random(record.shape(), mm, &config.elastic, rng);
            plan.push(Transform::Elastic { grid, center: Some(organ) });
        }
        if rng.gen_bool(p.organ_mask) {
            let organs: Vec<OrganId> = record.labels.available_organs().collect();
            let [lo, hi] = config.organ_intensity;
            let value = rng.gen_range(lo..=hi) as f32;
            if !organs.is_empty() {
                let organ = organs[rng.gen_range(0..organs.len())];
                plan.push(Transform::OrganIntensity { organ, value });
            }
        }
    }
    if rng.gen_bool(p.brightness_contrast) {
        let b = config.brightness;
        let c = config.contrast;
        let brightness = if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 };
        let contrast = if c > 0.0 { rng.gen_range(-c..=c) } else { 0.0 };
        plan.push(Transform::BrightnessContrast { brightness, contrast });
    }
    plan
}

/// Draws and applies one augmentation. The result is a pure function of
/// `(record, config, rng state)`.
pub fn sample_augmentation(record: &ScanRecord, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Result<ScanRecord> {
    config.validate()?;
    let plan = draw_transforms(record, config, rng);
    let mut out = record.clone();
    for t in &plan {
        out = t.apply(&out, config)?;
    }
    Ok(out)
}
