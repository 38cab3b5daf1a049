//! Deterministic synthetic pelvic phantoms.
//!
//! Each phantom is a body cross-section with two hip ellipsoids, a bladder,
//! a posterior rectum tube, and a bowel bag that stops at a cranial border
//! below denser upper-abdominal tissue. Intensities are in HU. The generator
//! can hide annotations, over-annotate the bowel bag cranially, truncate it,
//! and append chest slices: the defects the cleaning and imputation stages
//! have to cope with.
//!
//! Every record is a pure function of `(config, index)`. Independent
//! concerns draw from separate ChaCha streams so that, for example, hiding
//! an annotation never perturbs the image noise.

use std::path::Path;

use ndarray::{s, Array3, Zip};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    self, DatasetManifest, IntensityUnit, LabelSet, LabelSource, Mask, OrganId, ScanRecord,
    Spacing, Volume,
};
use crate::error::{Error, Result};

pub const HU_AIR: f32 = -1000.0;
pub const HU_FAT: f32 = -90.0;
pub const HU_BLADDER: f32 = -10.0;
pub const HU_BOWEL: f32 = 40.0;
pub const HU_UPPER_ABDOMEN: f32 = 70.0;
pub const HU_RECTUM: f32 = 120.0;
pub const HU_BONE: f32 = 500.0;
pub const HU_LUNG: f32 = -800.0;

/// Per-organ values keyed by organ name in JSON.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerOrgan<T> {
    pub bowel_bag: T,
    pub bladder: T,
    pub hips: T,
    pub rectum: T,
}

impl<T: Copy> PerOrgan<T> {
    pub fn splat(v: T) -> Self {
        PerOrgan {
            bowel_bag: v,
            bladder: v,
            hips: v,
            rectum: v,
        }
    }

    pub fn get(&self, organ: OrganId) -> T {
        match organ {
            OrganId::BowelBag => self.bowel_bag,
            OrganId::Bladder => self.bladder,
            OrganId::Hips => self.hips,
            OrganId::Rectum => self.rectum,
        }
    }
}

/// Annotation availability in the clinical training set: 383, 1103, 504 and
/// 865 of 1170 scans for bowel bag, bladder, hips and rectum.
pub const CLINICAL_AVAILABILITY: PerOrgan<f64> = PerOrgan {
    bowel_bag: 383.0 / 1170.0,
    bladder: 1103.0 / 1170.0,
    hips: 504.0 / 1170.0,
    rectum: 865.0 / 1170.0,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    /// Abdominal extent `(z, y, x)` before any chest slices are appended.
    pub shape: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub seed: u64,
    pub availability_probs: PerOrgan<f64>,
    /// Probability that chest slices are appended above the abdomen.
    pub chest_prob: f64,
    /// Maximum number of appended chest slices.
    pub cranial_extent_jitter: usize,
    pub bowel_overannotation_prob: f64,
    /// Inclusive range of slices added by over-annotation.
    pub overannotation_slices: [usize; 2],
    /// Probability that the bowel-bag annotation stops below the hip landmark.
    pub bowel_truncation_prob: f64,
    /// Standard deviation of additive intensity noise, HU.
    pub noise_sigma: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            shape: [64, 64, 64],
            spacing_mm: [2.5; 3],
            seed: 0,
            availability_probs: CLINICAL_AVAILABILITY,
            chest_prob: 0.3,
            cranial_extent_jitter: 12,
            bowel_overannotation_prob: 0.3,
            overannotation_slices: [5, 12],
            bowel_truncation_prob: 0.0,
            noise_sigma: 10.0,
        }
    }
}

impl PhantomConfig {
    /// Every organ annotated, no label noise, no chest slices.
    pub fn clean(shape: [usize; 3], seed: u64) -> Self {
        PhantomConfig {
            shape,
            seed,
            availability_probs: PerOrgan::splat(1.0),
            chest_prob: 0.0,
            bowel_overannotation_prob: 0.0,
            bowel_truncation_prob: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |field: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(field, format!("probability {p} outside [0, 1]")))
            }
        };
        for organ in OrganId::ALL {
            prob(
                &format!("availability_probs.{organ}"),
                self.availability_probs.get(organ),
            )?;
        }
        prob("chest_prob", self.chest_prob)?;
        prob("bowel_overannotation_prob", self.bowel_overannotation_prob)?;
        prob("bowel_truncation_prob", self.bowel_truncation_prob)?;
        if !Spacing(self.spacing_mm).is_valid() {
            return Err(Error::config("spacing_mm", "must be finite and positive"));
        }
        if self.shape[0] < 24 || self.shape[1] < 16 || self.shape[2] < 16 {
            return Err(Error::config(
                "shape",
                format!("{:?} too small; need at least 24x16x16", self.shape),
            ));
        }
        if self.overannotation_slices[0] > self.overannotation_slices[1] {
            return Err(Error::config("overannotation_slices", "min exceeds max"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and non-negative"));
        }
        Ok(())
    }

    fn stream(&self, salt: u64, index: u64) -> ChaCha8Rng {
        crate::rng::stream(self.seed, salt, index)
    }
}

const SALT_GEOMETRY: u64 = 1;
const SALT_NOISE: u64 = 2;
const SALT_LABELS: u64 = 3;

#[derive(Clone, Copy, Debug)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

/// In-plane ellipse extruded over `z_range` (inclusive, fractional).
#[derive(Clone, Copy, Debug)]
struct Cylinder {
    center: [f64; 2],
    radii: [f64; 2],
    z_range: [f64; 2],
}

impl Cylinder {
    fn contains(&self, p: [f64; 3]) -> bool {
        p[0] >= self.z_range[0]
            && p[0] <= self.z_range[1]
            && ((p[1] - self.center[0]) / self.radii[0]).powi(2)
                + ((p[2] - self.center[1]) / self.radii[1]).powi(2)
                <= 1.0
    }
}

struct Anatomy {
    body: Cylinder,
    hips: [Ellipsoid; 2],
    bladder: Ellipsoid,
    rectum: Cylinder,
    /// Bowel-bag region; its `z_range[1]` is the anatomical cranial border.
    bowel: Cylinder,
}

fn draw_anatomy(shape: [usize; 3], rng: &mut ChaCha8Rng) -> Anatomy {
    let [z, y, x] = shape.map(|d| d as f64);
    let mut j = |scale: f64| rng.gen_range(-1.0..=1.0) * scale;
    let cy = y / 2.0 - 0.5;
    let cx = x / 2.0 - 0.5;

    let hip_z = 0.22 * z + j(0.02 * z);
    let hips = [0.24, 0.76].map(|fx| Ellipsoid {
        center: [hip_z, 0.55 * y, fx * x + j(0.02 * x)],
        radii: [0.12 * z, 0.13 * y, 0.11 * x],
    });

    let bscale = 1.0 + j(0.1);
    let bladder = Ellipsoid {
        center: [0.26 * z + j(0.02 * z), 0.36 * y + j(0.02 * y), cx + j(0.02 * x)],
        radii: [0.13 * z * bscale, 0.17 * y * bscale, 0.18 * x * bscale],
    };

    let rr = 0.11 * y.min(x) * (1.0 + j(0.1));
    let rectum = Cylinder {
        center: [0.70 * y + j(0.02 * y), cx + j(0.02 * x)],
        radii: [rr, rr],
        z_range: [0.04 * z, 0.36 * z + j(0.02 * z)],
    };

    // The bowel border sits at a fixed height above the hip tops.
    let border = (hip_z + 0.40 * z + j(1.0)).round();
    let bowel = Cylinder {
        center: [0.45 * y, cx],
        radii: [0.33 * y, 0.40 * x],
        z_range: [0.16 * z, border],
    };

    Anatomy {
        body: Cylinder {
            center: [cy, cx],
            radii: [0.42 * y + 0.5, 0.46 * x + 0.5],
            z_range: [f64::NEG_INFINITY, f64::INFINITY],
        },
        hips,
        bladder,
        rectum,
        bowel,
    }
}

/// Image and ground-truth class map of the abdominal part, no noise.
fn rasterize(shape: [usize; 3], a: &Anatomy) -> (Array3<f32>, Array3<u8>) {
    let mut image = Array3::from_elem(shape, HU_AIR);
    let mut gt = Array3::<u8>::zeros(shape);
    // Upper-abdominal tissue fills the bowel cross-section above the border.
    let column = Cylinder {
        z_range: [f64::NEG_INFINITY, f64::INFINITY],
        ..a.bowel
    };
    Zip::indexed(&mut image)
        .and(&mut gt)
        .for_each(|(z, y, x), v, c| {
            let p = [z as f64, y as f64, x as f64];
            if !a.body.contains(p) {
                return;
            }
            *v = HU_FAT;
            if a.hips.iter().any(|h| h.contains(p)) {
                *v = HU_BONE;
                *c = OrganId::Hips.class_index();
            } else if a.bladder.contains(p) {
                *v = HU_BLADDER;
                *c = OrganId::Bladder.class_index();
            } else if a.rectum.contains(p) {
                *v = HU_RECTUM;
                *c = OrganId::Rectum.class_index();
            } else if a.bowel.contains(p) {
                *v = HU_BOWEL;
                *c = OrganId::BowelBag.class_index();
            } else if p[0] > a.bowel.z_range[1] && column.contains(p) {
                *v = HU_UPPER_ABDOMEN;
            }
        });
    (image, gt)
}

fn chest_slices(n: usize, shape: [usize; 3], body: &Cylinder) -> Array3<f32> {
    let [_, y, x] = shape.map(|d| d as f64);
    let lungs = [0.3, 0.7].map(|fx| Cylinder {
        center: [0.45 * y, fx * x],
        radii: [0.25 * y, 0.15 * x],
        z_range: [f64::NEG_INFINITY, f64::INFINITY],
    });
    Array3::from_shape_fn([n, shape[1], shape[2]], |(z, yy, xx)| {
        let p = [z as f64, yy as f64, xx as f64];
        if !body.contains(p) {
            HU_AIR
        } else if lungs.iter().any(|l| l.contains(p)) {
            HU_LUNG
        } else {
            HU_FAT
        }
    })
}

fn top_slice(mask: &Mask) -> Option<usize> {
    (0..mask.dim().0)
        .rev()
        .find(|&z| mask.slice(s![z, .., ..]).iter().any(|&m| m))
}

pub fn phantom_id(index: u64) -> String {
    format!("phantom_{index:05}")
}

/// Generates the phantom with the given index.
pub fn generate_phantom(config: &PhantomConfig, index: u64) -> Result<ScanRecord> {
    config.validate()?;
    let abdomen = config.shape;
    let anatomy = draw_anatomy(abdomen, &mut config.stream(SALT_GEOMETRY, index));
    let (abdomen_image, abdomen_gt) = rasterize(abdomen, &anatomy);

    for organ in OrganId::ALL {
        if !abdomen_gt.iter().any(|&c| c == organ.class_index()) {
            return Err(Error::config(
                "shape",
                format!("{:?} too small: {organ} has no voxels", config.shape),
            ));
        }
    }

    let mut lrng = config.stream(SALT_LABELS, index);
    let available: Vec<bool> = OrganId::ALL
        .iter()
        .map(|&o| lrng.gen_bool(config.availability_probs.get(o)))
        .collect();
    let over = if lrng.gen_bool(config.bowel_overannotation_prob) {
        let [lo, hi] = config.overannotation_slices;
        lrng.gen_range(lo..=hi)
    } else {
        0
    };
    let chest = if config.cranial_extent_jitter > 0 && lrng.gen_bool(config.chest_prob) {
        lrng.gen_range(1..=config.cranial_extent_jitter)
    } else {
        0
    };
    let truncate = if lrng.gen_bool(config.bowel_truncation_prob) {
        lrng.gen_range(1..=4usize)
    } else {
        0
    };

    let depth = abdomen[0] + chest;
    let shape = [depth, abdomen[1], abdomen[2]];
    let mut image = Array3::from_elem(shape, HU_FAT);
    image
        .slice_mut(s![..abdomen[0], .., ..])
        .assign(&abdomen_image);
    if chest > 0 {
        image
            .slice_mut(s![abdomen[0].., .., ..])
            .assign(&chest_slices(chest, abdomen, &anatomy.body));
    }
    let mut gt = Array3::<u8>::zeros(shape);
    gt.slice_mut(s![..abdomen[0], .., ..]).assign(&abdomen_gt);

    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("validated sigma");
        let mut nrng = config.stream(SALT_NOISE, index);
        image
            .iter_mut()
            .for_each(|v| *v += normal.sample(&mut nrng) as f32);
    }

    let truth = LabelSet::from_class_map(&gt, [LabelSource::Clinical; 4]);
    let mut labels = truth.clone();

    let bowel = labels.mask_mut(OrganId::BowelBag);
    if over > 0 {
        // Extend the top bowel cross-section cranially.
        let border = top_slice(bowel).expect("bowel has voxels");
        let section = bowel.slice(s![border, .., ..]).to_owned();
        let end = (border + over).min(depth - 1);
        for z in border + 1..=end {
            bowel.slice_mut(s![z, .., ..]).assign(&section);
        }
    }
    if truncate > 0 {
        let hips_top = top_slice(truth.mask(OrganId::Hips)).expect("hips have voxels");
        let cut = hips_top.saturating_sub(truncate);
        bowel.slice_mut(s![cut + 1.., .., ..]).fill(false);
    }
    for (organ, &keep) in OrganId::ALL.iter().zip(&available) {
        if !keep {
            labels.hide(*organ);
        }
    }

    let mut record = ScanRecord::new(
        phantom_id(index),
        Volume::new(image, Spacing(config.spacing_mm), IntensityUnit::Hu),
        labels,
    );
    record.set_ground_truth(&gt);
    let meta = &mut record.meta;
    meta.insert("provenance".into(), "phantom".into());
    meta.insert("phantom.seed".into(), config.seed.to_string());
    meta.insert("phantom.index".into(), index.to_string());
    meta.insert("noise.overannotation_slices".into(), over.to_string());
    meta.insert("noise.chest_slices".into(), chest.to_string());
    meta.insert("noise.truncation_slices".into(), truncate.to_string());
    Ok(record)
}

/// True if the phantom generator injected any cleaning-relevant noise.
pub fn has_injected_noise(record: &ScanRecord) -> bool {
    ["noise.overannotation_slices", "noise.chest_slices", "noise.truncation_slices"]
        .iter()
        .any(|k| record.meta.get(*k).is_some_and(|v| v != "0"))
}

pub fn generate_records(config: &PhantomConfig, indices: std::ops::Range<u64>) -> Result<Vec<ScanRecord>> {
    indices.map(|i| generate_phantom(config, i)).collect()
}

/// Writes phantoms `0..n` under `out_dir` with a manifest.
pub fn generate_dataset(config: &PhantomConfig, n: usize, out_dir: &Path) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::config("n", "must be at least 1"));
    }
    let records = generate_records(config, 0..n as u64)?;
    data::write_dataset(&records, out_dir)
}
