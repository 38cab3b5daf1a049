//! Label standardization, overlap removal, resampling and HU windowing.

use ndarray::{Array3, Zip};

use crate::data::{dims, IntensityUnit, LabelSet, LabelSource, Mask, OrganId, ScanRecord, Spacing, Volume};
use crate::error::{Error, Result};

/// Isotropic target spacing in millimetres.
pub const TARGET_SPACING_MM: f64 = 2.5;
pub const WINDOW_LEVEL: f32 = 40.0;
pub const WINDOW_WIDTH: f32 = 400.0;

/// A named mask as found in the source data, before standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLabelEntry {
    pub name: String,
    pub mask: Mask,
}

/// A scan with unstandardized label names.
#[derive(Clone, Debug, PartialEq)]
pub struct RawScan {
    pub id: String,
    pub image: Volume,
    pub labels: Vec<RawLabelEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardized {
    pub labels: LabelSet,
    /// Names that matched no organ, in input order.
    pub unmatched: Vec<String>,
}

fn normalize_name(name: &str) -> String {
    name.chars()
        .filter(|c| !matches!(c, '_' | '-' | ' ' | '.'))
        .flat_map(char::to_lowercase)
        .collect()
}

/// Maps a clinical structure name onto an organ. Left and right hips map to
/// the merged hips class.
pub fn match_organ(name: &str) -> Option<OrganId> {
    match normalize_name(name).as_str() {
        "bowel" | "bowelbag" | "bowelbags" => Some(OrganId::BowelBag),
        "bladder" | "urinarybladder" => Some(OrganId::Bladder),
        "rectum" => Some(OrganId::Rectum),
        "hip" | "hips" | "hipl" | "hipr" | "hipleft" | "hipright" | "lefthip" | "righthip"
        | "lhip" | "rhip" => Some(OrganId::Hips),
        _ => None,
    }
}

/// Builds a [`LabelSet`] from raw named masks. Several entries for the same
/// organ (e.g. left and right hip) are OR-combined; unmatched names are
/// dropped and returned.
pub fn standardize_labels(shape: [usize; 3], entries: &[RawLabelEntry]) -> Result<Standardized> {
    let mut labels = LabelSet::empty(shape);
    let mut unmatched = Vec::new();
    for entry in entries {
        if dims(&entry.mask) != shape {
            return Err(Error::Shape(format!(
                "label `{}` has shape {:?}, expected {shape:?}",
                entry.name,
                entry.mask.dim()
            )));
        }
        let Some(organ) = match_organ(&entry.name) else {
            log::warn!("unmatched: {}", entry.name);
            unmatched.push(entry.name.clone());
            continue;
        };
        let target = labels.mask_mut(organ);
        Zip::from(target).and(&entry.mask).for_each(|t, &m| *t |= m);
        labels.sources[organ.slot()] = LabelSource::Clinical;
    }
    Ok(Standardized { labels, unmatched })
}

/// Removes bladder and rectum voxels from the bowel bag. Unavailable organs
/// contribute nothing.
pub fn resolve_overlap(mut labels: LabelSet) -> LabelSet {
    for organ in [OrganId::Bladder, OrganId::Rectum] {
        if !labels.is_available(organ) {
            continue;
        }
        let [bowel, other] = pick_two(&mut labels.masks, OrganId::BowelBag, organ);
        Zip::from(bowel).and(&*other).for_each(|b, &o| *b &= !o);
    }
    labels
}

fn pick_two(masks: &mut [Mask; 4], a: OrganId, b: OrganId) -> [&mut Mask; 2] {
    let (i, j) = (a.slot(), b.slot());
    assert!(i < j);
    let (lo, hi) = masks.split_at_mut(j);
    [&mut lo[i], &mut hi[0]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Output shape when resampling `shape` from `from` to `to` spacing.
pub fn resampled_shape(shape: [usize; 3], from: Spacing, to: Spacing) -> [usize; 3] {
    std::array::from_fn(|a| ((shape[a] as f64 * from.0[a] / to.0[a]).round() as usize).max(1))
}

/// Source coordinate of each output voxel center along one axis, clamped to
/// the input extent.
fn axis_coords(n_out: usize, n_in: usize, from: f64, to: f64) -> Vec<f64> {
    (0..n_out)
        .map(|i| {
            let c = (i as f64 + 0.5) * to / from - 0.5;
            c.clamp(0.0, (n_in - 1) as f64)
        })
        .collect()
}

/// Linear interpolation weights `(i0, i1, t)` for a clamped coordinate.
#[inline]
fn lerp_index(c: f64, n: usize) -> (usize, usize, f64) {
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64)
}

fn sample_nearest<T: Copy>(data: &Array3<T>, p: [f64; 3]) -> T {
    data[[p[0].round() as usize, p[1].round() as usize, p[2].round() as usize]]
}

/// Trilinear sample at a continuous, in-range voxel coordinate.
pub fn sample_trilinear(data: &Array3<f32>, p: [f64; 3]) -> f32 {
    let [nz, ny, nx] = dims(data);
    let (z0, z1, tz) = lerp_index(p[0], nz);
    let (y0, y1, ty) = lerp_index(p[1], ny);
    let (x0, x1, tx) = lerp_index(p[2], nx);
    let v = |z, y, x| data[[z, y, x]] as f64;
    let c00 = v(z0, y0, x0) * (1.0 - tx) + v(z0, y0, x1) * tx;
    let c01 = v(z0, y1, x0) * (1.0 - tx) + v(z0, y1, x1) * tx;
    let c10 = v(z1, y0, x0) * (1.0 - tx) + v(z1, y0, x1) * tx;
    let c11 = v(z1, y1, x0) * (1.0 - tx) + v(z1, y1, x1) * tx;
    let c0 = c00 * (1.0 - ty) + c01 * ty;
    let c1 = c10 * (1.0 - ty) + c11 * ty;
    (c0 * (1.0 - tz) + c1 * tz) as f32
}

fn resample_grid<T: Copy>(
    data: &Array3<T>,
    from: Spacing,
    to: Spacing,
    sample: impl Fn(&Array3<T>, [f64; 3]) -> T,
) -> Array3<T> {
    let shape_in = dims(data);
    let shape_out = resampled_shape(shape_in, from, to);
    let coords: [Vec<f64>; 3] =
        std::array::from_fn(|a| axis_coords(shape_out[a], shape_in[a], from.0[a], to.0[a]));
    Array3::from_shape_fn(shape_out, |(z, y, x)| {
        sample(data, [coords[0][z], coords[1][y], coords[2][x]])
    })
}

fn check_spacing(target: Spacing) -> Result<()> {
    if target.is_valid() {
        Ok(())
    } else {
        Err(Error::config("target_spacing", format!("{:?} must be positive", target.0)))
    }
}

/// Resamples with voxel-center alignment and edge clamping. Identity when
/// the spacing already matches.
pub fn resample(volume: &Volume, target: Spacing, mode: Interpolation) -> Result<Volume> {
    check_spacing(target)?;
    if volume.spacing == target {
        return Ok(volume.clone());
    }
    let data = match mode {
        Interpolation::Trilinear => resample_grid(&volume.data, volume.spacing, target, sample_trilinear),
        Interpolation::Nearest => resample_grid(&volume.data, volume.spacing, target, sample_nearest),
    };
    Ok(Volume::new(data, target, volume.unit))
}

/// Nearest-neighbour resampling of a binary mask.
pub fn resample_mask(mask: &Mask, from: Spacing, target: Spacing) -> Result<Mask> {
    check_spacing(target)?;
    if from == target {
        return Ok(mask.clone());
    }
    Ok(resample_grid(mask, from, target, sample_nearest))
}

/// Maps HU to `[0, 1]` with a clamped linear window.
pub fn window_hu(volume: &Volume, level: f32, width: f32) -> Result<Volume> {
    if !(width > 0.0) {
        return Err(Error::config("width", format!("window width {width} must be positive")));
    }
    if volume.unit != IntensityUnit::Hu {
        return Err(Error::validation("intensity_unit", "windowing expects HU input"));
    }
    let lo = level - width / 2.0;
    let data = volume.data.mapv(|hu| ((hu - lo) / width).clamp(0.0, 1.0));
    Ok(Volume::new(data, volume.spacing, IntensityUnit::Normalized))
}

/// Standardizes raw labels, then runs [`preprocess_record`].
pub fn preprocess_raw(raw: &RawScan) -> Result<ScanRecord> {
    let std = standardize_labels(raw.image.shape(), &raw.labels)?;
    let mut record = ScanRecord::new(raw.id.clone(), raw.image.clone(), std.labels);
    if !std.unmatched.is_empty() {
        record
            .meta
            .insert("preprocess.unmatched".into(), std.unmatched.join(","));
    }
    preprocess_record(&record)
}

/// Overlap removal, resampling to 2.5 mm, and windowing. A record that is
/// already normalized at the target spacing passes through unchanged.
pub fn preprocess_record(record: &ScanRecord) -> Result<ScanRecord> {
    let target = Spacing::isotropic(TARGET_SPACING_MM);
    let mut out = record.clone();
    out.labels = resolve_overlap(out.labels);
    if record.image.unit == IntensityUnit::Normalized && record.spacing() == target {
        return Ok(out);
    }

    let mut steps = vec!["resolve_overlap"];
    let from = record.spacing();
    if from != target {
        out.image = resample(&out.image, target, Interpolation::Trilinear)?;
        for m in out.labels.masks.iter_mut() {
            *m = resample_mask(m, from, target)?;
        }
        if let Some(u) = &out.uncertainty {
            let v = Volume::new(u.clone(), from, IntensityUnit::Normalized);
            out.uncertainty = Some(resample(&v, target, Interpolation::Trilinear)?.data);
        }
        if let Some(gt) = record.ground_truth().transpose()? {
            out.set_ground_truth(&resample_grid(&gt, from, target, sample_nearest));
        }
        steps.push("resample");
    }
    if out.image.unit == IntensityUnit::Hu {
        out.image = window_hu(&out.image, WINDOW_LEVEL, WINDOW_WIDTH)?;
        steps.push("window");
    }
    out.meta.insert("preprocess.steps".into(), steps.join(","));
    Ok(out)
}
