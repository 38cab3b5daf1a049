//! Landmark-relative cleaning of scan extent and bowel-bag annotations.
//!
//! All distances are measured cranially from the most cranial hips voxel, in
//! millimetres, so thresholds carry over between spacings. Cleaning runs
//! crop, then bowel deletion, then the discard check on the post-deletion
//! mask.

use std::io::Write as _;
use std::path::Path;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest, Mask, OrganId, ScanRecord};
use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;

/// Serializes infinite thresholds as `null`.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

mod neg_inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        super::inf_as_null::serialize(v, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

/// Cleaning thresholds, in mm above the hip landmark. `null` in JSON means
/// no threshold.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CleaningThresholds {
    /// Slices further than this above the landmark are cropped.
    #[serde(with = "inf_as_null")]
    pub crop_above_mm: f64,
    /// Bowel-bag voxels further than this above the landmark are deleted.
    #[serde(with = "inf_as_null")]
    pub delete_bowel_above_mm: f64,
    /// An available bowel bag must reach at least this far, else the scan is
    /// discarded.
    #[serde(with = "neg_inf_as_null")]
    pub discard_below_mm: f64,
}

impl CleaningThresholds {
    /// No cropping, deletion or discarding.
    pub const NONE: CleaningThresholds = CleaningThresholds {
        crop_above_mm: f64::INFINITY,
        delete_bowel_above_mm: f64::INFINITY,
        discard_below_mm: f64::NEG_INFINITY,
    };

    pub fn validate(&self) -> Result<()> {
        if self.crop_above_mm.is_nan() || self.delete_bowel_above_mm.is_nan() || self.discard_below_mm.is_nan() {
            return Err(Error::config("thresholds", "NaN threshold"));
        }
        if !(self.crop_above_mm >= self.delete_bowel_above_mm) {
            return Err(Error::config("crop_above_mm", "must be >= delete_bowel_above_mm"));
        }
        if !(self.delete_bowel_above_mm >= self.discard_below_mm) {
            return Err(Error::config("delete_bowel_above_mm", "must be >= discard_below_mm"));
        }
        Ok(())
    }

    /// Thresholds matched to the phantom geometry. The hip top `t` lies in
    /// [0.32 z, 0.36 z] and the landmark voxel in {floor(t) - 1, floor(t)};
    /// the clean bowel border is round(t + 0.28 z +- 1), so its distance
    /// above the landmark stays below 0.28 z + 3.5 slices. The abdomen ends
    /// at slice z - 1, at most z - floor(0.32 z) slices above the landmark.
    /// Discarding requires the bowel bag to reach the landmark.
    pub fn for_phantoms(config: &PhantomConfig) -> Self {
        let z = config.shape[0] as f64;
        let sz = config.spacing_mm[0];
        let delete = (0.28 * z + 3.5).floor() * sz;
        let crop = (z - (0.32 * z).floor()) * sz;
        CleaningThresholds {
            crop_above_mm: crop.max(delete),
            delete_bowel_above_mm: delete,
            discard_below_mm: 0.0,
        }
    }
}

/// Landmark definition used for every histogram and threshold.
pub const LANDMARK_TAG: &str = "most cranial hips voxel";

fn top_slice(mask: &Mask) -> Option<usize> {
    (0..mask.dim().0)
        .rev()
        .find(|&z| mask.slice(s![z, .., ..]).iter().any(|&m| m))
}

/// Largest z index holding a hips voxel.
pub fn hip_cranial_landmark(record: &ScanRecord) -> Result<usize> {
    let unavailable = || Error::LandmarkUnavailable {
        id: record.id.clone(),
    };
    if !record.labels.is_available(OrganId::Hips) {
        return Err(unavailable());
    }
    top_slice(record.labels.mask(OrganId::Hips)).ok_or_else(unavailable)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtentHistogram {
    pub bin_width_mm: f64,
    /// Left edge of the first bin.
    pub origin_mm: f64,
    pub counts: Vec<usize>,
    pub landmark: String,
}

impl ExtentHistogram {
    fn from_distances(distances: &[f64], bin_width_mm: f64) -> Self {
        let mut h = ExtentHistogram {
            bin_width_mm,
            origin_mm: 0.0,
            counts: Vec::new(),
            landmark: LANDMARK_TAG.to_string(),
        };
        if distances.is_empty() {
            return h;
        }
        let bin = |d: f64| (d / bin_width_mm).floor() as i64;
        let lo = distances.iter().map(|&d| bin(d)).min().unwrap();
        let hi = distances.iter().map(|&d| bin(d)).max().unwrap();
        h.origin_mm = lo as f64 * bin_width_mm;
        h.counts = vec![0; (hi - lo + 1) as usize];
        for &d in distances {
            h.counts[(bin(d) - lo) as usize] += 1;
        }
        h
    }

    pub fn bin_left_edges(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.counts.len()).map(|i| self.origin_mm + i as f64 * self.bin_width_mm)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Count of the bin containing `mm`, zero outside the range.
    pub fn count_at(&self, mm: f64) -> usize {
        let i = ((mm - self.origin_mm) / self.bin_width_mm).floor();
        if i < 0.0 {
            return 0;
        }
        self.counts.get(i as usize).copied().unwrap_or(0)
    }

    /// CSV with header `bin_left_mm,count`, one row per bin.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "bin_left_mm,count").unwrap();
        for (edge, c) in self.bin_left_edges().zip(&self.counts) {
            writeln!(out, "{edge},{c}").unwrap();
        }
        data::write_atomic(path, &out)
    }
}

/// Landmark-relative scan-top and bowel-border distances in mm.
fn extent_distances(record: &ScanRecord) -> Result<(f64, Option<f64>)> {
    let landmark = hip_cranial_landmark(record)? as f64;
    let sz = record.spacing().z();
    let scan = (record.shape()[0] as f64 - 1.0 - landmark) * sz;
    let bowel = if record.labels.is_available(OrganId::BowelBag) {
        top_slice(record.labels.mask(OrganId::BowelBag)).map(|b| (b as f64 - landmark) * sz)
    } else {
        None
    };
    Ok((scan, bowel))
}

/// Histograms of the scan's cranial border and the bowel bag's cranial
/// border, relative to the hip landmark.
pub fn compute_extent_histograms(
    records: &[ScanRecord],
    bin_width_mm: f64,
) -> Result<(ExtentHistogram, ExtentHistogram)> {
    if records.is_empty() {
        return Err(Error::validation("manifest", "no records to histogram"));
    }
    if !(bin_width_mm > 0.0) {
        return Err(Error::config("bin_width_mm", "must be positive"));
    }
    let mut scan = Vec::new();
    let mut bowel = Vec::new();
    for r in records {
        let (s, b) = extent_distances(r)?;
        scan.push(s);
        bowel.extend(b);
    }
    Ok((
        ExtentHistogram::from_distances(&scan, bin_width_mm),
        ExtentHistogram::from_distances(&bowel, bin_width_mm),
    ))
}

pub fn compute_manifest_histograms(
    manifest: &DatasetManifest,
    bin_width_mm: f64,
) -> Result<(ExtentHistogram, ExtentHistogram)> {
    compute_extent_histograms(&manifest.load_all()?, bin_width_mm)
}

#[derive(Clone, Debug, PartialEq)]
pub enum CleanOutcome {
    Kept(Box<ScanRecord>),
    Discarded(String),
}

pub const DISCARD_REASON: &str = "bowel bag below pelvic window";
const AUDIT_KEY: &str = "clean.audit";

fn audit(record: &mut ScanRecord, entry: String) {
    let log = record.meta.entry(AUDIT_KEY.to_string()).or_default();
    if !log.is_empty() {
        log.push(';');
    }
    log.push_str(&entry);
}

/// Highest slice index whose distance above the landmark is within `mm`.
fn last_slice_within(landmark: usize, mm: f64, sz: f64, depth: usize) -> usize {
    if mm == f64::INFINITY {
        return depth - 1;
    }
    let k = (mm / sz + 1e-9).floor().max(0.0) as usize;
    (landmark + k).min(depth - 1)
}

/// Crops, deletes and discards according to `thresholds`.
pub fn apply_cleaning(record: &ScanRecord, thresholds: &CleaningThresholds) -> Result<CleanOutcome> {
    let landmark = hip_cranial_landmark(record)?;
    let sz = record.spacing().z();
    let mut out = record.clone();

    let depth = out.shape()[0];
    let keep_to = last_slice_within(landmark, thresholds.crop_above_mm, sz, depth);
    if keep_to + 1 < depth {
        out.crop_z(0..keep_to + 1)?;
        audit(&mut out, format!("crop:{}", depth - keep_to - 1));
    }

    if out.labels.is_available(OrganId::BowelBag) {
        let depth = out.shape()[0];
        let last = last_slice_within(landmark, thresholds.delete_bowel_above_mm, sz, depth);
        if last + 1 < depth {
            let mut above = out.labels.mask_mut(OrganId::BowelBag).slice_mut(s![last + 1.., .., ..]);
            let deleted = above.iter().filter(|&&m| m).count();
            if deleted > 0 {
                above.fill(false);
                audit(&mut out, format!("delete_bowel:{deleted}"));
            }
        }

        let reach = top_slice(out.labels.mask(OrganId::BowelBag))
            .map(|b| (b as f64 - landmark as f64) * sz)
            .unwrap_or(f64::NEG_INFINITY);
        if reach < thresholds.discard_below_mm {
            return Ok(CleanOutcome::Discarded(DISCARD_REASON.to_string()));
        }
    }
    Ok(CleanOutcome::Kept(Box::new(out)))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CleaningReport {
    pub kept: usize,
    pub discarded: usize,
    /// Kept records changed by cropping or deletion.
    pub modified: usize,
    pub slices_cropped: usize,
    pub voxels_deleted: usize,
    pub discarded_ids: Vec<(String, String)>,
    /// Records that could not be cleaned, e.g. no hips annotation.
    pub failures: Vec<(String, String)>,
}

fn audit_totals(before: &ScanRecord, after: &ScanRecord) -> (usize, usize) {
    let cropped = before.shape()[0] - after.shape()[0];
    let deleted = data::count(before.labels.mask(OrganId::BowelBag))
        - data::count(after.labels.mask(OrganId::BowelBag))
        - {
            // bowel voxels removed along with cropped slices are not deletions
            let depth = after.shape()[0];
            before
                .labels
                .mask(OrganId::BowelBag)
                .slice(s![depth.., .., ..])
                .iter()
                .filter(|&&m| m)
                .count()
        };
    (cropped, deleted)
}

/// Cleans every record in memory. Per-record failures are reported, not
/// fatal; failed records are left out of the output.
pub fn clean_records(records: &[ScanRecord], thresholds: &CleaningThresholds) -> Result<(Vec<ScanRecord>, CleaningReport)> {
    thresholds.validate()?;
    let mut report = CleaningReport::default();
    let mut kept = Vec::new();
    for r in records {
        match apply_cleaning(r, thresholds) {
            Ok(CleanOutcome::Kept(c)) => {
                let (cropped, deleted) = audit_totals(r, &c);
                report.kept += 1;
                report.slices_cropped += cropped;
                report.voxels_deleted += deleted;
                if cropped > 0 || deleted > 0 {
                    report.modified += 1;
                }
                kept.push(*c);
            }
            Ok(CleanOutcome::Discarded(reason)) => {
                report.discarded += 1;
                report.discarded_ids.push((r.id.clone(), reason));
            }
            Err(e) => report.failures.push((r.id.clone(), e.to_string())),
        }
    }
    Ok((kept, report))
}

/// Cleans a dataset on disk, writing kept records and a manifest to `out_dir`.
pub fn clean_dataset(
    manifest: &DatasetManifest,
    thresholds: &CleaningThresholds,
    out_dir: &Path,
) -> Result<(DatasetManifest, CleaningReport)> {
    let records = manifest.load_all()?;
    let (kept, report) = clean_records(&records, thresholds)?;
    let out = data::write_dataset(&kept, out_dir)?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IntensityUnit, LabelSet, LabelSource, Spacing, Volume};
    use ndarray::Array3;

    /// 80-slice record, hips on z in [10, 20], bowel from 15 to `bowel_top`.
    fn record(bowel_top: usize) -> ScanRecord {
        let shape = [80, 6, 6];
        let image = Volume::new(
            Array3::from_shape_fn(shape, |(z, y, x)| (z * 36 + y * 6 + x) as f32),
            Spacing([2.5, 2.0, 2.0]),
            IntensityUnit::Normalized,
        );
        let mut labels = LabelSet::empty(shape);
        labels.set(
            OrganId::Hips,
            Mask::from_shape_fn(shape, |(z, _, x)| (10..=20).contains(&z) && x == 0),
            LabelSource::Clinical,
        );
        labels.set(
            OrganId::BowelBag,
            Mask::from_shape_fn(shape, |(z, y, x)| (15..=bowel_top).contains(&z) && y < 3 && x > 0),
            LabelSource::Clinical,
        );
        let mut r = ScanRecord::new("r", image, labels);
        r.image.data.mapv_inplace(|v| v / 3000.0);
        r
    }

    #[test]
    fn landmark_is_top_hips_slice() {
        assert_eq!(hip_cranial_landmark(&record(30)).unwrap(), 20);
        let mut r = record(30);
        r.labels.masks[OrganId::Hips.slot()] = Mask::from_shape_fn([80, 6, 6], |(z, y, x)| (z, y, x) == (5, 1, 1));
        assert_eq!(hip_cranial_landmark(&r).unwrap(), 5);
        r.labels.hide(OrganId::Hips);
        assert!(matches!(hip_cranial_landmark(&r), Err(Error::LandmarkUnavailable { .. })));
    }

    #[test]
    fn scan_histogram_bins_distance() {
        // landmark 20, top slice 60, 2.5 mm -> 100 mm
        let mut r = record(30);
        r.crop_z(0..61).unwrap();
        let (scan, bowel) = compute_extent_histograms(&[r.clone()], 10.0).unwrap();
        assert_eq!(scan.total(), 1);
        assert_eq!(scan.count_at(100.0), 1);
        assert_eq!(bowel.count_at(25.0), 1);

        let mut no_bowel = r.clone();
        no_bowel.labels.hide(OrganId::BowelBag);
        let (scan, bowel) = compute_extent_histograms(&[r.clone(), no_bowel], 10.0).unwrap();
        assert_eq!((scan.total(), bowel.total()), (2, 1));

        let (s1, b1) = compute_extent_histograms(&[r.clone()], 10.0).unwrap();
        let (s2, b2) = compute_extent_histograms(&[r.clone(), r], 10.0).unwrap();
        assert_eq!(s2.counts, s1.counts.iter().map(|c| 2 * c).collect::<Vec<_>>());
        assert_eq!(b2.counts, b1.counts.iter().map(|c| 2 * c).collect::<Vec<_>>());
        assert!(compute_extent_histograms(&[], 10.0).is_err());
    }

    #[test]
    fn loose_thresholds_keep_record_unchanged() {
        let r = record(30);
        let t = CleaningThresholds {
            crop_above_mm: 200.0,
            delete_bowel_above_mm: 100.0,
            discard_below_mm: 0.0,
        };
        assert_eq!(apply_cleaning(&r, &t).unwrap(), CleanOutcome::Kept(Box::new(r)));
    }

    #[test]
    fn bowel_overhang_is_deleted() {
        // bowel top at landmark + 20 slices = 50 mm; delete above 25 mm (10 slices)
        let r = record(40);
        let t = CleaningThresholds {
            crop_above_mm: f64::INFINITY,
            delete_bowel_above_mm: 25.0,
            discard_below_mm: 0.0,
        };
        let CleanOutcome::Kept(c) = apply_cleaning(&r, &t).unwrap() else {
            panic!("discarded")
        };
        // slices 31..=40, 3 x 5 voxels each
        let dropped = data::count(r.labels.mask(OrganId::BowelBag)) - data::count(c.labels.mask(OrganId::BowelBag));
        assert_eq!(dropped, 10 * 15);
        assert_eq!(c.meta[AUDIT_KEY], "delete_bowel:150");
        assert_eq!(c.image, r.image);
        assert_eq!(c.labels.mask(OrganId::Hips), r.labels.mask(OrganId::Hips));
    }

    #[test]
    fn short_bowel_is_discarded() {
        // bowel top 4 slices (10 mm) below the landmark
        let r = record(16);
        let t = CleaningThresholds {
            crop_above_mm: f64::INFINITY,
            delete_bowel_above_mm: f64::INFINITY,
            discard_below_mm: 0.0,
        };
        assert_eq!(
            apply_cleaning(&r, &t).unwrap(),
            CleanOutcome::Discarded(DISCARD_REASON.to_string())
        );
        let mut unavailable = r;
        unavailable.labels.hide(OrganId::BowelBag);
        assert!(matches!(apply_cleaning(&unavailable, &t).unwrap(), CleanOutcome::Kept(_)));
    }

    #[test]
    fn cropping_respects_landmark_and_is_idempotent() {
        let r = record(40);
        let t = CleaningThresholds {
            crop_above_mm: 50.0,
            delete_bowel_above_mm: 25.0,
            discard_below_mm: 0.0,
        };
        let CleanOutcome::Kept(once) = apply_cleaning(&r, &t).unwrap() else {
            panic!()
        };
        assert_eq!(once.shape()[0], 41);
        assert_eq!(once.image.data, r.image.data.slice(s![0..41, .., ..]));
        let CleanOutcome::Kept(twice) = apply_cleaning(&once, &t).unwrap() else {
            panic!()
        };
        assert_eq!(twice, once);

        // even a negative crop threshold never removes the landmark slice
        let tight = CleaningThresholds {
            crop_above_mm: -10.0,
            delete_bowel_above_mm: -10.0,
            discard_below_mm: -10.0,
        };
        let CleanOutcome::Kept(c) = apply_cleaning(&r, &tight).unwrap() else {
            panic!()
        };
        assert_eq!(c.shape()[0], 21);
    }

    #[test]
    fn clean_records_reports_counts() {
        let mut no_hips = record(30);
        no_hips.id = "no_hips".into();
        no_hips.labels.hide(OrganId::Hips);
        let records = vec![record(40), record(16), no_hips];
        let t = CleaningThresholds {
            crop_above_mm: 50.0,
            delete_bowel_above_mm: 25.0,
            discard_below_mm: 0.0,
        };
        let (kept, report) = clean_records(&records, &t).unwrap();
        assert_eq!(kept.len(), 1);
        assert_eq!((report.kept, report.discarded, report.modified), (1, 1, 1));
        assert_eq!(report.slices_cropped, 39);
        assert_eq!(report.voxels_deleted, 150);
        assert_eq!(report.failures.len(), 1);

        let (again, report2) = clean_records(&kept, &t).unwrap();
        assert_eq!(again, kept);
        assert_eq!(report2.modified, 0);

        let (same, none) = clean_records(&records[..2], &CleaningThresholds::NONE).unwrap();
        assert_eq!(same, records[..2]);
        assert_eq!((none.modified, none.discarded), (0, 0));
    }

    #[test]
    fn phantom_thresholds_separate_clean_from_noisy() {
        use crate::phantom::{generate_records, PhantomConfig};
        let mut c = PhantomConfig::clean([48, 24, 24], 11);
        c.noise_sigma = 0.0;
        c.bowel_overannotation_prob = 0.5;
        c.bowel_truncation_prob = 0.1;
        c.chest_prob = 0.5;
        let t = CleaningThresholds::for_phantoms(&c);
        t.validate().unwrap();
        for r in generate_records(&c, 0..60).unwrap() {
            let over: usize = r.meta["noise.overannotation_slices"].parse().unwrap();
            let cut: usize = r.meta["noise.truncation_slices"].parse().unwrap();
            match apply_cleaning(&r, &t).unwrap() {
                CleanOutcome::Discarded(_) => assert!(cut > 0, "{}", r.id),
                CleanOutcome::Kept(k) => {
                    assert_eq!(cut, 0, "{}", r.id);
                    // the true bowel survives; only overhang is removed
                    let gt = k.ground_truth().unwrap().unwrap();
                    let truth = gt.mapv(|c| c == OrganId::BowelBag.class_index());
                    let kept = k.labels.mask(OrganId::BowelBag);
                    assert!(ndarray::Zip::from(&truth).and(kept).all(|&t, &m| !t || m), "{}", r.id);
                    // chest is cut to at most a few slices, the abdomen never
                    assert!((48..=51).contains(&k.shape()[0]), "{} {}", r.id, k.shape()[0]);
                    let chest: usize = r.meta["noise.chest_slices"].parse().unwrap();
                    if over == 0 && chest == 0 {
                        assert!(!k.meta.contains_key(AUDIT_KEY), "{}", r.id);
                    }
                    assert!(data::count(kept) < data::count(r.labels.mask(OrganId::BowelBag)) || over == 0);
                }
            }
        }
    }

    #[test]
    fn threshold_json_uses_null_for_infinity() {
        let json = serde_json::to_string(&CleaningThresholds::NONE).unwrap();
        assert_eq!(
            json,
            r#"{"crop_above_mm":null,"delete_bowel_above_mm":null,"discard_below_mm":null}"#
        );
        let back: CleaningThresholds = serde_json::from_str(&json).unwrap();
        assert_eq!(back, CleaningThresholds::NONE);
        let bad = CleaningThresholds {
            crop_above_mm: 10.0,
            delete_bowel_above_mm: 20.0,
            discard_below_mm: 0.0,
        };
        assert!(bad.validate().is_err());
    }
}
