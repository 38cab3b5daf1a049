//! Sliding-window inference and annotation imputation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetManifest, LabelSource, ManifestEntry, OrganId, ScanRecord};
use crate::error::{Error, Result};
use crate::metrics::Predictor;
use crate::nn::{entropy_map, forward, mean_prediction, Segmenter, Tensor};

/// Meta key listing the organs filled in by imputation.
pub const IMPUTED_KEY: &str = "impute.organs";

/// Z-window geometry for whole-volume inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingWindow {
    pub patch_depth: usize,
    /// Slices shared by consecutive windows.
    pub overlap: usize,
}

impl Default for SlidingWindow {
    fn default() -> Self {
        SlidingWindow {
            patch_depth: 32,
            overlap: 16,
        }
    }
}

impl SlidingWindow {
    pub fn validate(&self) -> Result<()> {
        if self.patch_depth == 0 {
            return Err(Error::config("patch_depth", "must be positive"));
        }
        if self.overlap >= self.patch_depth {
            return Err(Error::config("overlap", "must be smaller than patch_depth"));
        }
        Ok(())
    }

    /// First slice of every window over a volume of `depth` slices. The
    /// last window is aligned with the end of the volume.
    pub fn starts(&self, depth: usize) -> Vec<usize> {
        if depth <= self.patch_depth {
            return vec![0];
        }
        let stride = self.patch_depth - self.overlap;
        let last = depth - self.patch_depth;
        let mut starts: Vec<usize> = (0..last).step_by(stride).collect();
        starts.push(last);
        starts
    }
}

/// Stitched mean class probabilities and their entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumePrediction {
    /// Mean over heads, then over overlapping windows.
    pub mean_probs: Tensor,
    pub uncertainty: Array3<f32>,
}

impl VolumePrediction {
    /// Most probable class per voxel; ties go to the lower class index.
    pub fn class_map(&self) -> Array3<u8> {
        let p = &self.mean_probs;
        let n = p.voxels();
        let [z, y, x] = p.dims;
        Array3::from_shape_fn((z, y, x), |(a, b, d)| {
            let v = (a * y + b) * x + d;
            let mut best = 0;
            for c in 1..p.channels {
                if p.data[c * n + v] > p.data[best * n + v] {
                    best = c;
                }
            }
            best as u8
        })
    }
}

/// Runs every head over z windows of the image and averages overlapping
/// probabilities with equal weight. In-plane axes are zero-padded at the
/// far end up to the model's size divisor, and volumes thinner than one
/// window are zero-padded symmetrically; padding is stripped afterwards.
pub fn predict_full_volume(model: &dyn Segmenter, image: &Array3<f32>, window: &SlidingWindow) -> Result<VolumePrediction> {
    window.validate()?;
    let config = model.config();
    let div = config.divisor();
    if !window.patch_depth.is_multiple_of(div) {
        return Err(Error::config(
            "patch_depth",
            format!("{} is not a multiple of {div}", window.patch_depth),
        ));
    }
    let [nz, ny, nx] = data::dims(image);
    if nz == 0 || ny == 0 || nx == 0 {
        return Err(Error::Shape(format!("empty image {:?}", [nz, ny, nx])));
    }
    let round_up = |n: usize| n.div_ceil(div) * div;
    let (py, px) = (round_up(ny), round_up(nx));
    let depth = nz.max(window.patch_depth);
    let z_pad = (depth - nz) / 2;
    let mut padded = Array3::<f32>::zeros((depth, py, px));
    padded
        .slice_mut(s![z_pad..z_pad + nz, ..ny, ..nx])
        .assign(image);

    let classes = config.num_classes;
    let plane = py * px;
    let mut sum = vec![0.0f64; classes * depth * plane];
    let mut hits = vec![0u32; depth];
    for z0 in window.starts(depth) {
        let patch = padded.slice(s![z0..z0 + window.patch_depth, .., ..]);
        let input = Tensor::from_vec(1, [window.patch_depth, py, px], patch.iter().copied().collect());
        let mean = mean_prediction(&forward(model, &input)?);
        let n = mean.voxels();
        for c in 0..classes {
            let dst = &mut sum[c * depth * plane + z0 * plane..][..n];
            for (d, &p) in dst.iter_mut().zip(&mean.data[c * n..(c + 1) * n]) {
                *d += p as f64;
            }
        }
        for h in &mut hits[z0..z0 + window.patch_depth] {
            *h += 1;
        }
    }

    let mut mean_probs = Tensor::zeros(classes, [nz, ny, nx]);
    let n = nz * ny * nx;
    for c in 0..classes {
        for z in 0..nz {
            let zp = z + z_pad;
            for y in 0..ny {
                for x in 0..nx {
                    let src = c * depth * plane + zp * plane + y * px + x;
                    mean_probs.data[c * n + (z * ny + y) * nx + x] = (sum[src] / hits[zp] as f64) as f32;
                }
            }
        }
    }
    let uncertainty = entropy_map(&mean_probs).mapv(|u| u as f32);
    Ok(VolumePrediction { mean_probs, uncertainty })
}

/// Fills every unavailable organ from the predicted class map and attaches
/// the uncertainty map.
///
/// Imputed masks exclude the union of available masks, so clinical labels
/// always win. Uncertainty is zero on clinically labelled voxels, and
/// everywhere when the record was already fully annotated.
pub fn impute_record(record: &ScanRecord, prediction: &VolumePrediction) -> Result<ScanRecord> {
    let shape = record.shape();
    if prediction.mean_probs.dims != shape || data::dims(&prediction.uncertainty) != shape {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match record {} of shape {shape:?}",
            prediction.mean_probs.dims, record.id
        )));
    }
    let mut out = record.clone();
    if record.labels.is_fully_annotated() {
        out.uncertainty = Some(Array3::zeros(shape));
        return Ok(out);
    }
    let available = record.labels.available_union();
    let class_map = prediction.class_map();
    let missing: Vec<OrganId> = OrganId::ALL
        .into_iter()
        .filter(|&o| !record.labels.is_available(o))
        .collect();
    for &organ in &missing {
        let class = organ.class_index();
        let mut mask = data::Mask::from_elem(shape, false);
        Zip::from(&mut mask)
            .and(&class_map)
            .and(&available)
            .for_each(|m, &c, &a| *m = c == class && !a);
        out.labels.set(organ, mask, LabelSource::Imputed);
    }
    let mut u = prediction.uncertainty.clone();
    Zip::from(&mut u).and(&available).for_each(|u, &a| {
        if a {
            *u = 0.0;
        }
    });
    out.uncertainty = Some(u);
    let names: Vec<&str> = missing.iter().map(|o| o.name()).collect();
    out.meta.insert(IMPUTED_KEY.to_string(), names.join(","));
    Ok(out)
}

/// Sliding-window inference plus imputation for one record.
pub fn impute_with_model(model: &dyn Segmenter, record: &ScanRecord, window: &SlidingWindow) -> Result<ScanRecord> {
    if record.labels.is_fully_annotated() {
        let mut out = record.clone();
        out.uncertainty = Some(Array3::zeros(record.shape()));
        return Ok(out);
    }
    let prediction = predict_full_volume(model, &record.image.data, window)?;
    impute_record(record, &prediction)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputeReport {
    pub records: usize,
    /// Records that had at least one organ filled in.
    pub imputed_records: usize,
    /// Number of records in which each organ was imputed.
    pub imputed_organs: BTreeMap<String, usize>,
}

impl ImputeReport {
    fn add(&mut self, before: &ScanRecord) {
        self.records += 1;
        let missing: Vec<_> = OrganId::ALL
            .into_iter()
            .filter(|&o| !before.labels.is_available(o))
            .collect();
        if !missing.is_empty() {
            self.imputed_records += 1;
        }
        for o in missing {
            *self.imputed_organs.entry(o.name().to_string()).or_default() += 1;
        }
    }
}

pub fn impute_records(model: &dyn Segmenter, records: &[ScanRecord], window: &SlidingWindow) -> Result<(Vec<ScanRecord>, ImputeReport)> {
    let mut report = ImputeReport::default();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        out.push(impute_with_model(model, r, window)?);
        report.add(r);
    }
    Ok((out, report))
}

/// Imputes every record of `manifest` and writes the results, with their
/// uncertainty maps, as a new dataset under `out_dir`.
pub fn impute_dataset(
    model: &dyn Segmenter,
    manifest: &DatasetManifest,
    window: &SlidingWindow,
    out_dir: &Path,
) -> Result<(DatasetManifest, ImputeReport)> {
    let mut report = ImputeReport::default();
    let mut entries = Vec::with_capacity(manifest.len());
    for entry in &manifest.records {
        let record = manifest.load_record(entry)?;
        let imputed = impute_with_model(model, &record, window)?;
        data::write_container(&imputed, &out_dir.join(&record.id))?;
        report.add(&record);
        entries.push(ManifestEntry {
            id: record.id.clone(),
            path: PathBuf::from(&record.id),
        });
    }
    let mut out = DatasetManifest::new(out_dir, entries);
    out.split_tags = manifest.split_tags.clone();
    out.save()?;
    Ok((out, report))
}

/// A segmenter evaluated with sliding-window inference.
pub struct WindowedPredictor<'a> {
    pub model: &'a dyn Segmenter,
    pub window: SlidingWindow,
}

impl Predictor for WindowedPredictor<'_> {
    fn predict_class_map(&self, record: &ScanRecord) -> Result<Array3<u8>> {
        Ok(predict_full_volume(self.model, &record.image.data, &self.window)?.class_map())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{IntensityUnit, LabelSet, Mask, Spacing, Volume};
    use crate::nn::{build_model, ModelConfig};

    fn tiny_model() -> crate::nn::KHeadModel {
        let config = ModelConfig {
            k: 3,
            levels: 2,
            base_channels: 2,
            num_classes: 5,
            head_depth: 1,
        };
        build_model(&config, 5).unwrap()
    }

    fn image(shape: [usize; 3]) -> Array3<f32> {
        Array3::from_shape_fn(shape, |(z, y, x)| ((z * 7 + y * 3 + x * 5) % 11) as f32 / 11.0)
    }

    /// Probabilities from an explicit constant map.
    fn prediction_of(map: &Array3<u8>, u: f32) -> VolumePrediction {
        let shape = data::dims(map);
        let n = map.len();
        let mut probs = Tensor::zeros(5, shape);
        for (v, &c) in map.iter().enumerate() {
            for k in 0..5 {
                probs.data[k * n + v] = if k == c as usize { 0.8 } else { 0.05 };
            }
        }
        VolumePrediction {
            mean_probs: probs,
            uncertainty: Array3::from_elem(shape, u),
        }
    }

    fn record_with(shape: [usize; 3]) -> ScanRecord {
        let volume = Volume::new(image(shape), Spacing::isotropic(2.5), IntensityUnit::Normalized);
        ScanRecord::new("s", volume, LabelSet::empty(shape))
    }

    #[test]
    fn window_starts() {
        let w = SlidingWindow { patch_depth: 32, overlap: 16 };
        assert_eq!(w.starts(32), vec![0]);
        assert_eq!(w.starts(20), vec![0]);
        assert_eq!(w.starts(64), vec![0, 16, 32]);
        assert_eq!(w.starts(70), vec![0, 16, 32, 38]);
        assert!(SlidingWindow { patch_depth: 8, overlap: 8 }.validate().is_err());
    }

    #[test]
    fn single_window_matches_direct_forward_and_sums_to_one() {
        let model = tiny_model();
        let img = image([8, 8, 8]);
        let w = SlidingWindow { patch_depth: 8, overlap: 4 };
        let pred = predict_full_volume(&model, &img, &w).unwrap();
        let input = Tensor::from_vec(1, [8, 8, 8], img.iter().copied().collect());
        let direct = mean_prediction(&forward(&model, &input).unwrap());
        for (a, b) in pred.mean_probs.data.iter().zip(&direct.data) {
            assert!((a - b).abs() < 1e-6);
        }
        let n = pred.mean_probs.voxels();
        for v in 0..n {
            let s: f32 = (0..5).map(|c| pred.mean_probs.data[c * n + v]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn overlapping_windows_average_by_hand() {
        let model = tiny_model();
        let img = image([16, 4, 4]);
        let w = SlidingWindow { patch_depth: 8, overlap: 4 };
        assert_eq!(w.starts(16), vec![0, 4, 8]);
        let pred = predict_full_volume(&model, &img, &w).unwrap();
        let window = |z0: usize| {
            let patch = img.slice(s![z0..z0 + 8, .., ..]);
            let t = Tensor::from_vec(1, [8, 4, 4], patch.iter().copied().collect());
            mean_prediction(&forward(&model, &t).unwrap())
        };
        let (a, b, c) = (window(0), window(4), window(8));
        let n = 16 * 16;
        let m = 8 * 16;
        for class in 0..5 {
            for z in 0..16 {
                for v in 0..16 {
                    let at = |t: &Tensor, z0: usize| t.data[class * m + (z - z0) * 16 + v] as f64;
                    let want = match z {
                        0..=3 => at(&a, 0),
                        4..=7 => (at(&a, 0) + at(&b, 4)) / 2.0,
                        8..=11 => (at(&b, 4) + at(&c, 8)) / 2.0,
                        _ => at(&c, 8),
                    };
                    let got = pred.mean_probs.data[class * n + z * 16 + v] as f64;
                    assert!((got - want).abs() < 1e-6, "class {class} z {z}");
                }
            }
        }
    }

    #[test]
    fn thin_and_odd_volumes_are_padded_and_stripped() {
        let model = tiny_model();
        let img = image([5, 6, 7]);
        let w = SlidingWindow { patch_depth: 8, overlap: 4 };
        let pred = predict_full_volume(&model, &img, &w).unwrap();
        assert_eq!(pred.mean_probs.dims, [5, 6, 7]);
        assert_eq!(data::dims(&pred.uncertainty), [5, 6, 7]);
        assert!(pred.uncertainty.iter().all(|u| (0.0..=(5f32).ln() + 1e-5).contains(u)));
        let bad = SlidingWindow { patch_depth: 6, overlap: 2 };
        assert!(predict_full_volume(&model, &img, &bad).is_err());
    }

    #[test]
    fn fully_annotated_record_is_unchanged_with_zero_uncertainty() {
        let rec = data::tests::small_record();
        assert!(rec.labels.is_fully_annotated());
        let pred = prediction_of(&Array3::zeros(rec.shape()), 0.7);
        let out = impute_record(&rec, &pred).unwrap();
        assert_eq!(out.labels, rec.labels);
        assert!(out.uncertainty.unwrap().iter().all(|&u| u == 0.0));
    }

    #[test]
    fn available_labels_take_precedence() {
        let shape = [4, 4, 4];
        let mut rec = record_with(shape);
        let rectum = Mask::from_shape_fn(shape, |(z, y, x)| z == 1 && y == 1 && x == 1);
        rec.labels.set(OrganId::Rectum, rectum.clone(), LabelSource::Clinical);
        rec.labels.set(OrganId::Hips, Mask::from_elem(shape, false), LabelSource::Clinical);
        rec.labels.set(OrganId::BowelBag, Mask::from_elem(shape, false), LabelSource::Clinical);
        // Teacher paints a bladder cube over the rectum voxel.
        let map = Array3::from_shape_fn(shape, |(z, y, x)| {
            if z <= 1 && y <= 1 && x <= 1 {
                OrganId::Bladder.class_index()
            } else {
                0
            }
        });
        let out = impute_record(&rec, &prediction_of(&map, 0.4)).unwrap();
        let bladder = out.labels.mask(OrganId::Bladder);
        assert_eq!(out.labels.source(OrganId::Bladder), LabelSource::Imputed);
        assert_eq!(data::count(bladder), 7);
        assert!(!bladder[[1, 1, 1]]);
        assert_eq!(out.labels.mask(OrganId::Rectum), &rectum);
        assert_eq!(out.labels.source(OrganId::Rectum), LabelSource::Clinical);
        let u = out.uncertainty.unwrap();
        assert_eq!(u[[1, 1, 1]], 0.0);
        assert_eq!(u[[0, 0, 0]], 0.4);
        assert_eq!(u[[3, 3, 3]], 0.4);
        assert_eq!(out.meta[IMPUTED_KEY], "bladder");
    }

    #[test]
    fn disjoint_blob_becomes_the_imputed_mask() {
        let shape = [6, 6, 6];
        let mut rec = record_with(shape);
        for organ in [OrganId::Rectum, OrganId::Hips, OrganId::BowelBag] {
            rec.labels.set(organ, Mask::from_elem(shape, false), LabelSource::Clinical);
        }
        let blob = Mask::from_shape_fn(shape, |(z, y, x)| (2..4).contains(&z) && (2..5).contains(&y) && x == 3);
        let map = blob.mapv(|b| if b { OrganId::Bladder.class_index() } else { 0 });
        let out = impute_record(&rec, &prediction_of(&map, 0.1)).unwrap();
        assert_eq!(out.labels.mask(OrganId::Bladder), &blob);
        assert!(data::validate_record(&out).is_valid());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let rec = record_with([4, 4, 4]);
        let pred = prediction_of(&Array3::zeros((4, 4, 5)), 0.0);
        assert!(matches!(impute_record(&rec, &pred), Err(Error::Shape(_))));
    }

    #[test]
    fn dataset_imputation_is_deterministic_and_reports_counts() {
        let model = tiny_model();
        let w = SlidingWindow { patch_depth: 8, overlap: 4 };
        let full = data::tests::small_record();
        let mut partial = full.clone();
        partial.id = "p".into();
        partial.labels.hide(OrganId::Bladder);
        let dir = tempfile::tempdir().unwrap();
        let input = data::write_dataset(&[full.clone(), partial], &dir.path().join("in")).unwrap();
        let (a, report) = impute_dataset(&model, &input, &w, &dir.path().join("a")).unwrap();
        let (b, _) = impute_dataset(&model, &input, &w, &dir.path().join("b")).unwrap();
        assert_eq!(report.records, 2);
        assert_eq!(report.imputed_records, 1);
        assert_eq!(report.imputed_organs["bladder"], 1);
        for (ea, eb) in a.records.iter().zip(&b.records) {
            for file in ["meta.json", "image.raw", "uncertainty.raw"] {
                let fa = std::fs::read(a.resolve(ea).join(file)).unwrap();
                let fb = std::fs::read(b.resolve(eb).join(file)).unwrap();
                assert_eq!(fa, fb);
            }
        }
        let out_full = a.load_record(&a.records[0]).unwrap();
        assert_eq!(out_full.labels, full.labels);
        assert!(out_full.uncertainty.unwrap().iter().all(|&u| u == 0.0));
        let out_partial = a.load_record(&a.records[1]).unwrap();
        assert!(out_partial.labels.is_fully_annotated());
        assert_eq!(out_partial.labels.source(OrganId::Bladder), LabelSource::Imputed);
    }
}
