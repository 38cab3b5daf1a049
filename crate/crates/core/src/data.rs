//! Scan records, label sets and the on-disk container format.
//!
//! Volumes are indexed `(z, y, x)` with `z` running cranio-caudally so that
//! the cranial direction is increasing `z`. A container is a directory with a
//! `meta.json` sidecar and one little-endian, C-order `.raw` file per array:
//!
//! ```text
//! <dir>/meta.json
//! <dir>/image.raw            float32
//! <dir>/label_<organ>.raw    uint8 {0,1}
//! <dir>/uncertainty.raw      float32, optional
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{s, Array3, Zip};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Background plus the four organs.
pub const NUM_CLASSES: usize = 5;

/// Meta key holding the run-length encoded ground-truth class map of a phantom.
/// Only scoring code reads it; training never does.
pub const GROUND_TRUTH_KEY: &str = "ground_truth";

const FORMAT_VERSION: u32 = 1;
const IMAGE_DTYPE: &str = "float32_le";
const MASK_DTYPE: &str = "uint8";

/// Organ classes. Class index 0 is the implicit background.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrganId {
    BowelBag,
    Bladder,
    Hips,
    Rectum,
}

impl OrganId {
    pub const ALL: [OrganId; 4] = [
        OrganId::BowelBag,
        OrganId::Bladder,
        OrganId::Hips,
        OrganId::Rectum,
    ];

    /// Slot in per-organ arrays, `0..4`.
    pub fn slot(self) -> usize {
        self as usize
    }

    /// Class index in label maps and network outputs, `1..=4`.
    pub fn class_index(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_class_index(class: u8) -> Option<Self> {
        match class {
            1..=4 => Some(Self::ALL[class as usize - 1]),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OrganId::BowelBag => "bowel_bag",
            OrganId::Bladder => "bladder",
            OrganId::Hips => "hips",
            OrganId::Rectum => "rectum",
        }
    }
}

impl fmt::Display for OrganId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OrganId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OrganId::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::validation("organ", format!("unknown organ `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum IntensityUnit {
    Hu,
    Normalized,
}

/// Voxel spacing `(sz, sy, sx)` in millimetres.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spacing(pub [f64; 3]);

impl Spacing {
    pub fn isotropic(mm: f64) -> Self {
        Spacing([mm; 3])
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|s| s.is_finite() && *s > 0.0)
    }

    pub fn z(&self) -> f64 {
        self.0[0]
    }
}

pub type Mask = Array3<bool>;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub spacing: Spacing,
    pub unit: IntensityUnit,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: Spacing, unit: IntensityUnit) -> Self {
        Volume {
            data,
            spacing,
            unit,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.data)
    }
}

pub(crate) fn dims<T>(a: &Array3<T>) -> [usize; 3] {
    let d = a.dim();
    [d.0, d.1, d.2]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LabelSource {
    Clinical,
    Imputed,
    None,
}

/// Per-organ binary masks with provenance. An organ is available exactly
/// when its source is not [`LabelSource::None`]; unavailable masks are kept
/// all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelSet {
    pub masks: [Mask; 4],
    pub sources: [LabelSource; 4],
}

impl LabelSet {
    /// A label set with no available organs.
    pub fn empty(shape: [usize; 3]) -> Self {
        LabelSet {
            masks: std::array::from_fn(|_| Mask::from_elem(shape, false)),
            sources: [LabelSource::None; 4],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        dims(&self.masks[0])
    }

    pub fn mask(&self, organ: OrganId) -> &Mask {
        &self.masks[organ.slot()]
    }

    pub fn mask_mut(&mut self, organ: OrganId) -> &mut Mask {
        &mut self.masks[organ.slot()]
    }

    pub fn source(&self, organ: OrganId) -> LabelSource {
        self.sources[organ.slot()]
    }

    pub fn is_available(&self, organ: OrganId) -> bool {
        self.source(organ) != LabelSource::None
    }

    /// Member of the fully annotated subset.
    pub fn is_fully_annotated(&self) -> bool {
        OrganId::ALL.iter().all(|&o| self.is_available(o))
    }

    pub fn available_organs(&self) -> impl Iterator<Item = OrganId> + '_ {
        OrganId::ALL.into_iter().filter(|&o| self.is_available(o))
    }

    pub fn set(&mut self, organ: OrganId, mask: Mask, source: LabelSource) {
        self.masks[organ.slot()] = mask;
        self.sources[organ.slot()] = source;
    }

    /// Marks an organ unavailable and zeroes its mask.
    pub fn hide(&mut self, organ: OrganId) {
        self.masks[organ.slot()].fill(false);
        self.sources[organ.slot()] = LabelSource::None;
    }

    /// Collapses available masks into one class-index map. Where masks
    /// overlap, the organ later in [`OrganId::ALL`] wins.
    pub fn to_class_map(&self) -> Array3<u8> {
        let mut map = Array3::<u8>::zeros(self.shape());
        for organ in self.available_organs() {
            let class = organ.class_index();
            Zip::from(&mut map)
                .and(self.mask(organ))
                .for_each(|c, &m| {
                    if m {
                        *c = class;
                    }
                });
        }
        map
    }

    /// Expands a class map. Organs whose source is `None` get empty masks.
    pub fn from_class_map(map: &Array3<u8>, sources: [LabelSource; 4]) -> Self {
        let masks = std::array::from_fn(|slot| {
            let organ = OrganId::ALL[slot];
            if sources[slot] == LabelSource::None {
                Mask::from_elem(map.raw_dim(), false)
            } else {
                map.mapv(|c| c == organ.class_index())
            }
        });
        LabelSet { masks, sources }
    }

    /// Union of the masks of all available organs.
    pub fn available_union(&self) -> Mask {
        let mut union = Mask::from_elem(self.shape(), false);
        for organ in self.available_organs() {
            Zip::from(&mut union)
                .and(self.mask(organ))
                .for_each(|u, &m| *u |= m);
        }
        union
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanRecord {
    pub id: String,
    pub image: Volume,
    pub labels: LabelSet,
    /// Per-voxel epistemic uncertainty attached by imputation.
    pub uncertainty: Option<Array3<f32>>,
    pub meta: BTreeMap<String, String>,
}

impl ScanRecord {
    pub fn new(id: impl Into<String>, image: Volume, labels: LabelSet) -> Self {
        ScanRecord {
            id: id.into(),
            image,
            labels,
            uncertainty: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.image.shape()
    }

    pub fn spacing(&self) -> Spacing {
        self.image.spacing
    }

    /// Keeps only the slices in `z` (image, masks, uncertainty and any
    /// ground truth stored in meta).
    pub fn crop_z(&mut self, z: Range<usize>) -> Result<()> {
        let gt = self.ground_truth().transpose()?;
        let sl = s![z.clone(), .., ..];
        self.image.data = self.image.data.slice(sl).to_owned();
        for m in self.labels.masks.iter_mut() {
            *m = m.slice(sl).to_owned();
        }
        if let Some(u) = &mut self.uncertainty {
            *u = u.slice(sl).to_owned();
        }
        if let Some(gt) = gt {
            self.set_ground_truth(&gt.slice(sl).to_owned());
        }
        Ok(())
    }

    /// Ground-truth class map retained by the phantom generator, if any.
    pub fn ground_truth(&self) -> Option<Result<Array3<u8>>> {
        self.meta.get(GROUND_TRUTH_KEY).map(|s| decode_class_map(s))
    }

    pub fn set_ground_truth(&mut self, map: &Array3<u8>) {
        self.meta
            .insert(GROUND_TRUTH_KEY.to_string(), encode_class_map(map));
    }
}

/// Run-length encodes a class map as `"ZxYxX:c*n,c*n,..."` in C order.
pub fn encode_class_map(map: &Array3<u8>) -> String {
    let [z, y, x] = dims(map);
    let mut out = format!("{z}x{y}x{x}:");
    let mut iter = map.iter().copied();
    if let Some(mut cur) = iter.next() {
        let mut run = 1usize;
        let mut first = true;
        let mut flush = |out: &mut String, c: u8, n: usize| {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format!("{c}*{n}"));
        };
        for c in iter {
            if c == cur {
                run += 1;
            } else {
                flush(&mut out, cur, run);
                cur = c;
                run = 1;
            }
        }
        flush(&mut out, cur, run);
    }
    out
}

pub fn decode_class_map(s: &str) -> Result<Array3<u8>> {
    let bad = |d: &str| Error::validation(GROUND_TRUTH_KEY, d.to_string());
    let (shape, runs) = s.split_once(':').ok_or_else(|| bad("missing shape"))?;
    let dims: Vec<usize> = shape
        .split('x')
        .map(|d| d.parse().map_err(|_| bad("bad shape")))
        .collect::<Result<_>>()?;
    let [z, y, x] = <[usize; 3]>::try_from(dims).map_err(|_| bad("shape must have 3 axes"))?;
    let mut data = Vec::with_capacity(z * y * x);
    for run in runs.split(',').filter(|r| !r.is_empty()) {
        let (c, n) = run.split_once('*').ok_or_else(|| bad("bad run"))?;
        let c: u8 = c.parse().map_err(|_| bad("bad class"))?;
        let n: usize = n.parse().map_err(|_| bad("bad run length"))?;
        data.extend(std::iter::repeat_n(c, n));
    }
    Array3::from_shape_vec((z, y, x), data).map_err(|e| bad(&e.to_string()))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Violation {
    pub rule: &'static str,
    pub detail: String,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn find(&self, rule: &str) -> Option<&Violation> {
        self.violations.iter().find(|v| v.rule == rule)
    }

    fn push(&mut self, rule: &'static str, detail: impl Into<String>, count: usize) {
        self.violations.push(Violation {
            rule,
            detail: detail.into(),
            count,
        });
    }
}

/// Lists every violated record invariant. An empty report means valid.
///
/// Disjointness is checked for bladder, rectum and bowel bag only; hips are
/// allowed to overlap clinical masks.
pub fn validate_record(record: &ScanRecord) -> ValidationReport {
    let mut report = ValidationReport::default();
    let shape = record.shape();

    if shape.contains(&0) {
        report.push("shape", format!("image has an empty axis: {shape:?}"), 1);
    }
    for organ in OrganId::ALL {
        let ms = record.labels.mask(organ).dim();
        if [ms.0, ms.1, ms.2] != shape {
            report.push("shape", format!("{organ} mask shape {ms:?} != image {shape:?}"), 1);
        }
    }
    if let Some(u) = &record.uncertainty {
        if dims(u) != shape {
            report.push("shape", format!("uncertainty shape {:?} != image {shape:?}", u.dim()), 1);
        }
        let bad = u.iter().filter(|v| !v.is_finite() || **v < 0.0).count();
        if bad > 0 {
            report.push("uncertainty range", "negative or non-finite uncertainty", bad);
        }
    }
    if !record.spacing().is_valid() {
        report.push("spacing", format!("{:?}", record.spacing().0), 1);
    }
    if record.image.unit == IntensityUnit::Normalized {
        let bad = record
            .image
            .data
            .iter()
            .filter(|v| !(0.0..=1.0).contains(*v))
            .count();
        if bad > 0 {
            report.push("normalized range", "normalized intensities outside [0, 1]", bad);
        }
    }
    for organ in OrganId::ALL {
        if !record.labels.is_available(organ) {
            let n = count(record.labels.mask(organ));
            if n > 0 {
                report.push(
                    "availability consistency",
                    format!("{organ} unavailable but mask has voxels"),
                    n,
                );
            }
        }
    }
    if report.find("shape").is_none() {
        let l = &record.labels;
        let mut overlap = 0;
        Zip::from(l.mask(OrganId::Bladder))
            .and(l.mask(OrganId::Rectum))
            .and(l.mask(OrganId::BowelBag))
            .for_each(|&a, &b, &c| {
                if (a as u8 + b as u8 + c as u8) > 1 {
                    overlap += 1;
                }
            });
        if overlap > 0 {
            report.push(
                "disjointness",
                "bladder, rectum and bowel bag masks overlap",
                overlap,
            );
        }
    }
    report
}

pub(crate) fn count(mask: &Mask) -> usize {
    mask.iter().filter(|&&m| m).count()
}

// ---------------------------------------------------------------------------
// Container I/O
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct OrganMeta {
    available: bool,
    source: LabelSource,
    checksum_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayMeta {
    dtype: String,
    checksum_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ContainerMeta {
    format_version: u32,
    id: String,
    shape: [usize; 3],
    spacing_mm: [f64; 3],
    intensity_unit: IntensityUnit,
    image_dtype: String,
    mask_dtype: String,
    image_checksum_sha256: String,
    organs: BTreeMap<String, OrganMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    uncertainty: Option<ArrayMeta>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn f32_bytes(a: &Array3<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn mask_bytes(m: &Mask) -> Vec<u8> {
    m.iter().map(|&b| b as u8).collect()
}

/// Writes `bytes` to `path` through a temporary file and a rename,
/// creating parent directories.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn label_file(organ: OrganId) -> String {
    format!("label_{}.raw", organ.name())
}

/// Writes `record` as a container directory and returns its path.
/// Identical records produce byte-identical directories.
pub fn write_container(record: &ScanRecord, dir: &Path) -> Result<PathBuf> {
    let report = validate_record(record);
    if let Some(v) = report.violations.first() {
        return Err(Error::validation(v.rule, v.detail.clone()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let image = f32_bytes(&record.image.data);
    let image_checksum_sha256 = sha256_hex(&image);
    write_atomic(&dir.join("image.raw"), &image)?;

    let mut organs = BTreeMap::new();
    for organ in OrganId::ALL {
        let bytes = mask_bytes(record.labels.mask(organ));
        organs.insert(
            organ.name().to_string(),
            OrganMeta {
                available: record.labels.is_available(organ),
                source: record.labels.source(organ),
                checksum_sha256: sha256_hex(&bytes),
            },
        );
        write_atomic(&dir.join(label_file(organ)), &bytes)?;
    }

    let upath = dir.join("uncertainty.raw");
    let uncertainty = match &record.uncertainty {
        Some(u) => {
            let bytes = f32_bytes(u);
            write_atomic(&upath, &bytes)?;
            Some(ArrayMeta {
                dtype: IMAGE_DTYPE.to_string(),
                checksum_sha256: sha256_hex(&bytes),
            })
        }
        None => {
            if upath.exists() {
                fs::remove_file(&upath).map_err(|e| Error::io(&upath, e))?;
            }
            None
        }
    };

    let meta = ContainerMeta {
        format_version: FORMAT_VERSION,
        id: record.id.clone(),
        shape: record.shape(),
        spacing_mm: record.spacing().0,
        intensity_unit: record.image.unit,
        image_dtype: IMAGE_DTYPE.to_string(),
        mask_dtype: MASK_DTYPE.to_string(),
        image_checksum_sha256,
        organs,
        uncertainty,
        meta: record.meta.clone(),
    };
    write_json(&dir.join("meta.json"), &meta)?;
    Ok(dir.to_path_buf())
}

fn read_checked(path: &Path, expected_len: usize, checksum: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len {
        return Err(Error::Shape(format!(
            "{}: expected {expected_len} bytes, found {}",
            path.display(),
            bytes.len()
        )));
    }
    if sha256_hex(&bytes) != checksum {
        return Err(Error::Checksum {
            file: path.to_path_buf(),
        });
    }
    Ok(bytes)
}

fn f32_array(shape: [usize; 3], bytes: &[u8]) -> Array3<f32> {
    let v = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Array3::from_shape_vec(shape, v).expect("length checked")
}

/// Reads a container written by [`write_container`], verifying checksums.
pub fn read_container(dir: &Path) -> Result<ScanRecord> {
    let meta: ContainerMeta = read_json(&dir.join("meta.json"))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "container version {}",
            meta.format_version
        )));
    }
    if meta.image_dtype != IMAGE_DTYPE {
        return Err(Error::UnsupportedFormat(format!("image dtype `{}`", meta.image_dtype)));
    }
    if meta.mask_dtype != MASK_DTYPE {
        return Err(Error::UnsupportedFormat(format!("mask dtype `{}`", meta.mask_dtype)));
    }
    let spacing = Spacing(meta.spacing_mm);
    if !spacing.is_valid() {
        return Err(Error::Shape(format!("invalid spacing {:?}", meta.spacing_mm)));
    }
    let shape = meta.shape;
    let n: usize = shape.iter().product();
    if n == 0 {
        return Err(Error::Shape(format!("empty shape {shape:?}")));
    }

    let image_bytes = read_checked(&dir.join("image.raw"), n * 4, &meta.image_checksum_sha256)?;
    let image = Volume::new(f32_array(shape, &image_bytes), spacing, meta.intensity_unit);

    let mut labels = LabelSet::empty(shape);
    for organ in OrganId::ALL {
        let om = meta.organs.get(organ.name()).ok_or_else(|| {
            Error::validation("organs", format!("missing entry for {organ}"))
        })?;
        if om.available != (om.source != LabelSource::None) {
            return Err(Error::validation(
                "availability consistency",
                format!("{organ}: available={} but source={:?}", om.available, om.source),
            ));
        }
        let path = dir.join(label_file(organ));
        let bytes = read_checked(&path, n, &om.checksum_sha256)?;
        if bytes.iter().any(|&b| b > 1) {
            return Err(Error::validation(organ.name(), "mask values must be 0 or 1"));
        }
        let mask = Array3::from_shape_vec(shape, bytes.into_iter().map(|b| b == 1).collect())
            .expect("length checked");
        labels.set(organ, mask, om.source);
    }

    let uncertainty = match &meta.uncertainty {
        Some(am) => {
            if am.dtype != IMAGE_DTYPE {
                return Err(Error::UnsupportedFormat(format!("uncertainty dtype `{}`", am.dtype)));
            }
            let bytes = read_checked(&dir.join("uncertainty.raw"), n * 4, &am.checksum_sha256)?;
            Some(f32_array(shape, &bytes))
        }
        None => None,
    };

    Ok(ScanRecord {
        id: meta.id,
        image,
        labels,
        uncertainty,
        meta: meta.meta,
    })
}

// ---------------------------------------------------------------------------
// Manifests
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Container directory, relative to the manifest's directory.
    pub path: PathBuf,
}

/// Ordered list of containers. Relative paths resolve against the
/// directory holding `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_tags: Option<BTreeMap<String, usize>>,
    #[serde(skip)]
    root: PathBuf,
}

impl DatasetManifest {
    pub const FILE_NAME: &'static str = "manifest.json";

    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestEntry>) -> Self {
        DatasetManifest {
            records,
            split_tags: None,
            root: root.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Loads `manifest.json` (or the given file) and checks ids are unique
    /// and every container exists.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(Self::FILE_NAME)
        } else {
            path.to_path_buf()
        };
        let mut manifest: DatasetManifest = read_json(&file)?;
        manifest.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut seen = HashSet::new();
        for e in &manifest.records {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::validation("records", format!("duplicate id `{}`", e.id)));
            }
            let p = manifest.resolve(e);
            if !p.join("meta.json").is_file() {
                return Err(Error::validation(
                    "records",
                    format!("container for `{}` not found at {}", e.id, p.display()),
                ));
            }
        }
        Ok(manifest)
    }

    /// Writes `manifest.json` into the root directory.
    pub fn save(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(Self::FILE_NAME);
        write_json(&path, self)?;
        Ok(path)
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn load_record(&self, entry: &ManifestEntry) -> Result<ScanRecord> {
        read_container(&self.resolve(entry))
    }

    pub fn load_all(&self) -> Result<Vec<ScanRecord>> {
        self.records.iter().map(|e| self.load_record(e)).collect()
    }
}

/// Writes each record to `<dir>/<id>/` and saves a manifest in `dir`.
pub fn write_dataset(records: &[ScanRecord], dir: &Path) -> Result<DatasetManifest> {
    let mut entries = Vec::with_capacity(records.len());
    let mut seen = HashSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::validation("records", format!("duplicate id `{}`", r.id)));
        }
        write_container(r, &dir.join(&r.id))?;
        entries.push(ManifestEntry {
            id: r.id.clone(),
            path: PathBuf::from(&r.id),
        });
    }
    let manifest = DatasetManifest::new(dir, entries);
    manifest.save()?;
    Ok(manifest)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// 8x8x8 record with a bladder cube, rectum bar and surrounding bowel.
    pub(crate) fn small_record() -> ScanRecord {
        let shape = [8, 8, 8];
        let data = Array3::from_shape_fn(shape, |(z, y, x)| ((z * 64 + y * 8 + x) % 97) as f32 / 97.0);
        let image = Volume::new(data, Spacing([2.5, 2.0, 1.5]), IntensityUnit::Normalized);
        let mut labels = LabelSet::empty(shape);
        let bladder = Mask::from_shape_fn(shape, |(z, y, x)| {
            (2..4).contains(&z) && (2..4).contains(&y) && (2..4).contains(&x)
        });
        let rectum = Mask::from_shape_fn(shape, |(_, y, x)| y == 6 && x == 4);
        let bowel = Mask::from_shape_fn(shape, |(z, y, x)| {
            z >= 4 && y < 6 && x > 0 && !(y == 6 && x == 4)
        });
        let hips = Mask::from_shape_fn(shape, |(z, _, x)| z < 3 && (x == 0 || x == 7));
        labels.set(OrganId::Bladder, bladder, LabelSource::Clinical);
        labels.set(OrganId::Rectum, rectum, LabelSource::Clinical);
        labels.set(OrganId::BowelBag, bowel, LabelSource::Clinical);
        labels.set(OrganId::Hips, hips, LabelSource::Imputed);
        let mut r = ScanRecord::new("scan_a", image, labels);
        r.meta.insert("origin".into(), "unit-test".into());
        r
    }

    #[test]
    fn class_indices_are_stable() {
        let idx: Vec<u8> = OrganId::ALL.iter().map(|o| o.class_index()).collect();
        assert_eq!(idx, vec![1, 2, 3, 4]);
        assert_eq!(OrganId::from_class_index(3), Some(OrganId::Hips));
        assert_eq!(OrganId::from_class_index(0), None);
        assert_eq!("rectum".parse::<OrganId>().unwrap(), OrganId::Rectum);
    }

    #[test]
    fn valid_record_has_empty_report() {
        assert!(validate_record(&small_record()).is_valid());
    }

    #[test]
    fn overlap_is_reported_with_count() {
        let mut r = small_record();
        let bowel = r.labels.mask_mut(OrganId::BowelBag);
        // 5 bladder voxels also marked bowel
        let mut added = 0;
        for z in 2..4 {
            for y in 2..4 {
                for x in 2..4 {
                    if added < 5 {
                        bowel[[z, y, x]] = true;
                        added += 1;
                    }
                }
            }
        }
        let report = validate_record(&r);
        let v = report.find("disjointness").expect("violation reported");
        assert_eq!(v.count, 5);
    }

    #[test]
    fn unavailable_organ_with_voxels_is_reported() {
        let mut r = small_record();
        r.labels.sources[OrganId::Bladder.slot()] = LabelSource::None;
        let report = validate_record(&r);
        assert_eq!(report.find("availability consistency").unwrap().count, 8);
    }

    #[test]
    fn container_round_trip_and_determinism() {
        let tmp = tempfile::tempdir().unwrap();
        let mut r = small_record();
        r.uncertainty = Some(Array3::from_elem([8, 8, 8], 0.25));
        let a = write_container(&r, &tmp.path().join("a")).unwrap();
        let b = write_container(&r, &tmp.path().join("b")).unwrap();
        assert_eq!(read_container(&a).unwrap(), r);
        for name in ["meta.json", "image.raw", "label_hips.raw", "uncertainty.raw"] {
            assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_container(&small_record(), tmp.path()).unwrap();
        let path = dir.join("label_bladder.raw");
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(read_container(&dir), Err(Error::Checksum { .. })));
    }

    #[test]
    fn truncated_raw_is_shape_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_container(&small_record(), tmp.path()).unwrap();
        let path = dir.join("label_rectum.raw");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..7 * 8 * 8]).unwrap();
        assert!(matches!(read_container(&dir), Err(Error::Shape(_))));
    }

    #[test]
    fn unknown_dtype_is_unsupported() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = write_container(&small_record(), tmp.path()).unwrap();
        let text = fs::read_to_string(dir.join("meta.json")).unwrap();
        fs::write(dir.join("meta.json"), text.replace("float32_le", "float16_le")).unwrap();
        assert!(matches!(read_container(&dir), Err(Error::UnsupportedFormat(_))));
    }

    #[test]
    fn invalid_record_is_not_written() {
        let tmp = tempfile::tempdir().unwrap();
        let mut r = small_record();
        r.labels.sources[OrganId::Rectum.slot()] = LabelSource::None;
        match write_container(&r, tmp.path()) {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "availability consistency"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn class_map_round_trip() {
        let r = small_record();
        let map = r.labels.to_class_map();
        let back = LabelSet::from_class_map(&map, r.labels.sources);
        assert_eq!(back, r.labels);
    }

    #[test]
    fn ground_truth_rle_round_trip_and_crop() {
        let mut r = small_record();
        let map = r.labels.to_class_map();
        r.set_ground_truth(&map);
        assert_eq!(r.ground_truth().unwrap().unwrap(), map);
        r.crop_z(0..5).unwrap();
        assert_eq!(r.shape(), [5, 8, 8]);
        assert_eq!(
            r.ground_truth().unwrap().unwrap(),
            map.slice(s![0..5, .., ..]).to_owned()
        );
    }

    #[test]
    fn manifest_rejects_duplicates_and_missing_paths() {
        let tmp = tempfile::tempdir().unwrap();
        let r = small_record();
        let manifest = write_dataset(std::slice::from_ref(&r), tmp.path()).unwrap();
        let loaded = DatasetManifest::load(tmp.path()).unwrap();
        assert_eq!(loaded.records, manifest.records);
        assert_eq!(loaded.load_all().unwrap(), vec![r.clone()]);

        let mut dup = manifest.clone();
        dup.records.push(dup.records[0].clone());
        dup.save().unwrap();
        assert!(DatasetManifest::load(tmp.path()).is_err());

        let mut missing = manifest;
        missing.records[0].path = PathBuf::from("nope");
        missing.save().unwrap();
        assert!(DatasetManifest::load(tmp.path()).is_err());
    }
}
