//! Overlap and surface-distance metrics, dataset evaluation, and the
//! Wilcoxon signed-rank test.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{self, dims, DatasetManifest, Mask, OrganId, ScanRecord, Spacing};
use crate::error::{Error, Result};

/// Surface tolerance used for reporting, one voxel at the working spacing.
pub const SURFACE_TOLERANCE_MM: f64 = 2.5;

fn same_shape(a: &Mask, b: &Mask) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("mask shapes {:?} and {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `2|a & b| / (|a| + |b|)`; 1 when both are empty.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    same_shape(a, b)?;
    let (mut inter, mut total) = (0usize, 0usize);
    Zip::from(a).and(b).for_each(|&x, &y| {
        inter += (x && y) as usize;
        total += x as usize + y as usize;
    });
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Mask voxels with a face neighbour outside the mask or on the array border.
pub fn surface_voxels(mask: &Mask) -> Mask {
    let [nz, ny, nx] = dims(mask);
    Mask::from_shape_fn(mask.dim(), |(z, y, x)| {
        if !mask[[z, y, x]] {
            return false;
        }
        if z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx {
            return true;
        }
        !(mask[[z - 1, y, x]]
            && mask[[z + 1, y, x]]
            && mask[[z, y - 1, x]]
            && mask[[z, y + 1, x]]
            && mask[[z, y, x - 1]]
            && mask[[z, y, x + 1]])
    })
}

/// One pass of the lower-envelope distance transform along a line of
/// squared distances `f`, with sample spacing `s`.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * s;
    let meet = |p: usize, q: usize| {
        ((f[q] + pos(q) * pos(q)) - (f[p] + pos(p) * pos(p))) / (2.0 * (pos(q) - pos(p)))
    };
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        while let Some(&p) = v.last() {
            if meet(p, q) <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        z.push(v.last().map_or(f64::NEG_INFINITY, |&p| meet(p, q)));
        v.push(q);
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm^2) from every voxel to the nearest
/// `true` voxel of `features`. Infinite when there are none.
pub fn squared_distance_transform(features: &Mask, spacing: Spacing) -> Array3<f64> {
    let mut dist = features.mapv(|f| if f { 0.0 } else { f64::INFINITY });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dist.len_of(Axis(axis));
        let (mut line, mut out) = (vec![0.0; n], vec![0.0; n]);
        for mut lane in dist.lanes_mut(Axis(axis)) {
            line.iter_mut().zip(lane.iter()).for_each(|(l, &d)| *l = d);
            edt_line(&line, spacing.0[axis], &mut out, &mut v, &mut z);
            lane.iter_mut().zip(&out).for_each(|(d, &o)| *d = o);
        }
    }
    dist
}

/// Distances from each surface voxel of `from` to the surface of `to`.
fn directed_surface_distances(from: &Mask, to: &Mask, spacing: Spacing) -> Vec<f64> {
    let dist = squared_distance_transform(to, spacing);
    Zip::from(from)
        .and(&dist)
        .fold(Vec::new(), |mut acc, &s, &d| {
            if s {
                acc.push(d.sqrt());
            }
            acc
        })
}

fn surfaces(a: &Mask, b: &Mask, spacing: Spacing) -> Result<(Vec<f64>, Vec<f64>)> {
    same_shape(a, b)?;
    if !spacing.is_valid() {
        return Err(Error::validation("spacing", format!("{:?} must be positive", spacing.0)));
    }
    let (sa, sb) = (surface_voxels(a), surface_voxels(b));
    Ok((
        directed_surface_distances(&sa, &sb, spacing),
        directed_surface_distances(&sb, &sa, spacing),
    ))
}

/// Fraction of surface voxels of either mask within `tolerance_mm` of the
/// other surface. 1 when both surfaces are empty, 0 when only one is.
pub fn surface_dice(a: &Mask, b: &Mask, tolerance_mm: f64, spacing: Spacing) -> Result<f64> {
    let (ab, ba) = surfaces(a, b, spacing)?;
    let total = ab.len() + ba.len();
    if total == 0 {
        return Ok(1.0);
    }
    let within = ab.iter().chain(&ba).filter(|&&d| d <= tolerance_mm).count();
    Ok(within as f64 / total as f64)
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let idx = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (idx.floor() as usize, idx.ceil() as usize);
    Some(v[lo] + (v[hi] - v[lo]) * (idx - lo as f64))
}

/// Symmetric 95th-percentile surface distance in mm; `None` when either
/// mask is empty.
pub fn hd95(a: &Mask, b: &Mask, spacing: Spacing) -> Result<Option<f64>> {
    let (ab, ba) = surfaces(a, b, spacing)?;
    Ok(match (percentile(&ab, 95.0), percentile(&ba, 95.0)) {
        (Some(x), Some(y)) => Some(x.max(y)),
        _ => None,
    })
}

/// Anything that maps a scan to a predicted class map.
pub trait Predictor {
    fn predict_class_map(&self, record: &ScanRecord) -> Result<Array3<u8>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scan_id: String,
    pub organ: OrganId,
    pub dice: f64,
    pub surface_dice: f64,
    /// Empty when undefined.
    pub hd95: Option<f64>,
}

/// Mean and population standard deviation of the defined values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub undefined: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => undefined += 1,
            }
        }
        let n = defined.len();
        if n == 0 {
            return Summary {
                mean: f64::NAN,
                std: f64::NAN,
                n,
                undefined,
            };
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let var = defined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        Summary {
            mean,
            std: var.sqrt(),
            n,
            undefined,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummaries {
    pub dice: Summary,
    pub surface_dice: Summary,
    pub hd95: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    /// Over scans, of each scan's mean over organs.
    pub per_scan: MetricSummaries,
    pub per_organ: BTreeMap<String, MetricSummaries>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
}

impl MetricsTable {
    pub fn scan_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.rows {
            if ids.last() != Some(&r.scan_id) && !ids.contains(&r.scan_id) {
                ids.push(r.scan_id.clone());
            }
        }
        ids
    }

    /// Per-scan means over organs, in scan order: (dice, surface dice,
    /// hd95 over the organs where it is defined).
    pub fn per_scan_means(&self) -> Vec<(String, f64, f64, Option<f64>)> {
        self.scan_ids()
            .into_iter()
            .map(|id| {
                let rows: Vec<&MetricRow> = self.rows.iter().filter(|r| r.scan_id == id).collect();
                let n = rows.len() as f64;
                let dice = rows.iter().map(|r| r.dice).sum::<f64>() / n;
                let sd = rows.iter().map(|r| r.surface_dice).sum::<f64>() / n;
                let hd: Vec<f64> = rows.iter().filter_map(|r| r.hd95).collect();
                let hd = (!hd.is_empty()).then(|| hd.iter().sum::<f64>() / hd.len() as f64);
                (id, dice, sd, hd)
            })
            .collect()
    }

    /// Mean Dice over organs for each scan, in scan order.
    pub fn per_scan_dice(&self) -> Vec<f64> {
        self.per_scan_means().into_iter().map(|m| m.1).collect()
    }

    pub fn organ_rows(&self, organ: OrganId) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(move |r| r.organ == organ)
    }

    pub fn aggregates(&self) -> Aggregates {
        let scans = self.per_scan_means();
        let per_scan = MetricSummaries {
            dice: Summary::of(scans.iter().map(|s| Some(s.1))),
            surface_dice: Summary::of(scans.iter().map(|s| Some(s.2))),
            hd95: Summary::of(scans.iter().map(|s| s.3)),
        };
        let per_organ = OrganId::ALL
            .iter()
            .map(|&o| {
                let rows: Vec<&MetricRow> = self.organ_rows(o).collect();
                let s = MetricSummaries {
                    dice: Summary::of(rows.iter().map(|r| Some(r.dice))),
                    surface_dice: Summary::of(rows.iter().map(|r| Some(r.surface_dice))),
                    hd95: Summary::of(rows.iter().map(|r| r.hd95)),
                };
                (o.name().to_string(), s)
            })
            .collect();
        Aggregates { per_scan, per_organ }
    }

    /// CSV with columns scan_id, organ, dice, surface_dice, hd95.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["scan_id", "organ", "dice", "surface_dice", "hd95"])
            .and_then(|_| {
                for r in &self.rows {
                    w.write_record([
                        r.scan_id.clone(),
                        r.organ.name().to_string(),
                        r.dice.to_string(),
                        r.surface_dice.to_string(),
                        r.hd95.map(|h| h.to_string()).unwrap_or_default(),
                    ])?;
                }
                Ok(())
            })
            .map_err(|e| Error::validation("csv", e.to_string()))?;
        w.into_inner().map_err(|e| Error::validation("csv", e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        data::write_atomic(path, &self.to_csv()?)
    }

    pub fn write_aggregates_json(&self, path: &Path) -> Result<()> {
        data::write_json(path, &self.aggregates())
    }
}

/// Scores one predicted class map against the record's labels.
pub fn score_record(record: &ScanRecord, predicted: &Array3<u8>) -> Result<Vec<MetricRow>> {
    if !record.labels.is_fully_annotated() {
        return Err(Error::NotFullyAnnotated {
            id: record.id.clone(),
        });
    }
    if dims(predicted) != record.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs record {:?}",
            predicted.dim(),
            record.shape()
        )));
    }
    let spacing = record.spacing();
    OrganId::ALL
        .iter()
        .map(|&organ| {
            let pred = predicted.mapv(|c| c == organ.class_index());
            let truth = record.labels.mask(organ);
            Ok(MetricRow {
                scan_id: record.id.clone(),
                organ,
                dice: dice(&pred, truth)?,
                surface_dice: surface_dice(&pred, truth, SURFACE_TOLERANCE_MM, spacing)?,
                hd95: hd95(&pred, truth, spacing)?,
            })
        })
        .collect()
}

pub fn evaluate_records(predictor: &dyn Predictor, records: &[ScanRecord]) -> Result<MetricsTable> {
    let mut rows = Vec::with_capacity(records.len() * 4);
    for r in records {
        rows.extend(score_record(r, &predictor.predict_class_map(r)?)?);
    }
    Ok(MetricsTable { rows })
}

pub fn evaluate_dataset(predictor: &dyn Predictor, test: &DatasetManifest) -> Result<MetricsTable> {
    evaluate_records(predictor, &test.load_all()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Smaller of the positive and negative rank sums.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs with a non-zero difference.
    pub n: usize,
    pub method: PValueMethod,
}

/// Below this many non-zero pairs the null distribution is enumerated.
pub const EXACT_BELOW: usize = 20;
const MIN_PAIRS: usize = 6;

/// Average ranks (1-based) of `values`, ties sharing their mean rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences
/// are dropped.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} vs {} paired samples", x.len(), y.len())));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate);
    }
    let n = diffs.len();
    if n < MIN_PAIRS {
        return Err(Error::TooFewPairs(n));
    }
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let statistic = w_plus.min(total - w_plus);

    let (p_value, method) = if n < EXACT_BELOW {
        (exact_p(&ranks, statistic), PValueMethod::Exact)
    } else {
        (normal_p(&ranks, statistic), PValueMethod::Normal)
    };
    Ok(WilcoxonResult {
        statistic,
        p_value,
        n,
        method,
    })
}

/// `2 P(W+ <= t)` under the sign-flip null, by counting subsets over
/// doubled (integer) ranks.
fn exact_p(ranks: &[f64], t: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut ways = vec![0f64; total + 1];
    ways[0] = 1.0;
    for &r in &doubled {
        for s in (r..=total).rev() {
            ways[s] += ways[s - r];
        }
    }
    let limit = (2.0 * t).round() as usize;
    let below: f64 = ways[..=limit].iter().sum();
    (2.0 * below / 2f64.powi(ranks.len() as i32)).min(1.0)
}

/// Normal approximation with tie correction, no continuity correction.
fn normal_p(ranks: &[f64], t: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|a, b| a == b) {
        let g = group.len() as f64;
        tie_term += g * g * g - g;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    let z = (t - mean) / var.sqrt();
    // two-sided: 2 * Phi(-|z|) = erfc(|z| / sqrt 2)
    libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::s;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cube(shape: [usize; 3], z0: usize, y0: usize, x0: usize, side: usize) -> Mask {
        let mut m = Mask::from_elem(shape, false);
        m.slice_mut(s![z0..z0 + side, y0..y0 + side, x0..x0 + side]).fill(true);
        m
    }

    fn brute_directed(from: &Mask, to: &Mask, sp: Spacing) -> Vec<f64> {
        let pts = |m: &Mask| -> Vec<[f64; 3]> {
            surface_voxels(m)
                .indexed_iter()
                .filter(|(_, &v)| v)
                .map(|((z, y, x), _)| [z as f64 * sp.0[0], y as f64 * sp.0[1], x as f64 * sp.0[2]])
                .collect()
        };
        let (a, b) = (pts(from), pts(to));
        a.iter()
            .map(|p| {
                b.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn dice_examples() {
        let a = cube([6, 6, 6], 1, 1, 1, 2);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &cube([6, 6, 6], 4, 4, 4, 2)).unwrap(), 0.0);
        // shift by one voxel along x: 4 voxels overlap
        assert_eq!(dice(&a, &cube([6, 6, 6], 1, 1, 2, 2)).unwrap(), 0.5);
        let empty = Mask::from_elem([6, 6, 6], false);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        assert!(dice(&a, &Mask::from_elem([6, 6, 5], false)).is_err());
    }

    #[test]
    fn surface_of_solid_cube_excludes_interior() {
        let a = cube([7, 7, 7], 1, 1, 1, 5);
        assert_eq!(data::count(&surface_voxels(&a)), 125 - 27);
        let full = Mask::from_elem([3, 3, 3], true);
        assert_eq!(data::count(&surface_voxels(&full)), 26);
    }

    #[test]
    fn one_voxel_shift() {
        let sp = Spacing::isotropic(2.5);
        let a = cube([8, 8, 8], 2, 2, 2, 4);
        let b = cube([8, 8, 8], 2, 2, 3, 4);
        assert_eq!(surface_dice(&a, &b, 2.5, sp).unwrap(), 1.0);
        assert_eq!(hd95(&a, &b, sp).unwrap(), Some(2.5));

        let ab = brute_directed(&a, &b, sp);
        let ba = brute_directed(&b, &a, sp);
        let within = ab.iter().chain(&ba).filter(|&&d| d <= 1.0).count();
        let expected = within as f64 / (ab.len() + ba.len()) as f64;
        assert_eq!(surface_dice(&a, &b, 1.0, sp).unwrap(), expected);
    }

    #[test]
    fn empty_conventions() {
        let sp = Spacing::isotropic(1.0);
        let empty = Mask::from_elem([5, 5, 5], false);
        let a = cube([5, 5, 5], 1, 1, 1, 2);
        assert_eq!(surface_dice(&empty, &empty, 1.0, sp).unwrap(), 1.0);
        assert_eq!(surface_dice(&a, &empty, 1.0, sp).unwrap(), 0.0);
        assert_eq!(hd95(&a, &empty, sp).unwrap(), None);
        assert_eq!(hd95(&empty, &empty, sp).unwrap(), None);
        assert_eq!(hd95(&a, &a, sp).unwrap(), Some(0.0));
    }

    #[test]
    fn distance_transform_matches_brute_force_anisotropic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = Mask::from_shape_fn([5, 6, 7], |_| rng.gen_bool(0.05));
        let f = if data::count(&f) == 0 { cube([5, 6, 7], 1, 1, 1, 1) } else { f };
        let sp = Spacing([2.5, 0.7, 1.3]);
        let d = squared_distance_transform(&f, sp);
        let pts: Vec<_> = f.indexed_iter().filter(|(_, &v)| v).map(|(i, _)| i).collect();
        for ((z, y, x), &got) in d.indexed_iter() {
            let want = pts
                .iter()
                .map(|&(a, b, c)| {
                    ((z as f64 - a as f64) * 2.5).powi(2)
                        + ((y as f64 - b as f64) * 0.7).powi(2)
                        + ((x as f64 - c as f64) * 1.3).powi(2)
                })
                .fold(f64::INFINITY, f64::min);
            assert!((got - want).abs() < 1e-9, "{got} {want}");
        }
    }

    #[test]
    fn percentile_interpolates_linearly() {
        assert_eq!(percentile(&[0.0, 10.0], 95.0), Some(9.5));
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), Some(2.0));
        assert_eq!(percentile(&[], 95.0), None);
    }

    #[test]
    fn summary_uses_population_std() {
        let s = Summary::of([Some(1.0), Some(3.0), None]);
        assert_eq!((s.mean, s.std, s.n, s.undefined), (2.0, 1.0, 2, 1));
    }

    struct Oracle;
    impl Predictor for Oracle {
        fn predict_class_map(&self, record: &ScanRecord) -> Result<Array3<u8>> {
            Ok(record.labels.to_class_map())
        }
    }

    struct Background;
    impl Predictor for Background {
        fn predict_class_map(&self, record: &ScanRecord) -> Result<Array3<u8>> {
            Ok(Array3::zeros(record.shape()))
        }
    }

    #[test]
    fn oracle_model_scores_perfectly() {
        let mut a = data::tests::small_record();
        a.labels.sources = [data::LabelSource::Clinical; 4];
        let mut b = a.clone();
        b.id = "b".into();
        let table = evaluate_records(&Oracle, &[a.clone(), b]).unwrap();
        assert_eq!(table.rows.len(), 8);
        assert!(table.rows.iter().all(|r| r.dice == 1.0 && r.hd95 == Some(0.0)));
        let agg = table.aggregates();
        assert_eq!(agg.per_scan.dice.mean, 1.0);

        let zero = evaluate_records(&Background, &[a]).unwrap();
        let by_hand = zero.rows.iter().map(|r| r.dice).sum::<f64>() / 4.0;
        assert_eq!(zero.per_scan_dice(), vec![by_hand]);
        assert_eq!(zero.aggregates().per_scan.hd95.undefined, 1);
        let csv = String::from_utf8(zero.to_csv().unwrap()).unwrap();
        assert!(csv.starts_with("scan_id,organ,dice,surface_dice,hd95\n"));
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().ends_with(','));
    }

    /// Enumerates all sign patterns of the ranks.
    fn enumeration_p(x: &[f64], y: &[f64]) -> f64 {
        let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
        let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
        let w = |signs: u32| -> f64 { (0..ranks.len()).filter(|i| signs >> i & 1 == 1).map(|i| ranks[i]).sum() };
        let total: f64 = ranks.iter().sum();
        let observed = {
            let p: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
            p.min(total - p)
        };
        let n = ranks.len() as u32;
        let extreme = (0..1u32 << n).filter(|&s| w(s).min(total - w(s)) <= observed + 1e-9).count();
        extreme as f64 / (1u64 << n) as f64
    }

    #[test]
    fn wilcoxon_examples() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert!(matches!(wilcoxon_signed_rank(&x, &x), Err(Error::Degenerate)));
        let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| v - 1.0 - i as f64 * 0.1).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!(r.p_value < 0.01);
        // 2 / 2^10
        assert!((r.p_value - 2.0 / 1024.0).abs() < 1e-15);
        assert!(matches!(wilcoxon_signed_rank(&x[..5], &y[..5]), Err(Error::TooFewPairs(5))));

        let a = [1.0, 2.5, 3.0, 4.2, 0.3, 2.2];
        let b = [0.5, 3.0, 1.0, 4.0, 0.1, 2.7];
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        assert!((r.p_value - enumeration_p(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn wilcoxon_normal_branch_handles_ties() {
        let x: Vec<f64> = (0..30).map(|i| (i % 7) as f64).collect();
        let y: Vec<f64> = (0..30).map(|i| (i % 5) as f64 * 1.1).collect();
        let r = wilcoxon_signed_rank(&x, &y).unwrap();
        assert_eq!(r.method, PValueMethod::Normal);
        assert!((0.0..=1.0).contains(&r.p_value));
    }

    fn random_pair(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> (Mask, Mask) {
        let blob = |rng: &mut ChaCha8Rng| {
            let c: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.0..shape[a] as f64));
            let r = rng.gen_range(1.0..3.5);
            let noise = rng.gen_range(0.0..0.2);
            Mask::from_shape_fn(shape, |(z, y, x)| {
                let d = ((z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2)).sqrt();
                d <= r || rng.gen_bool(noise * 0.2)
            })
        };
        (blob(rng), blob(rng))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn metrics_match_pairwise_oracle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [rng.gen_range(3..9), rng.gen_range(3..9), rng.gen_range(3..9)];
            let sp = Spacing([rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)]);
            let (a, b) = random_pair(&mut rng, shape);
            let (ab, ba) = (brute_directed(&a, &b, sp), brute_directed(&b, &a, sp));
            let tol = rng.gen_range(0.0..4.0);
            if !ab.is_empty() && !ba.is_empty() {
                let within = ab.iter().chain(&ba).filter(|&&d| d <= tol).count() as f64;
                let sd = surface_dice(&a, &b, tol, sp).unwrap();
                prop_assert!((sd - within / (ab.len() + ba.len()) as f64).abs() < 1e-9);
                let want = percentile(&ab, 95.0).unwrap().max(percentile(&ba, 95.0).unwrap());
                prop_assert!((hd95(&a, &b, sp).unwrap().unwrap() - want).abs() < 1e-9);
            }
            prop_assert_eq!(dice(&a, &b).unwrap(), dice(&b, &a).unwrap());
            prop_assert_eq!(surface_dice(&a, &b, tol, sp).unwrap(), surface_dice(&b, &a, tol, sp).unwrap());
            prop_assert_eq!(hd95(&a, &b, sp).unwrap(), hd95(&b, &a, sp).unwrap());
            prop_assert_eq!(surface_dice(&a, &a, tol, sp).unwrap(), 1.0);
        }

        #[test]
        fn translation_leaves_metrics_unchanged(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sp = Spacing([2.5, 1.0, 1.5]);
            let (a, b) = random_pair(&mut rng, [6, 6, 6]);
            let pad = |m: &Mask, off: usize| {
                let mut out = Mask::from_elem([10, 10, 10], false);
                out.slice_mut(s![off..off + 6, off..off + 6, off..off + 6]).assign(m);
                out
            };
            let (a1, b1, a2, b2) = (pad(&a, 1), pad(&b, 1), pad(&a, 3), pad(&b, 3));
            prop_assert_eq!(dice(&a1, &b1).unwrap(), dice(&a2, &b2).unwrap());
            let (h1, h2) = (hd95(&a1, &b1, sp).unwrap(), hd95(&a2, &b2, sp).unwrap());
            prop_assert!(h1.zip(h2).map_or(h1.is_none() && h2.is_none(), |(x, y)| (x - y).abs() < 1e-12));
            let (s1, s2) = (surface_dice(&a1, &b1, 2.0, sp).unwrap(), surface_dice(&a2, &b2, 2.0, sp).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-12);
        }

        #[test]
        fn exact_wilcoxon_matches_enumeration(seed in any::<u64>(), n in 6usize..=10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // coarse values to create ties
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64).collect();
            match wilcoxon_signed_rank(&x, &y) {
                Ok(r) => prop_assert!((r.p_value - enumeration_p(&x, &y)).abs() < 1e-12),
                Err(Error::Degenerate | Error::TooFewPairs(_)) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
