//! Separating poisoned samples inside an infected class by 2-means on the
//! weight vector, and writing the cleaned dataset.

use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::repr_store::{ClassId, LabeledDataset};

const DEGENERATE_SPREAD: f64 = 1e-15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub max_iter: usize,
    /// Kept for configuration compatibility; initialization is at fixed
    /// quantiles and does not draw random numbers.
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig { max_iter: 300, seed: 0 }
    }
}

/// Two-cluster assignment of scalar data. Cluster 0 has the lower center.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<u8>,
    pub centers: [f64; 2],
    pub iterations: usize,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
    /// Lloyd stopped at a partition that the exact split scan improved on.
    pub polished: bool,
}

impl ClusterAssignment {
    pub fn sizes(&self) -> [usize; 2] {
        let ones = self.labels.iter().filter(|&&l| l == 1).count();
        [self.labels.len() - ones, ones]
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn two_pass_ss(values: &[f64]) -> f64 {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    values.iter().map(|v| (v - mean) * (v - mean)).sum()
}

/// Within-cluster sum of squares of the partition `sorted[..cut] | sorted[cut..]`.
pub fn split_inertia(sorted: &[f64], cut: usize) -> f64 {
    two_pass_ss(&sorted[..cut]) + two_pass_ss(&sorted[cut..])
}

fn assign(a: &[f64], c: [f64; 2]) -> Vec<u8> {
    a.iter()
        .map(|&x| u8::from((x - c[1]).abs() < (x - c[0]).abs()))
        .collect()
}

fn centers_of(a: &[f64], labels: &[u8]) -> Option<[f64; 2]> {
    let mut sum = [0.0; 2];
    let mut n = [0usize; 2];
    for (&x, &l) in a.iter().zip(labels) {
        sum[l as usize] += x;
        n[l as usize] += 1;
    }
    if n[0] == 0 || n[1] == 0 {
        return None;
    }
    Some([sum[0] / n[0] as f64, sum[1] / n[1] as f64])
}

fn inertia_of(a: &[f64], labels: &[u8], c: [f64; 2]) -> f64 {
    a.iter()
        .zip(labels)
        .map(|(&x, &l)| (x - c[l as usize]) * (x - c[l as usize]))
        .sum()
}

/// Lloyd's algorithm for two clusters on scalar data, started at the 25th
/// and 75th percentiles.
///
/// In one dimension every locally optimal 2-partition is a contiguous split
/// of the sorted values, so the fixpoint is checked against a scan of all
/// split points and replaced if a split with lower inertia exists. The
/// returned inertia is computed on the sorted values one cluster at a time.
pub fn kmeans_1d(a: &[f64], cfg: &KmeansConfig) -> Result<ClusterAssignment> {
    let m = a.len();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: m });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument("non-finite weight".into()));
    }
    let mut sorted = a.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[m - 1] - sorted[0] <= DEGENERATE_SPREAD {
        return Err(Error::DegenerateInput);
    }

    let mut c = [quantile(&sorted, 0.25), quantile(&sorted, 0.75)];
    if c[0] == c[1] {
        c = [sorted[0], sorted[m - 1]];
    }
    let mut labels = assign(a, c);
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iter {
        iterations += 1;
        let Some(next) = centers_of(a, &labels) else {
            break;
        };
        c = next;
        let relabeled = assign(a, c);
        history.push(inertia_of(a, &relabeled, c));
        if relabeled == labels {
            break;
        }
        labels = relabeled;
    }

    // Lloyd's partition as a split of the sorted order.
    let lloyd_cut = match centers_of(a, &labels) {
        Some(cc) if cc[0] < cc[1] => labels.iter().filter(|&&l| l == 0).count(),
        _ => 0,
    };
    let best_cut = best_split(&sorted);
    let lloyd_valid = lloyd_cut > 0 && lloyd_cut < m && sorted[lloyd_cut - 1] < sorted[lloyd_cut];
    let (cut, polished) = if lloyd_valid
        && split_inertia(&sorted, lloyd_cut) <= split_inertia(&sorted, best_cut)
    {
        (lloyd_cut, false)
    } else {
        (best_cut, true)
    };
    let threshold = sorted[cut - 1];
    let labels: Vec<u8> = a.iter().map(|&x| u8::from(x > threshold)).collect();
    let centers = centers_of(a, &labels).expect("split leaves both sides non-empty");
    Ok(ClusterAssignment {
        labels,
        centers,
        iterations,
        inertia: split_inertia(&sorted, cut),
        inertia_history: history,
        polished,
    })
}

/// Split point with minimal inertia among those between distinct values.
/// Candidates are ranked by prefix sums and the near-ties re-evaluated
/// exactly.
fn best_split(sorted: &[f64]) -> usize {
    let m = sorted.len();
    let shift = sorted[m / 2];
    let mut s = vec![0.0; m + 1];
    let mut s2 = vec![0.0; m + 1];
    for (i, &x) in sorted.iter().enumerate() {
        let y = x - shift;
        s[i + 1] = s[i] + y;
        s2[i + 1] = s2[i] + y * y;
    }
    let fast = |cut: usize| {
        let ss = |lo: usize, hi: usize| {
            let n = (hi - lo) as f64;
            let t = s[hi] - s[lo];
            (s2[hi] - s2[lo]) - t * t / n
        };
        ss(0, cut) + ss(cut, m)
    };
    let cuts: Vec<usize> = (1..m).filter(|&c| sorted[c - 1] < sorted[c]).collect();
    let approx: Vec<f64> = cuts.iter().map(|&c| fast(c)).collect();
    let min = approx.iter().copied().fold(f64::INFINITY, f64::min);
    let slack = 1e-9 * (s2[m] + min.abs()) + f64::MIN_POSITIVE;
    cuts.iter()
        .zip(&approx)
        .filter(|&(_, &v)| v <= min + slack)
        .map(|(&c, _)| (c, split_inertia(sorted, c)))
        .min_by(|x, y| x.1.total_cmp(&y.1).then(x.0.cmp(&y.0)))
        .map(|(c, _)| c)
        .expect("non-degenerate input has a split point")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuarantineResult {
    pub class_id: ClassId,
    /// Dataset row indices, ascending.
    pub poisoned_indices: Vec<usize>,
    pub clean_indices: Vec<usize>,
    /// Weight entries of the poisoned samples, aligned with `poisoned_indices`.
    pub poisoned_weights: Vec<f64>,
    pub poisoned_cluster: u8,
    /// |poisoned| / |clean|.
    pub cluster_size_ratio: f64,
    pub tie_broken: bool,
    pub suspicious_singleton: bool,
}

impl QuarantineResult {
    pub fn flag(&self) -> &'static str {
        match (self.tie_broken, self.suspicious_singleton) {
            (true, _) => "tie_broken",
            (false, true) => "suspicious_singleton",
            _ => "",
        }
    }
}

/// The smaller cluster is taken as poisoned. Equal sizes go to the cluster
/// whose center is larger in absolute value.
pub fn identify_poisoned(
    assign: &ClusterAssignment,
    weights: &[f64],
    class_id: &ClassId,
    row_map: &[usize],
) -> Result<QuarantineResult> {
    let m = assign.labels.len();
    if weights.len() != m {
        return Err(Error::DimensionMismatch { expected: m, found: weights.len() });
    }
    if row_map.len() != m {
        return Err(Error::DimensionMismatch { expected: m, found: row_map.len() });
    }
    let [n0, n1] = assign.sizes();
    let tie = n0 == n1;
    let poisoned_cluster: u8 = if tie {
        u8::from(assign.centers[1].abs() > assign.centers[0].abs())
    } else {
        u8::from(n1 < n0)
    };
    let mut rows: Vec<(usize, f64, bool)> = assign
        .labels
        .iter()
        .zip(weights)
        .zip(row_map)
        .map(|((&l, &w), &r)| (r, w, l == poisoned_cluster))
        .collect();
    rows.sort_by_key(|r| r.0);
    let mut poisoned_indices = Vec::new();
    let mut poisoned_weights = Vec::new();
    let mut clean_indices = Vec::new();
    for (r, w, p) in rows {
        if p {
            poisoned_indices.push(r);
            poisoned_weights.push(w);
        } else {
            clean_indices.push(r);
        }
    }
    Ok(QuarantineResult {
        class_id: class_id.clone(),
        cluster_size_ratio: poisoned_indices.len() as f64 / clean_indices.len() as f64,
        suspicious_singleton: poisoned_indices.len() == 1,
        poisoned_indices,
        clean_indices,
        poisoned_weights,
        poisoned_cluster,
        tie_broken: tie,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub row: usize,
    pub sample_id: String,
    pub class_id: ClassId,
    pub weight: f64,
    pub cluster: u8,
    pub flag: String,
}

#[derive(Debug, Clone)]
pub struct CleanedOutput {
    pub cleaned: LabeledDataset,
    pub manifest: Vec<ManifestEntry>,
}

/// Removes every quarantined row, preserving the order of the rest.
pub fn emit_cleaned(ds: &LabeledDataset, quarantines: &[QuarantineResult]) -> Result<CleanedOutput> {
    let mut removed = BTreeSet::new();
    let mut manifest = Vec::new();
    for q in quarantines {
        for (&row, &w) in q.poisoned_indices.iter().zip(&q.poisoned_weights) {
            if row >= ds.len() {
                return Err(Error::IndexOutOfRange { index: row, len: ds.len() });
            }
            if !removed.insert(row) {
                continue;
            }
            manifest.push(ManifestEntry {
                row,
                sample_id: ds.sample_ids()[row].clone(),
                class_id: ds.labels()[row].clone(),
                weight: w,
                cluster: q.poisoned_cluster,
                flag: q.flag().to_string(),
            });
        }
    }
    let keep: Vec<usize> = (0..ds.len()).filter(|r| !removed.contains(r)).collect();
    Ok(CleanedOutput {
        cleaned: ds.subset(&keep)?,
        manifest,
    })
}

pub fn write_manifest<W: Write>(mut w: W, manifest: &[ManifestEntry]) -> Result<()> {
    writeln!(w, "sample_id,class_id,weight,cluster,flag")?;
    for e in manifest {
        writeln!(w, "{},{},{},{},{}", e.sample_id, e.class_id, e.weight, e.cluster, e.flag)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::repr_store::RepresentationMatrix;
    use proptest::prelude::*;

    fn brute_force(a: &[f64]) -> f64 {
        let mut s = a.to_vec();
        s.sort_by(f64::total_cmp);
        (1..s.len()).map(|c| split_inertia(&s, c)).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn separated_pairs() {
        let k = kmeans_1d(&[0.0, 0.0, 10.0, 10.0], &KmeansConfig::default()).unwrap();
        assert_eq!(k.labels, vec![0, 0, 1, 1]);
        assert_eq!(k.centers, [0.0, 10.0]);
        assert_eq!(k.inertia, 0.0);
    }

    #[test]
    fn outlier_isolated() {
        let k = kmeans_1d(&[1.0, 2.0, 3.0, 100.0], &KmeansConfig::default()).unwrap();
        assert_eq!(k.labels, vec![0, 0, 0, 1]);
        assert_eq!(k.inertia, brute_force(&[1.0, 2.0, 3.0, 100.0]));
    }

    #[test]
    fn degenerate_and_short_inputs() {
        let cfg = KmeansConfig::default();
        assert!(matches!(kmeans_1d(&[0.5; 6], &cfg), Err(Error::DegenerateInput)));
        assert!(matches!(kmeans_1d(&[0.5], &cfg), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn two_values_only() {
        let k = kmeans_1d(&[3.0, -1.0], &KmeansConfig::default()).unwrap();
        assert_eq!(k.labels, vec![1, 0]);
        assert_eq!(k.inertia, 0.0);
    }

    #[test]
    fn smaller_cluster_is_poisoned() {
        let mut a = vec![0.01; 800];
        a.extend(vec![0.06; 400]);
        let k = kmeans_1d(&a, &KmeansConfig::default()).unwrap();
        let rows: Vec<usize> = (0..a.len()).collect();
        let q = identify_poisoned(&k, &a, &"t".into(), &rows).unwrap();
        assert_eq!(q.poisoned_indices, (800..1200).collect::<Vec<_>>());
        assert!(!q.tie_broken);
        assert!((q.cluster_size_ratio - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tie_goes_to_larger_magnitude_center() {
        let mut a = vec![0.01; 5];
        a.extend(vec![0.09; 5]);
        let k = kmeans_1d(&a, &KmeansConfig::default()).unwrap();
        let rows: Vec<usize> = (0..10).collect();
        let q = identify_poisoned(&k, &a, &"t".into(), &rows).unwrap();
        assert_eq!(q.poisoned_indices, (5..10).collect::<Vec<_>>());
        assert!(q.tie_broken);
        assert_eq!(q.flag(), "tie_broken");

        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let k = kmeans_1d(&neg, &KmeansConfig::default()).unwrap();
        let q = identify_poisoned(&k, &neg, &"t".into(), &rows).unwrap();
        assert_eq!(q.poisoned_indices, (5..10).collect::<Vec<_>>());
    }

    #[test]
    fn singleton_flagged() {
        let a = [0.0, 0.1, 0.05, 0.02, 5.0];
        let k = kmeans_1d(&a, &KmeansConfig::default()).unwrap();
        let q = identify_poisoned(&k, &a, &"t".into(), &[10, 11, 12, 13, 14]).unwrap();
        assert_eq!(q.poisoned_indices, vec![14]);
        assert!(q.suspicious_singleton);
    }

    fn toy_dataset() -> LabeledDataset {
        let m = RepresentationMatrix::from_rows(&(0..10).map(|i| vec![i as f64, 1.0]).collect::<Vec<_>>()).unwrap();
        let labels = (0..10).map(|i| ClassId::from(if i < 6 { "a" } else { "b" })).collect();
        LabeledDataset::with_index_ids(m, labels).unwrap()
    }

    #[test]
    fn emit_identity_without_quarantine() {
        let ds = toy_dataset();
        let out = emit_cleaned(&ds, &[]).unwrap();
        assert!(out.manifest.is_empty());
        assert_eq!(out.cleaned.matrix(), ds.matrix());
        assert_eq!(out.cleaned.labels(), ds.labels());
        assert_eq!(out.cleaned.sample_ids(), ds.sample_ids());
    }

    #[test]
    fn emit_removes_and_preserves_order() {
        let ds = toy_dataset();
        let q = QuarantineResult {
            class_id: "a".into(),
            poisoned_indices: vec![1, 3, 4],
            clean_indices: vec![0, 2, 5],
            poisoned_weights: vec![0.5, 0.6, 0.7],
            poisoned_cluster: 1,
            cluster_size_ratio: 1.0,
            tie_broken: true,
            suspicious_singleton: false,
        };
        let out = emit_cleaned(&ds, std::slice::from_ref(&q)).unwrap();
        assert_eq!(out.cleaned.len() + out.manifest.len(), ds.len());
        let ids: Vec<&str> = out.cleaned.sample_ids().iter().map(String::as_str).collect();
        assert_eq!(ids, vec!["0", "2", "5", "6", "7", "8", "9"]);
        assert_eq!(out.manifest[2].weight, 0.7);

        let mut csv = Vec::new();
        write_manifest(&mut csv, &out.manifest).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next(), Some("sample_id,class_id,weight,cluster,flag"));
        assert_eq!(text.lines().nth(1), Some("1,a,0.5,1,tie_broken"));

        let mut bad = q;
        bad.poisoned_indices = vec![10];
        bad.poisoned_weights = vec![0.1];
        assert!(matches!(emit_cleaned(&ds, &[bad]), Err(Error::IndexOutOfRange { index: 10, len: 10 })));
    }

    proptest! {
        #[test]
        fn optimal_and_voronoi(a in proptest::collection::vec(-10.0f64..10.0, 2..60)) {
            prop_assume!(a.iter().any(|&x| x != a[0]));
            let k = kmeans_1d(&a, &KmeansConfig::default()).unwrap();
            prop_assert_eq!(k.inertia, brute_force(&a));
            let [n0, n1] = k.sizes();
            prop_assert!(n0 > 0 && n1 > 0);
            for (&x, &l) in a.iter().zip(&k.labels) {
                let own = (x - k.centers[l as usize]).abs();
                let other = (x - k.centers[1 - l as usize]).abs();
                prop_assert!(own <= other + 1e-12);
            }
            for w in k.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-300);
            }
        }

        #[test]
        fn poisoned_set_invariant_to_negation(a in proptest::collection::vec(-1.0f64..1.0, 3..40)) {
            prop_assume!(a.iter().any(|&x| x != a[0]));
            let rows: Vec<usize> = (0..a.len()).collect();
            let neg: Vec<f64> = a.iter().map(|x| -x).collect();
            let cfg = KmeansConfig::default();
            let q1 = identify_poisoned(&kmeans_1d(&a, &cfg).unwrap(), &a, &"t".into(), &rows).unwrap();
            let q2 = identify_poisoned(&kmeans_1d(&neg, &cfg).unwrap(), &neg, &"t".into(), &rows).unwrap();
            prop_assert_eq!(&q1.poisoned_indices, &q2.poisoned_indices);
            let mut all = q1.poisoned_indices.clone();
            all.extend(&q1.clean_indices);
            all.sort();
            prop_assert_eq!(all, rows);
        }
    }
}
