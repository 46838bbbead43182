//! K-means with k-means++ seeding over embedding rows, plus neighborhood
//! queries between the fitted clusters.

use std::collections::HashMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::providers::Embedding;

/// Defaults mirroring scikit-learn's `KMeans`.
pub const DEFAULT_MAX_ITERS: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-4;

const UNIT_NORM_TOL: f64 = 1e-6;
const MAGIC: &[u8; 4] = b"QKMC";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ClusterError {
    #[error("k-means needs k >= 1 and at least k points (n = {n}, k = {k})")]
    TooFewPoints { n: usize, k: usize },
    #[error("row {row} contains a non-finite value")]
    NonFinite { row: usize },
    #[error("row {row} has L2 norm {norm}, expected unit norm")]
    NotUnitNorm { row: usize, norm: f64 },
    #[error("row {row} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("cluster index {c} out of range for k = {k}")]
    InvalidCluster { c: usize, k: usize },
    #[error("asked for {j} neighbors but only {available} other clusters exist")]
    TooManyNeighbors { j: usize, available: usize },
    #[error("{0} ids for {1} rows")]
    IdCount(usize, usize),
    #[error("cluster model {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("cluster model {path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// Lloyd's algorithm settings.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Relative tolerance: iteration stops once the summed squared centroid
    /// shift is at most `tol` times the mean per-feature variance.
    pub tol: f64,
    /// Project centroids back onto the unit sphere after each update.
    pub renormalize: bool,
}

/// Raw result of a k-means run.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<f32>,
    pub labels: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after each assignment step.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the
/// lowest index.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> Vec<(usize, f64)> {
    points.par_iter().map(|p| nearest(p, centroids)).collect()
}

impl KMeans {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            renormalize: false,
        }
    }

    pub fn fit<R: AsRef<[f32]> + Sync>(&self, rows: &[R]) -> Result<KMeansFit, ClusterError> {
        let n = rows.len();
        if self.k == 0 || n < self.k {
            return Err(ClusterError::TooFewPoints { n, k: self.k });
        }
        let dim = rows[0].as_ref().len();
        let mut points = Vec::with_capacity(n);
        for (row, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(ClusterError::DimensionMismatch {
                    row,
                    expected: dim,
                    got: r.len(),
                });
            }
            if !r.iter().all(|x| x.is_finite()) {
                return Err(ClusterError::NonFinite { row });
            }
            points.push(r.iter().map(|&x| x as f64).collect::<Vec<f64>>());
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut centroids = plus_plus(&points, self.k, &mut rng);
        let tol = self.tol * mean_feature_variance(&points);

        let mut history = Vec::new();
        let mut iterations = 0;
        for _ in 0..self.max_iters {
            iterations += 1;
            let mut nearest = assign(&points, &centroids);
            history.push(nearest.iter().map(|(_, d)| d).sum());

            let mut counts = vec![0usize; self.k];
            for (l, _) in &nearest {
                counts[*l] += 1;
            }
            reseed_empty(&mut nearest, &mut counts);

            let mut sums = vec![vec![0.0f64; dim]; self.k];
            for (p, (l, _)) in points.iter().zip(&nearest) {
                for (s, x) in sums[*l].iter_mut().zip(p) {
                    *s += x;
                }
            }
            let mut shift = 0.0;
            for (j, s) in sums.iter_mut().enumerate() {
                let c = counts[j] as f64;
                for x in s.iter_mut() {
                    *x /= c;
                }
                if self.renormalize {
                    let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        s.iter_mut().for_each(|x| *x /= norm);
                    }
                }
                shift += sq_dist(s, &centroids[j]);
            }
            centroids = sums;
            if shift <= tol {
                break;
            }
        }

        // store single precision and make the assignment exact for it
        let stored: Vec<f32> = centroids.iter().flatten().map(|&x| x as f32).collect();
        let rounded: Vec<Vec<f64>> = stored
            .chunks(dim)
            .map(|c| c.iter().map(|&x| x as f64).collect())
            .collect();
        let final_assign = assign(&points, &rounded);
        Ok(KMeansFit {
            k: self.k,
            dim,
            centroids: stored,
            labels: final_assign.iter().map(|(l, _)| *l).collect(),
            inertia: final_assign.iter().map(|(_, d)| d).sum(),
            iterations,
            inertia_history: history,
        })
    }
}

fn mean_feature_variance(points: &[Vec<f64>]) -> f64 {
    let n = points.len() as f64;
    let dim = points[0].len();
    let mut total = 0.0;
    for f in 0..dim {
        let mean = points.iter().map(|p| p[f]).sum::<f64>() / n;
        total += points.iter().map(|p| (p[f] - mean).powi(2)).sum::<f64>() / n;
    }
    total / dim as f64
}

fn plus_plus(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.gen_range(0..n)].clone()];
    let mut dist: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in dist.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        let c = points[pick].clone();
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Give every empty cluster the point farthest from its current centroid,
/// taken only from clusters that keep at least one member.
fn reseed_empty(nearest: &mut [(usize, f64)], counts: &mut [usize]) {
    for j in 0..counts.len() {
        if counts[j] > 0 {
            continue;
        }
        let donor = nearest
            .iter()
            .enumerate()
            .filter(|(_, (l, _))| counts[*l] > 1)
            .fold(None::<(usize, f64)>, |best, (i, (_, d))| match best {
                Some((_, bd)) if bd >= *d => best,
                _ => Some((i, *d)),
            });
        if let Some((i, _)) = donor {
            counts[nearest[i].0] -= 1;
            nearest[i] = (j, 0.0);
            counts[j] = 1;
        }
    }
}

/// A fitted clustering of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    /// Row-major `k x dim`.
    pub centroids: Vec<f32>,
    pub inertia: f64,
    doc_ids: Vec<String>,
    assignments: Vec<usize>,
}

/// Fit k-means over unit-norm document embeddings.
pub fn kmeans_fit(
    doc_ids: &[String],
    embeddings: &[Embedding],
    params: &KMeans,
) -> Result<(ClusterModel, KMeansFit), ClusterError> {
    if doc_ids.len() != embeddings.len() {
        return Err(ClusterError::IdCount(doc_ids.len(), embeddings.len()));
    }
    for (row, e) in embeddings.iter().enumerate() {
        if !e.is_finite() {
            return Err(ClusterError::NonFinite { row });
        }
        let norm = e.norm();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(ClusterError::NotUnitNorm { row, norm });
        }
    }
    let rows: Vec<&[f32]> = embeddings.iter().map(Embedding::values).collect();
    let fit = params.fit(&rows)?;
    let model = ClusterModel {
        k: fit.k,
        dim: fit.dim,
        seed: params.seed,
        centroids: fit.centroids.clone(),
        inertia: fit.inertia,
        doc_ids: doc_ids.to_vec(),
        assignments: fit.labels.clone(),
    };
    Ok((model, fit))
}

#[derive(Serialize, Deserialize)]
struct AssignmentRecord {
    document_id: String,
    cluster: usize,
}

impl ClusterModel {
    /// Assemble a model from stored parts.
    pub fn from_parts(
        dim: usize,
        seed: u64,
        centroids: Vec<f32>,
        inertia: f64,
        doc_ids: Vec<String>,
        assignments: Vec<usize>,
    ) -> Result<Self, ClusterError> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(ClusterError::DimensionMismatch {
                row: 0,
                expected: dim,
                got: centroids.len(),
            });
        }
        if doc_ids.len() != assignments.len() {
            return Err(ClusterError::IdCount(doc_ids.len(), assignments.len()));
        }
        let k = centroids.len() / dim;
        if let Some(&c) = assignments.iter().find(|&&a| a >= k) {
            return Err(ClusterError::InvalidCluster { c, k });
        }
        Ok(Self {
            k,
            dim,
            seed,
            centroids,
            inertia,
            doc_ids,
            assignments,
        })
    }

    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn assignment_map(&self) -> HashMap<&str, usize> {
        self.doc_ids
            .iter()
            .map(String::as_str)
            .zip(self.assignments.iter().copied())
            .collect()
    }

    fn check(&self, c: usize) -> Result<(), ClusterError> {
        if c >= self.k {
            return Err(ClusterError::InvalidCluster { c, k: self.k });
        }
        Ok(())
    }

    /// The `j` clusters closest to cluster `c` by centroid distance,
    /// ascending, ties broken by lower index. `c` itself is excluded.
    pub fn nearest_clusters(&self, c: usize, j: usize) -> Result<Vec<usize>, ClusterError> {
        self.check(c)?;
        if j >= self.k {
            return Err(ClusterError::TooManyNeighbors {
                j,
                available: self.k - 1,
            });
        }
        let origin: Vec<f64> = self.centroid(c).iter().map(|&x| x as f64).collect();
        let mut others: Vec<(f64, usize)> = (0..self.k)
            .filter(|&o| o != c)
            .map(|o| {
                let p: Vec<f64> = self.centroid(o).iter().map(|&x| x as f64).collect();
                (sq_dist(&origin, &p), o)
            })
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(others.into_iter().take(j).map(|(_, o)| o).collect())
    }

    /// Documents assigned to `c`, in corpus order.
    pub fn members(&self, c: usize) -> Result<Vec<&str>, ClusterError> {
        self.check(c)?;
        Ok(self
            .doc_ids
            .iter()
            .zip(&self.assignments)
            .filter(|(_, &a)| a == c)
            .map(|(id, _)| id.as_str())
            .collect())
    }

    /// Members of every cluster in `clusters`, in corpus order.
    pub fn members_of(&self, clusters: &[usize]) -> Vec<&str> {
        self.doc_ids
            .iter()
            .zip(&self.assignments)
            .filter(|(_, a)| clusters.contains(a))
            .map(|(id, _)| id.as_str())
            .collect()
    }

    /// Persist as a binary centroid file plus a json-lines assignment file.
    ///
    /// Binary layout (little-endian): `b"QKMC"`, version `u32`, `k u32`,
    /// `dim u32`, `seed u64`, `inertia f64`, then `k * dim` `f32` values.
    pub fn save(&self, centroid_path: &Path, assignment_path: &Path) -> Result<(), ClusterError> {
        let mut buf = Vec::with_capacity(32 + self.centroids.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.k as u32).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.inertia.to_le_bytes());
        for x in &self.centroids {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(centroid_path, buf).map_err(|source| ClusterError::Io {
            path: centroid_path.to_path_buf(),
            source,
        })?;

        let mut lines = String::new();
        for (id, &c) in self.doc_ids.iter().zip(&self.assignments) {
            lines.push_str(
                &serde_json::to_string(&AssignmentRecord {
                    document_id: id.clone(),
                    cluster: c,
                })
                .expect("serializable"),
            );
            lines.push('\n');
        }
        fs::write(assignment_path, lines).map_err(|source| ClusterError::Io {
            path: assignment_path.to_path_buf(),
            source,
        })
    }

    pub fn load(centroid_path: &Path, assignment_path: &Path) -> Result<Self, ClusterError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| ClusterError::Io { path, source }
        };
        let bad = |message: &str| ClusterError::Format {
            path: centroid_path.to_path_buf(),
            message: message.to_owned(),
        };
        let mut bytes = Vec::new();
        fs::File::open(centroid_path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io(centroid_path))?;
        if bytes.len() < 32 || &bytes[..4] != MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(bad("unsupported version"));
        }
        let k = u32_at(8) as usize;
        let dim = u32_at(12) as usize;
        let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
        let inertia = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
        let body = &bytes[32..];
        if body.len() != k * dim * 4 {
            return Err(bad("centroid block has the wrong length"));
        }
        let centroids = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let file = fs::File::open(assignment_path).map_err(io(assignment_path))?;
        let mut doc_ids = Vec::new();
        let mut assignments = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io(assignment_path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AssignmentRecord =
                serde_json::from_str(&line).map_err(|e| ClusterError::Format {
                    path: assignment_path.to_path_buf(),
                    message: format!("line {}: {e}", i + 1),
                })?;
            if rec.cluster >= k {
                return Err(ClusterError::InvalidCluster { c: rec.cluster, k });
            }
            doc_ids.push(rec.document_id);
            assignments.push(rec.cluster);
        }
        Ok(Self {
            k,
            dim,
            seed,
            centroids,
            inertia,
            doc_ids,
            assignments,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(angle_deg: f64) -> Embedding {
        let a = angle_deg.to_radians();
        Embedding(vec![a.cos() as f32, a.sin() as f32])
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("d{i}")).collect()
    }

    fn random_unit_rows(n: usize, d: usize, seed: u64) -> Vec<Embedding> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v: Vec<f32> = (0..d)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(&mut rng);
                        x as f32
                    })
                    .collect();
                Embedding(v).normalized()
            })
            .collect()
    }

    fn sse(points: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
        let d = points[0].len();
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points
                .iter()
                .zip(labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> = (0..d)
                .map(|f| members.iter().map(|p| p[f]).sum::<f64>() / members.len() as f64)
                .collect();
            total += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
        }
        total
    }

    #[test]
    fn separated_clouds_recover_means() {
        let rows: Vec<Vec<f32>> = vec![
            vec![0.0, 0.0],
            vec![0.2, 0.0],
            vec![0.0, 0.2],
            vec![10.0, 10.0],
            vec![10.2, 10.0],
            vec![10.0, 10.2],
        ];
        let fit = KMeans::new(2, 1).fit(&rows).unwrap();
        let mut cs: Vec<(f32, f32)> = fit
            .centroids
            .chunks(2)
            .map(|c| (c[0], c[1]))
            .collect();
        cs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let m = 0.2f32 / 3.0;
        assert!((cs[0].0 - m).abs() < 1e-6 && (cs[0].1 - m).abs() < 1e-6);
        assert!((cs[1].0 - (10.0 + m)).abs() < 1e-5 && (cs[1].1 - (10.0 + m)).abs() < 1e-5);
    }

    #[test]
    fn single_cluster_is_global_mean() {
        let rows = random_unit_rows(40, 5, 9);
        let (model, _) = kmeans_fit(&ids(40), &rows, &KMeans::new(1, 0)).unwrap();
        let pts: Vec<Vec<f64>> = rows
            .iter()
            .map(|e| e.values().iter().map(|&x| x as f64).collect())
            .collect();
        for f in 0..5 {
            let mean = pts.iter().map(|p| p[f]).sum::<f64>() / 40.0;
            assert!((model.centroid(0)[f] as f64 - mean).abs() < 1e-6);
        }
        let total_var = sse(&pts, &vec![0; 40], 1);
        assert!((model.inertia - total_var).abs() < 1e-5);
    }

    #[test]
    fn six_points_match_exhaustive_partition() {
        let rows: Vec<Embedding> = [0.0, 10.0, 20.0, 100.0, 110.0, 130.0]
            .into_iter()
            .map(unit)
            .collect();
        let pts: Vec<Vec<f64>> = rows
            .iter()
            .map(|e| e.values().iter().map(|&x| x as f64).collect())
            .collect();
        // every split of 6 points into 2 non-empty groups
        let mut best = (f64::INFINITY, vec![]);
        for mask in 1u32..(1 << 6) - 1 {
            let labels: Vec<usize> = (0..6).map(|i| ((mask >> i) & 1) as usize).collect();
            let s = sse(&pts, &labels, 2);
            if s < best.0 {
                best = (s, labels);
            }
        }
        let (model, _) = kmeans_fit(&ids(6), &rows, &KMeans::new(2, 0)).unwrap();
        let got = model.assignments();
        let same = got.iter().zip(&best.1).all(|(a, b)| a == b);
        let flipped = got.iter().zip(&best.1).all(|(a, b)| *a == 1 - b);
        assert!(same || flipped, "{got:?} vs {:?}", best.1);
        assert!((model.inertia - best.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_inputs() {
        let rows = random_unit_rows(3, 4, 1);
        assert!(matches!(
            kmeans_fit(&ids(3), &rows, &KMeans::new(4, 0)),
            Err(ClusterError::TooFewPoints { .. })
        ));
        let mut bad = rows.clone();
        bad[1].0[0] = f32::NAN;
        assert!(matches!(
            kmeans_fit(&ids(3), &bad, &KMeans::new(2, 0)),
            Err(ClusterError::NonFinite { row: 1 })
        ));
        let scaled = vec![Embedding(vec![2.0, 0.0]), Embedding(vec![0.0, 1.0])];
        assert!(matches!(
            kmeans_fit(&ids(2), &scaled, &KMeans::new(1, 0)),
            Err(ClusterError::NotUnitNorm { row: 0, .. })
        ));
    }

    fn line_model(xs: &[f32]) -> ClusterModel {
        ClusterModel {
            k: xs.len(),
            dim: 1,
            seed: 0,
            centroids: xs.to_vec(),
            inertia: 0.0,
            doc_ids: vec![],
            assignments: vec![],
        }
    }

    #[test]
    fn nearest_on_a_line() {
        let m = line_model(&[0.0, 1.0, 2.0, 10.0]);
        assert_eq!(m.nearest_clusters(0, 2).unwrap(), vec![1, 2]);
        assert_eq!(m.nearest_clusters(0, 3).unwrap(), vec![1, 2, 3]);
        assert_eq!(m.nearest_clusters(3, 3).unwrap(), vec![2, 1, 0]);
        assert!(matches!(
            m.nearest_clusters(0, 4),
            Err(ClusterError::TooManyNeighbors { .. })
        ));
        // equidistant neighbours resolve to the lower index
        let tie = line_model(&[1.0, 0.0, 2.0]);
        assert_eq!(tie.nearest_clusters(0, 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn nearest_matches_brute_force() {
        let rows = random_unit_rows(10, 6, 4);
        let m = ClusterModel {
            k: 10,
            dim: 6,
            seed: 0,
            centroids: rows.iter().flat_map(|e| e.values().to_vec()).collect(),
            inertia: 0.0,
            doc_ids: vec![],
            assignments: vec![],
        };
        for c in 0..10 {
            let mut pairs: Vec<(f64, usize)> = (0..10)
                .filter(|&o| o != c)
                .map(|o| {
                    let d: f64 = m
                        .centroid(c)
                        .iter()
                        .zip(m.centroid(o))
                        .map(|(a, b)| ((a - b) as f64).powi(2))
                        .sum();
                    (d, o)
                })
                .collect();
            pairs.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let oracle: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            assert_eq!(m.nearest_clusters(c, 9).unwrap(), oracle);
        }
    }

    #[test]
    fn empty_cluster_members_is_empty_list() {
        let m = ClusterModel {
            k: 3,
            dim: 1,
            seed: 0,
            centroids: vec![0.0, 1.0, 2.0],
            inertia: 0.0,
            doc_ids: ids(2),
            assignments: vec![0, 0],
        };
        assert!(m.members(2).unwrap().is_empty());
        assert!(m.members(3).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let rows = random_unit_rows(30, 4, 2);
        let (model, _) = kmeans_fit(&ids(30), &rows, &KMeans::new(3, 5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("c.bin"), dir.path().join("a.jsonl"));
        model.save(&a, &b).unwrap();
        assert_eq!(ClusterModel::load(&a, &b).unwrap(), model);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fit_invariants(n in 8usize..60, k in 1usize..6, seed in any::<u64>(), dseed in any::<u64>()) {
            prop_assume!(n >= k);
            let rows = random_unit_rows(n, 4, dseed);
            let (model, fit) = kmeans_fit(&ids(n), &rows, &KMeans::new(k, seed)).unwrap();

            // deterministic refit
            let (again, _) = kmeans_fit(&ids(n), &rows, &KMeans::new(k, seed)).unwrap();
            prop_assert_eq!(&again, &model);

            // inertia never increases between Lloyd iterations
            for w in fit.inertia_history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{:?}", fit.inertia_history);
            }

            // members partition the corpus
            let total: usize = (0..k).map(|c| model.members(c).unwrap().len()).sum();
            prop_assert_eq!(total, n);

            // each point sits at its argmin centroid, which for unit rows is
            // also the argmax dot product
            let cents: Vec<Vec<f64>> = (0..k)
                .map(|c| model.centroid(c).iter().map(|&x| x as f64).collect())
                .collect();
            for (e, &a) in rows.iter().zip(model.assignments()) {
                let p: Vec<f64> = e.values().iter().map(|&x| x as f64).collect();
                let da = sq_dist(&p, &cents[a]);
                for c in &cents {
                    prop_assert!(da <= sq_dist(&p, c) + 1e-9);
                }
            }
        }

        #[test]
        fn argmin_distance_is_argmax_dot_for_unit_rows(seed in any::<u64>()) {
            let pts = random_unit_rows(20, 5, seed);
            let cs = random_unit_rows(4, 5, seed.wrapping_add(1));
            for p in &pts {
                let by_dist = (0..4)
                    .min_by(|&a, &b| {
                        let da: f64 = p.values().iter().zip(cs[a].values()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
                        let db: f64 = p.values().iter().zip(cs[b].values()).map(|(x, y)| ((x - y) as f64).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                let by_dot = (0..4)
                    .max_by(|&a, &b| p.dot(&cs[a]).total_cmp(&p.dot(&cs[b])))
                    .unwrap();
                prop_assert_eq!(by_dist, by_dot);
            }
        }
    }
}
