//! Key-pose dictionaries: K-means over pose targets, hard labels and soft
//! (Gaussian-kernel) assignments.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pose::{sq_dist, Representation};
use crate::so3::Rotation;

/// Lloyd stops once no centroid moves more than this.
pub const KMEANS_TOL: f64 = 1e-10;
pub const KMEANS_MAX_ITERS: usize = 300;

/// Default dictionary size for shared-delta models.
pub const DEFAULT_K_SHARED: usize = 200;
/// Default dictionary size for one-delta-per-bin models.
pub const DEFAULT_K_PER_BIN: usize = 16;

/// K key poses in a fixed representation.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseDictionary {
    representation: Representation,
    keys: Vec<Vec<f64>>,
    rotations: Vec<Rotation>,
}

/// Probability vector over the K keys.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAssignment {
    pub p: Vec<f64>,
    pub gamma: f64,
}

/// Per-iteration record of a K-means fit.
#[derive(Clone, Debug, Default)]
pub struct KMeansTrace {
    /// Sum of squared distances to the assigned centroid after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl PoseDictionary {
    /// Validates every key and requires pairwise-distinct keys.
    pub fn new(representation: Representation, keys: Vec<Vec<f64>>) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        for k in &keys {
            representation.check(k)?;
            if !representation.is_valid(k) {
                return Err(Error::InvalidRotation(format!(
                    "key {k:?} is not a valid {representation} pose"
                )));
            }
        }
        if keys.len() >= 2 && min_pairwise_sq_dist(&keys) <= 0.0 {
            return Err(Error::DegenerateDictionary);
        }
        let rotations = keys
            .iter()
            .map(|k| representation.to_rotation(k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            representation,
            keys,
            rotations,
        })
    }

    pub fn representation(&self) -> Representation {
        self.representation
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[Vec<f64>] {
        &self.keys
    }

    pub fn key(&self, k: usize) -> &[f64] {
        &self.keys[k]
    }

    /// Key rotation `exp(z_k)` (or the quaternion's rotation).
    pub fn key_rotation(&self, k: usize) -> &Rotation {
        &self.rotations[k]
    }

    /// Index of the nearest key in Euclidean distance; lowest index on ties.
    pub fn hard_label(&self, y: &[f64]) -> usize {
        hard_label(y, self)
    }

    pub fn soft_assign(&self, y: &[f64], gamma: f64) -> SoftAssignment {
        soft_assign(y, self, gamma)
    }

    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "repr={} K={}", self.representation, self.keys.len())?;
        for key in &self.keys {
            let line = key
                .iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(" ");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut buf = Vec::new();
        self.write_text(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("dictionary text is ASCII")
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })??;
        let mut repr = None;
        let mut k = None;
        for field in header.split_whitespace() {
            match field.split_once('=') {
                Some(("repr", v)) => repr = Some(v.parse::<Representation>()?),
                Some(("K", v)) => {
                    k = Some(v.parse::<usize>().map_err(|e| Error::Parse {
                        line: 1,
                        msg: e.to_string(),
                    })?)
                }
                _ => {
                    return Err(Error::Parse {
                        line: 1,
                        msg: format!("unexpected header field '{field}'"),
                    })
                }
            }
        }
        let (repr, k) = match (repr, k) {
            (Some(r), Some(k)) => (r, k),
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: "header must be 'repr=<...> K=<int>'".into(),
                })
            }
        };
        let mut keys = Vec::with_capacity(k);
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let key = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 2,
                    msg: e.to_string(),
                })?;
            keys.push(key);
        }
        if keys.len() != k {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header declares K={k} but {} keys follow", keys.len()),
            });
        }
        Self::new(repr, keys)
    }
}

fn min_pairwise_sq_dist(keys: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..keys.len() {
        for j in (i + 1)..keys.len() {
            best = best.min(sq_dist(&keys[i], &keys[j]));
        }
    }
    best
}

/// `argmin_k ||y - z_k||`, lowest index on ties.
pub fn hard_label(y: &[f64], dict: &PoseDictionary) -> usize {
    nearest(y, &dict.keys).0
}

fn nearest(y: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, z) in centers.iter().enumerate() {
        let d = sq_dist(y, z);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// `p_k = softmax_k(-gamma ||y - z_k||^2)`.
pub fn soft_assign(y: &[f64], dict: &PoseDictionary, gamma: f64) -> SoftAssignment {
    let scores: Vec<f64> = dict.keys.iter().map(|z| -gamma * sq_dist(y, z)).collect();
    SoftAssignment {
        p: softmax(&scores),
        gamma,
    }
}

/// Max-subtracted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `0.5 / min_{i != j} ||z_i - z_j||^2`.
pub fn default_gamma(dict: &PoseDictionary) -> Result<f64> {
    if dict.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: dict.len(),
        });
    }
    let d = min_pairwise_sq_dist(&dict.keys);
    if d <= 0.0 {
        return Err(Error::DegenerateDictionary);
    }
    Ok(0.5 / d)
}

/// K-means (k-means++ seeding, Lloyd iterations) in the representation's
/// vector space with Euclidean distance.
pub fn fit_kmeans(
    representation: Representation,
    targets: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<PoseDictionary> {
    fit_kmeans_traced(representation, targets, k, seed).map(|(d, _)| d)
}

pub fn fit_kmeans_traced(
    representation: Representation,
    targets: &[Vec<f64>],
    k: usize,
    seed: u64,
) -> Result<(PoseDictionary, KMeansTrace)> {
    if k == 0 || targets.len() < k {
        return Err(Error::InsufficientData {
            needed: k.max(1),
            got: targets.len(),
        });
    }
    for t in targets {
        representation.check(t)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seeds(targets, k, &mut rng)?;
    let mut trace = KMeansTrace::default();
    let mut assign = vec![0usize; targets.len()];

    for iter in 0..KMEANS_MAX_ITERS {
        let mut objective = 0.0;
        let mut dists = vec![0.0; targets.len()];
        for (i, t) in targets.iter().enumerate() {
            let (l, d) = nearest(t, &centers);
            assign[i] = l;
            dists[i] = d;
            objective += d;
        }
        repair_empty_clusters(&mut assign, &mut dists, k);
        trace.objective.push(objective);

        let dim = representation.dim();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (t, &l) in targets.iter().zip(&assign) {
            counts[l] += 1;
            for (s, x) in sums[l].iter_mut().zip(t) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, (sum, n)) in centers.iter_mut().zip(sums.into_iter().zip(counts)) {
            let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            let mean = representation.sanitize(&mean)?;
            shift = shift.max(sq_dist(c, &mean).sqrt());
            *c = mean;
        }
        trace.iterations = iter + 1;
        if shift < KMEANS_TOL {
            trace.converged = true;
            break;
        }
    }
    Ok((PoseDictionary::new(representation, centers)?, trace))
}

fn plus_plus_seeds(targets: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let first = rng.random_range(0..targets.len());
    let mut centers = vec![targets[first].clone()];
    let mut d2: Vec<f64> = targets.iter().map(|t| sq_dist(t, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // fewer distinct targets than clusters
            return Err(Error::DegenerateDictionary);
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = None;
        for (i, d) in d2.iter().enumerate() {
            if *d > 0.0 {
                pick = Some(i);
                if r < *d {
                    break;
                }
                r -= d;
            }
        }
        let pick = pick.expect("positive total implies a positive weight");
        centers.push(targets[pick].clone());
        let c = centers.last().expect("just pushed");
        for (d, t) in d2.iter_mut().zip(targets) {
            *d = d.min(sq_dist(t, c));
        }
    }
    Ok(centers)
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty_clusters(assign: &mut [usize], dists: &mut [f64], k: usize) {
    let mut counts = vec![0usize; k];
    for &l in assign.iter() {
        counts[l] += 1;
    }
    for empty in 0..k {
        if counts[empty] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &l) in assign.iter().enumerate() {
            if counts[l] > 1 && dists[i] > far_d {
                far = Some(i);
                far_d = dists[i];
            }
        }
        if let Some(i) = far {
            counts[assign[i]] -= 1;
            assign[i] = empty;
            counts[empty] = 1;
            dists[i] = 0.0;
        }
    }
}

impl SoftAssignment {
    /// Index of the largest probability, lowest on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }
}

/// Lowest-index argmax.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}

/// Short human-readable summary (used in logs).
pub fn describe(dict: &PoseDictionary) -> String {
    let mut s = String::new();
    let _ = write!(s, "{} keys ({})", dict.len(), dict.representation());
    if let Ok(g) = default_gamma(dict) {
        let _ = write!(s, ", default gamma {g:.4}");
    }
    s
}
