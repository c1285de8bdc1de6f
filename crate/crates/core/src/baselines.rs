//! Unsupervised scar delineation inside the atrial wall: n-SD thresholding,
//! 1-D k-means and fuzzy c-means on wall intensities.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::{Mask, Volume};

pub const DEFAULT_WALL_RADIUS: f64 = 2.0;

/// Symmetric shell around the LA/PV boundary where baselines look for scar.
#[derive(Debug, Clone, PartialEq)]
pub struct WallRegion {
    mask: Mask,
    radius: f64,
}

impl WallRegion {
    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn count(&self) -> usize {
        self.mask.count()
    }

    /// Voxel indices in storage order.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask.data()[i]).collect()
    }
}

/// Voxels within Euclidean distance `radius` of a boundary voxel of `la_pv`.
pub fn wall_region(la_pv: &Mask, radius: f64) -> Result<WallRegion> {
    if la_pv.count() == 0 {
        return Err(Error::invalid("wall_region", "LA/PV mask is empty"));
    }
    if !radius.is_finite() || radius < 0.0 {
        return Err(Error::invalid("wall_region", format!("radius {radius} must be finite and >= 0")));
    }
    Ok(WallRegion {
        mask: la_pv.boundary_shell(radius),
        radius,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "2sd")]
    TwoSd,
    #[serde(rename = "kmeans")]
    KMeans,
    #[serde(rename = "fcm")]
    Fcm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::TwoSd, Method::KMeans, Method::Fcm];

    pub fn tag(self) -> &'static str {
        match self {
            Method::TwoSd => "2sd",
            Method::KMeans => "kmeans",
            Method::Fcm => "fcm",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.tag() == s).ok_or_else(|| {
            Error::Config(format!("unknown baseline method {s:?}; expected one of 2sd, kmeans, fcm"))
        })
    }
}

/// A baseline scar mask plus anything worth flagging in a report.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineResult {
    pub scar: Mask,
    pub flags: Vec<String>,
}

fn wall_values(volume: &Volume, wall: &WallRegion) -> Result<(Vec<usize>, Vec<f64>)> {
    if wall.mask.extents() != volume.extents() {
        return Err(Error::shape(
            "baseline",
            format!("wall {:?} vs volume {:?}", wall.mask.extents(), volume.extents()),
        ));
    }
    let idx = wall.indices();
    if idx.is_empty() {
        return Err(Error::invalid("baseline", "wall region is empty"));
    }
    let vals = idx.iter().map(|&i| volume.intensities()[i]).collect();
    Ok((idx, vals))
}

fn mask_from(extents: (usize, usize, usize), idx: &[usize], hit: impl Fn(usize) -> bool) -> Mask {
    let mut m = Mask::empty(extents);
    for (k, &i) in idx.iter().enumerate() {
        if hit(k) {
            m.set_index(i, true);
        }
    }
    m
}

/// Wall voxels brighter than `mean + n_sd · std` (population std, strict `>`).
pub fn sd_threshold(volume: &Volume, wall: &WallRegion, n_sd: f64) -> Result<BaselineResult> {
    let (idx, vals) = wall_values(volume, wall)?;
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Ok(BaselineResult {
            scar: Mask::empty(volume.extents()),
            flags: vec!["wall intensities are constant; no scar marked".into()],
        });
    }
    let threshold = mean + n_sd * std;
    Ok(BaselineResult {
        scar: mask_from(volume.extents(), &idx, |k| vals[k] > threshold),
        flags: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub sse: f64,
    pub iterations: usize,
    /// Within-cluster SSE after each assignment step of the winning restart.
    pub sse_trace: Vec<f64>,
}

const KMEANS_MAX_ITER: usize = 300;

fn distinct_count(values: &[f64]) -> usize {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    v.len()
}

fn nearest(v: f64, centroids: &[f64]) -> usize {
    let mut best = 0;
    for (j, c) in centroids.iter().enumerate().skip(1) {
        if (v - c).abs() < (v - centroids[best]).abs() {
            best = j;
        }
    }
    best
}

fn sse(values: &[f64], labels: &[usize], centroids: &[f64]) -> f64 {
    values.iter().zip(labels).map(|(v, &l)| (v - centroids[l]).powi(2)).sum()
}

fn kmeans_pp(values: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut centroids = vec![values[rng.random_range(0..values.len())]];
    while centroids.len() < k {
        let d2: Vec<f64> = values
            .iter()
            .map(|v| centroids.iter().map(|c| (v - c).powi(2)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random_range(0.0..total);
            let mut chosen = values.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if r < *d {
                    chosen = i;
                    break;
                }
                r -= d;
            }
            chosen
        } else {
            rng.random_range(0..values.len())
        };
        centroids.push(values[pick]);
    }
    centroids
}

fn lloyd(values: &[f64], mut centroids: Vec<f64>) -> KMeansFit {
    let k = centroids.len();
    let mut labels: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids)).collect();
    let mut trace = vec![sse(values, &labels, &centroids)];
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITER {
        iterations += 1;
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for (v, &l) in values.iter().zip(&labels) {
            sums[l] += v;
            counts[l] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j] / counts[j] as f64;
            }
        }
        let next: Vec<usize> = values.iter().map(|&v| nearest(v, &centroids)).collect();
        let s = sse(values, &next, &centroids);
        let prev = *trace.last().expect("trace starts non-empty");
        assert!(
            s <= prev * (1.0 + 1e-12) + 1e-300,
            "k-means objective rose from {prev} to {s} at iteration {iterations}"
        );
        trace.push(s);
        if next == labels {
            break;
        }
        labels = next;
    }
    KMeansFit {
        sse: *trace.last().expect("non-empty"),
        centroids,
        labels,
        iterations,
        sse_trace: trace,
    }
}

/// Above this many values the k > 2 exact start (quadratic DP) is skipped.
const EXACT_DP_MAX: usize = 4096;

/// Centroids of the minimum-SSE partition of the sorted values into `k`
/// contiguous groups, which is the global k-means optimum in 1-D.
fn exact_start(values: &[f64], k: usize) -> Option<Vec<f64>> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if k > 2 && n > EXACT_DP_MAX {
        return None;
    }
    let mut s1 = vec![0.0; n + 1];
    let mut s2 = vec![0.0; n + 1];
    for (i, x) in v.iter().enumerate() {
        s1[i + 1] = s1[i] + x;
        s2[i + 1] = s2[i] + x * x;
    }
    let cost = |i: usize, j: usize| {
        let (s, q, m) = (s1[j] - s1[i], s2[j] - s2[i], (j - i) as f64);
        (q - s * s / m).max(0.0)
    };
    // best[j] = least cost of v[..j] in the current number of groups, cut[g][j] its last cut
    let mut best: Vec<f64> = (0..=n).map(|j| if j == 0 { f64::INFINITY } else { cost(0, j) }).collect();
    let mut cuts = Vec::with_capacity(k - 1);
    for g in 2..=k {
        let mut next = vec![f64::INFINITY; n + 1];
        let mut cut = vec![0; n + 1];
        for j in g..=n {
            for i in (g - 1)..j {
                let c = best[i] + cost(i, j);
                if c < next[j] {
                    next[j] = c;
                    cut[j] = i;
                }
            }
        }
        best = next;
        cuts.push(cut);
    }
    let mut bounds = vec![n];
    let mut j = n;
    for cut in cuts.iter().rev() {
        j = cut[j];
        bounds.push(j);
    }
    bounds.push(0);
    bounds.reverse();
    Some(bounds.windows(2).map(|w| (s1[w[1]] - s1[w[0]]) / (w[1] - w[0]) as f64).collect())
}

/// Best of `restarts` k-means++ seeded Lloyd runs on 1-D values, plus one
/// Lloyd run started from the exact optimal contiguous partition, so the
/// result is the global optimum even when every random seeding lands in a
/// local one.
pub fn kmeans_1d(values: &[f64], k: usize, restarts: usize, seed: u64) -> Result<KMeansFit> {
    if k == 0 || restarts == 0 {
        return Err(Error::invalid("kmeans", "k and restarts must be positive"));
    }
    let distinct = distinct_count(values);
    if distinct < k {
        return Err(Error::invalid(
            "kmeans",
            format!("{distinct} distinct values cannot form {k} clusters"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    let starts = (0..restarts)
        .map(|_| kmeans_pp(values, k, &mut rng))
        .collect::<Vec<_>>()
        .into_iter()
        .chain(exact_start(values, k));
    for start in starts {
        let fit = lloyd(values, start);
        if best.as_ref().is_none_or(|b| fit.sse < b.sse) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn kmeans_scar(volume: &Volume, wall: &WallRegion, k: usize, restarts: usize, seed: u64) -> Result<BaselineResult> {
    let (idx, vals) = wall_values(volume, wall)?;
    let fit = kmeans_1d(&vals, k, restarts, seed)?;
    let scar_cluster = argmax(&fit.centroids);
    Ok(BaselineResult {
        scar: mask_from(volume.extents(), &idx, |i| fit.labels[i] == scar_cluster),
        flags: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FcmParams {
    pub clusters: usize,
    /// Fuzzifier, > 1.
    pub m: f64,
    /// Convergence threshold on the largest centroid move.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for FcmParams {
    fn default() -> Self {
        FcmParams {
            clusters: 2,
            m: 2.0,
            tol: 1e-6,
            max_iter: 300,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcmFit {
    pub centroids: Vec<f64>,
    /// Row-major `[n, clusters]`.
    pub memberships: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `J_m` after each iteration.
    pub objective_trace: Vec<f64>,
    /// Largest deviation of a membership row sum from 1 over all iterations.
    pub max_row_error: f64,
}

impl FcmFit {
    pub fn membership(&self, i: usize) -> &[f64] {
        let c = self.centroids.len();
        &self.memberships[i * c..(i + 1) * c]
    }
}

/// Optimal memberships for fixed centroids. A value sitting exactly on one or
/// more centroids belongs to them (equally) and to nothing else.
fn fcm_memberships(values: &[f64], centroids: &[f64], m: f64, out: &mut [f64]) {
    let c = centroids.len();
    let p = 2.0 / (m - 1.0);
    for (i, &v) in values.iter().enumerate() {
        let row = &mut out[i * c..(i + 1) * c];
        let d: Vec<f64> = centroids.iter().map(|cj| (v - cj).abs()).collect();
        let zeros = d.iter().filter(|&&x| x == 0.0).count();
        if zeros > 0 {
            for (u, &dj) in row.iter_mut().zip(&d) {
                *u = if dj == 0.0 { 1.0 / zeros as f64 } else { 0.0 };
            }
            continue;
        }
        for j in 0..c {
            let s: f64 = d.iter().map(|dk| (d[j] / dk).powf(p)).sum();
            row[j] = 1.0 / s;
        }
    }
}

fn fcm_objective(values: &[f64], centroids: &[f64], u: &[f64], m: f64) -> f64 {
    let c = centroids.len();
    values
        .iter()
        .enumerate()
        .map(|(i, v)| (0..c).map(|j| u[i * c + j].powf(m) * (v - centroids[j]).powi(2)).sum::<f64>())
        .sum()
}

/// Fuzzy c-means on 1-D values, seeded with k-means++ centroids.
pub fn fcm_1d(values: &[f64], params: &FcmParams) -> Result<FcmFit> {
    let c = params.clusters;
    if c == 0 || !(params.m > 1.0) || !params.m.is_finite() || !(params.tol > 0.0) || params.max_iter == 0 {
        return Err(Error::invalid("fcm", format!("bad parameters {params:?}")));
    }
    let distinct = distinct_count(values);
    if distinct < c {
        return Err(Error::invalid(
            "fcm",
            format!("{distinct} distinct values cannot form {c} clusters"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_pp(values, c, &mut rng);
    let mut u = vec![0.0; values.len() * c];
    let mut trace = Vec::new();
    let mut max_row_error = 0.0f64;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iter {
        iterations += 1;
        fcm_memberships(values, &centroids, params.m, &mut u);
        for row in u.chunks_exact(c) {
            max_row_error = max_row_error.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let mut next = centroids.clone();
        for (j, nj) in next.iter_mut().enumerate() {
            let (mut num, mut den) = (0.0, 0.0);
            for (i, v) in values.iter().enumerate() {
                let w = u[i * c + j].powf(params.m);
                num += w * v;
                den += w;
            }
            if den > 0.0 {
                *nj = num / den;
            }
        }
        let shift = next.iter().zip(&centroids).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        centroids = next;
        let j = fcm_objective(values, &centroids, &u, params.m);
        if let Some(&prev) = trace.last() {
            assert!(
                j <= prev * (1.0 + 1e-9) + 1e-300,
                "FCM objective rose from {prev} to {j} at iteration {iterations}"
            );
        }
        trace.push(j);
        if shift < params.tol {
            converged = true;
            break;
        }
    }
    // memberships consistent with the final centroids
    fcm_memberships(values, &centroids, params.m, &mut u);
    Ok(FcmFit {
        centroids,
        memberships: u,
        iterations,
        converged,
        objective_trace: trace,
        max_row_error,
    })
}

pub fn fcm_scar(volume: &Volume, wall: &WallRegion, params: &FcmParams) -> Result<BaselineResult> {
    let (idx, vals) = wall_values(volume, wall)?;
    let fit = fcm_1d(&vals, params)?;
    let scar_cluster = argmax(&fit.centroids);
    let mut flags = Vec::new();
    if !fit.converged {
        flags.push(format!("fcm did not converge within {} iterations", params.max_iter));
    }
    Ok(BaselineResult {
        scar: mask_from(volume.extents(), &idx, |i| argmax(fit.membership(i)) == scar_cluster),
        flags,
    })
}

/// Settings shared by [`run_method`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaselineSettings {
    pub n_sd: f64,
    pub kmeans_restarts: usize,
    pub fcm: FcmParams,
    pub seed: u64,
}

impl Default for BaselineSettings {
    fn default() -> Self {
        BaselineSettings {
            n_sd: 2.0,
            kmeans_restarts: 5,
            fcm: FcmParams::default(),
            seed: 0,
        }
    }
}

pub fn run_method(method: Method, volume: &Volume, wall: &WallRegion, s: &BaselineSettings) -> Result<BaselineResult> {
    match method {
        Method::TwoSd => sd_threshold(volume, wall, s.n_sd),
        Method::KMeans => kmeans_scar(volume, wall, 2, s.kmeans_restarts, s.seed),
        Method::Fcm => fcm_scar(volume, wall, &FcmParams { seed: s.seed, ..s.fcm }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_volume(vals: &[f64]) -> (Volume, WallRegion) {
        let n = vals.len();
        let v = Volume::new((n, 1, 1), [1.0; 3], vals.to_vec()).unwrap();
        let wall = WallRegion {
            mask: Mask::from_fn((n, 1, 1), |_, _, _| true),
            radius: 0.0,
        };
        (v, wall)
    }

    #[test]
    fn strict_threshold_excludes_boundary_value() {
        // mean 20.8, population std 39.6, threshold 100.0 exactly
        let (v, w) = line_volume(&[1.0, 1.0, 1.0, 1.0, 100.0]);
        let r = sd_threshold(&v, &w, 2.0).unwrap();
        assert_eq!(r.scar.count(), 0);
        let r = sd_threshold(&v, &w, 1.9).unwrap();
        assert_eq!(r.scar.count(), 1);
    }

    #[test]
    fn constant_wall_is_flagged() {
        let (v, w) = line_volume(&[0.3; 4]);
        let r = sd_threshold(&v, &w, 2.0).unwrap();
        assert_eq!(r.scar.count(), 0);
        assert_eq!(r.flags.len(), 1);
        assert!(kmeans_scar(&v, &w, 2, 5, 0).is_err());
    }

    #[test]
    fn kmeans_separated_clusters() {
        let (v, w) = line_volume(&[0.0, 0.0, 0.0, 10.0, 10.0]);
        let r = kmeans_scar(&v, &w, 2, 5, 1).unwrap();
        assert_eq!(r.scar.data(), &[false, false, false, true, true]);
    }

    #[test]
    fn fcm_singular_membership() {
        let fit = fcm_1d(&[0.0, 0.0, 4.0, 4.0], &FcmParams::default()).unwrap();
        assert!(fit.converged);
        for i in 0..4 {
            let row = fit.membership(i);
            assert!(row.contains(&1.0), "{row:?}");
        }
    }

    #[test]
    fn method_tags() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert!("otsu".parse::<Method>().is_err());
    }
}
