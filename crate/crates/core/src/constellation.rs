//! Multi-dimensional constellations and their distance metrics.
//!
//! A [`Constellation`] holds `M` complex vectors of length `K`. Storage is
//! column-major, so the flat slice returned by [`Constellation::as_vec`] is
//! exactly `vec(C)`: vector `i` occupies entries `i*K .. (i+1)*K`.
//!
//! All indices in this API are 0-based.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

/// Default absolute tolerance below which a per-dimension gap counts as zero
/// when forming the admissible set of a product distance.
pub const DEFAULT_ZERO_TOL: f64 = 1e-12;

/// Default relative tolerance for kissing-number counting.
pub const DEFAULT_KISSING_REL_TOL: f64 = 1e-6;

/// Tolerance used when flagging AM-GM inequality violations.
pub const AMGM_VIOLATION_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    k: usize,
    m: usize,
    points: Vec<Complex64>,
}

/// Distance metric selector for [`Constellation::kissing_number`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
    Product,
}

impl Constellation {
    /// Builds a constellation from a column-major `K*M` buffer.
    pub fn new(k: usize, m: usize, points: Vec<Complex64>) -> Result<Self> {
        if k < 1 {
            return Err(Error::Dimension("K must be at least 1".into()));
        }
        if m < 2 {
            return Err(Error::Dimension("M must be at least 2".into()));
        }
        if points.len() != k * m {
            return Err(Error::Dimension(format!("expected {} entries for K={k}, M={m}, got {}", k * m, points.len())));
        }
        if let Some(pos) = points.iter().position(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite { vector: pos / k, dim: pos % k });
        }
        Ok(Self { k, m, points })
    }

    /// Builds a constellation from its vectors.
    pub fn from_columns(columns: &[Vec<Complex64>]) -> Result<Self> {
        let k = columns.first().map(Vec::len).unwrap_or(0);
        if columns.iter().any(|c| c.len() != k) {
            return Err(Error::Dimension("all vectors must have the same length".into()));
        }
        Self::new(k, columns.len(), columns.concat())
    }

    /// Unit-power QPSK in one complex dimension, points `(±1±i)/√2`.
    pub fn qpsk() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let pts = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)]
            .iter()
            .map(|&(a, b)| Complex64::new(a * s, b * s))
            .collect();
        Self::new(1, 4, pts).expect("valid QPSK")
    }

    /// The `4^K`-point Cartesian product of QPSK across `K` dimensions,
    /// normalized to unit average vector power.
    pub fn cartesian_qpsk(k: usize) -> Result<Self> {
        if k < 1 {
            return Err(Error::Dimension("K must be at least 1".into()));
        }
        let base = Self::qpsk();
        let m = 4usize.pow(k as u32);
        let mut points = Vec::with_capacity(k * m);
        for idx in 0..m {
            // most significant base-4 digit drives the first dimension
            for d in 0..k {
                let digit = (idx / 4usize.pow((k - 1 - d) as u32)) % 4;
                points.push(base.points[digit]);
            }
        }
        Self::new(k, m, points)?.normalize()
    }

    /// Number of complex dimensions `K`.
    pub fn dims(&self) -> usize {
        self.k
    }

    /// Number of vectors `M`.
    pub fn size(&self) -> usize {
        self.m
    }

    /// Entry `k` of vector `i`.
    pub fn point(&self, i: usize, k: usize) -> Complex64 {
        self.points[i * self.k + k]
    }

    /// Vector `i` as a slice of length `K`.
    pub fn column(&self, i: usize) -> &[Complex64] {
        &self.points[i * self.k..(i + 1) * self.k]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[Complex64]> {
        self.points.chunks_exact(self.k)
    }

    /// The stacked vector `vec(C)` of length `K*M`.
    pub fn as_vec(&self) -> &[Complex64] {
        &self.points
    }

    pub fn into_vec(self) -> Vec<Complex64> {
        self.points
    }

    /// Multiplies every entry by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { k: self.k, m: self.m, points: self.points.iter().map(|z| z * factor).collect() }
    }

    /// Applies `f` to every entry, keeping the shape.
    pub fn map_entries(&self, mut f: impl FnMut(usize, usize, Complex64) -> Complex64) -> Result<Self> {
        let k = self.k;
        let points = self.points.iter().enumerate().map(|(pos, &z)| f(pos / k, pos % k, z)).collect();
        Self::new(self.k, self.m, points)
    }

    /// Total energy `tr(CᴴC)`.
    pub fn energy(&self) -> f64 {
        self.points.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Average vector power `tr(CᴴC)/M`.
    pub fn average_power(&self) -> f64 {
        self.energy() / self.m as f64
    }

    /// Rescales by a single positive real so the average vector power is 1.
    pub fn normalize(&self) -> Result<Self> {
        let p = self.average_power();
        if p <= 0.0 {
            return Err(Error::Degenerate("all-zero constellation cannot be normalized".into()));
        }
        Ok(self.scaled(1.0 / p.sqrt()))
    }

    fn check_pair(&self, i: usize, j: usize) -> Result<()> {
        if i >= self.m || j >= self.m || i == j {
            return Err(Error::Index(format!("pair ({i}, {j}) invalid for M={}", self.m)));
        }
        Ok(())
    }

    /// Squared Euclidean distance between vectors `i` and `j`.
    pub fn euclidean_sq(&self, i: usize, j: usize) -> f64 {
        self.column(i).iter().zip(self.column(j)).map(|(a, b)| (a - b).norm_sqr()).sum()
    }

    /// `|x_{i,k} - x_{j,k}|`.
    pub fn elementwise_distance(&self, i: usize, j: usize, k: usize) -> f64 {
        (self.point(i, k) - self.point(j, k)).norm()
    }

    /// Minimum Euclidean distance over all pairs.
    pub fn med(&self) -> f64 {
        pairs(self.m).map(|(i, j)| self.euclidean_sq(i, j)).fold(f64::INFINITY, f64::min).sqrt()
    }

    /// Product of the per-dimension gaps between vectors `i` and `j` over
    /// the dimensions where the gap exceeds `zero_tol`.
    ///
    /// Returns `f64::INFINITY` when the two vectors coincide in every
    /// dimension (empty admissible set).
    pub fn product_distance(&self, i: usize, j: usize, zero_tol: f64) -> Result<f64> {
        self.check_pair(i, j)?;
        Ok(self.product_distance_unchecked(i, j, zero_tol))
    }

    fn product_distance_unchecked(&self, i: usize, j: usize, zero_tol: f64) -> f64 {
        let mut any = false;
        let mut prod = 1.0;
        for (a, b) in self.column(i).iter().zip(self.column(j)) {
            let d = (a - b).norm();
            if d > zero_tol {
                any = true;
                prod *= d;
            }
        }
        if any {
            prod
        } else {
            f64::INFINITY
        }
    }

    /// Minimum product distance over all pairs with a nonempty admissible set.
    pub fn mpd(&self, zero_tol: f64) -> Result<f64> {
        let v =
            pairs(self.m).map(|(i, j)| self.product_distance_unchecked(i, j, zero_tol)).fold(f64::INFINITY, f64::min);
        if v.is_infinite() {
            return Err(Error::Degenerate("every pair of vectors is identical".into()));
        }
        Ok(v)
    }

    /// Smallest per-dimension gap `min_{i<j,k} |x_{i,k} - x_{j,k}|`.
    pub fn min_elementwise(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, j) in pairs(self.m) {
            for k in 0..self.k {
                best = best.min(self.elementwise_distance(i, j, k));
            }
        }
        best
    }

    /// Number of pairs whose distance lies within `rel_tol * min` of the minimum.
    pub fn kissing_number(&self, metric: Metric, rel_tol: f64) -> usize {
        let dists: Vec<f64> = match metric {
            Metric::Euclidean => pairs(self.m).map(|(i, j)| self.euclidean_sq(i, j).sqrt()).collect(),
            Metric::Product => {
                pairs(self.m).map(|(i, j)| self.product_distance_unchecked(i, j, DEFAULT_ZERO_TOL)).collect()
            }
        };
        count_near_min(&dists, rel_tol)
    }

    /// Checks the AM-GM bound `d_P² ≤ (‖x_i - x_j‖²/K)^K` for every pair.
    pub fn amgm_check(&self) -> Vec<AmGmEntry> {
        let kf = self.k as f64;
        pairs(self.m)
            .map(|(i, j)| {
                let gaps: Vec<f64> = (0..self.k).map(|k| self.elementwise_distance(i, j, k)).collect();
                let lhs: f64 = gaps.iter().map(|g| g * g).product();
                let sum_sq: f64 = gaps.iter().map(|g| g * g).sum();
                let rhs = (sum_sq / kf).powi(self.k as i32);
                let slack = rhs - lhs;
                let gmax = gaps.iter().cloned().fold(0.0, f64::max);
                let gmin = gaps.iter().cloned().fold(f64::INFINITY, f64::min);
                let equal_gaps = gmax - gmin <= 1e-6 * gmax.max(f64::MIN_POSITIVE);
                AmGmEntry { i, j, lhs, rhs, slack, equal_gaps, violated: slack < -AMGM_VIOLATION_TOL * rhs.max(1.0) }
            })
            .collect()
    }

    /// Computes every pairwise distance and the derived summary metrics.
    pub fn profile(&self) -> Result<DistanceProfile> {
        DistanceProfile::compute(self, DEFAULT_ZERO_TOL, DEFAULT_KISSING_REL_TOL)
    }

    /// Reads a constellation file.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, serde_json::Map<String, serde_json::Value>)> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<(Self, serde_json::Map<String, serde_json::Value>)> {
        let file: ConstellationFile = serde_json::from_str(text)?;
        file.into_constellation()
    }

    /// Serializes to the constellation file format with the given metadata.
    pub fn to_json(&self, meta: serde_json::Map<String, serde_json::Value>) -> Result<String> {
        io::to_json(&ConstellationFile::from_constellation(self, meta))
    }

    /// Writes the constellation file atomically.
    pub fn save(&self, path: impl AsRef<Path>, meta: serde_json::Map<String, serde_json::Value>) -> Result<()> {
        io::write_atomic(path, self.to_json(meta)?.as_bytes())
    }
}

/// Iterates `(i, j)` with `0 ≤ i < j < m` in lexicographic order.
pub fn pairs(m: usize) -> impl Iterator<Item = (usize, usize)> + Clone {
    (0..m).flat_map(move |i| (i + 1..m).map(move |j| (i, j)))
}

fn count_near_min(values: &[f64], rel_tol: f64) -> usize {
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return 0;
    }
    values.iter().filter(|&&v| v <= min + rel_tol * min).count()
}

/// One row of [`Constellation::amgm_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AmGmEntry {
    pub i: usize,
    pub j: usize,
    /// Squared product of per-dimension gaps over all `K` dimensions.
    pub lhs: f64,
    /// `(‖x_i - x_j‖²/K)^K`.
    pub rhs: f64,
    pub slack: f64,
    /// All per-dimension gaps agree (the equality case of AM-GM).
    pub equal_gaps: bool,
    /// Negative slack beyond tolerance; indicates an arithmetic bug.
    pub violated: bool,
}

/// All pairwise distances of a constellation, plus the summary metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistanceProfile {
    /// Pairwise Euclidean distances in [`pairs`] order.
    pub pairwise_euclidean: Vec<f64>,
    /// Pairwise product distances in [`pairs`] order; `None` for identical vectors.
    pub pairwise_product: Vec<Option<f64>>,
    /// Pairs of identical vectors (excluded from the MPD minimum).
    pub identical_pairs: Vec<(usize, usize)>,
    pub med: f64,
    pub mpd: f64,
    pub kissing_med: usize,
    pub kissing_mpd: usize,
    pub min_elementwise: f64,
    pub average_power: f64,
}

impl DistanceProfile {
    pub fn compute(c: &Constellation, zero_tol: f64, rel_tol: f64) -> Result<Self> {
        let mut pairwise_euclidean = Vec::new();
        let mut pairwise_product = Vec::new();
        let mut identical_pairs = Vec::new();
        for (i, j) in pairs(c.size()) {
            pairwise_euclidean.push(c.euclidean_sq(i, j).sqrt());
            let p = c.product_distance_unchecked(i, j, zero_tol);
            if p.is_finite() {
                pairwise_product.push(Some(p));
            } else {
                identical_pairs.push((i, j));
                pairwise_product.push(None);
            }
        }
        let finite_products: Vec<f64> = pairwise_product.iter().flatten().copied().collect();
        if finite_products.is_empty() {
            return Err(Error::Degenerate("every pair of vectors is identical".into()));
        }
        let med = pairwise_euclidean.iter().cloned().fold(f64::INFINITY, f64::min);
        let mpd = finite_products.iter().cloned().fold(f64::INFINITY, f64::min);
        Ok(Self {
            kissing_med: count_near_min(&pairwise_euclidean, rel_tol).max(1),
            kissing_mpd: count_near_min(&finite_products, rel_tol).max(1),
            pairwise_euclidean,
            pairwise_product,
            identical_pairs,
            med,
            mpd,
            min_elementwise: c.min_elementwise(),
            average_power: c.average_power(),
        })
    }
}

/// On-disk representation: `{"K", "M", "points": [[[re, im]; K]; M], "meta"}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstellationFile {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub points: Vec<Vec<[f64; 2]>>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl ConstellationFile {
    pub fn from_constellation(c: &Constellation, meta: serde_json::Map<String, serde_json::Value>) -> Self {
        Self {
            k: c.dims(),
            m: c.size(),
            points: c.columns().map(|col| col.iter().map(|z| [z.re, z.im]).collect()).collect(),
            meta,
        }
    }

    pub fn into_constellation(self) -> Result<(Constellation, serde_json::Map<String, serde_json::Value>)> {
        if self.points.len() != self.m {
            return Err(Error::Dimension(format!(
                "header says M={} but {} vectors are listed",
                self.m,
                self.points.len()
            )));
        }
        let mut flat = Vec::with_capacity(self.k * self.m);
        for (i, col) in self.points.iter().enumerate() {
            if col.len() != self.k {
                return Err(Error::Dimension(format!(
                    "vector {i} has {} entries, header says K={}",
                    col.len(),
                    self.k
                )));
            }
            flat.extend(col.iter().map(|&[re, im]| Complex64::new(re, im)));
        }
        Ok((Constellation::new(self.k, self.m, flat)?, self.meta))
    }
}

/// Convenience for building metadata maps.
pub fn meta_map<I, K, V>(items: I) -> serde_json::Map<String, serde_json::Value>
where
    I: IntoIterator<Item = (K, V)>,
    K: Into<String>,
    V: Into<serde_json::Value>,
{
    items.into_iter().map(|(k, v)| (k.into(), v.into())).collect()
}

/// Groups AM-GM rows by whether they attain equality; used in reports.
pub fn amgm_summary(entries: &[AmGmEntry]) -> BTreeMap<&'static str, usize> {
    let mut out = BTreeMap::new();
    out.insert("pairs", entries.len());
    out.insert("equal_gaps", entries.iter().filter(|e| e.equal_gaps).count());
    out.insert("violated", entries.iter().filter(|e| e.violated).count());
    out
}
