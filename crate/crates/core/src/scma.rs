//! Sparse code multiple access: codebook construction and the message
//! passing detector.
//!
//! `J` users share `N` resources. Column `j` of the binary indicator matrix
//! marks the `K` resources user `j` occupies; user `j`'s codebook places the
//! `K` dimensions of a rotated base constellation on those resources in
//! increasing row order.

use std::f64::consts::TAU;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::constellation::{meta_map, Constellation};
use crate::error::{Error, Result};
use crate::io;

/// Default number of message passing iterations.
pub const DEFAULT_MPA_ITERS: usize = 10;

/// Binary `N x J` matrix of user-to-resource assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndicatorMatrix {
    n: usize,
    j: usize,
    rows: Vec<Vec<u8>>,
    k: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndicatorFile {
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "J")]
    j: usize,
    rows: Vec<Vec<u8>>,
}

impl IndicatorMatrix {
    /// Every column must have the same nonzero weight `K`.
    pub fn from_rows(rows: Vec<Vec<u8>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Dimension("indicator matrix has no rows".into()));
        }
        let j = rows[0].len();
        if j == 0 {
            return Err(Error::Dimension("indicator matrix has no columns".into()));
        }
        for (r, row) in rows.iter().enumerate() {
            if row.len() != j {
                return Err(Error::Dimension(format!("row {r} has {} entries, expected {j}", row.len())));
            }
            if let Some(v) = row.iter().find(|&&v| v > 1) {
                return Err(Error::Dimension(format!("row {r} contains non-binary entry {v}")));
            }
        }
        let weight = |col: usize| rows.iter().filter(|row| row[col] == 1).count();
        let k = weight(0);
        if k == 0 {
            return Err(Error::Dimension("column 0 is empty".into()));
        }
        for col in 1..j {
            let w = weight(col);
            if w != k {
                return Err(Error::Dimension(format!("column {col} has weight {w}, column 0 has weight {k}")));
            }
        }
        Ok(Self { n, j, rows, k })
    }

    /// The widely used 4 x 6 indicator matrix with column weight 2 and row
    /// weight 3.
    pub fn default_4x6() -> Self {
        Self::from_rows(vec![
            vec![0, 1, 1, 0, 1, 0],
            vec![1, 0, 1, 0, 0, 1],
            vec![0, 1, 0, 1, 0, 1],
            vec![1, 0, 0, 1, 1, 0],
        ])
        .expect("built-in indicator matrix is valid")
    }

    pub fn resources(&self) -> usize {
        self.n
    }

    pub fn users(&self) -> usize {
        self.j
    }

    /// Common column weight `K`.
    pub fn column_weight(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[Vec<u8>] {
        &self.rows
    }

    pub fn get(&self, n: usize, j: usize) -> u8 {
        self.rows[n][j]
    }

    /// Number of users colliding on resource `n`.
    pub fn row_weight(&self, n: usize) -> usize {
        self.rows[n].iter().filter(|&&v| v == 1).count()
    }

    /// Row weight shared by all resources, if the structure is regular.
    pub fn regular_row_weight(&self) -> Option<usize> {
        let d = self.row_weight(0);
        (1..self.n).all(|n| self.row_weight(n) == d).then_some(d)
    }

    /// Users on resource `n` in increasing index order.
    pub fn users_on(&self, n: usize) -> Vec<usize> {
        (0..self.j).filter(|&j| self.rows[n][j] == 1).collect()
    }

    /// Resources occupied by user `j` in increasing row order.
    pub fn support(&self, j: usize) -> Vec<usize> {
        (0..self.n).filter(|&n| self.rows[n][j] == 1).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: IndicatorFile = serde_json::from_str(text)?;
        let f = Self::from_rows(file.rows)?;
        if f.n != file.n || f.j != file.j {
            return Err(Error::Dimension(format!(
                "header says N={}, J={} but rows give N={}, J={}",
                file.n, file.j, f.n, f.j
            )));
        }
        Ok(f)
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json(&IndicatorFile { n: self.n, j: self.j, rows: self.rows.clone() })
    }
}

/// User-to-resource ratio `J/N`.
pub fn overloading_factor(f: &IndicatorMatrix) -> f64 {
    f.users() as f64 / f.resources() as f64
}

/// Binary `N x K` selection matrix of one user, stored as the resource row
/// of each constellation dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MappingMatrix {
    pub n: usize,
    pub rows: Vec<usize>,
}

impl MappingMatrix {
    pub fn dims(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> Vec<Vec<u8>> {
        let mut out = vec![vec![0u8; self.dims()]; self.n];
        for (k, &r) in self.rows.iter().enumerate() {
            out[r][k] = 1;
        }
        out
    }

    /// Embeds a `K`-vector into `N` resources.
    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut out = vec![Complex64::new(0.0, 0.0); self.n];
        for (k, &r) in self.rows.iter().enumerate() {
            out[r] = x[k];
        }
        out
    }
}

pub fn mapping_from_indicator(f: &IndicatorMatrix, j: usize) -> Result<MappingMatrix> {
    if j >= f.users() {
        return Err(Error::Index(format!("user {j} out of range for J={}", f.users())));
    }
    Ok(MappingMatrix { n: f.resources(), rows: f.support(j) })
}

/// Diagonal unit-modulus operators, stored as `J x K` phase angles in
/// radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OperatorSet {
    phases: Vec<Vec<f64>>,
}

impl OperatorSet {
    pub fn from_phases(phases: Vec<Vec<f64>>) -> Result<Self> {
        let k = phases.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::Dimension("operator set is empty".into()));
        }
        for (j, row) in phases.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Dimension(format!("user {j} has {} phases, expected {k}", row.len())));
            }
            if row.iter().any(|p| !p.is_finite()) {
                return Err(Error::Dimension(format!("user {j} has a non-finite phase")));
            }
        }
        Ok(Self { phases })
    }

    pub fn identity(users: usize, dims: usize) -> Self {
        Self { phases: vec![vec![0.0; dims]; users] }
    }

    /// On every resource the colliding users, ordered by index, rotate by
    /// `2πm/(d_f M)` for `m = 0, 1, ..`, where `d_f` is that resource's row
    /// weight.
    pub fn default_for(f: &IndicatorMatrix, size: usize) -> Self {
        let mut phases = vec![vec![0.0; f.column_weight()]; f.users()];
        for n in 0..f.resources() {
            let users = f.users_on(n);
            let d_f = users.len() as f64;
            for (m, &j) in users.iter().enumerate() {
                let k = f.support(j).iter().position(|&r| r == n).expect("user occupies resource");
                phases[j][k] = TAU * m as f64 / (d_f * size as f64);
            }
        }
        Self { phases }
    }

    pub fn users(&self) -> usize {
        self.phases.len()
    }

    pub fn dims(&self) -> usize {
        self.phases[0].len()
    }

    pub fn phases(&self) -> &[Vec<f64>] {
        &self.phases
    }

    /// Diagonal of `Δ_j`.
    pub fn diagonal(&self, j: usize) -> Vec<Complex64> {
        self.phases[j].iter().map(|&p| Complex64::from_polar(1.0, p)).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_phases(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json(&self.phases)
    }
}

/// One user's codebook. Only the `K` occupied resources are stored.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    /// Occupied resources in increasing order.
    pub support: Vec<usize>,
    /// Entries on the occupied resources, one `K`-vector per symbol.
    pub local: Constellation,
    resources: usize,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.local.size()
    }

    /// Full `N`-dimensional codeword of symbol `m`.
    pub fn codeword(&self, m: usize) -> Vec<Complex64> {
        MappingMatrix { n: self.resources, rows: self.support.clone() }.apply(self.local.column(m))
    }

    pub fn average_power(&self) -> f64 {
        self.local.average_power()
    }
}

/// Codebooks of all users plus the inputs that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookSet {
    pub indicator: IndicatorMatrix,
    pub codebooks: Vec<Codebook>,
    pub base: Option<Constellation>,
    pub operators: Option<OperatorSet>,
}

/// Export format of one codebook: a constellation file over `N` resources
/// with the occupied rows listed in `sparsity`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CodebookFile {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub points: Vec<Vec<[f64; 2]>>,
    pub sparsity: Vec<usize>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

/// Builds `X_j = V_j Δ_j A` for every user.
pub fn build_codebooks(f: &IndicatorMatrix, base: &Constellation, ops: &OperatorSet) -> Result<CodebookSet> {
    if base.dims() != f.column_weight() {
        return Err(Error::Dimension(format!(
            "base constellation has K={} but indicator columns have weight {}",
            base.dims(),
            f.column_weight()
        )));
    }
    if ops.users() != f.users() || ops.dims() != base.dims() {
        return Err(Error::Dimension(format!(
            "operator set is {}x{}, expected {}x{}",
            ops.users(),
            ops.dims(),
            f.users(),
            base.dims()
        )));
    }
    let codebooks = (0..f.users())
        .map(|j| {
            let diag = ops.diagonal(j);
            Ok(Codebook {
                support: f.support(j),
                local: base.map_entries(|_, k, z| diag[k] * z)?,
                resources: f.resources(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CodebookSet { indicator: f.clone(), codebooks, base: Some(base.clone()), operators: Some(ops.clone()) })
}

impl CodebookSet {
    pub fn users(&self) -> usize {
        self.codebooks.len()
    }

    pub fn resources(&self) -> usize {
        self.indicator.resources()
    }

    pub fn size(&self) -> usize {
        self.codebooks[0].size()
    }

    pub fn dims(&self) -> usize {
        self.indicator.column_weight()
    }

    /// Entry of user `j`'s symbol `m` on resource `n` (zero off-support).
    pub fn entry(&self, j: usize, m: usize, n: usize) -> Complex64 {
        let cb = &self.codebooks[j];
        match cb.support.iter().position(|&r| r == n) {
            Some(k) => cb.local.point(m, k),
            None => Complex64::new(0.0, 0.0),
        }
    }

    pub fn to_files(&self) -> Vec<CodebookFile> {
        self.codebooks
            .iter()
            .enumerate()
            .map(|(j, cb)| CodebookFile {
                k: self.resources(),
                m: cb.size(),
                points: (0..cb.size()).map(|m| cb.codeword(m).iter().map(|z| [z.re, z.im]).collect()).collect(),
                sparsity: cb.support.clone(),
                meta: meta_map([("user", j)]),
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        io::to_json(&self.to_files())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Reads an exported codebook list. The generating base and operators
    /// are not recoverable and are left empty.
    pub fn from_json(text: &str) -> Result<Self> {
        let files: Vec<CodebookFile> = serde_json::from_str(text)?;
        Self::from_files(files)
    }

    pub fn from_files(files: Vec<CodebookFile>) -> Result<Self> {
        let first = files.first().ok_or_else(|| Error::Dimension("codebook list is empty".into()))?;
        let (n, m) = (first.k, first.m);
        let mut rows = vec![vec![0u8; files.len()]; n];
        let mut codebooks = Vec::with_capacity(files.len());
        for (j, file) in files.iter().enumerate() {
            if file.k != n || file.m != m || file.points.len() != m {
                return Err(Error::Dimension(format!("codebook {j} shape differs from codebook 0")));
            }
            if file.sparsity.windows(2).any(|w| w[0] >= w[1]) || file.sparsity.iter().any(|&r| r >= n) {
                return Err(Error::Dimension(format!("codebook {j} has an invalid sparsity list")));
            }
            let mut local = Vec::with_capacity(m * file.sparsity.len());
            for (sym, word) in file.points.iter().enumerate() {
                if word.len() != n {
                    return Err(Error::Dimension(format!("codebook {j} symbol {sym} has {} entries", word.len())));
                }
                for (r, &[re, im]) in word.iter().enumerate() {
                    if !file.sparsity.contains(&r) && (re != 0.0 || im != 0.0) {
                        return Err(Error::Dimension(format!(
                            "codebook {j} symbol {sym} is nonzero on resource {r} outside its sparsity"
                        )));
                    }
                }
                local.extend(file.sparsity.iter().map(|&r| Complex64::new(word[r][0], word[r][1])));
            }
            for &r in &file.sparsity {
                rows[r][j] = 1;
            }
            codebooks.push(Codebook {
                support: file.sparsity.clone(),
                local: Constellation::new(file.sparsity.len(), m, local)?,
                resources: n,
            });
        }
        Ok(Self { indicator: IndicatorMatrix::from_rows(rows)?, codebooks, base: None, operators: None })
    }
}

/// Per-user posteriors and hard decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct MpaOutput {
    pub posteriors: Vec<Vec<f64>>,
    pub decisions: Vec<usize>,
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| exp_or_zero(v - max)).sum::<f64>().ln()
}

// Skips the slow libm path for arguments whose exponential underflows.
fn exp_or_zero(x: f64) -> f64 {
    if x < -745.0 {
        0.0
    } else {
        x.exp()
    }
}

fn normalize_log(v: &mut [f64]) {
    let lse = log_sum_exp(v);
    v.iter_mut().for_each(|x| *x -= lse);
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Message passing detection with `y` the `N` received samples and `h[n][j]`
/// the gain from user `j` to resource `n`.
pub fn mpa_detect(
    y: &[Complex64],
    h: &[Vec<Complex64>],
    cbs: &CodebookSet,
    n0: f64,
    iters: usize,
) -> Result<MpaOutput> {
    MpaDetector::new(cbs).detect(y, h, n0, iters)
}

/// As [`mpa_detect`], calling `on_iter(iteration, posteriors)` after every
/// iteration.
pub fn mpa_detect_with(
    y: &[Complex64],
    h: &[Vec<Complex64>],
    cbs: &CodebookSet,
    n0: f64,
    iters: usize,
    on_iter: impl FnMut(usize, &[Vec<f64>]),
) -> Result<MpaOutput> {
    MpaDetector::new(cbs).detect_with(y, h, n0, iters, on_iter)
}

// Function node of one resource. Joint hypotheses are numbered in mixed
// radix with the first user varying fastest.
struct Node {
    users: Vec<usize>,
    /// Offset of the message from each user to this node in `mu`.
    mu_at: Vec<usize>,
    /// Local dimension of this resource in each user's codebook.
    local: Vec<usize>,
    /// `digits[c * d + p]`: symbol of the `p`-th user in hypothesis `c`.
    digits: Vec<usize>,
    metric: Vec<f64>,
    /// Messages to the users, `out[p * M + m]`.
    out: Vec<f64>,
}

/// Below this gap to the node-wide maximum a hypothesis group is summed
/// with its own shift, so nothing underflows.
const SHARED_SHIFT_RANGE: f64 = 600.0;

/// Message passing detector bound to one codebook set. Graph structure and
/// work buffers are reused across calls.
pub struct MpaDetector<'a> {
    cbs: &'a CodebookSet,
    nodes: Vec<Node>,
    /// `links[j][k] = (n, p)`: user `j`'s `k`-th resource is node `n`, where
    /// `j` is the `p`-th user.
    links: Vec<Vec<(usize, usize)>>,
    /// User-to-node messages; user `j`'s `k`-th message starts at
    /// `mu_base[j] + k * M`.
    mu: Vec<f64>,
    mu_base: Vec<usize>,
    prior: Vec<f64>,
    total: Vec<f64>,
    group_max: Vec<f64>,
    group_sum: Vec<f64>,
}

impl<'a> MpaDetector<'a> {
    pub fn new(cbs: &'a CodebookSet) -> Self {
        let size = cbs.size();
        let f = &cbs.indicator;
        let mut mu_base = Vec::with_capacity(cbs.users());
        let mut offset = 0;
        for cb in &cbs.codebooks {
            mu_base.push(offset);
            offset += cb.support.len() * size;
        }
        let nodes: Vec<Node> = (0..cbs.resources())
            .map(|n| {
                let users = f.users_on(n);
                let d = users.len();
                let local: Vec<usize> =
                    users.iter().map(|&j| cbs.codebooks[j].support.iter().position(|&r| r == n).unwrap()).collect();
                let mu_at = users.iter().zip(&local).map(|(&j, &k)| mu_base[j] + k * size).collect();
                let combos = size.pow(d as u32);
                let digits = (0..combos).flat_map(|c| (0..d).map(move |p| c / size.pow(p as u32) % size)).collect();
                Node { out: vec![0.0; d * size], users, mu_at, local, digits, metric: vec![0.0; combos] }
            })
            .collect();
        let links = (0..cbs.users())
            .map(|j| {
                cbs.codebooks[j]
                    .support
                    .iter()
                    .map(|&n| (n, nodes[n].users.iter().position(|&u| u == j).unwrap()))
                    .collect()
            })
            .collect();
        Self {
            cbs,
            nodes,
            links,
            mu: vec![0.0; offset],
            mu_base,
            prior: Vec::new(),
            total: Vec::new(),
            group_max: Vec::new(),
            group_sum: Vec::new(),
        }
    }

    pub fn detect(&mut self, y: &[Complex64], h: &[Vec<Complex64>], n0: f64, iters: usize) -> Result<MpaOutput> {
        self.detect_with(y, h, n0, iters, |_, _| {})
    }

    pub fn detect_with(
        &mut self,
        y: &[Complex64],
        h: &[Vec<Complex64>],
        n0: f64,
        iters: usize,
        mut on_iter: impl FnMut(usize, &[Vec<f64>]),
    ) -> Result<MpaOutput> {
        let cbs = self.cbs;
        let (n_res, n_users, size) = (cbs.resources(), cbs.users(), cbs.size());
        if y.len() != n_res {
            return Err(Error::Dimension(format!("received {} samples for {n_res} resources", y.len())));
        }
        if h.len() != n_res || h.iter().any(|row| row.len() != n_users) {
            return Err(Error::Dimension(format!("channel matrix must be {n_res}x{n_users}")));
        }
        if !(n0 > 0.0) {
            return Err(Error::Config("noise variance must be positive".into()));
        }
        if iters < 1 {
            return Err(Error::Config("MPA needs at least one iteration".into()));
        }

        for (n, nd) in self.nodes.iter_mut().enumerate() {
            let d = nd.users.len();
            if d == 0 {
                continue;
            }
            // contribution of each user's symbols on this resource
            let terms: Vec<Complex64> = nd
                .users
                .iter()
                .zip(&nd.local)
                .flat_map(|(&j, &k)| (0..size).map(move |m| h[n][j] * cbs.codebooks[j].local.point(m, k)))
                .collect();
            for (met, digits) in nd.metric.iter_mut().zip(nd.digits.chunks_exact(d)) {
                let s: Complex64 = digits.iter().enumerate().map(|(p, &m)| terms[p * size + m]).sum();
                *met = -(y[n] - s).norm_sqr() / n0;
            }
            nd.out.iter_mut().for_each(|v| *v = 0.0);
        }

        let mut posteriors = vec![vec![0.0; size]; n_users];
        for it in 0..iters {
            for (j, links) in self.links.iter().enumerate() {
                for k in 0..links.len() {
                    let at = self.mu_base[j] + k * size;
                    let msg = &mut self.mu[at..at + size];
                    msg.iter_mut().for_each(|x| *x = 0.0);
                    for (k2, &(n2, p2)) in links.iter().enumerate() {
                        if k2 != k {
                            let incoming = &self.nodes[n2].out[p2 * size..(p2 + 1) * size];
                            msg.iter_mut().zip(incoming).for_each(|(a, b)| *a += b);
                        }
                    }
                    normalize_log(msg);
                }
            }
            let mut nodes = std::mem::take(&mut self.nodes);
            for nd in nodes.iter_mut() {
                self.update_node(nd, size);
            }
            self.nodes = nodes;
            for (j, links) in self.links.iter().enumerate() {
                let lp = &mut posteriors[j];
                lp.iter_mut().for_each(|v| *v = 0.0);
                for &(n, p) in links {
                    lp.iter_mut().zip(&self.nodes[n].out[p * size..(p + 1) * size]).for_each(|(a, b)| *a += b);
                }
                normalize_log(lp);
                lp.iter_mut().for_each(|v| *v = v.exp());
            }
            on_iter(it, &posteriors);
        }
        let decisions = posteriors.iter().map(|p| argmax(p)).collect();
        Ok(MpaOutput { posteriors, decisions })
    }
}

impl MpaDetector<'_> {
    // Function-to-user messages of one node: for user p and symbol m, the
    // log-sum over hypotheses with that symbol of likelihood plus the other
    // users' priors. Summing all priors and subtracting p's own (constant on
    // the group) lets one exponential per hypothesis serve every user.
    fn update_node(&mut self, nd: &mut Node, size: usize) {
        let d = nd.users.len();
        if d == 0 {
            return;
        }
        self.prior.clear();
        for &at in &nd.mu_at {
            self.prior.extend_from_slice(&self.mu[at..at + size]);
        }
        self.total.clear();
        self.group_max.clear();
        self.group_max.resize(d * size, f64::NEG_INFINITY);
        let mut top = f64::NEG_INFINITY;
        for (met, digits) in nd.metric.iter().zip(nd.digits.chunks_exact(d)) {
            let t = met + digits.iter().enumerate().map(|(p, &m)| self.prior[p * size + m]).sum::<f64>();
            for (p, &m) in digits.iter().enumerate() {
                let g = &mut self.group_max[p * size + m];
                *g = g.max(t);
            }
            top = top.max(t);
            self.total.push(t);
        }
        self.group_sum.clear();
        self.group_sum.resize(d * size, 0.0);
        for (t, digits) in self.total.iter().zip(nd.digits.chunks_exact(d)) {
            let e = exp_or_zero(t - top);
            for (p, &m) in digits.iter().enumerate() {
                self.group_sum[p * size + m] += e;
            }
        }
        // groups far below the top are summed again with their own shift
        let far = |g: f64| g - top <= -SHARED_SHIFT_RANGE;
        if self.group_max.iter().any(|&g| far(g)) {
            for (slot, &g) in self.group_max.iter().enumerate() {
                if far(g) {
                    self.group_sum[slot] = 0.0;
                }
            }
            for (t, digits) in self.total.iter().zip(nd.digits.chunks_exact(d)) {
                for (p, &m) in digits.iter().enumerate() {
                    let slot = p * size + m;
                    let g = self.group_max[slot];
                    if far(g) {
                        self.group_sum[slot] += exp_or_zero(t - g);
                    }
                }
            }
        }
        for p in 0..d {
            for m in 0..size {
                let slot = p * size + m;
                let g = self.group_max[slot];
                let shift = if far(g) { g } else { top };
                nd.out[slot] = shift + self.group_sum[slot].ln() - self.prior[slot];
            }
            normalize_log(&mut nd.out[p * size..(p + 1) * size]);
        }
    }
}

/// Outcome of [`noise_free_check`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseFreeReport {
    pub tuples: usize,
    pub failures: usize,
    /// Smallest distance between distinct superimposed points on any
    /// resource (unit gains).
    pub min_superposition_gap: f64,
}

/// Sends every transmit tuple over unit gains without noise and checks that
/// MPA recovers all users.
pub fn noise_free_check(cbs: &CodebookSet, n0: f64, iters: usize) -> Result<NoiseFreeReport> {
    let (n_res, n_users, size) = (cbs.resources(), cbs.users(), cbs.size());
    let tuples = size.checked_pow(n_users as u32).ok_or_else(|| Error::Config("too many transmit tuples".into()))?;
    let h = vec![vec![Complex64::new(1.0, 0.0); n_users]; n_res];
    let mut failures = 0;
    let mut symbols = vec![0usize; n_users];
    for t in 0..tuples {
        let mut rest = t;
        for s in symbols.iter_mut() {
            *s = rest % size;
            rest /= size;
        }
        let y: Vec<Complex64> = (0..n_res).map(|n| (0..n_users).map(|j| cbs.entry(j, symbols[j], n)).sum()).collect();
        let out = mpa_detect(&y, &h, cbs, n0, iters)?;
        if out.decisions != symbols {
            failures += 1;
        }
    }
    Ok(NoiseFreeReport { tuples, failures, min_superposition_gap: min_superposition_gap(cbs) })
}

fn min_superposition_gap(cbs: &CodebookSet) -> f64 {
    let size = cbs.size();
    let mut best = f64::INFINITY;
    for n in 0..cbs.resources() {
        let users = cbs.indicator.users_on(n);
        let combos = size.pow(users.len() as u32);
        let points: Vec<Complex64> = (0..combos)
            .map(|c| {
                let mut rest = c;
                users
                    .iter()
                    .map(|&j| {
                        let m = rest % size;
                        rest /= size;
                        cbs.entry(j, m, n)
                    })
                    .sum()
            })
            .collect();
        for a in 0..combos {
            for b in a + 1..combos {
                best = best.min((points[a] - points[b]).norm());
            }
        }
    }
    best
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn simplex_base() -> Constellation {
        // four points with distinct per-dimension entries
        Constellation::from_columns(&[
            vec![c(0.9, 0.1), c(-0.2, 0.7)],
            vec![c(-0.4, 0.8), c(0.6, -0.5)],
            vec![c(-0.6, -0.7), c(-0.8, -0.3)],
            vec![c(0.3, -0.9), c(0.5, 0.6)],
        ])
        .unwrap()
    }

    #[test]
    fn default_indicator_shape() {
        let f = IndicatorMatrix::default_4x6();
        assert_eq!((f.resources(), f.users(), f.column_weight()), (4, 6, 2));
        assert_eq!(f.regular_row_weight(), Some(3));
        assert_eq!(overloading_factor(&f), 1.5);
        assert_eq!(f.support(0), vec![1, 3]);
        assert_eq!(f.users_on(0), vec![1, 2, 4]);
    }

    #[test]
    fn overloading_of_small_cases() {
        let sq = IndicatorMatrix::from_rows(vec![vec![1, 0], vec![0, 1]]).unwrap();
        assert_eq!(overloading_factor(&sq), 1.0);
        let toy = IndicatorMatrix::from_rows(vec![vec![1, 1, 0], vec![0, 0, 1]]).unwrap();
        assert_eq!(overloading_factor(&toy), 1.5);
    }

    #[test]
    fn rejects_uneven_columns() {
        assert!(IndicatorMatrix::from_rows(vec![vec![1, 1], vec![1, 0]]).is_err());
        assert!(IndicatorMatrix::from_rows(vec![vec![2, 1]]).is_err());
        assert!(IndicatorMatrix::from_rows(vec![vec![1, 1], vec![1]]).is_err());
    }

    #[test]
    fn mapping_matrices_select_support() {
        let f = IndicatorMatrix::default_4x6();
        for j in 0..6 {
            let v = mapping_from_indicator(&f, j).unwrap().to_dense();
            for n in 0..4 {
                let diag: u8 = v[n].iter().map(|x| x * x).sum();
                assert_eq!(diag, f.get(n, j));
            }
            for a in 0..2 {
                for b in 0..2 {
                    let dot: u8 = (0..4).map(|n| v[n][a] * v[n][b]).sum();
                    assert_eq!(dot, u8::from(a == b));
                }
            }
        }
        assert!(mapping_from_indicator(&f, 6).is_err());
    }

    #[test]
    fn default_operators() {
        let f = IndicatorMatrix::default_4x6();
        let ops = OperatorSet::default_for(&f, 4);
        // resource 0 hosts users 1, 2, 4
        let step = TAU / 12.0;
        assert_eq!(ops.phases()[1][0], 0.0);
        assert!((ops.phases()[2][0] - step).abs() < 1e-15);
        assert!((ops.phases()[4][0] - 2.0 * step).abs() < 1e-15);
        for j in 0..6 {
            for z in ops.diagonal(j) {
                assert!((z.norm() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn codebooks_follow_indicator_and_keep_power() {
        let f = IndicatorMatrix::default_4x6();
        let base = simplex_base();
        let cbs = build_codebooks(&f, &base, &OperatorSet::default_for(&f, 4)).unwrap();
        for (j, cb) in cbs.codebooks.iter().enumerate() {
            assert!((cb.average_power() - base.average_power()).abs() < 1e-12);
            for m in 0..4 {
                let word = cb.codeword(m);
                for n in 0..4 {
                    assert_eq!(word[n] != c(0.0, 0.0), f.get(n, j) == 1);
                }
            }
        }
    }

    #[test]
    fn identity_operators_copy_base_rows() {
        let f = IndicatorMatrix::default_4x6();
        let base = simplex_base();
        let cbs = build_codebooks(&f, &base, &OperatorSet::identity(6, 2)).unwrap();
        let word = cbs.codebooks[0].codeword(2);
        assert_eq!(word[1], base.point(2, 0));
        assert_eq!(word[3], base.point(2, 1));
    }

    #[test]
    fn linear_in_base() {
        let f = IndicatorMatrix::default_4x6();
        let ops = OperatorSet::default_for(&f, 4);
        let a = build_codebooks(&f, &simplex_base(), &ops).unwrap();
        let b = build_codebooks(&f, &simplex_base().scaled(2.5), &ops).unwrap();
        for j in 0..6 {
            for m in 0..4 {
                for n in 0..4 {
                    assert!((b.entry(j, m, n) - a.entry(j, m, n) * 2.5).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let f = IndicatorMatrix::default_4x6();
        let k3 = Constellation::cartesian_qpsk(1).unwrap();
        assert!(build_codebooks(&f, &k3, &OperatorSet::identity(6, 1)).is_err());
        assert!(build_codebooks(&f, &simplex_base(), &OperatorSet::identity(5, 2)).is_err());
    }

    #[test]
    fn export_roundtrip() {
        let f = IndicatorMatrix::default_4x6();
        let cbs = build_codebooks(&f, &simplex_base(), &OperatorSet::default_for(&f, 4)).unwrap();
        let text = cbs.to_json().unwrap();
        assert!(text.contains("\"sparsity\":[1,3]"));
        let back = CodebookSet::from_json(&text).unwrap();
        assert_eq!(back.indicator, f);
        assert_eq!(back.codebooks, cbs.codebooks);
    }

    #[test]
    fn indicator_and_operator_files() {
        let f = IndicatorMatrix::default_4x6();
        assert_eq!(IndicatorMatrix::from_json(&f.to_json().unwrap()).unwrap(), f);
        assert!(IndicatorMatrix::from_json(r#"{"N":3,"J":6,"rows":[[1,1]]}"#).is_err());
        let ops = OperatorSet::default_for(&f, 4);
        assert_eq!(OperatorSet::from_json(&ops.to_json().unwrap()).unwrap(), ops);
        assert!(OperatorSet::from_json("[[0.0,1.0],[0.5]]").is_err());
    }

    // Joint-likelihood marginals over every hypothesis on one resource.
    fn brute_marginals(y: Complex64, h: &[Complex64], cbs: &CodebookSet, n0: f64) -> Vec<Vec<f64>> {
        let (users, size) = (cbs.users(), cbs.size());
        let mut out = vec![vec![0.0; size]; users];
        let mut total = 0.0;
        for t in 0..size.pow(users as u32) {
            let syms: Vec<usize> = (0..users).map(|j| t / size.pow(j as u32) % size).collect();
            let s: Complex64 = (0..users).map(|j| h[j] * cbs.entry(j, syms[j], 0)).sum();
            let p = (-(y - s).norm_sqr() / n0).exp();
            total += p;
            for j in 0..users {
                out[j][syms[j]] += p;
            }
        }
        out.iter_mut().for_each(|row| row.iter_mut().for_each(|v| *v /= total));
        out
    }

    #[test]
    fn single_resource_matches_joint_marginals() {
        let f = IndicatorMatrix::from_rows(vec![vec![1, 1, 1]]).unwrap();
        let base = Constellation::qpsk();
        let ops = OperatorSet::default_for(&f, 4);
        let cbs = build_codebooks(&f, &base, &ops).unwrap();
        let h = vec![c(0.8, -0.3), c(-0.5, 1.1), c(0.2, 0.9)];
        let y = c(0.37, -1.21);
        for n0 in [0.3, 1.0, 4.0] {
            let out = mpa_detect(&[y], std::slice::from_ref(&h), &cbs, n0, 1).unwrap();
            let oracle = brute_marginals(y, &h, &cbs, n0);
            for j in 0..3 {
                for m in 0..4 {
                    assert!((out.posteriors[j][m] - oracle[j][m]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_user_equals_ml_posterior() {
        let f = IndicatorMatrix::from_rows(vec![vec![1], vec![0], vec![1]]).unwrap();
        let base = simplex_base();
        let cbs = build_codebooks(&f, &base, &OperatorSet::identity(1, 2)).unwrap();
        let h = vec![vec![c(0.7, 0.2)], vec![c(1.0, 0.0)], vec![c(-0.4, 0.9)]];
        let y = vec![c(0.5, 0.1), c(0.0, 0.0), c(-0.3, 0.4)];
        let n0 = 0.5;
        let out = mpa_detect(&y, &h, &cbs, n0, 3).unwrap();
        let like: Vec<f64> = (0..4)
            .map(|m| {
                let d = (y[0] - h[0][0] * base.point(m, 0)).norm_sqr() + (y[2] - h[2][0] * base.point(m, 1)).norm_sqr();
                (-d / n0).exp()
            })
            .collect();
        let total: f64 = like.iter().sum();
        for m in 0..4 {
            assert!((out.posteriors[0][m] - like[m] / total).abs() < 1e-12);
        }
    }

    #[test]
    fn posteriors_normalized_every_iteration() {
        let f = IndicatorMatrix::default_4x6();
        let cbs = build_codebooks(&f, &simplex_base(), &OperatorSet::default_for(&f, 4)).unwrap();
        let h: Vec<Vec<Complex64>> =
            (0..4).map(|n| (0..6).map(|j| Complex64::from_polar(1.0, (n * 6 + j) as f64)).collect()).collect();
        let y = vec![c(0.3, 0.2), c(-1.0, 0.5), c(0.1, -0.8), c(1.2, 0.0)];
        let mut calls = 0;
        mpa_detect_with(&y, &h, &cbs, 0.2, 10, |_, post| {
            calls += 1;
            for p in post {
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        })
        .unwrap();
        assert_eq!(calls, 10);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    }

    #[test]
    fn noise_free_recovery_with_distinct_base() {
        let f = IndicatorMatrix::default_4x6();
        let cbs = build_codebooks(&f, &simplex_base(), &OperatorSet::default_for(&f, 4)).unwrap();
        let report = noise_free_check(&cbs, 1e-4, DEFAULT_MPA_ITERS).unwrap();
        assert_eq!(report.tuples, 4096);
        assert_eq!(report.failures, 0);
        assert!(report.min_superposition_gap > 0.0);
    }

    #[test]
    fn detector_rejects_bad_shapes() {
        let f = IndicatorMatrix::default_4x6();
        let cbs = build_codebooks(&f, &simplex_base(), &OperatorSet::default_for(&f, 4)).unwrap();
        let h = vec![vec![c(1.0, 0.0); 6]; 4];
        assert!(mpa_detect(&[c(0.0, 0.0); 3], &h, &cbs, 1.0, 1).is_err());
        assert!(mpa_detect(&[c(0.0, 0.0); 4], &h, &cbs, 0.0, 1).is_err());
        assert!(mpa_detect(&[c(0.0, 0.0); 4], &h, &cbs, 1.0, 0).is_err());
    }
}
