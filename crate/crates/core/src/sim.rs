//! Monte Carlo bit error rate simulation.
//!
//! The SNR axis is Eb/N0 with unit energy per transmitted vector, so
//! `Eb = 1/log2(M)` and the complex noise variance per dimension is
//! `n0 = 1 / (log2(M) * 10^(EbN0/10))`. To convert to Es/N0 add
//! `10*log10(log2 M)` dB.
//!
//! Every SNR point draws from its own ChaCha8 stream (the run seed with
//! stream index equal to the point index), so points run concurrently
//! without changing results.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constellation::Constellation;
use crate::error::{Error, Result};
use crate::io::format_real;
use crate::scma::{CodebookSet, MpaDetector};

pub const CSV_HEADER: &str = "ebn0_db,errors,bits,ber,vectors,seed";

/// Noise variance handed to the detector when noise is switched off.
const NOISE_FREE_DETECTOR_N0: f64 = 1e-9;

/// Bits carried by one of `m` symbols.
pub fn bits_per_symbol(m: usize) -> Result<usize> {
    if m < 2 || !m.is_power_of_two() {
        return Err(Error::Config(
            "M must be ≥ 2 and a power of 2 for simulation; optimization allows any M ≥ 2".into(),
        ));
    }
    Ok(m.trailing_zeros() as usize)
}

/// Natural labeling: the bits, most significant first, are the symbol index.
pub fn map_bits(bits: &[u8]) -> usize {
    bits.iter().fold(0, |acc, &b| (acc << 1) | usize::from(b & 1))
}

pub fn demap(index: usize, nbits: usize) -> Vec<u8> {
    (0..nbits).rev().map(|s| ((index >> s) & 1) as u8).collect()
}

/// `argmin_i Σ_k |y_k - h_k x_{i,k}|²`, lowest index on ties.
pub fn ml_detect(y: &[Complex64], h: &[Complex64], c: &Constellation) -> usize {
    let mut best = 0;
    let mut best_metric = f64::INFINITY;
    for (i, x) in c.columns().enumerate() {
        let metric: f64 = y.iter().zip(h).zip(x).map(|((&y, &h), &x)| (y - h * x).norm_sqr()).sum();
        if metric < best_metric {
            best = i;
            best_metric = metric;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Awgn,
    /// Independent unit-variance complex Gaussian gain per dimension and per
    /// vector, known at the receiver.
    RayleighIid,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Channel::Awgn => "awgn",
            Channel::RayleighIid => "rayleigh_iid",
        }
    }
}

/// Circularly symmetric complex Gaussian sample with variance `var`.
pub fn complex_gaussian(rng: &mut impl Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re * s, im * s)
}

pub fn draw_fading(rng: &mut impl Rng, dims: usize) -> Vec<Complex64> {
    (0..dims).map(|_| complex_gaussian(rng, 1.0)).collect()
}

pub fn noise_variance(ebn0_db: f64, bits_per_vector: usize) -> f64 {
    1.0 / (bits_per_vector as f64 * 10f64.powf(ebn0_db / 10.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrSpec {
    pub ebn0_db: Vec<f64>,
}

impl SnrSpec {
    /// Accepts `start:step:stop` (inclusive) or a comma-separated list.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse Eb/N0 list {text:?}"));
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        let parts: Vec<&str> = text.split(':').collect();
        let ebn0_db = match parts.as_slice() {
            [a, step, b] => {
                let (a, step, b) = (num(a)?, num(step)?, num(b)?);
                if !(step > 0.0) || b < a || !a.is_finite() || !b.is_finite() {
                    return Err(bad());
                }
                let count = ((b - a) / step + 1e-9).floor() as usize + 1;
                (0..count).map(|i| a + i as f64 * step).collect()
            }
            [list] => list.split(',').map(num).collect::<Result<Vec<_>>>()?,
            _ => return Err(bad()),
        };
        if ebn0_db.is_empty() || ebn0_db.iter().any(|v| !v.is_finite()) {
            return Err(bad());
        }
        Ok(Self { ebn0_db })
    }
}

/// A point ends once it has `min_bit_errors` errors and `min_vectors`
/// vectors, or after `max_vectors` vectors. The rule is checked between
/// batches of `batch` vectors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub min_bit_errors: u64,
    pub min_vectors: u64,
    pub max_vectors: u64,
    pub batch: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self { min_bit_errors: 200, min_vectors: 0, max_vectors: 1_000_000, batch: 1000 }
    }
}

impl StopRule {
    fn validate(&self) -> Result<()> {
        if self.max_vectors == 0 || self.batch == 0 || self.min_vectors > self.max_vectors {
            return Err(Error::Config(
                "stop rule needs max_vectors ≥ min_vectors, max_vectors > 0 and batch > 0".into(),
            ));
        }
        Ok(())
    }

    fn done(&self, errors: u64, vectors: u64) -> bool {
        vectors >= self.max_vectors || (errors >= self.min_bit_errors && vectors >= self.min_vectors)
    }

    fn next_batch(&self, vectors: u64) -> u64 {
        self.batch.min(self.max_vectors - vectors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub channel: Channel,
    pub stop: StopRule,
    pub seed: u64,
    /// Transmit without noise; the detector still sees a tiny variance.
    pub noise_free: bool,
}

impl SimConfig {
    pub fn new(channel: Channel, seed: u64) -> Self {
        Self { channel, stop: StopRule::default(), seed, noise_free: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerPoint {
    pub ebn0_db: f64,
    pub errors: u64,
    pub bits: u64,
    pub ber: f64,
    pub vectors: u64,
    pub seed: u64,
    /// Errors per user (SCMA uplink only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub user_errors: Vec<u64>,
}

impl BerPoint {
    fn new(ebn0_db: f64, errors: u64, bits: u64, vectors: u64, seed: u64, user_errors: Vec<u64>) -> Self {
        let ber = if bits == 0 { 0.0 } else { errors as f64 / bits as f64 };
        Self { ebn0_db, errors, bits, ber, vectors, seed, user_errors }
    }

    /// Binomial standard deviation of the BER estimate.
    pub fn std_err(&self) -> f64 {
        if self.bits == 0 {
            return 0.0;
        }
        (self.ber * (1.0 - self.ber) / self.bits as f64).sqrt()
    }

    /// BER of user `j`, from the per-user counts.
    pub fn user_ber(&self, j: usize) -> f64 {
        let bits_per_user = self.bits / self.user_errors.len() as u64;
        self.user_errors[j] as f64 / bits_per_user as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub source: String,
    pub channel: Channel,
    pub detector: String,
    pub stop: StopRule,
    pub noise_free: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerCurve {
    pub points: Vec<BerPoint>,
    pub meta: CurveMeta,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl BerCurve {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.ebn0_db,
                p.errors,
                p.bits,
                format_real(p.ber),
                p.vectors,
                p.seed
            ));
        }
        out
    }

    /// Per-user table, one row per SNR point and user.
    pub fn per_user_csv(&self) -> String {
        let mut out = String::from("ebn0_db,user,errors,bits,ber\n");
        for p in &self.points {
            let users = p.user_errors.len() as u64;
            for (j, &e) in p.user_errors.iter().enumerate() {
                out.push_str(&format!("{},{j},{e},{},{}\n", p.ebn0_db, p.bits / users, format_real(p.user_ber(j))));
            }
        }
        out
    }

    /// Largest rise of BER between neighbouring points, in units of the
    /// combined standard error. Non-positive means monotone.
    pub fn max_rise_sigma(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| {
                let sigma = (w[0].std_err().powi(2) + w[1].std_err().powi(2)).sqrt();
                let rise = w[1].ber - w[0].ber;
                if rise <= 0.0 {
                    rise
                } else if sigma == 0.0 {
                    f64::INFINITY
                } else {
                    rise / sigma
                }
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

fn point_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn power_warning(power: f64, what: &str) -> Vec<String> {
    if (power - 1.0).abs() > 1e-6 {
        vec![format!("{what} has average power {power}, not 1; the SNR axis assumes unit power")]
    } else {
        Vec::new()
    }
}

/// Point-to-point transmission of `c` with ML detection.
pub fn simulate_p2p(c: &Constellation, config: &SimConfig, snr: &SnrSpec) -> Result<BerCurve> {
    config.stop.validate()?;
    let nbits = bits_per_symbol(c.size())?;
    let (dims, mask) = (c.dims(), c.size() - 1);
    let points = snr
        .ebn0_db
        .par_iter()
        .enumerate()
        .map(|(idx, &ebn0)| {
            let mut rng = point_rng(config.seed, idx);
            let n0 = noise_variance(ebn0, nbits);
            let (mut errors, mut vectors) = (0u64, 0u64);
            let mut h = vec![Complex64::new(1.0, 0.0); dims];
            let mut y = vec![Complex64::new(0.0, 0.0); dims];
            while !config.stop.done(errors, vectors) {
                for _ in 0..config.stop.next_batch(vectors) {
                    let tx = (rng.random::<u32>() as usize) & mask;
                    if config.channel == Channel::RayleighIid {
                        h.iter_mut().for_each(|g| *g = complex_gaussian(&mut rng, 1.0));
                    }
                    for k in 0..dims {
                        y[k] = h[k] * c.point(tx, k);
                        if !config.noise_free {
                            y[k] += complex_gaussian(&mut rng, n0);
                        }
                    }
                    let rx = ml_detect(&y, &h, c);
                    errors += u64::from((tx ^ rx).count_ones());
                    vectors += 1;
                }
            }
            BerPoint::new(ebn0, errors, vectors * nbits as u64, vectors, config.seed, Vec::new())
        })
        .collect();
    Ok(BerCurve {
        points,
        meta: CurveMeta {
            source: format!("constellation K={} M={}", c.dims(), c.size()),
            channel: config.channel,
            detector: "ml".into(),
            stop: config.stop,
            noise_free: config.noise_free,
        },
        warnings: power_warning(c.average_power(), "constellation"),
    })
}

/// Uplink SCMA: every user sends one codeword per vector over independent
/// gains on each occupied resource, detected jointly by MPA. The channel in
/// `config` is forced to Rayleigh unless it is AWGN (unit gains).
pub fn simulate_scma_uplink(
    cbs: &CodebookSet,
    config: &SimConfig,
    snr: &SnrSpec,
    mpa_iters: usize,
) -> Result<BerCurve> {
    config.stop.validate()?;
    let nbits = bits_per_symbol(cbs.size())?;
    let (n_res, n_users, mask) = (cbs.resources(), cbs.users(), cbs.size() - 1);
    let f = &cbs.indicator;
    let points = snr
        .ebn0_db
        .par_iter()
        .enumerate()
        .map(|(idx, &ebn0)| -> Result<BerPoint> {
            let mut rng = point_rng(config.seed, idx);
            let n0 = noise_variance(ebn0, nbits);
            let detector_n0 = if config.noise_free { NOISE_FREE_DETECTOR_N0 } else { n0 };
            let (mut errors, mut vectors) = (0u64, 0u64);
            let mut user_errors = vec![0u64; n_users];
            let mut h = vec![vec![Complex64::new(0.0, 0.0); n_users]; n_res];
            let mut tx = vec![0usize; n_users];
            let mut detector = MpaDetector::new(cbs);
            while !config.stop.done(errors, vectors) {
                for _ in 0..config.stop.next_batch(vectors) {
                    tx.iter_mut().for_each(|s| *s = (rng.random::<u32>() as usize) & mask);
                    for (n, row) in h.iter_mut().enumerate() {
                        for (j, g) in row.iter_mut().enumerate() {
                            *g = match (f.get(n, j), config.channel) {
                                (0, _) => Complex64::new(0.0, 0.0),
                                (_, Channel::Awgn) => Complex64::new(1.0, 0.0),
                                (_, Channel::RayleighIid) => complex_gaussian(&mut rng, 1.0),
                            };
                        }
                    }
                    let y: Vec<Complex64> = (0..n_res)
                        .map(|n| {
                            let s: Complex64 = (0..n_users).map(|j| h[n][j] * cbs.entry(j, tx[j], n)).sum();
                            if config.noise_free {
                                s
                            } else {
                                s + complex_gaussian(&mut rng, n0)
                            }
                        })
                        .collect();
                    let out = detector.detect(&y, &h, detector_n0, mpa_iters)?;
                    for j in 0..n_users {
                        let e = u64::from((tx[j] ^ out.decisions[j]).count_ones());
                        user_errors[j] += e;
                        errors += e;
                    }
                    vectors += 1;
                }
            }
            let bits = vectors * (nbits * n_users) as u64;
            Ok(BerPoint::new(ebn0, errors, bits, vectors, config.seed, user_errors))
        })
        .collect::<Result<Vec<_>>>()?;
    let warnings = cbs
        .codebooks
        .iter()
        .enumerate()
        .flat_map(|(j, cb)| power_warning(cb.average_power(), &format!("codebook of user {j}")))
        .collect();
    Ok(BerCurve {
        points,
        meta: CurveMeta {
            source: format!("scma N={} J={} M={}", n_res, n_users, cbs.size()),
            channel: config.channel,
            detector: format!("mpa iters={mpa_iters}"),
            stop: config.stop,
            noise_free: config.noise_free,
        },
        warnings,
    })
}
