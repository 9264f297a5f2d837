//! Closed forms for slotted backoff and bloom localization, with exhaustive
//! and Monte-Carlo oracles.
//!
//! Slot model: each of `m` same-version neighbors picks one of `m` slots
//! uniformly; every device whose slot is the earliest occupied one transmits.

use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::bloom::{
    build_filter, expected_download_chunks, false_positive_rate, localize, prob_full_download, BloomError, BloomParams,
    SecramLayout,
};
use crate::code_image::{corrupt_chunks, random_indices, ApplicationImage, SecretKey, DEFAULT_CHUNK_SIZE};

/// Largest `m` for which `m^m` enumeration is allowed.
pub const MAX_ENUMERATION_M: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum AnalyticsError {
    #[error("slot model needs m >= 1")]
    EmptyModel,
    #[error("slot index j={j} outside 1..={max} for m={m}")]
    SlotOutOfRange { m: usize, j: usize, max: usize },
    #[error("count k={k} outside 1..={m}")]
    CountOutOfRange { m: usize, k: usize },
    #[error("single-transmitter probability needs m >= 2")]
    SingleNeighbor,
    #[error("enumeration of m={0} exceeds the m <= 8 limit")]
    TooLarge(usize),
    #[error("need at least one trial")]
    NoTrials,
    #[error(transparent)]
    Bloom(#[from] BloomError),
}

fn big(n: u64) -> BigInt {
    BigInt::from(n)
}

fn pow(base: usize, exp: usize) -> BigInt {
    num_traits::pow(big(base as u64), exp)
}

fn binomial(n: usize, k: usize) -> BigInt {
    let mut r = BigInt::one();
    for i in 0..k {
        r = r * big((n - i) as u64) / big((i + 1) as u64);
    }
    r
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// Number of assignments with exactly `k` devices in slot `j` and the rest
/// in later slots: `C(m,k)·(m−j)^{m−k}`.
pub fn slot_count(m: usize, j: usize, k: usize) -> Result<BigInt, AnalyticsError> {
    if m == 0 {
        return Err(AnalyticsError::EmptyModel);
    }
    if j == 0 || j >= m {
        return Err(AnalyticsError::SlotOutOfRange { m, j, max: m.saturating_sub(1) });
    }
    if k == 0 || k > m {
        return Err(AnalyticsError::CountOutOfRange { m, k });
    }
    Ok(binomial(m, k) * pow(m - j, m - k))
}

/// `Pr[X^j = k] = C(m,k)(m−j)^{m−k} / m^m`.
pub fn slot_pmf(m: usize, j: usize, k: usize) -> Result<BigRational, AnalyticsError> {
    Ok(BigRational::new(slot_count(m, j, k)?, pow(m, m)))
}

/// Expected number of neighbors that transmit.
pub fn expected_transmitters(m: usize) -> Result<BigRational, AnalyticsError> {
    if m == 0 {
        return Err(AnalyticsError::EmptyModel);
    }
    let mut num = BigInt::zero();
    for j in 1..m {
        for k in 1..=m {
            num += big(k as u64) * slot_count(m, j, k)?;
        }
    }
    // every device in the last slot
    num += big(m as u64);
    Ok(BigRational::new(num, pow(m, m)))
}

/// Probability that exactly one neighbor transmits:
/// `Σ_{j=1}^{m−1} (1 − j/m)^{m−1}`.
pub fn single_transmitter_prob(m: usize) -> Result<BigRational, AnalyticsError> {
    if m == 0 {
        return Err(AnalyticsError::EmptyModel);
    }
    if m == 1 {
        return Err(AnalyticsError::SingleNeighbor);
    }
    let mut sum = BigRational::zero();
    for j in 1..m {
        let base = BigRational::new(big((m - j) as u64), big(m as u64));
        sum += num_traits::pow(base, m - 1);
    }
    Ok(sum)
}

/// Exhaustive tally over all `m^m` slot assignments.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotEnumeration {
    pub m: usize,
    pub total: u64,
    /// `by_transmitters[k]`: assignments in which `k` devices transmit.
    pub by_transmitters: Vec<u64>,
    /// `by_slot[j][k]`: assignments whose earliest occupied slot is `j`
    /// (1-based) and holds exactly `k` devices.
    pub by_slot: Vec<Vec<u64>>,
}

impl SlotEnumeration {
    pub fn expected_transmitters(&self) -> BigRational {
        let num: BigInt = self.by_transmitters.iter().enumerate().map(|(k, &c)| big(k as u64) * big(c)).sum();
        BigRational::new(num, big(self.total))
    }

    pub fn single_transmitter_prob(&self) -> BigRational {
        BigRational::new(big(self.by_transmitters[1]), big(self.total))
    }
}

pub fn enumerate_slots(m: usize) -> Result<SlotEnumeration, AnalyticsError> {
    if m == 0 {
        return Err(AnalyticsError::EmptyModel);
    }
    if m > MAX_ENUMERATION_M {
        return Err(AnalyticsError::TooLarge(m));
    }
    let total = (m as u64).pow(m as u32);
    let mut by_transmitters = vec![0u64; m + 1];
    let mut by_slot = vec![vec![0u64; m + 1]; m + 1];
    let mut slots = vec![0usize; m];
    for code in 0..total {
        let mut c = code;
        for s in slots.iter_mut() {
            *s = (c % m as u64) as usize + 1;
            c /= m as u64;
        }
        let first = *slots.iter().min().expect("m >= 1");
        let k = slots.iter().filter(|&&s| s == first).count();
        by_transmitters[k] += 1;
        by_slot[first][k] += 1;
    }
    Ok(SlotEnumeration { m, total, by_transmitters, by_slot })
}

/// Exact expected transmitter count by enumeration.
pub fn brute_force_transmitters(m: usize) -> Result<BigRational, AnalyticsError> {
    Ok(enumerate_slots(m)?.expected_transmitters())
}

/// Monte-Carlo estimate of the localization cost. Each trial keys a fresh
/// filter over one fixed image, randomizes `kappa` chunks and localizes. A
/// modified chunk that still tests present defeats the repair and forces a
/// full download; otherwise only the suspect set is fetched.
///
/// Returns `(full-download rate, mean chunks downloaded)`.
pub fn monte_carlo_bloom_download<R: Rng + ?Sized>(
    params: BloomParams,
    trials: u64,
    rng: &mut R,
) -> Result<(f64, f64), AnalyticsError> {
    params.validate()?;
    if trials == 0 {
        return Err(AnalyticsError::NoTrials);
    }
    let base: u64 = rng.gen();
    let image = ApplicationImage::random(
        1,
        1,
        params.chunk_count * DEFAULT_CHUNK_SIZE,
        DEFAULT_CHUNK_SIZE,
        &mut partition_rng(base, u64::MAX),
    )
    .expect("non-empty aligned image");
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(trials as usize) as u64;
    let per = trials / workers;
    let results: Vec<Result<(u64, u64), AnalyticsError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let n = per + u64::from(w < trials % workers);
                let image = &image;
                s.spawn(move || bloom_trials(params, image, n, &mut partition_rng(base, w)))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let (mut full, mut chunks) = (0u64, 0u64);
    for r in results {
        let (f, c) = r?;
        full += f;
        chunks += c;
    }
    Ok((full as f64 / trials as f64, chunks as f64 / trials as f64))
}

fn partition_rng(base: u64, partition: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update(partition.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn bloom_trials(
    params: BloomParams,
    image: &ApplicationImage,
    trials: u64,
    rng: &mut ChaCha8Rng,
) -> Result<(u64, u64), AnalyticsError> {
    let (mut full, mut chunks) = (0u64, 0u64);
    for _ in 0..trials {
        let keys: Vec<SecretKey> = (0..params.num_keys).map(|_| SecretKey::random(rng)).collect();
        let filter = build_filter(image, &keys, params.mu)?;
        let modified = random_indices(params.chunk_count, params.kappa, rng);
        let tampered = corrupt_chunks(image, &modified, rng).expect("indices in range");
        let suspects = localize(&filter, &tampered)?;
        if modified.iter().all(|i| suspects.contains(i)) {
            chunks += suspects.len() as u64;
        } else {
            full += 1;
            chunks += params.chunk_count as u64;
        }
    }
    Ok((full, chunks))
}

/// Transmitter counts for the requested neighbor numbers.
pub fn transmitter_table(ms: &[usize]) -> Result<Vec<(usize, f64)>, AnalyticsError> {
    ms.iter().map(|&m| Ok((m, to_f64(&expected_transmitters(m)?)))).collect()
}

/// `"2: 1.50, 5: 1.57"` style row.
pub fn format_transmitter_row(rows: &[(usize, f64)]) -> String {
    rows.iter().map(|(m, e)| format!("{m}: {e:.2}")).collect::<Vec<_>>().join(", ")
}

pub const REPORT_NEIGHBOR_COUNTS: [usize; 4] = [2, 5, 10, 20];

/// Plain-text report of transmitters, secure-memory cost and downloads.
pub fn report_text(layout: &SecramLayout, params: &BloomParams) -> Result<String, AnalyticsError> {
    let mut s = String::new();
    let rows = transmitter_table(&REPORT_NEIGHBOR_COUNTS)?;
    writeln!(s, "expected transmitters").unwrap();
    writeln!(s, "  {}", format_transmitter_row(&rows)).unwrap();
    writeln!(s, "secure memory").unwrap();
    writeln!(s, "  {:<22}{:>8} bits", "total", layout.total_bits()).unwrap();
    writeln!(s, "  {:<22}{:>8} bits", "bloom keys + filter", layout.bloom_extra_bits()).unwrap();
    writeln!(s, "  {:<22}{:>8} bits", "per-chunk digests", layout.naive_extra_bits()).unwrap();
    writeln!(
        s,
        "bloom extra: {} bytes ({:.1}x vs naive)",
        layout.bloom_extra_bits() / 8,
        layout.naive_extra_bits() as f64 / layout.bloom_extra_bits() as f64
    )
    .unwrap();
    let p = false_positive_rate(params.num_keys, params.mu);
    writeln!(s, "downloads (chunks={}, keys={}, mu={}, kappa={})", params.chunk_count, params.num_keys, params.mu, params.kappa)
        .unwrap();
    writeln!(s, "  {:<22}{:>10.6}", "false positive rate", p).unwrap();
    writeln!(s, "  {:<22}{:>10.6}", "full download prob", prob_full_download(p, params.kappa)).unwrap();
    writeln!(
        s,
        "  {:<22}{:>10.4}",
        "expected chunks",
        expected_download_chunks(params.chunk_count, p, params.kappa)
    )
    .unwrap();
    Ok(s)
}

/// CSV files of the report, as `(file stem, contents)`.
pub fn report_csv(layout: &SecramLayout, params: &BloomParams) -> Result<Vec<(&'static str, String)>, AnalyticsError> {
    let mut tx = String::from("m,expected_transmitters,single_transmitter_prob\n");
    for (m, e) in transmitter_table(&REPORT_NEIGHBOR_COUNTS)? {
        writeln!(tx, "{m},{e:.6},{:.6}", to_f64(&single_transmitter_prob(m)?)).unwrap();
    }
    let mut mem = String::from("item,bits\n");
    writeln!(mem, "total,{}", layout.total_bits()).unwrap();
    writeln!(mem, "bloom_extra,{}", layout.bloom_extra_bits()).unwrap();
    writeln!(mem, "naive_extra,{}", layout.naive_extra_bits()).unwrap();
    let p = false_positive_rate(params.num_keys, params.mu);
    let mut dl = String::from("chunk_count,num_keys,mu,kappa,false_positive_rate,full_download_prob,expected_chunks\n");
    writeln!(
        dl,
        "{},{},{},{},{:.6},{:.6},{:.6}",
        params.chunk_count,
        params.num_keys,
        params.mu,
        params.kappa,
        p,
        prob_full_download(p, params.kappa),
        expected_download_chunks(params.chunk_count, p, params.kappa)
    )
    .unwrap();
    Ok(vec![("transmitters", tx), ("secram", mem), ("downloads", dl)])
}
