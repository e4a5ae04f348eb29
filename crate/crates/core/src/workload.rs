//! Synthetic key/value/query streams and the binary trace format.
//!
//! # Generator
//!
//! Keys come from a Gaussian mixture. Component means are drawn once from
//! N(0, I) and, during decoding only, each mean takes a random-walk step of
//! `drift · N(0, I)` before every token, so decode-time keys gradually move
//! away from the prefill distribution. Each token keeps its predecessor's
//! component with probability `persistence` (runs of related tokens) and
//! otherwise draws a component uniformly. A key is its component mean plus
//! `noise_sigma · N(0, I)`. Each decoding step also emits a query: with
//! probability `query_alignment` it is a uniformly chosen current mean plus
//! `noise_sigma · N(0, I)`, otherwise isotropic N(0, I). Values are N(0, I).
//!
//! The defaults (16 components, `noise_sigma` 0.1) describe a few tight
//! topics. Whether any cluster-granular policy can recover the exact top-B
//! set depends mostly on how per-token noise compares with the gaps between
//! component scores: with many loose components the top-B boundary is drawn
//! by token noise that no centroid can see.
//!
//! Randomness comes from ChaCha8 (`rand_chacha`) seeded with
//! `seed_from_u64(seed)` and normal samples from `rand_distr::StandardNormal`,
//! consumed in a fixed order, so a given config always yields the same trace.
//!
//! # Trace file
//!
//! Little-endian throughout. A 40-byte header:
//!
//! | offset | size | field                                    |
//! |--------|------|------------------------------------------|
//! | 0      | 8    | magic `KVTRACE\0`                        |
//! | 8      | 4    | version (u32, currently 1)               |
//! | 12     | 4    | element encoding (u32, 1 = IEEE-754 f32) |
//! | 16     | 4    | d_h (u32, ≥ 1)                           |
//! | 20     | 4    | reserved (u32, 0)                        |
//! | 24     | 8    | prefill_len (u64)                        |
//! | 32     | 8    | total_len (u64, ≥ prefill_len)           |
//!
//! followed by three row-major f32 matrices: keys (`total_len × d_h`),
//! values (`total_len × d_h`) and queries (`(total_len − prefill_len) × d_h`,
//! one per decoding step). Nothing may follow the queries.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{check_finite, KvCache};

pub const TRACE_MAGIC: [u8; 8] = *b"KVTRACE\0";
pub const TRACE_VERSION: u32 = 1;
pub const ENCODING_F32_LE: u32 = 1;
pub const HEADER_LEN: usize = 40;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub d_h: usize,
    pub prefill_len: usize,
    pub decode_len: usize,
    pub n_components: usize,
    /// Scale of each decode-step random-walk move of the component means.
    pub drift: f64,
    pub query_alignment: f64,
    pub noise_sigma: f64,
    /// Probability a token keeps its predecessor's component.
    pub persistence: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            d_h: 128,
            prefill_len: 2048,
            decode_len: 2048,
            n_components: 16,
            drift: 0.01,
            query_alignment: 0.9,
            noise_sigma: 0.1,
            persistence: 0.8,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("d_h", self.d_h),
            ("prefill_len", self.prefill_len),
            ("decode_len", self.decode_len),
            ("n_components", self.n_components),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be >= 1")));
            }
        }
        for (name, p) in [
            ("query_alignment", self.query_alignment),
            ("persistence", self.persistence),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parameter(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        for (name, v) in [("drift", self.drift), ("noise_sigma", self.noise_sigma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Keys and values for every token plus one query per decoding step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    d_h: usize,
    prefill_len: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
    queries: Vec<f32>,
}

impl Trace {
    pub fn new(
        d_h: usize,
        prefill_len: usize,
        keys: Vec<f32>,
        values: Vec<f32>,
        queries: Vec<f32>,
    ) -> Result<Self> {
        let trace = Self {
            d_h,
            prefill_len,
            keys,
            values,
            queries,
        };
        trace.validate()?;
        Ok(trace)
    }

    fn validate(&self) -> Result<()> {
        if self.d_h == 0 {
            return Err(Error::Parameter("d_h must be >= 1".into()));
        }
        if !self.keys.len().is_multiple_of(self.d_h) || self.keys.len() != self.values.len() {
            return Err(Error::Parameter("key and value matrices disagree".into()));
        }
        let total = self.keys.len() / self.d_h;
        if self.prefill_len > total {
            return Err(Error::Parameter(format!(
                "prefill_len {} exceeds total_len {total}",
                self.prefill_len
            )));
        }
        if self.queries.len() != (total - self.prefill_len) * self.d_h {
            return Err(Error::Parameter(format!(
                "expected {} query rows, got {} floats",
                total - self.prefill_len,
                self.queries.len()
            )));
        }
        check_finite(&self.keys)?;
        check_finite(&self.values)?;
        check_finite(&self.queries)?;
        Ok(())
    }

    pub fn d_h(&self) -> usize {
        self.d_h
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill_len
    }

    pub fn total_len(&self) -> usize {
        self.keys.len() / self.d_h
    }

    pub fn decode_len(&self) -> usize {
        self.total_len() - self.prefill_len
    }

    pub fn key(&self, t: usize) -> &[f32] {
        &self.keys[t * self.d_h..(t + 1) * self.d_h]
    }

    pub fn value(&self, t: usize) -> &[f32] {
        &self.values[t * self.d_h..(t + 1) * self.d_h]
    }

    /// Query of decoding step `step` (token `prefill_len + step`).
    pub fn query(&self, step: usize) -> &[f32] {
        &self.queries[step * self.d_h..(step + 1) * self.d_h]
    }

    /// A cache holding just the prefill rows.
    pub fn prefill_cache(&self) -> Result<KvCache> {
        let n = self.prefill_len * self.d_h;
        KvCache::from_prefill(self.d_h, self.keys[..n].to_vec(), self.values[..n].to_vec())
    }

    /// Bytes following the header.
    pub fn payload_len(&self) -> usize {
        (self.keys.len() + self.values.len() + self.queries.len()) * 4
    }
}

pub fn generate(config: &SyntheticConfig) -> Result<Trace> {
    generate_labeled(config).map(|(t, _)| t)
}

/// Like [`generate`], also returning each token's mixture component.
pub fn generate_labeled(config: &SyntheticConfig) -> Result<(Trace, Vec<usize>)> {
    config.validate()?;
    let d = config.d_h;
    let total = config.prefill_len + config.decode_len;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut means: Vec<Vec<f64>> = (0..config.n_components)
        .map(|_| (0..d).map(|_| sample(&mut rng)).collect())
        .collect();

    let mut keys = Vec::with_capacity(total * d);
    let mut values = Vec::with_capacity(total * d);
    let mut queries = Vec::with_capacity(config.decode_len * d);
    let mut labels = Vec::with_capacity(total);
    let sigma = config.noise_sigma;

    for t in 0..total {
        let decoding = t >= config.prefill_len;
        if decoding && config.drift > 0.0 {
            for m in means.iter_mut() {
                for x in m.iter_mut() {
                    *x += config.drift * sample(&mut rng);
                }
            }
        }
        let keep = t > 0 && rng.random::<f64>() < config.persistence;
        let c = if keep {
            labels[t - 1]
        } else {
            rng.random_range(0..config.n_components)
        };
        labels.push(c);
        for &m in &means[c] {
            keys.push((m + sigma * sample(&mut rng)) as f32);
        }
        for _ in 0..d {
            values.push(sample(&mut rng) as f32);
        }
        if decoding {
            if rng.random::<f64>() < config.query_alignment {
                let qc = rng.random_range(0..config.n_components);
                for &m in &means[qc] {
                    queries.push((m + sigma * sample(&mut rng)) as f32);
                }
            } else {
                for _ in 0..d {
                    queries.push(sample(&mut rng) as f32);
                }
            }
        }
    }
    let trace = Trace::new(d, config.prefill_len, keys, values, queries)?;
    Ok((trace, labels))
}

fn sample(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_trace(trace: &Trace, w: &mut impl Write) -> Result<()> {
    w.write_all(&TRACE_MAGIC)?;
    w.write_all(&TRACE_VERSION.to_le_bytes())?;
    w.write_all(&ENCODING_F32_LE.to_le_bytes())?;
    w.write_all(&(trace.d_h as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    w.write_all(&(trace.prefill_len as u64).to_le_bytes())?;
    w.write_all(&(trace.total_len() as u64).to_le_bytes())?;
    for m in [&trace.keys, &trace.values, &trace.queries] {
        for x in m.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_trace(path: &Path) -> Result<Trace> {
    parse_trace(&std::fs::read(path)?)
}

/// Fixed-size header fields of a trace file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceHeader {
    pub version: u32,
    pub encoding: u32,
    pub d_h: usize,
    pub prefill_len: usize,
    pub total_len: usize,
}

impl TraceHeader {
    pub fn payload_len(&self) -> u64 {
        let rows = 2 * self.total_len as u64 + (self.total_len - self.prefill_len) as u64;
        rows * self.d_h as u64 * 4
    }
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"))
}

pub fn parse_header(bytes: &[u8]) -> Result<TraceHeader> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(
            bytes.len(),
            format!("truncated header: {} of {HEADER_LEN} bytes", bytes.len()),
        ));
    }
    if bytes[..8] != TRACE_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[..8])));
    }
    let version = read_u32(bytes, 8);
    if version != TRACE_VERSION {
        return Err(format_err(8, format!("unsupported version {version}")));
    }
    let encoding = read_u32(bytes, 12);
    if encoding != ENCODING_F32_LE {
        return Err(format_err(
            12,
            format!("unsupported element encoding {encoding}"),
        ));
    }
    let d_h = read_u32(bytes, 16) as usize;
    if d_h == 0 {
        return Err(format_err(16, "d_h must be >= 1"));
    }
    if read_u32(bytes, 20) != 0 {
        return Err(format_err(20, "reserved field must be 0"));
    }
    let prefill_len = read_u64(bytes, 24);
    let total_len = read_u64(bytes, 32);
    if prefill_len > total_len {
        return Err(format_err(
            24,
            format!("prefill_len {prefill_len} exceeds total_len {total_len}"),
        ));
    }
    let header = TraceHeader {
        version,
        encoding,
        d_h,
        prefill_len: usize::try_from(prefill_len)
            .map_err(|_| format_err(24, "prefill_len too large"))?,
        total_len: usize::try_from(total_len).map_err(|_| format_err(32, "total_len too large"))?,
    };
    header
        .total_len
        .checked_mul(3)
        .and_then(|r| r.checked_mul(d_h * 4))
        .ok_or_else(|| format_err(32, "declared sizes overflow"))?;
    Ok(header)
}

pub fn parse_trace(bytes: &[u8]) -> Result<Trace> {
    let h = parse_header(bytes)?;
    let expected = HEADER_LEN as u64 + h.payload_len();
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: file has {actual} bytes, header declares {expected}"),
        ));
    }
    if actual > expected {
        return Err(format_err(
            expected as usize,
            format!("{} trailing bytes after payload", actual - expected),
        ));
    }
    let mut at = HEADER_LEN;
    let mut read_matrix = |rows: usize| -> Result<Vec<f32>> {
        let n = rows * h.d_h;
        let out: Vec<f32> = bytes[at..at + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(i) = out.iter().position(|x| !x.is_finite()) {
            return Err(format_err(at + 4 * i, "non-finite element"));
        }
        at += 4 * n;
        Ok(out)
    };
    let keys = read_matrix(h.total_len)?;
    let values = read_matrix(h.total_len)?;
    let queries = read_matrix(h.total_len - h.prefill_len)?;
    Trace::new(h.d_h, h.prefill_len, keys, values, queries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::cosine_similarity;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            d_h: 16,
            prefill_len: 64,
            decode_len: 32,
            n_components: 4,
            seed,
            ..Default::default()
        }
    }

    fn encode(t: &Trace) -> Vec<u8> {
        let mut buf = Vec::new();
        write_trace(t, &mut buf).unwrap();
        buf
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&SyntheticConfig::default()).unwrap();
        let b = generate(&SyntheticConfig::default()).unwrap();
        assert_eq!(encode(&a), encode(&b));
        assert_ne!(encode(&a), encode(&generate(&small(1)).unwrap()));
    }

    #[test]
    fn shapes() {
        let t = generate(&small(0)).unwrap();
        assert_eq!(
            (t.total_len(), t.prefill_len(), t.decode_len()),
            (96, 64, 32)
        );
        assert_eq!(t.query(31).len(), 16);
        assert_eq!(t.prefill_cache().unwrap().len(), 64);
    }

    #[test]
    fn full_persistence_keeps_component() {
        let cfg = SyntheticConfig {
            persistence: 1.0,
            ..small(3)
        };
        let (_, labels) = generate_labeled(&cfg).unwrap();
        assert!(labels.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn no_drift_keeps_distribution() {
        let cfg = SyntheticConfig {
            d_h: 8,
            prefill_len: 2000,
            decode_len: 2000,
            n_components: 1,
            drift: 0.0,
            noise_sigma: 1.0,
            seed: 4,
            ..Default::default()
        };
        let t = generate(&cfg).unwrap();
        let n = 2000.0;
        for d in 0..8 {
            let pre: f64 = (0..2000).map(|i| f64::from(t.key(i)[d])).sum::<f64>() / n;
            let dec: f64 = (2000..4000).map(|i| f64::from(t.key(i)[d])).sum::<f64>() / n;
            assert!(
                (pre - dec).abs() < 3.0 * 1.0 / n.sqrt(),
                "dim {d}: {pre} vs {dec}"
            );
        }
    }

    #[test]
    fn drift_separates_late_decode_keys() {
        for seed in 0..5 {
            let cfg = SyntheticConfig {
                d_h: 32,
                prefill_len: 256,
                decode_len: 1024,
                n_components: 4,
                drift: 0.05,
                seed,
                ..Default::default()
            };
            let t = generate(&cfg).unwrap();
            let mean_cos = |range: std::ops::Range<usize>| {
                let mut s = 0.0;
                let mut n = 0.0;
                for i in (0..256).step_by(4) {
                    for j in range.clone().step_by(4) {
                        s += f64::from(cosine_similarity(t.key(i), t.key(j)).unwrap());
                        n += 1.0;
                    }
                }
                s / n
            };
            let early = mean_cos(256..384);
            let late = mean_cos(1152..1280);
            assert!(late < early, "seed {seed}: early {early} late {late}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(SyntheticConfig { d_h: 0, ..small(0) }.validate().is_err());
        assert!(SyntheticConfig {
            query_alignment: 1.5,
            ..small(0)
        }
        .validate()
        .is_err());
        assert!(SyntheticConfig {
            noise_sigma: -1.0,
            ..small(0)
        }
        .validate()
        .is_err());
        assert!(generate(&SyntheticConfig {
            decode_len: 0,
            ..small(0)
        })
        .is_err());
    }

    #[test]
    fn round_trip_through_file() {
        let t = generate(&small(5)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.kvtrace");
        save_trace(&t, &path).unwrap();
        let back = load_trace(&path).unwrap();
        assert_eq!(encode(&back), encode(&t));
        assert_eq!(back, t);
    }

    #[test]
    fn payload_size_from_header() {
        let h = TraceHeader {
            version: 1,
            encoding: 1,
            d_h: 128,
            prefill_len: 2048,
            total_len: 4096,
        };
        assert_eq!(h.payload_len(), (4096 * 128 * 2 + 2048 * 128) * 4);
        let t = generate(&small(0)).unwrap();
        assert_eq!(encode(&t).len(), HEADER_LEN + t.payload_len());
    }

    #[test]
    fn rejects_corruption() {
        let good = encode(&generate(&small(6)).unwrap());
        let check = |bytes: &[u8], want_offset: u64| match parse_trace(bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, want_offset),
            other => panic!("expected format error, got {other:?}"),
        };

        check(&good[..good.len() - 1], good.len() as u64 - 1);
        check(&good[..10], 10);

        let mut bad = good.clone();
        bad[0] = b'X';
        check(&bad, 0);

        let mut bad = good.clone();
        bad[8..12].copy_from_slice(&2u32.to_le_bytes());
        check(&bad, 8);

        let mut bad = good.clone();
        bad[12..16].copy_from_slice(&7u32.to_le_bytes());
        check(&bad, 12);

        let mut bad = good.clone();
        bad[24..32].copy_from_slice(&1000u64.to_le_bytes());
        check(&bad, 24);

        let mut bad = good.clone();
        bad.push(0);
        check(&bad, good.len() as u64);

        let mut bad = good.clone();
        bad[HEADER_LEN + 8..HEADER_LEN + 12].copy_from_slice(&f32::NAN.to_le_bytes());
        check(&bad, HEADER_LEN as u64 + 8);
    }
}
