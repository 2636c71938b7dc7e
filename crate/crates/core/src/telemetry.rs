//! Controller/proxy state synchronization: latency samples are partitioned
//! into singular (outlier) and non-singular components by a KNN distance
//! rule; singular samples travel raw, the bulk is synchronized as aggregate
//! statistics only. Scheduling consumes trends, so the approximate merged
//! median is acceptable.
//!
//! The digest wire format is a fixed field order so size measurements are
//! reproducible:
//!
//! ```text
//! digest:  version=1 (1B) | slot (8B) | singular_count (4B)
//!        | samples       | mean (8B) | median (8B) | count (8B)
//!        | min (8B) | max (8B)
//! sample:  src_len (2B) | src | dst_len (2B) | dst | latency (8B) | slot (8B)
//! ```

use crate::util::{mean, median};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TelemetryError {
    #[error("no latency information for the requested pair")]
    UnknownPair,
    #[error("no usable digests in the sync round")]
    NoDigests,
    #[error("malformed digest bytes: {0}")]
    Malformed(String),
}

/// One probe measurement between two nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    pub src: String,
    pub dst: String,
    pub latency_ms: f64,
    pub slot: u64,
}

/// Parameters of the singular/non-singular split. The defaults mirror the
/// 3x-deviation convention used by the scheduler's outlier rule; the method
/// itself fixes no constants, so both knobs stay configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub k_neighbors: usize,
    pub dist_multiplier: f64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self { k_neighbors: 5, dist_multiplier: 3.0 }
    }
}

/// Mean distance from each sample to its k nearest neighbors in latency
/// value. Samples with fewer than k peers use all of them; a lone sample
/// scores zero.
fn knn_statistics(latencies: &[f64], k: usize) -> Vec<f64> {
    let n = latencies.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| latencies[a].total_cmp(&latencies[b]));
    let sorted: Vec<f64> = order.iter().map(|&i| latencies[i]).collect();
    let mut stats = vec![0.0; n];
    for (pos, &orig) in order.iter().enumerate() {
        let mut left = pos;
        let mut right = pos + 1;
        let mut total = 0.0;
        let mut taken = 0;
        while taken < k && (left > 0 || right < n) {
            let dl = if left > 0 { sorted[pos] - sorted[left - 1] } else { f64::INFINITY };
            let dr = if right < n { sorted[right] - sorted[pos] } else { f64::INFINITY };
            if dl <= dr {
                total += dl;
                left -= 1;
            } else {
                total += dr;
                right += 1;
            }
            taken += 1;
        }
        stats[orig] = if taken > 0 { total / taken as f64 } else { 0.0 };
    }
    stats
}

/// Splits sample indices into (singular, non_singular). A sample is singular
/// iff its mean KNN distance exceeds `dist_multiplier` times the median of
/// that statistic. The partition is exhaustive and disjoint.
pub fn partition(
    samples: &[TelemetrySample],
    k_neighbors: usize,
    dist_multiplier: f64,
) -> (Vec<usize>, Vec<usize>) {
    assert!(k_neighbors >= 1, "need at least one neighbor");
    if samples.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let latencies: Vec<f64> = samples.iter().map(|s| s.latency_ms).collect();
    let stats = knn_statistics(&latencies, k_neighbors);
    let med = median(&stats);
    let mut singular = Vec::new();
    let mut non_singular = Vec::new();
    for (i, &stat) in stats.iter().enumerate() {
        if stat > dist_multiplier * med && stat > 0.0 {
            singular.push(i);
        } else {
            non_singular.push(i);
        }
    }
    (singular, non_singular)
}

/// Aggregate statistics over the non-singular component.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub count: u64,
    pub min: f64,
    pub max: f64,
}

/// What actually crosses the wire each slot: raw outliers plus one summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Digest {
    pub slot: u64,
    pub singular: Vec<TelemetrySample>,
    pub summary: Summary,
}

impl Digest {
    pub fn is_empty(&self) -> bool {
        self.singular.is_empty() && self.summary.count == 0
    }
}

/// Builds the slot digest: singular samples raw, everything else reduced to
/// the summary statistics.
pub fn compress(samples: &[TelemetrySample], params: &PartitionParams) -> Digest {
    let slot = samples.first().map_or(0, |s| s.slot);
    if samples.is_empty() {
        return Digest { slot, singular: Vec::new(), summary: Summary::default() };
    }
    let (singular_idx, non_idx) = partition(samples, params.k_neighbors, params.dist_multiplier);
    let non: Vec<f64> = non_idx.iter().map(|&i| samples[i].latency_ms).collect();
    let summary = if non.is_empty() {
        Summary::default()
    } else {
        Summary {
            mean: mean(&non),
            median: median(&non),
            count: non.len() as u64,
            min: non.iter().cloned().fold(f64::INFINITY, f64::min),
            max: non.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    };
    Digest {
        slot,
        singular: singular_idx.iter().map(|&i| samples[i].clone()).collect(),
        summary,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Confidence {
    /// The pair was synchronized raw.
    Exact,
    /// Estimated from the aggregate summary.
    Aggregate,
}

/// Latency estimate for a pair: the raw value when the pair is singular,
/// otherwise the summary median.
pub fn estimate(digest: &Digest, src: &str, dst: &str) -> Result<(f64, Confidence), TelemetryError> {
    if digest.is_empty() {
        return Err(TelemetryError::UnknownPair);
    }
    if let Some(s) = digest.singular.iter().find(|s| s.src == src && s.dst == dst) {
        return Ok((s.latency_ms, Confidence::Exact));
    }
    if digest.summary.count > 0 {
        return Ok((digest.summary.median, Confidence::Aggregate));
    }
    // Degenerate: only singular data exists; fall back to its median.
    let vals: Vec<f64> = digest.singular.iter().map(|s| s.latency_ms).collect();
    Ok((median(&vals), Confidence::Aggregate))
}

/// Result of one controller sync round.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncOutcome {
    pub broadcast: Digest,
    /// Slots of digests dropped for lagging more than one slot.
    pub dropped_stale: Vec<u64>,
}

/// Merges per-proxy digests into the broadcast digest: singular union,
/// count-weighted mean, median of medians. Digests lagging the round's slot
/// by more than one are dropped with a warning.
pub fn sync_round(digests: &[Digest], round_slot: u64) -> Result<SyncOutcome, TelemetryError> {
    let mut dropped = Vec::new();
    let mut usable = Vec::new();
    for d in digests {
        if round_slot.saturating_sub(d.slot) > 1 {
            dropped.push(d.slot);
        } else {
            usable.push(d);
        }
    }
    if usable.is_empty() {
        return Err(TelemetryError::NoDigests);
    }
    let mut singular = Vec::new();
    let mut total_count = 0u64;
    let mut weighted_mean = 0.0;
    let mut medians = Vec::new();
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for d in &usable {
        singular.extend(d.singular.iter().cloned());
        if d.summary.count > 0 {
            total_count += d.summary.count;
            weighted_mean += d.summary.mean * d.summary.count as f64;
            medians.push(d.summary.median);
            min = min.min(d.summary.min);
            max = max.max(d.summary.max);
        }
    }
    let summary = if total_count > 0 {
        Summary {
            mean: weighted_mean / total_count as f64,
            median: median(&medians),
            count: total_count,
            min,
            max,
        }
    } else {
        Summary::default()
    };
    Ok(SyncOutcome {
        broadcast: Digest { slot: round_slot, singular, summary },
        dropped_stale: dropped,
    })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn sample_to_bytes(out: &mut Vec<u8>, s: &TelemetrySample) {
    put_str(out, &s.src);
    put_str(out, &s.dst);
    out.extend_from_slice(&s.latency_ms.to_be_bytes());
    out.extend_from_slice(&s.slot.to_be_bytes());
}

/// Raw sample serialization, the baseline the compression ratio is measured
/// against.
pub fn samples_to_bytes(samples: &[TelemetrySample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(samples.len() as u32).to_be_bytes());
    for s in samples {
        sample_to_bytes(&mut out, s);
    }
    out
}

pub fn digest_to_bytes(d: &Digest) -> Vec<u8> {
    let mut out = vec![1u8];
    out.extend_from_slice(&d.slot.to_be_bytes());
    out.extend_from_slice(&(d.singular.len() as u32).to_be_bytes());
    for s in &d.singular {
        sample_to_bytes(&mut out, s);
    }
    out.extend_from_slice(&d.summary.mean.to_be_bytes());
    out.extend_from_slice(&d.summary.median.to_be_bytes());
    out.extend_from_slice(&d.summary.count.to_be_bytes());
    out.extend_from_slice(&d.summary.min.to_be_bytes());
    out.extend_from_slice(&d.summary.max.to_be_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TelemetryError> {
        if self.at + n > self.bytes.len() {
            return Err(TelemetryError::Malformed(format!(
                "needed {n} bytes at offset {}, had {}",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, TelemetryError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TelemetryError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TelemetryError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, TelemetryError> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, TelemetryError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| TelemetryError::Malformed(e.to_string()))
    }
}

pub fn digest_from_bytes(bytes: &[u8]) -> Result<Digest, TelemetryError> {
    let mut r = Reader { bytes, at: 0 };
    let version = r.take(1)?[0];
    if version != 1 {
        return Err(TelemetryError::Malformed(format!("unknown digest version {version}")));
    }
    let slot = r.u64()?;
    let count = r.u32()? as usize;
    let mut singular = Vec::with_capacity(count);
    for _ in 0..count {
        let src = r.string()?;
        let dst = r.string()?;
        let latency_ms = r.f64()?;
        let sample_slot = r.u64()?;
        singular.push(TelemetrySample { src, dst, latency_ms, slot: sample_slot });
    }
    let summary = Summary {
        mean: r.f64()?,
        median: r.f64()?,
        count: r.u64()?,
        min: r.f64()?,
        max: r.f64()?,
    };
    Ok(Digest { slot, singular, summary })
}

/// Version counter for relatively static state (topology, user config):
/// peers compare versions and fetch only when behind, instead of shipping
/// the payload every slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versioned<T> {
    pub version: u64,
    pub value: T,
}

impl<T> Versioned<T> {
    pub fn new(value: T) -> Self {
        Self { version: 0, value }
    }

    pub fn replace(&mut self, value: T) {
        self.version += 1;
        self.value = value;
    }

    /// True when a peer at `seen_version` needs this copy.
    pub fn newer_than(&self, seen_version: u64) -> bool {
        self.version > seen_version
    }
}

/// CSV dump of a digest for offline analysis: singular samples row by row,
/// then one summary row.
pub fn digest_to_csv(d: &Digest) -> String {
    let mut out = String::from("kind,src,dst,latency_ms,slot\n");
    for s in &d.singular {
        out.push_str(&format!("singular,{},{},{},{}\n", s.src, s.dst, s.latency_ms, s.slot));
    }
    out.push_str(&format!(
        "summary,mean={},median={},count={},min={},max={},{}\n",
        d.summary.mean, d.summary.median, d.summary.count, d.summary.min, d.summary.max, d.slot
    ));
    out
}

/// Synthetic full-mesh latency samples: every unordered node pair measured
/// once, non-singular latencies drawn within +/-20% of a shared mean, an
/// `outlier_fraction` of pairs spiked far above it.
pub fn synthetic_mesh(
    n_nodes: usize,
    base_latency_ms: f64,
    outlier_fraction: f64,
    seed: u64,
    slot: u64,
) -> Vec<TelemetrySample> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for i in 0..n_nodes {
        for j in (i + 1)..n_nodes {
            let latency_ms = if rng.gen_bool(outlier_fraction) {
                base_latency_ms * rng.gen_range(10.0..50.0)
            } else {
                base_latency_ms * rng.gen_range(0.8..1.2)
            };
            out.push(TelemetrySample {
                src: format!("n{i}"),
                dst: format!("n{j}"),
                latency_ms,
                slot,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(src: &str, dst: &str, lat: f64) -> TelemetrySample {
        TelemetrySample { src: src.into(), dst: dst.into(), latency_ms: lat, slot: 0 }
    }

    #[test]
    fn identical_latencies_have_no_singular_samples() {
        let samples: Vec<_> = (0..20).map(|i| sample(&format!("a{i}"), "b", 50.0)).collect();
        let (singular, non) = partition(&samples, 5, 3.0);
        assert!(singular.is_empty());
        assert_eq!(non.len(), 20);
    }

    #[test]
    fn one_far_outlier_is_exactly_singular() {
        // Cluster near 50 ms with mild spread plus one sample at 5000 ms.
        let mut samples: Vec<_> = (0..99)
            .map(|i| sample(&format!("a{i}"), "b", 50.0 + (i % 10) as f64 * 0.1))
            .collect();
        samples.push(sample("hot", "b", 5000.0));
        let (singular, non) = partition(&samples, 5, 3.0);
        assert_eq!(singular, vec![99]);
        assert_eq!(non.len(), 99);
    }

    #[test]
    fn single_sample_is_non_singular_by_convention() {
        let samples = vec![sample("a", "b", 42.0)];
        let (singular, non) = partition(&samples, 5, 3.0);
        assert!(singular.is_empty());
        assert_eq!(non, vec![0]);
    }

    #[test]
    fn empty_input_compresses_to_an_empty_digest() {
        let d = compress(&[], &PartitionParams::default());
        assert!(d.is_empty());
        assert_eq!(d.summary.count, 0);
    }

    #[test]
    fn digest_statistics_match_independent_recomputation() {
        let samples = synthetic_mesh(12, 80.0, 0.05, 7, 3);
        let d = compress(&samples, &PartitionParams::default());
        // Recompute over the complement of the singular set.
        let singular_pairs: std::collections::HashSet<(String, String)> =
            d.singular.iter().map(|s| (s.src.clone(), s.dst.clone())).collect();
        let non: Vec<f64> = samples
            .iter()
            .filter(|s| !singular_pairs.contains(&(s.src.clone(), s.dst.clone())))
            .map(|s| s.latency_ms)
            .collect();
        assert_eq!(d.summary.count, non.len() as u64);
        assert!((d.summary.mean - crate::util::mean(&non)).abs() < 1e-9);
        assert!((d.summary.median - crate::util::median(&non)).abs() < 1e-9);
    }

    #[test]
    fn mesh_digest_is_a_fifth_of_raw_or_less() {
        let samples = synthetic_mesh(50, 80.0, 0.02, 11, 0);
        assert_eq!(samples.len(), 1225);
        let d = compress(&samples, &PartitionParams::default());
        let raw = samples_to_bytes(&samples).len();
        let packed = digest_to_bytes(&d).len();
        assert!(
            (packed as f64) <= 0.2 * raw as f64,
            "digest {packed} bytes vs raw {raw} bytes"
        );
    }

    #[test]
    fn estimate_picks_raw_or_aggregate() {
        let mut samples: Vec<_> = (0..30)
            .map(|i| sample(&format!("a{i}"), "b", 80.0 + (i % 7) as f64))
            .collect();
        samples.push(sample("x", "y", 3000.0));
        let d = compress(&samples, &PartitionParams::default());
        let (lat, conf) = estimate(&d, "x", "y").unwrap();
        assert_eq!(conf, Confidence::Exact);
        assert_eq!(lat, 3000.0);
        let (lat, conf) = estimate(&d, "a3", "b").unwrap();
        assert_eq!(conf, Confidence::Aggregate);
        assert_eq!(lat, d.summary.median);
    }

    #[test]
    fn empty_digest_has_no_estimates() {
        let d = compress(&[], &PartitionParams::default());
        assert_eq!(estimate(&d, "a", "b").unwrap_err(), TelemetryError::UnknownPair);
    }

    #[test]
    fn single_digest_round_broadcasts_it() {
        let samples = synthetic_mesh(10, 60.0, 0.05, 3, 9);
        let d = compress(&samples, &PartitionParams::default());
        let out = sync_round(&[d.clone()], 9).unwrap();
        assert_eq!(out.broadcast.summary, d.summary);
        assert_eq!(out.broadcast.singular, d.singular);
        assert!(out.dropped_stale.is_empty());
    }

    #[test]
    fn disjoint_singular_sets_survive_the_merge() {
        let mut a = compress(&[sample("a", "b", 50.0)], &PartitionParams::default());
        a.singular = vec![sample("a", "b", 900.0)];
        a.slot = 5;
        let mut b = compress(&[sample("c", "d", 52.0)], &PartitionParams::default());
        b.singular = vec![sample("c", "d", 700.0)];
        b.slot = 5;
        let out = sync_round(&[a, b], 5).unwrap();
        assert_eq!(out.broadcast.singular.len(), 2);
        let pairs: Vec<_> = out
            .broadcast
            .singular
            .iter()
            .map(|s| (s.src.as_str(), s.dst.as_str()))
            .collect();
        assert!(pairs.contains(&("a", "b")));
        assert!(pairs.contains(&("c", "d")));
    }

    #[test]
    fn merged_mean_equals_pooled_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut digests = Vec::new();
        let mut pooled = Vec::new();
        for proxy in 0..4 {
            let samples: Vec<_> = (0..rng.gen_range(5..40))
                .map(|i| sample(&format!("p{proxy}s{i}"), "dst", rng.gen_range(40.0..90.0)))
                .collect();
            let d = compress(&samples, &PartitionParams::default());
            let singular: std::collections::HashSet<&str> =
                d.singular.iter().map(|s| s.src.as_str()).collect();
            pooled.extend(
                samples
                    .iter()
                    .filter(|s| !singular.contains(s.src.as_str()))
                    .map(|s| s.latency_ms),
            );
            digests.push(d);
        }
        let out = sync_round(&digests, 0).unwrap();
        let expected = crate::util::mean(&pooled);
        let got = out.broadcast.summary.mean;
        assert!(
            (got - expected).abs() <= 1e-9 * expected.abs(),
            "merged mean {got} vs pooled {expected}"
        );
        assert_eq!(out.broadcast.summary.count as usize, pooled.len());
    }

    #[test]
    fn stale_digests_are_dropped_with_warning() {
        let fresh = compress(&[sample("a", "b", 50.0)], &PartitionParams::default());
        let mut stale = fresh.clone();
        stale.slot = 3;
        let mut fresh = fresh;
        fresh.slot = 9;
        let out = sync_round(&[fresh, stale], 9).unwrap();
        assert_eq!(out.dropped_stale, vec![3]);
        // Only stale input: the round has nothing to broadcast.
        let lone = compress(&[sample("a", "b", 50.0)], &PartitionParams::default());
        assert_eq!(sync_round(&[lone], 99).unwrap_err(), TelemetryError::NoDigests);
    }

    #[test]
    fn aggregate_estimates_stay_within_a_quarter_of_truth() {
        let samples = synthetic_mesh(30, 80.0, 0.02, 5, 0);
        let d = compress(&samples, &PartitionParams::default());
        let singular_pairs: std::collections::HashSet<(&str, &str)> =
            d.singular.iter().map(|s| (s.src.as_str(), s.dst.as_str())).collect();
        let mut within = 0usize;
        let mut total = 0usize;
        for s in &samples {
            if singular_pairs.contains(&(s.src.as_str(), s.dst.as_str())) {
                continue;
            }
            let (est, _) = estimate(&d, &s.src, &s.dst).unwrap();
            total += 1;
            if (est - s.latency_ms).abs() / s.latency_ms <= 0.25 {
                within += 1;
            }
        }
        assert!(
            within as f64 >= 0.95 * total as f64,
            "{within}/{total} non-singular estimates within 25%"
        );
    }

    #[test]
    fn version_counter_gates_propagation() {
        let mut cfg = Versioned::new("topology-v1".to_string());
        assert!(!cfg.newer_than(0));
        cfg.replace("topology-v2".into());
        assert!(cfg.newer_than(0));
        assert!(!cfg.newer_than(1));
        assert_eq!(cfg.version, 1);
    }

    proptest! {
        #[test]
        fn partition_is_exhaustive_and_disjoint(
            lats in proptest::collection::vec(0.1..10_000.0f64, 1..120),
            k in 1usize..8,
            mult in 1.0..5.0f64,
        ) {
            let samples: Vec<_> = lats
                .iter()
                .enumerate()
                .map(|(i, l)| sample(&format!("s{i}"), "d", *l))
                .collect();
            let (singular, non) = partition(&samples, k, mult);
            prop_assert_eq!(singular.len() + non.len(), samples.len());
            let mut all: Vec<usize> = singular.iter().chain(&non).copied().collect();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), samples.len());
        }

        #[test]
        fn digest_bytes_round_trip(
            n in 0usize..20,
            seed in 0u64..100,
        ) {
            let samples = synthetic_mesh(n.max(2), 70.0, 0.1, seed, seed);
            let d = compress(&samples, &PartitionParams::default());
            let back = digest_from_bytes(&digest_to_bytes(&d)).unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn digest_never_larger_than_raw_plus_overhead(seed in 0u64..50) {
            let samples = synthetic_mesh(12, 70.0, 0.3, seed, 0);
            let d = compress(&samples, &PartitionParams::default());
            let raw = samples_to_bytes(&samples).len();
            let packed = digest_to_bytes(&d).len();
            // Constant overhead: version byte, slot, count, five summary
            // fields.
            prop_assert!(packed <= raw + 1 + 8 + 4 + 40);
        }
    }
}
