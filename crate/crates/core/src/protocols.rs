//! Presence masks for the fixed and random missing protocols.

use std::fmt;
use std::str::FromStr;

use ndarray::s;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::batch::MultimodalBatch;
use crate::error::{Error, Result};
use crate::rng;

/// Per-sample, per-modality availability; `true` means present.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PresenceMask {
    num_modalities: usize,
    flags: Vec<bool>,
}

impl PresenceMask {
    /// Builds a mask from rows, enforcing that every row keeps one modality.
    pub fn from_rows(rows: Vec<Vec<bool>>) -> Result<Self> {
        let u = rows.first().map(Vec::len).ok_or(Error::EmptyInput("PresenceMask::from_rows"))?;
        let mut flags = Vec::with_capacity(rows.len() * u);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != u {
                return Err(Error::dim(format!("mask row {i}"), u, r.len()));
            }
            if !r.iter().any(|&b| b) {
                return Err(Error::Protocol(format!("mask row {i} has no present modality")));
            }
            flags.extend_from_slice(r);
        }
        Ok(Self { num_modalities: u, flags })
    }

    pub fn all_present(num_samples: usize, num_modalities: usize) -> Self {
        Self { num_modalities, flags: vec![true; num_samples * num_modalities] }
    }

    pub fn num_samples(&self) -> usize {
        self.flags.len() / self.num_modalities.max(1)
    }

    pub fn num_modalities(&self) -> usize {
        self.num_modalities
    }

    pub fn is_present(&self, sample: usize, modality: usize) -> bool {
        self.flags[sample * self.num_modalities + modality]
    }

    pub fn row(&self, sample: usize) -> &[bool] {
        &self.flags[sample * self.num_modalities..(sample + 1) * self.num_modalities]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[bool]> {
        self.flags.chunks(self.num_modalities)
    }

    pub fn present_count(&self) -> usize {
        self.flags.iter().filter(|&&b| b).count()
    }

    pub fn is_complete(&self) -> bool {
        self.flags.iter().all(|&b| b)
    }

    /// The rows at `indices`, in order.
    pub fn slice(&self, indices: &[usize]) -> Self {
        let mut flags = Vec::with_capacity(indices.len() * self.num_modalities);
        for &i in indices {
            flags.extend_from_slice(self.row(i));
        }
        Self { num_modalities: self.num_modalities, flags }
    }

    /// `sample_id,m0,...,m{U-1}` with `1`/`0` flags.
    pub fn to_csv(&self, sample_ids: &[usize]) -> Result<String> {
        if sample_ids.len() != self.num_samples() {
            return Err(Error::dim("mask CSV sample ids", self.num_samples(), sample_ids.len()));
        }
        let mut out = String::from("sample_id");
        for m in 0..self.num_modalities {
            out.push_str(&format!(",m{m}"));
        }
        out.push('\n');
        for (id, row) in sample_ids.iter().zip(self.rows()) {
            out.push_str(&id.to_string());
            for &b in row {
                out.push_str(if b { ",1" } else { ",0" });
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Inverse of [`PresenceMask::to_csv`], returning sample ids and the mask.
    pub fn from_csv(text: &str) -> Result<(Vec<usize>, Self)> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(Error::EmptyInput("mask CSV"))?;
        let u = header.split(',').count().saturating_sub(1);
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut fields = line.split(',');
            let id = fields
                .next()
                .and_then(|f| f.trim().parse::<usize>().ok())
                .ok_or_else(|| Error::Data(format!("mask CSV line {}: bad sample id", n + 2)))?;
            let row = fields
                .map(|f| match f.trim() {
                    "1" => Ok(true),
                    "0" => Ok(false),
                    other => Err(Error::Data(format!("mask CSV line {}: bad flag {other:?}", n + 2))),
                })
                .collect::<Result<Vec<_>>>()?;
            if row.len() != u {
                return Err(Error::dim(format!("mask CSV line {}", n + 2), u, row.len()));
            }
            ids.push(id);
            rows.push(row);
        }
        Ok((ids, Self::from_rows(rows)?))
    }
}

/// `MR = 1 - (present slots) / (N * U)`.
pub fn compute_mr(mask: &PresenceMask) -> f64 {
    1.0 - mask.present_count() as f64 / mask.flags.len() as f64
}

/// Every sample keeps exactly `present`.
pub fn fixed_mask(num_samples: usize, present: &[usize], num_modalities: usize) -> Result<PresenceMask> {
    if present.is_empty() {
        return Err(Error::Protocol("fixed protocol needs at least one present modality".into()));
    }
    let mut row = vec![false; num_modalities];
    for &m in present {
        if m >= num_modalities {
            return Err(Error::Protocol(format!("modality {m} out of range for U = {num_modalities}")));
        }
        row[m] = true;
    }
    Ok(PresenceMask { num_modalities, flags: row.repeat(num_samples) })
}

/// Largest missing rate any valid mask can reach.
pub fn max_feasible_mr(num_modalities: usize) -> f64 {
    (num_modalities as f64 - 1.0) / num_modalities as f64
}

fn kept_slots(num_samples: usize, num_modalities: usize, target_mr: f64) -> usize {
    ((num_samples * num_modalities) as f64 * (1.0 - target_mr)).round() as usize
}

fn build_exact<R: Rng>(num_samples: usize, num_modalities: usize, kept: usize, rng: &mut R) -> PresenceMask {
    let (n, u) = (num_samples, num_modalities);
    let mut counts = vec![1usize; n];
    let mut extra: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, u - 1)).collect();
    extra.shuffle(rng);
    for &i in extra.iter().take(kept - n) {
        counts[i] += 1;
    }
    let mut flags = vec![false; n * u];
    let mut order: Vec<usize> = (0..u).collect();
    for (i, &k) in counts.iter().enumerate() {
        order.shuffle(rng);
        for &m in &order[..k] {
            flags[i * u + m] = true;
        }
    }
    PresenceMask { num_modalities: u, flags }
}

/// Random protocol with an exact kept-slot count `round(N U (1 - target))`.
///
/// Each sample first keeps one modality; the remaining kept slots are spread
/// uniformly over the `N (U - 1)` optional slots, then each sample's kept
/// modalities are chosen uniformly. Targets above `(U - 1) / U` are rejected.
pub fn random_mask_with<R: Rng>(num_samples: usize, num_modalities: usize, target_mr: f64, rng: &mut R) -> Result<PresenceMask> {
    if num_samples == 0 {
        return Err(Error::EmptyInput("random_mask"));
    }
    if num_modalities == 0 {
        return Err(Error::Protocol("random protocol needs U >= 1".into()));
    }
    if !(0.0..=1.0).contains(&target_mr) {
        return Err(Error::Protocol(format!("missing rate {target_mr} outside [0, 1]")));
    }
    let kept = kept_slots(num_samples, num_modalities, target_mr);
    if kept < num_samples {
        return Err(Error::Protocol(format!(
            "missing rate {target_mr} infeasible for U = {num_modalities}: keeps {kept} slots for {num_samples} samples; \
             the feasible bound is MR <= {:.6}",
            max_feasible_mr(num_modalities)
        )));
    }
    Ok(build_exact(num_samples, num_modalities, kept, rng))
}

pub fn random_mask(num_samples: usize, num_modalities: usize, target_mr: f64, seed: u64) -> Result<PresenceMask> {
    let mut r = rng::stream(seed, "mask", 0);
    random_mask_with(num_samples, num_modalities, target_mr, &mut r)
}

/// Like [`random_mask_with`], but a target above the feasible bound is
/// lowered to it instead of rejected.
pub fn random_mask_clamped<R: Rng>(num_samples: usize, num_modalities: usize, target_mr: f64, rng: &mut R) -> Result<PresenceMask> {
    if num_samples == 0 {
        return Err(Error::EmptyInput("random_mask"));
    }
    if !(0.0..=1.0).contains(&target_mr) {
        return Err(Error::Protocol(format!("missing rate {target_mr} outside [0, 1]")));
    }
    let kept = kept_slots(num_samples, num_modalities, target_mr).max(num_samples);
    Ok(build_exact(num_samples, num_modalities, kept, rng))
}

/// A batch with missing modalities zeroed, plus the mask that produced it.
#[derive(Debug, Clone)]
pub struct MaskedBatch {
    pub batch: MultimodalBatch,
    pub mask: PresenceMask,
}

/// Zeroes the token matrices of every absent `(sample, modality)`.
pub fn apply_mask(batch: &MultimodalBatch, mask: &PresenceMask) -> Result<MaskedBatch> {
    if mask.num_samples() != batch.num_samples {
        return Err(Error::dim("mask rows", batch.num_samples, mask.num_samples()));
    }
    if mask.num_modalities() != batch.num_modalities() {
        return Err(Error::dim("mask columns", batch.num_modalities(), mask.num_modalities()));
    }
    let mut out = batch.clone();
    let l = batch.seq_len;
    for (i, row) in mask.rows().enumerate() {
        for (m, &present) in row.iter().enumerate() {
            if !present {
                out.modalities[m].slice_mut(s![i * l..(i + 1) * l, ..]).fill(0.0);
            }
        }
    }
    Ok(MaskedBatch { batch: out, mask: mask.clone() })
}

/// Evaluation protocol descriptor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Protocol {
    Complete,
    Fixed(Vec<usize>),
    Random(f64),
}

/// Short names accepted for the first three modalities.
pub const MODALITY_ALIASES: [(char, usize); 3] = [('l', 0), ('a', 1), ('v', 2)];

fn parse_modality(tok: &str) -> Result<usize> {
    let t = tok.trim();
    if let Ok(i) = t.parse::<usize>() {
        return Ok(i);
    }
    let mut chars = t.chars();
    if let (Some(c), None) = (chars.next(), chars.next()) {
        if let Some(&(_, i)) = MODALITY_ALIASES.iter().find(|(a, _)| *a == c.to_ascii_lowercase()) {
            return Ok(i);
        }
    }
    Err(Error::Protocol(format!("unknown modality {t:?} (use an index or one of l, a, v)")))
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "complete" {
            return Ok(Protocol::Complete);
        }
        if let Some(rest) = s.strip_prefix("fixed:") {
            let mut set = rest.split(',').filter(|t| !t.trim().is_empty()).map(parse_modality).collect::<Result<Vec<_>>>()?;
            set.sort_unstable();
            set.dedup();
            if set.is_empty() {
                return Err(Error::Protocol("fixed protocol needs at least one modality".into()));
            }
            return Ok(Protocol::Fixed(set));
        }
        if let Some(rest) = s.strip_prefix("random:") {
            let mr: f64 = rest.trim().parse().map_err(|_| Error::Protocol(format!("bad missing rate {rest:?}")))?;
            if !(0.0..=1.0).contains(&mr) {
                return Err(Error::Protocol(format!("missing rate {mr} outside [0, 1]")));
            }
            return Ok(Protocol::Random(mr));
        }
        Err(Error::Protocol(format!("unknown protocol {s:?} (expected complete, fixed:<set> or random:<mr>)")))
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Complete => write!(f, "complete"),
            Protocol::Fixed(set) => {
                let parts: Vec<String> = set.iter().map(usize::to_string).collect();
                write!(f, "fixed:{}", parts.join(","))
            }
            Protocol::Random(mr) => write!(f, "random:{mr}"),
        }
    }
}

impl From<Protocol> for String {
    fn from(p: Protocol) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for Protocol {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl Protocol {
    pub fn validate(&self, num_modalities: usize) -> Result<()> {
        if let Protocol::Fixed(set) = self {
            if let Some(&m) = set.iter().find(|&&m| m >= num_modalities) {
                return Err(Error::Protocol(format!("modality {m} out of range for U = {num_modalities}")));
            }
        }
        Ok(())
    }

    /// Mask for `num_samples` samples; random targets beyond the feasible
    /// bound are clamped to it.
    pub fn mask(&self, num_samples: usize, num_modalities: usize, seed: u64) -> Result<PresenceMask> {
        self.validate(num_modalities)?;
        match self {
            Protocol::Complete => Ok(PresenceMask::all_present(num_samples, num_modalities)),
            Protocol::Fixed(set) => fixed_mask(num_samples, set, num_modalities),
            Protocol::Random(mr) => {
                let mut r = rng::stream(seed, "eval-mask", 0);
                random_mask_clamped(num_samples, num_modalities, *mr, &mut r)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batch::Labels;
    use crate::tape::Matrix;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn batch(n: usize, l: usize, dims: &[usize]) -> MultimodalBatch {
        let modalities: Vec<Matrix> = dims
            .iter()
            .enumerate()
            .map(|(m, &c)| Array2::from_shape_fn((n * l, c), |(i, j)| 1.0 + (i * 7 + j * 3 + m) as f64))
            .collect();
        MultimodalBatch { modalities, labels: Labels::Regression(vec![0.0; n]), num_samples: n, seq_len: l }
    }

    #[test]
    fn fixed_mask_rates() {
        assert_eq!(compute_mr(&fixed_mask(5, &[0, 1, 2], 3).unwrap()), 0.0);
        assert_eq!(compute_mr(&fixed_mask(5, &[0], 3).unwrap()), 1.0 - 1.0 / 3.0);
        assert_eq!(compute_mr(&fixed_mask(5, &[0, 2], 3).unwrap()), 1.0 - 2.0 / 3.0);
        assert!(matches!(fixed_mask(5, &[], 3), Err(Error::Protocol(_))));
        assert!(matches!(fixed_mask(5, &[3], 3), Err(Error::Protocol(_))));
        let m = fixed_mask(4, &[2], 3).unwrap();
        assert!(m.rows().all(|r| r == [false, false, true]));
    }

    #[test]
    fn compute_mr_examples() {
        let m = PresenceMask::from_rows(vec![
            vec![true, true, true],
            vec![true, false, true],
            vec![false, true, false],
            vec![false, true, true],
        ])
        .unwrap();
        assert_eq!(compute_mr(&m), 1.0 - 8.0 / 12.0);
        let single = PresenceMask::from_rows(vec![vec![true, false, false], vec![false, false, true]]).unwrap();
        assert_eq!(compute_mr(&single), 1.0 - 2.0 / 6.0);
        assert!(PresenceMask::from_rows(vec![vec![false, false]]).is_err());
    }

    #[test]
    fn random_mask_zero_is_complete() {
        let m = random_mask(50, 3, 0.0, 1).unwrap();
        assert!(m.is_complete());
    }

    #[test]
    fn random_mask_hits_feasible_targets() {
        for k in 1..=6 {
            let target = k as f64 / 10.0;
            let m = random_mask(1000, 3, target, 17).unwrap();
            assert!((compute_mr(&m) - target).abs() <= 1.0 / 3000.0 + 1e-12, "{target}");
            assert!(m.rows().all(|r| r.iter().any(|&b| b)));
        }
    }

    #[test]
    fn random_mask_rejects_infeasible_target() {
        let err = random_mask(1000, 3, 0.7, 17).unwrap_err();
        assert!(err.to_string().contains("0.666667"), "{err}");
    }

    #[test]
    fn clamped_mask_stops_at_bound() {
        let mut r = rng::stream(1, "mask", 0);
        let m = random_mask_clamped(1000, 3, 0.7, &mut r).unwrap();
        assert!((compute_mr(&m) - 2.0 / 3.0).abs() < 1e-12);
        assert!(m.rows().all(|row| row.iter().filter(|&&b| b).count() == 1));
    }

    #[test]
    fn random_mask_deterministic() {
        assert_eq!(random_mask(200, 4, 0.35, 9).unwrap(), random_mask(200, 4, 0.35, 9).unwrap());
        assert_ne!(random_mask(200, 4, 0.35, 9).unwrap(), random_mask(200, 4, 0.35, 10).unwrap());
    }

    proptest! {
        #[test]
        fn random_mask_invariants(n in 1usize..300, u in 2usize..6, frac in 0.0f64..1.0, seed in any::<u64>()) {
            let target = frac * max_feasible_mr(u);
            let m = random_mask(n, u, target, seed).unwrap();
            prop_assert!(m.rows().all(|r| r.iter().any(|&b| b)));
            prop_assert!((compute_mr(&m) - target).abs() <= 0.5 / (n * u) as f64 + 1e-12);
        }

        #[test]
        fn fixed_mask_rate_formula(n in 1usize..50, u in 1usize..7, bits in 1u32..64) {
            let present: Vec<usize> = (0..u).filter(|&m| bits & (1 << m) != 0).collect();
            prop_assume!(!present.is_empty());
            let m = fixed_mask(n, &present, u).unwrap();
            prop_assert!((compute_mr(&m) - (1.0 - present.len() as f64 / u as f64)).abs() < 1e-15);
        }
    }

    #[test]
    fn apply_mask_examples() {
        let b = batch(3, 2, &[2, 3]);
        let full = apply_mask(&b, &PresenceMask::all_present(3, 2)).unwrap();
        assert_eq!(full.batch, b);
        let no_m1 = fixed_mask(3, &[0], 2).unwrap();
        let masked = apply_mask(&b, &no_m1).unwrap();
        assert!(masked.batch.modalities[1].iter().all(|&v| v == 0.0));
        assert_eq!(masked.batch.modalities[0], b.modalities[0]);

        let mixed = PresenceMask::from_rows(vec![vec![true, false], vec![false, true], vec![true, true]]).unwrap();
        let mb = apply_mask(&b, &mixed).unwrap();
        for m in 0..2 {
            for (r, row) in mb.batch.modalities[m].rows().into_iter().enumerate() {
                let present = mixed.is_present(r / 2, m);
                assert!(row.iter().all(|&v| (v != 0.0) == present));
            }
        }
        assert!(apply_mask(&b, &PresenceMask::all_present(2, 2)).is_err());
    }

    #[test]
    fn protocol_parsing() {
        assert_eq!("complete".parse::<Protocol>().unwrap(), Protocol::Complete);
        assert_eq!("fixed:l,a".parse::<Protocol>().unwrap(), Protocol::Fixed(vec![0, 1]));
        assert_eq!("fixed:2,0".parse::<Protocol>().unwrap(), Protocol::Fixed(vec![0, 2]));
        assert_eq!("random:0.7".parse::<Protocol>().unwrap(), Protocol::Random(0.7));
        assert!("random:x".parse::<Protocol>().is_err());
        assert!("sometimes".parse::<Protocol>().is_err());
        assert!("fixed:".parse::<Protocol>().is_err());
        for s in ["complete", "fixed:0,2", "random:0.3"] {
            assert_eq!(s.parse::<Protocol>().unwrap().to_string(), s);
        }
        assert!(Protocol::Fixed(vec![3]).mask(2, 3, 0).is_err());
    }

    #[test]
    fn random_zero_protocol_equals_complete() {
        assert_eq!(Protocol::Random(0.0).mask(40, 3, 5).unwrap(), Protocol::Complete.mask(40, 3, 5).unwrap());
    }

    #[test]
    fn csv_round_trip() {
        let m = random_mask(7, 3, 0.4, 2).unwrap();
        let ids: Vec<usize> = (100..107).collect();
        let text = m.to_csv(&ids).unwrap();
        assert!(text.starts_with("sample_id,m0,m1,m2\n"));
        let (ids2, m2) = PresenceMask::from_csv(&text).unwrap();
        assert_eq!(ids2, ids);
        assert_eq!(m2, m);
    }
}
