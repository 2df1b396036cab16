//! Two-level selection of the component count.
//!
//! Level 1 finds the loss-curve knee with a scale-free relative-improvement
//! rule and widens it into a candidate range. Level 2 scores each candidate's
//! representative patterns: mean off-diagonal SSIM/GMSD/MDSI for distinctness
//! plus a fidelity PSNR against per-cluster raw mean patterns. The selection
//! rule gates on fidelity PSNR and minimizes mean off-diagonal SSIM; GMSD and
//! MDSI are reported but do not enter the default rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iqa::{pairwise_matrix, psnr, psnr_band, IqaParams, Metric, MetricValue};
use crate::maps::{assign_clusters, raw_mean_patterns_from_matrix, representative_patterns};
use crate::nmf::Factorization;
use crate::stack::DataMatrix;

const IMPROVEMENT_GUARD: f64 = 1e-12;

/// Smallest k whose relative improvement to the next point drops below
/// `tau`: `(L(k) - L(k+1)) / max(L(k), eps) < tau`. The loss list covers
/// consecutive k starting at `k_min`.
pub fn find_knee(k_min: usize, losses: &[f64], tau: f64) -> Result<usize> {
    if losses.len() < 3 {
        return Err(Error::TooFewPoints(losses.len()));
    }
    for (i, pair) in losses.windows(2).enumerate() {
        let improvement = (pair[0] - pair[1]) / pair[0].max(IMPROVEMENT_GUARD);
        if improvement < tau {
            return Ok(k_min + i);
        }
    }
    Err(Error::KneeNotFound)
}

/// `[max(knee - half_width, k_min_floor, 2), min(knee + half_width, k_max_ceil)]`.
pub fn range_of_interest(
    knee: usize,
    half_width: usize,
    k_min_floor: usize,
    k_max_ceil: usize,
) -> (usize, usize) {
    let lo = knee.saturating_sub(half_width).max(k_min_floor).max(2);
    let hi = (knee + half_width).min(k_max_ceil);
    (lo, hi)
}

/// Level-2 scores for one candidate k. Distinctness means are `None` when
/// the candidate has no off-diagonal pairs (k = 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateScore {
    pub k: usize,
    pub ssim_mean: Option<f64>,
    pub gmsd_mean: Option<f64>,
    pub mdsi_mean: Option<f64>,
    /// Mean PSNR between each cluster's representative and its raw mean
    /// pattern; empty clusters are skipped.
    pub psnr_mean: MetricValue,
    /// Worst per-cluster fidelity PSNR; the gate in [`choose_k`] uses this
    /// because a single contaminated cluster disappears into the mean.
    pub psnr_min: MetricValue,
}

/// Extracts the candidate's representatives and scores distinctness and
/// fidelity. `px * py` must equal the matrix row count.
pub fn score_candidate(
    v: &DataMatrix,
    fac: &Factorization,
    px: usize,
    py: usize,
    params: &IqaParams,
) -> Result<CandidateScore> {
    let representatives = representative_patterns(&fac.w, &fac.h, px, py)?;
    let (ssim_mean, gmsd_mean, mdsi_mean) = if representatives.len() >= 2 {
        (
            pairwise_matrix(&representatives, Metric::Ssim, params)?.off_diagonal_mean(),
            pairwise_matrix(&representatives, Metric::Gmsd, params)?.off_diagonal_mean(),
            pairwise_matrix(&representatives, Metric::Mdsi, params)?.off_diagonal_mean(),
        )
    } else {
        (None, None, None)
    };

    let labels = assign_clusters(&fac.h)?;
    let means = raw_mean_patterns_from_matrix(v, &labels, px, py, fac.k)?;
    let mut total = 0.0;
    let mut worst = f64::INFINITY;
    let mut counted = 0usize;
    for c in 0..fac.k {
        if means.counts[c] == 0 {
            continue;
        }
        let db = psnr(&representatives[c], &means.means[c], params)?;
        total += db;
        worst = worst.min(db);
        counted += 1;
    }
    let (psnr_mean, psnr_min) = if counted > 0 {
        (total / counted as f64, worst)
    } else {
        (f64::NEG_INFINITY, f64::NEG_INFINITY)
    };

    Ok(CandidateScore {
        k: fac.k,
        ssim_mean,
        gmsd_mean,
        mdsi_mean,
        psnr_mean: MetricValue(psnr_mean),
        psnr_min: MetricValue(psnr_min),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chosen {
    pub k: usize,
    pub floor_relaxed: bool,
}

/// Among candidates whose worst per-cluster fidelity PSNR meets the floor,
/// picks the k with the lowest mean off-diagonal SSIM (ties toward smaller
/// k, missing distinctness ranks last). If none pass, falls back to the
/// candidate with the best worst-cluster PSNR and marks the choice
/// floor-relaxed.
pub fn choose_k(candidates: &[CandidateScore], psnr_floor: f64) -> Result<Chosen> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if candidates.len() == 1 {
        return Ok(Chosen {
            k: candidates[0].k,
            floor_relaxed: false,
        });
    }
    let passing: Vec<&CandidateScore> = candidates
        .iter()
        .filter(|c| c.psnr_min.0 >= psnr_floor)
        .collect();
    if passing.is_empty() {
        let best = candidates
            .iter()
            .max_by(|a, b| {
                a.psnr_min
                    .0
                    .partial_cmp(&b.psnr_min.0)
                    .expect("PSNR values are never NaN")
                    .then(b.k.cmp(&a.k))
            })
            .expect("candidates is non-empty");
        return Ok(Chosen {
            k: best.k,
            floor_relaxed: true,
        });
    }
    let mut best = passing[0];
    for c in &passing[1..] {
        let rank = |s: &CandidateScore| s.ssim_mean.unwrap_or(f64::INFINITY);
        if rank(c) < rank(best) {
            best = c;
        }
    }
    Ok(Chosen {
        k: best.k,
        floor_relaxed: false,
    })
}

/// The full level-1 + level-2 outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionReport {
    pub knee_k: usize,
    pub range_lo: usize,
    pub range_hi: usize,
    pub per_candidate: Vec<CandidateScore>,
    pub chosen_k: usize,
    /// Human-readable statement of the exact rule and parameters applied.
    pub rule: String,
    pub flags: Vec<String>,
}

impl DecisionReport {
    pub fn rule_text(tau: f64, half_width: usize, psnr_floor: f64) -> String {
        format!(
            "level 1: knee = smallest k with (L(k)-L(k+1))/max(L(k),eps) < tau={tau}; \
             range = [max(knee-{half_width}, k_min, 2), min(knee+{half_width}, k_max)]. \
             level 2: among candidates whose worst per-cluster fidelity PSNR \
             (representative vs raw mean pattern) is >= {psnr_floor} dB, choose the k \
             minimizing mean off-diagonal SSIM, ties toward smaller k; if no candidate \
             passes the floor, take the best worst-cluster-PSNR candidate and flag \
             floor-relaxed. GMSD and MDSI are reported, not part of the rule."
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        let candidates: Vec<serde_json::Value> = self
            .per_candidate
            .iter()
            .map(|c| {
                serde_json::json!({
                    "k": c.k,
                    "ssim_mean": c.ssim_mean,
                    "gmsd_mean": c.gmsd_mean,
                    "mdsi_mean": c.mdsi_mean,
                    "psnr_mean": c.psnr_mean.to_json(),
                    "psnr_min": c.psnr_min.to_json(),
                    "psnr_band": psnr_band(c.psnr_mean.0),
                })
            })
            .collect();
        serde_json::json!({
            "knee_k": self.knee_k,
            "range": [self.range_lo, self.range_hi],
            "candidates": candidates,
            "chosen_k": self.chosen_k,
            "rule": self.rule,
            "flags": self.flags,
        })
    }

    pub fn to_json_string(&self) -> String {
        format!("{:#}\n", self.to_json())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmf::{nmf_factorize, NmfConfig};
    use crate::stack::reshape_4d_to_2d;
    use crate::synthetic::{generate_synthetic, SyntheticSpec};

    #[test]
    fn knee_oracle() {
        // Improvements: 0.5, 0.5, 0.04, ~0.042 -> first below tau at k=3.
        let losses = [10.0, 5.0, 2.5, 2.4, 2.3];
        assert_eq!(find_knee(1, &losses, 0.05).unwrap(), 3);
    }

    #[test]
    fn steep_curve_has_no_knee() {
        let mut losses = vec![100.0];
        for _ in 0..6 {
            losses.push(losses.last().unwrap() * 0.7);
        }
        assert!(matches!(
            find_knee(1, &losses, 0.05).unwrap_err(),
            Error::KneeNotFound
        ));
    }

    #[test]
    fn flat_curve_knees_at_k_min() {
        let losses = [3.0, 3.0, 3.0, 3.0];
        assert_eq!(find_knee(2, &losses, 0.05).unwrap(), 2);
    }

    #[test]
    fn knee_needs_three_points() {
        assert!(matches!(
            find_knee(1, &[1.0, 0.5], 0.05).unwrap_err(),
            Error::TooFewPoints(2)
        ));
    }

    #[test]
    fn knee_is_scale_invariant() {
        let losses = [10.0, 5.0, 2.5, 2.4, 2.3, 2.25];
        let base = find_knee(1, &losses, 0.05).unwrap();
        for scale in [1e-6, 0.5, 3.0, 1e8] {
            let scaled: Vec<f64> = losses.iter().map(|l| l * scale).collect();
            assert_eq!(find_knee(1, &scaled, 0.05).unwrap(), base, "scale {scale}");
        }
    }

    #[test]
    fn range_examples() {
        assert_eq!(range_of_interest(10, 4, 2, 16), (6, 14));
        assert_eq!(range_of_interest(3, 4, 2, 16), (2, 7));
        assert_eq!(range_of_interest(10, 0, 2, 16), (10, 10));
        assert_eq!(range_of_interest(10, 4, 2, 12), (6, 12));
    }

    fn candidate(k: usize, ssim: f64, psnr: f64) -> CandidateScore {
        CandidateScore {
            k,
            ssim_mean: Some(ssim),
            gmsd_mean: Some(0.1),
            mdsi_mean: Some(0.2),
            psnr_mean: MetricValue(psnr),
            psnr_min: MetricValue(psnr),
        }
    }

    #[test]
    fn choose_k_oracle() {
        let candidates = [
            candidate(6, 0.80, 42.0),
            candidate(8, 0.71, 41.0),
            candidate(10, 0.73, 43.0),
        ];
        let chosen = choose_k(&candidates, 40.0).unwrap();
        assert_eq!(chosen.k, 8);
        assert!(!chosen.floor_relaxed);
    }

    #[test]
    fn choose_k_single_candidate_and_fallback() {
        let single = [candidate(5, 0.9, 10.0)];
        assert_eq!(choose_k(&single, 40.0).unwrap().k, 5);

        let low = [
            candidate(4, 0.5, 30.0),
            candidate(6, 0.4, 35.0),
            candidate(8, 0.3, 33.0),
        ];
        let chosen = choose_k(&low, 40.0).unwrap();
        assert_eq!(chosen.k, 6);
        assert!(chosen.floor_relaxed);

        assert!(matches!(
            choose_k(&[], 40.0).unwrap_err(),
            Error::EmptyCandidates
        ));
    }

    #[test]
    fn choose_k_ties_break_small() {
        let candidates = [candidate(6, 0.7, 45.0), candidate(8, 0.7, 45.0)];
        assert_eq!(choose_k(&candidates, 40.0).unwrap().k, 6);
    }

    fn synthetic_fixture() -> (DataMatrix, usize, usize) {
        let spec = SyntheticSpec {
            m: 12,
            n: 12,
            px: 16,
            py: 16,
            k_true: 8,
            noise_sigma: 0.0,
            overlaps: vec![],
            seed: 31,
        };
        let (stack, _) = generate_synthetic(&spec).unwrap();
        (reshape_4d_to_2d(&stack), 16, 16)
    }

    #[test]
    fn k1_candidate_has_empty_distinctness() {
        let (v, px, py) = synthetic_fixture();
        let fac = nmf_factorize(&v, &NmfConfig { k: 1, max_iter: 60, ..NmfConfig::default() }).unwrap();
        let score = score_candidate(&v, &fac, px, py, &IqaParams::default()).unwrap();
        assert!(score.ssim_mean.is_none());
        assert!(score.gmsd_mean.is_none());
        assert!(score.mdsi_mean.is_none());
        assert!(score.psnr_mean.0.is_finite() || score.psnr_mean.0 == f64::INFINITY);
    }

    #[test]
    fn splitting_true_clusters_raises_mean_ssim() {
        let (v, px, py) = synthetic_fixture();
        let config = NmfConfig {
            max_iter: 400,
            tol: 1e-7,
            seed: 9,
            ..NmfConfig::default()
        };
        let at_8 = nmf_factorize(&v, &config.with_k(8)).unwrap();
        let at_12 = nmf_factorize(&v, &config.with_k(12)).unwrap();
        let params = IqaParams::default();
        let score_8 = score_candidate(&v, &at_8, px, py, &params).unwrap();
        let score_12 = score_candidate(&v, &at_12, px, py, &params).unwrap();
        assert!(
            score_8.ssim_mean.unwrap() < score_12.ssim_mean.unwrap(),
            "k=8 ssim {} should be below k=12 ssim {}",
            score_8.ssim_mean.unwrap(),
            score_12.ssim_mean.unwrap()
        );
    }

    #[test]
    fn duplicate_representatives_raise_mean_ssim() {
        use crate::iqa::{pairwise_matrix, Metric};
        let (_, truth) = generate_synthetic(&SyntheticSpec {
            m: 3,
            n: 3,
            px: 16,
            py: 16,
            k_true: 4,
            noise_sigma: 0.0,
            overlaps: vec![],
            seed: 41,
        })
        .unwrap();
        let mut reps: Vec<_> = (0..4).map(|c| truth.basis_image(c)).collect();
        let base = pairwise_matrix(&reps, Metric::Ssim, &IqaParams::default())
            .unwrap()
            .off_diagonal_mean()
            .unwrap();
        reps.push(reps[0].clone());
        let with_dup = pairwise_matrix(&reps, Metric::Ssim, &IqaParams::default())
            .unwrap()
            .off_diagonal_mean()
            .unwrap();
        assert!(with_dup > base, "duplicate should raise mean: {with_dup} vs {base}");
    }

    #[test]
    fn scores_are_invariant_under_cluster_permutation() {
        let (v, px, py) = synthetic_fixture();
        let fac = nmf_factorize(
            &v,
            &NmfConfig { k: 4, max_iter: 150, seed: 3, ..NmfConfig::default() },
        )
        .unwrap();
        let params = IqaParams::default();
        let base = score_candidate(&v, &fac, px, py, &params).unwrap();

        // Rotate component order: W columns and H rows together.
        let perm = [2usize, 0, 3, 1];
        let mut permuted = fac.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted
                .w
                .column_mut(dst)
                .assign(&fac.w.column(src));
            permuted.h.row_mut(dst).assign(&fac.h.row(src));
        }
        let after = score_candidate(&v, &permuted, px, py, &params).unwrap();
        assert!((base.ssim_mean.unwrap() - after.ssim_mean.unwrap()).abs() < 1e-9);
        assert!((base.psnr_mean.0 - after.psnr_mean.0).abs() < 1e-9);
    }

    #[test]
    fn report_serializes_per_schema() {
        let report = DecisionReport {
            knee_k: 10,
            range_lo: 6,
            range_hi: 14,
            per_candidate: vec![candidate(8, 0.71, f64::INFINITY)],
            chosen_k: 8,
            rule: DecisionReport::rule_text(0.05, 4, 40.0),
            flags: vec![],
        };
        let json = report.to_json();
        assert_eq!(json["range"][0], 6);
        assert_eq!(json["range"][1], 14);
        assert_eq!(json["candidates"][0]["psnr_mean"], "inf");
        assert_eq!(json["candidates"][0]["psnr_band"], "excellent");
        assert_eq!(json["chosen_k"], 8);
    }
}
