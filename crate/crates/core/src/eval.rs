//! Verification (TAR at fixed FAR) and identification (CMC) metrics.

use crate::error::{validation, Error, Result};
use crate::gallery::Gallery;
use crate::template::{dot_f64, FixedTemplate};

/// TAR at one requested FAR level.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OperatingPoint {
    pub far: f64,
    pub tar: f64,
    /// Scores `>= threshold` are accepted.
    pub threshold: f64,
    /// Imposter acceptance rate actually achieved at `threshold`.
    pub measured_far: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CmcPoint {
    pub rank: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub tar_at_far: Vec<OperatingPoint>,
    pub cmc: Vec<CmcPoint>,
    pub genuine_count: usize,
    pub imposter_count: usize,
    pub probe_count: usize,
}

impl EvalReport {
    /// Identification rate at `rank` (1-based), if computed.
    pub fn cmc_at(&self, rank: usize) -> Option<f64> {
        self.cmc.iter().find(|p| p.rank == rank).map(|p| p.accuracy)
    }

    pub fn tar_at(&self, far: f64) -> Option<f64> {
        self.tar_at_far
            .iter()
            .find(|p| (p.far - far).abs() <= 1e-12)
            .map(|p| p.tar)
    }
}

/// Most imposter scores allowed at level `far` out of `n`.
fn allowed_false_accepts(far: f64, n: usize) -> usize {
    (far * n as f64 + 1e-9).floor() as usize
}

/// For each FAR level `f`, picks the smallest imposter score `t` whose
/// empirical acceptance `|{imp >= t}| / |imp|` is at most `f`, and reports
/// `TAR = |{gen >= t}| / |gen|`. When no imposter score qualifies (duplicated
/// top scores) the threshold moves just above the largest imposter score.
pub fn eval_verification(genuine: &[f32], imposter: &[f32], far_levels: &[f64]) -> Result<EvalReport> {
    if genuine.is_empty() || imposter.is_empty() {
        return Err(validation("verification needs at least one genuine and one imposter score"));
    }
    if genuine.iter().chain(imposter).any(|s| !s.is_finite()) {
        return Err(validation("scores must be finite"));
    }
    let n_imp = imposter.len();
    let mut imp: Vec<f64> = imposter.iter().map(|&s| s as f64).collect();
    imp.sort_by(|a, b| b.total_cmp(a));

    let mut points = Vec::with_capacity(far_levels.len());
    for &far in far_levels {
        if !(far > 0.0 && far <= 1.0) {
            return Err(validation(format!("FAR level {far} must lie in (0, 1]")));
        }
        let allowed = allowed_false_accepts(far, n_imp);
        if allowed == 0 {
            return Err(Error::UnsupportedFarLevel {
                level: far,
                needed: (1.0 / far).ceil() as usize,
                available: n_imp,
            });
        }
        // imp is descending; count(imp >= imp[i]) is the end of its tie run.
        let mut threshold = None;
        let mut i = 0;
        while i < n_imp {
            let mut end = i + 1;
            while end < n_imp && imp[end] == imp[i] {
                end += 1;
            }
            if end <= allowed {
                threshold = Some(imp[i]);
            } else {
                break;
            }
            i = end;
        }
        let threshold = threshold.unwrap_or_else(|| next_up(imp[0]));
        let accepted_imp = imp.iter().filter(|&&s| s >= threshold).count();
        let accepted_gen = genuine.iter().filter(|&&s| s as f64 >= threshold).count();
        points.push(OperatingPoint {
            far,
            tar: accepted_gen as f64 / genuine.len() as f64,
            threshold,
            measured_far: accepted_imp as f64 / n_imp as f64,
        });
    }
    Ok(EvalReport {
        tar_at_far: points,
        cmc: Vec::new(),
        genuine_count: genuine.len(),
        imposter_count: n_imp,
        probe_count: 0,
    })
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

/// 1-based rank of gallery row `target` among all rows for `query`, using
/// the search ordering (score descending, lower index first on ties).
pub fn rank_of(gallery: &Gallery, query: &FixedTemplate, target: usize) -> Result<usize> {
    let mut scores = Vec::with_capacity(gallery.len());
    gallery.score_all_into(query, &mut scores)?;
    let ts = scores[target];
    let better = scores
        .iter()
        .enumerate()
        .filter(|&(r, &s)| s > ts || (s == ts && r < target))
        .count();
    Ok(better + 1)
}

/// CMC over ranks `1..=N` for probes with known identities.
pub fn eval_search(probes: &[(String, FixedTemplate)], gallery: &Gallery) -> Result<EvalReport> {
    if probes.is_empty() {
        return Err(validation("identification needs at least one probe"));
    }
    let n = gallery.len();
    let mut hits = vec![0usize; n + 1];
    for (id, probe) in probes {
        let target = gallery
            .position(id)
            .ok_or_else(|| validation(format!("probe identity {id:?} is not enrolled")))?;
        hits[rank_of(gallery, probe, target)?] += 1;
    }
    let mut cmc = Vec::with_capacity(n);
    let mut cum = 0usize;
    for (rank, h) in hits.iter().enumerate().skip(1) {
        cum += h;
        cmc.push(CmcPoint {
            rank,
            accuracy: cum as f64 / probes.len() as f64,
        });
    }
    Ok(EvalReport {
        tar_at_far: Vec::new(),
        cmc,
        genuine_count: 0,
        imposter_count: 0,
        probe_count: probes.len(),
    })
}

/// Genuine and imposter scores of each probe against every gallery row:
/// the row with the probe's identity is genuine, all others are imposters.
pub fn pair_scores(probes: &[(String, FixedTemplate)], gallery: &Gallery) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut genuine = Vec::with_capacity(probes.len());
    let mut imposter = Vec::with_capacity(probes.len() * gallery.len().saturating_sub(1));
    for (id, probe) in probes {
        let target = gallery
            .position(id)
            .ok_or_else(|| validation(format!("probe identity {id:?} is not enrolled")))?;
        for r in 0..gallery.len() {
            let s = dot_f64(gallery.row(r), probe.values()) as f32;
            if r == target {
                genuine.push(s);
            } else {
                imposter.push(s);
            }
        }
    }
    Ok((genuine, imposter))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_enumerated_operating_point() {
        let r = eval_verification(&[0.9, 0.8, 0.2], &[0.7, 0.3, 0.1], &[1.0 / 3.0]).unwrap();
        let p = &r.tar_at_far[0];
        assert!((p.threshold - 0.7f32 as f64).abs() < 1e-12);
        assert_eq!(p.tar, 2.0 / 3.0);
        assert_eq!(p.measured_far, 1.0 / 3.0);
    }

    #[test]
    fn unsupported_level() {
        let err = eval_verification(&[0.9], &[0.1, 0.2], &[0.4]).unwrap_err();
        assert!(matches!(err, Error::UnsupportedFarLevel { available: 2, .. }));
        assert!(eval_verification(&[0.9], &[0.1, 0.2], &[0.5]).is_ok());
        assert!(eval_verification(&[], &[0.1], &[1.0]).is_err());
        assert!(eval_verification(&[0.5], &[0.1], &[0.0]).is_err());
    }

    #[test]
    fn duplicated_top_imposters_move_threshold_up() {
        let r = eval_verification(&[0.7, 0.9], &[0.7, 0.7, 0.1], &[1.0 / 3.0]).unwrap();
        let p = &r.tar_at_far[0];
        assert!(p.threshold > 0.7f32 as f64);
        assert_eq!(p.measured_far, 0.0);
        assert_eq!(p.tar, 0.5);
    }

    #[test]
    fn next_up_steps_one_ulp() {
        assert!(next_up(0.5) > 0.5);
        assert_eq!(next_up(0.5).to_bits(), 0.5f64.to_bits() + 1);
        assert!(next_up(-0.5) > -0.5);
        assert!(next_up(0.0) > 0.0);
    }
}
