//! Serializable attack records, probe CSV, and batch summary statistics.

use serde::{Deserialize, Serialize};

use crate::attack::{ProbeCurve, TraceEntry};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// One attack run, as written to disk. `db_distortion` is `null` when the
/// perturbation is exactly zero (its level is −∞ dB).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackRecord {
    pub schema_version: u32,
    pub source: String,
    pub target: String,
    pub mode: String,
    pub robust: String,
    pub decoder: String,
    pub success: bool,
    pub transcription: String,
    pub db_distortion: Option<f64>,
    pub iterations_run: usize,
    pub seed: u64,
    pub config_hash: String,
    pub manifest: String,
    pub adversarial_wav: String,
    pub trace: Vec<TraceEntry>,
}

/// Aggregate statistics over a batch of records, in the shape the paper's
/// style of reporting uses: success rate, mean distortion, a central 95%
/// interval, and how distortion scales with target length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_records: usize,
    pub n_success: usize,
    pub success_rate: f64,
    /// Successes with a zero perturbation (−∞ dB), excluded from stats.
    pub silent_successes: usize,
    pub mean_db: Option<f64>,
    pub db_p2_5: Option<f64>,
    pub db_p97_5: Option<f64>,
    /// Least-squares slope of distortion (dB) per extra target character.
    pub per_char_slope_db: Option<f64>,
}

/// Summarize a batch. Distortion statistics are over successful records
/// with a finite distortion.
pub fn summarize(records: &[AttackRecord]) -> EvalSummary {
    let n_records = records.len();
    let n_success = records.iter().filter(|r| r.success).count();
    let mut dbs: Vec<f64> = Vec::new();
    let mut silent = 0usize;
    let mut xy: Vec<(f64, f64)> = Vec::new();
    for r in records.iter().filter(|r| r.success) {
        match r.db_distortion {
            Some(db) => {
                dbs.push(db);
                xy.push((r.target.chars().count() as f64, db));
            }
            None => silent += 1,
        }
    }
    dbs.sort_by(|a, b| a.partial_cmp(b).expect("distortions are finite"));
    let mean_db = if dbs.is_empty() {
        None
    } else {
        Some(dbs.iter().sum::<f64>() / dbs.len() as f64)
    };
    EvalSummary {
        n_records,
        n_success,
        success_rate: if n_records == 0 {
            0.0
        } else {
            n_success as f64 / n_records as f64
        },
        silent_successes: silent,
        mean_db,
        db_p2_5: percentile(&dbs, 0.025),
        db_p97_5: percentile(&dbs, 0.975),
        per_char_slope_db: slope(&xy),
    }
}

/// Linear-interpolation percentile of an ascending-sorted slice.
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    if sorted.len() == 1 {
        return Some(sorted[0]);
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

/// Least-squares slope of y on x; None without two distinct x values.
fn slope(xy: &[(f64, f64)]) -> Option<f64> {
    if xy.len() < 2 {
        return None;
    }
    let n = xy.len() as f64;
    let mx = xy.iter().map(|(x, _)| x).sum::<f64>() / n;
    let my = xy.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xy.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// CSV for an interpolation probe: `alpha,loss_adv_dir,loss_fgsm_dir`.
pub fn probe_csv(curve: &ProbeCurve) -> String {
    let mut out = String::from("alpha,loss_adv_dir,loss_fgsm_dir\n");
    for ((a, adv), fgsm) in curve
        .alphas
        .iter()
        .zip(&curve.loss_adv)
        .zip(&curve.loss_fgsm)
    {
        out.push_str(&format!("{a},{adv},{fgsm}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(success: bool, db: Option<f64>, target: &str) -> AttackRecord {
        AttackRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            source: "s.wav".into(),
            target: target.into(),
            mode: "ctc".into(),
            robust: "none".into(),
            decoder: "greedy".into(),
            success,
            transcription: if success { target.into() } else { String::new() },
            db_distortion: db,
            iterations_run: 100,
            seed: 0,
            config_hash: "h".into(),
            manifest: "m".into(),
            adversarial_wav: "a.wav".into(),
            trace: Vec::new(),
        }
    }

    #[test]
    fn all_success_rate_is_one() {
        let records = vec![
            record(true, Some(-30.0), "ab"),
            record(true, Some(-20.0), "abcd"),
        ];
        let s = summarize(&records);
        assert_eq!(s.success_rate, 1.0);
        assert_eq!(s.mean_db, Some(-25.0));
    }

    #[test]
    fn silent_successes_are_counted_separately() {
        let records = vec![record(true, None, "ab"), record(false, Some(-5.0), "cd")];
        let s = summarize(&records);
        assert_eq!(s.silent_successes, 1);
        assert_eq!(s.n_success, 1);
        assert_eq!(s.mean_db, None);
    }

    #[test]
    fn percentiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&v, 1.0), Some(4.0));
        assert_eq!(percentile(&v, 0.5), Some(2.5));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn slope_tracks_distortion_per_character() {
        // dB = -40 + 0.5·len exactly.
        let records: Vec<AttackRecord> = [2usize, 4, 6, 8]
            .iter()
            .map(|&len| {
                record(
                    true,
                    Some(-40.0 + 0.5 * len as f64),
                    &"x".repeat(len),
                )
            })
            .collect();
        let s = summarize(&records);
        assert!((s.per_char_slope_db.unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn summary_is_deterministic() {
        let records = vec![
            record(true, Some(-31.0), "ab"),
            record(true, Some(-17.5), "abc"),
            record(false, Some(-3.0), "x"),
        ];
        let a = serde_json::to_string(&summarize(&records)).unwrap();
        let b = serde_json::to_string(&summarize(&records)).unwrap();
        assert_eq!(a, b);
    }
}
