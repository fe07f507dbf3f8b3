//! Audit report assembly: candidate records, shared-range histograms,
//! threshold, copy rate, and JSON/CSV export.

use serde::{Deserialize, Serialize};

use super::AuditError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub train_id: String,
    pub synth_id: String,
    pub msd: f64,
    pub val_id: String,
    pub val_msd: f64,
    pub is_copy: bool,
    /// Ground truth when planted-copy truth exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truth: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub candidate_counts: Vec<usize>,
    pub baseline_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub tau: f64,
    pub quantile: f64,
    pub copy_rate: f64,
    pub records: Vec<CandidateRecord>,
    pub histograms: Histogram,
}

/// Build the report from candidate and baseline scans. Histograms share the
/// bin range [0, max observed MSD] across both distributions.
pub fn build_report(
    candidates: &[(String, String, f64)],
    baseline: &[(String, String, f64)],
    tau: f64,
    quantile: f64,
    bins: usize,
    truth: Option<&dyn Fn(&str) -> Option<bool>>,
    config: serde_json::Value,
    seeds: Vec<u64>,
) -> Result<AuditReport, AuditError> {
    if candidates.is_empty() || baseline.is_empty() {
        return Err(AuditError::EmptyPool(
            "build_report needs non-empty inputs".into(),
        ));
    }
    if bins < 2 {
        return Err(AuditError::BadArgument(format!(
            "bins must be >= 2, got {bins}"
        )));
    }
    if candidates.len() != baseline.len() {
        return Err(AuditError::BadArgument(format!(
            "candidate count {} vs baseline count {}",
            candidates.len(),
            baseline.len()
        )));
    }
    let mut records = Vec::with_capacity(candidates.len());
    for ((tid, sid, d), (btid, vid, vd)) in candidates.iter().zip(baseline) {
        if tid != btid {
            return Err(AuditError::BadArgument(format!(
                "candidate/baseline row order mismatch: {tid} vs {btid}"
            )));
        }
        records.push(CandidateRecord {
            train_id: tid.clone(),
            synth_id: sid.clone(),
            msd: *d,
            val_id: vid.clone(),
            val_msd: *vd,
            is_copy: *d < tau,
            truth: truth.and_then(|f| f(tid)),
        });
    }
    let max_msd = candidates
        .iter()
        .map(|r| r.2)
        .chain(baseline.iter().map(|r| r.2))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let edges: Vec<f64> = (0..=bins)
        .map(|i| max_msd * i as f64 / bins as f64)
        .collect();
    let bin_of = |d: f64| -> usize {
        let i = (d / max_msd * bins as f64).floor() as usize;
        i.min(bins - 1)
    };
    let mut candidate_counts = vec![0usize; bins];
    let mut baseline_counts = vec![0usize; bins];
    for r in candidates {
        candidate_counts[bin_of(r.2)] += 1;
    }
    for r in baseline {
        baseline_counts[bin_of(r.2)] += 1;
    }
    let n_copies = records.iter().filter(|r| r.is_copy).count();
    Ok(AuditReport {
        config,
        seeds,
        tau,
        quantile,
        copy_rate: n_copies as f64 / records.len() as f64,
        records,
        histograms: Histogram {
            edges,
            candidate_counts,
            baseline_counts,
        },
    })
}

impl AuditReport {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }

    /// CSV export of records, field order matching the JSON records.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("train_id,synth_id,msd,val_id,val_msd,is_copy,truth\n");
        for r in &self.records {
            let truth = match r.truth {
                Some(true) => "true",
                Some(false) => "false",
                None => "",
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.train_id, r.synth_id, r.msd, r.val_id, r.val_msd, r.is_copy, truth
            ));
        }
        out
    }
}
