//! Memorization assessment: per-training-sample nearest synthetic neighbor
//! (copy candidate), nearest-validation baseline, MSD histograms, quantile
//! threshold calibration, copy-rate, and the pixel-space NCC baseline.

mod report;

pub use report::{build_report, AuditReport, CandidateRecord, Histogram};

use rayon::prelude::*;
use thiserror::Error;

use crate::contrastive::EmbeddingTable;
use crate::volumes::Volume;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty pool: {0}")]
    EmptyPool(String),
    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),
    #[error("bad argument: {0}")]
    BadArgument(String),
}

/// Mean square distance: dimension-normalized squared Euclidean distance.
pub fn msd(a: &[f64], b: &[f64]) -> Result<f64, AuditError> {
    if a.len() != b.len() {
        return Err(AuditError::Dimension(format!(
            "embedding dims {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let d = a.len() as f64;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / d)
}

/// Exact nearest neighbor by MSD over the whole pool; ties broken by the
/// lexicographically lowest id.
pub fn nearest(query: &[f64], pool: &EmbeddingTable) -> Result<(String, f64), AuditError> {
    if pool.is_empty() {
        return Err(AuditError::EmptyPool("nearest over empty pool".into()));
    }
    let mut best: Option<(&str, f64)> = None;
    for (id, row) in pool.iter() {
        let d = msd(query, row)?;
        best = match best {
            None => Some((id, d)),
            Some((bid, bd)) => {
                if d < bd || (d == bd && id < bid) {
                    Some((id, d))
                } else {
                    Some((bid, bd))
                }
            }
        };
    }
    let (id, d) = best.unwrap();
    Ok((id.to_string(), d))
}

/// One nearest-synthetic record per training sample, in training order.
/// Parallel over query rows; results identical to the serial scan.
pub fn copy_candidates(
    train: &EmbeddingTable,
    synth: &EmbeddingTable,
) -> Result<Vec<(String, String, f64)>, AuditError> {
    if train.is_empty() || synth.is_empty() {
        return Err(AuditError::EmptyPool(
            "copy_candidates needs non-empty tables".into(),
        ));
    }
    (0..train.len())
        .into_par_iter()
        .map(|i| {
            let (id, d) = nearest(train.row(i), synth)?;
            Ok((train.ids()[i].clone(), id, d))
        })
        .collect()
}

/// Per-training-sample nearest validation embedding.
pub fn validation_baseline(
    train: &EmbeddingTable,
    val: &EmbeddingTable,
) -> Result<Vec<(String, String, f64)>, AuditError> {
    copy_candidates(train, val)
}

/// Empirical q-quantile (linear interpolation) of the baseline MSDs.
pub fn calibrate_threshold(baseline_msds: &[f64], q: f64) -> Result<f64, AuditError> {
    if !(0.0 < q && q < 1.0) {
        return Err(AuditError::BadArgument(format!(
            "quantile must be in (0,1), got {q}"
        )));
    }
    if baseline_msds.len() < 5 {
        return Err(AuditError::BadArgument(format!(
            "need >= 5 baseline values, got {}",
            baseline_msds.len()
        )));
    }
    let mut sorted = baseline_msds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}

/// Fraction of training samples whose candidate MSD is below tau.
pub fn copy_rate(candidate_msds: &[f64], tau: f64) -> Result<f64, AuditError> {
    if candidate_msds.is_empty() {
        return Err(AuditError::EmptyPool("copy_rate over empty records".into()));
    }
    let n = candidate_msds.iter().filter(|&&d| d < tau).count();
    Ok(n as f64 / candidate_msds.len() as f64)
}

/// Pearson correlation over voxels with population standard deviations.
pub fn ncc(v1: &Volume, v2: &Volume) -> Result<f64, AuditError> {
    if v1.dims != v2.dims {
        return Err(AuditError::Dimension(format!(
            "volume dims {:?} vs {:?}",
            v1.dims, v2.dims
        )));
    }
    let n = v1.numel() as f64;
    let mean = |v: &Volume| v.voxels().iter().sum::<f64>() / n;
    let (m1, m2) = (mean(v1), mean(v2));
    let mut cov = 0.0;
    let mut var1 = 0.0;
    let mut var2 = 0.0;
    for (&a, &b) in v1.voxels().iter().zip(v2.voxels()) {
        cov += (a - m1) * (b - m2);
        var1 += (a - m1) * (a - m1);
        var2 += (b - m2) * (b - m2);
    }
    if var1 == 0.0 || var2 == 0.0 {
        return Err(AuditError::UndefinedCorrelation(
            "constant volume has zero variance".into(),
        ));
    }
    Ok(cov / (var1.sqrt() * var2.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::{apply_orientation, generate_phantoms, Orientation, PhantomConfig};
    use proptest::prelude::*;
    use rand::seq::SliceRandom as _;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn table(rows: &[(&str, &[f64])]) -> EmbeddingTable {
        let mut t = EmbeddingTable::new("test", rows[0].1.len());
        for (id, row) in rows {
            t.push(*id, row).unwrap();
        }
        t
    }

    #[test]
    fn msd_hand_arithmetic() {
        assert_eq!(msd(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        let mut a = vec![0.0; 32];
        let b = vec![0.0; 32];
        a[3] = 1.0;
        a[17] = 1.0;
        assert_eq!(msd(&a, &b).unwrap(), 0.0625);
    }

    #[test]
    fn msd_dimension_mismatch() {
        assert!(msd(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn nearest_finds_self_and_known_argmin() {
        let t = table(&[("a", &[0.0, 0.0]), ("b", &[1.0, 0.0]), ("c", &[5.0, 5.0])]);
        let (id, d) = nearest(&[0.0, 0.0], &t).unwrap();
        assert_eq!((id.as_str(), d), ("a", 0.0));
        let (id, _) = nearest(&[1.1, 0.0], &t).unwrap();
        assert_eq!(id, "b");
    }

    #[test]
    fn nearest_tie_breaks_lexicographically() {
        let t = table(&[("z", &[1.0, 0.0]), ("b", &[-1.0, 0.0]), ("m", &[1.0, 0.0])]);
        let (id, _) = nearest(&[0.0, 0.0], &t).unwrap();
        assert_eq!(id, "b"); // all at msd 0.5; b is lowest
    }

    #[test]
    fn nearest_empty_pool_rejected() {
        let t = EmbeddingTable::new("e", 2);
        assert!(nearest(&[0.0, 0.0], &t).is_err());
    }

    #[test]
    fn candidates_against_self_are_zero() {
        let t = table(&[("a", &[1.0, 2.0]), ("b", &[3.0, 4.0])]);
        let recs = copy_candidates(&t, &t).unwrap();
        for (train_id, synth_id, d) in recs {
            assert_eq!(train_id, synth_id);
            assert_eq!(d, 0.0);
        }
    }

    #[test]
    fn single_synthetic_serves_all() {
        let train = table(&[("a", &[0.0, 0.0]), ("b", &[9.0, 9.0])]);
        let synth = table(&[("only", &[1.0, 1.0])]);
        let recs = copy_candidates(&train, &synth).unwrap();
        assert!(recs.iter().all(|(_, s, _)| s == "only"));
    }

    #[test]
    fn quantile_median_and_degenerate() {
        assert_eq!(
            calibrate_threshold(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.5).unwrap(),
            3.0
        );
        assert_eq!(
            calibrate_threshold(&[2.0, 2.0, 2.0, 2.0, 2.0], 0.25).unwrap(),
            2.0
        );
        assert!(calibrate_threshold(&[1.0, 2.0], 0.5).is_err());
        assert!(calibrate_threshold(&[1.0; 8], 0.0).is_err());
    }

    #[test]
    fn copy_rate_extremes() {
        let msds = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(copy_rate(&msds, 0.0).unwrap(), 0.0);
        assert_eq!(copy_rate(&msds, f64::INFINITY).unwrap(), 1.0);
        assert_eq!(copy_rate(&msds, 0.25).unwrap(), 0.5);
    }

    #[test]
    fn copy_rate_monotone_in_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let msds: Vec<f64> = (0..50).map(|_| rng.gen_range(0.0..2.0)).collect();
        let mut last = 0.0;
        for i in 0..=20 {
            let tau = i as f64 * 0.1;
            let r = copy_rate(&msds, tau).unwrap();
            assert!(r >= last);
            last = r;
        }
    }

    #[test]
    fn ncc_identity_and_negation() {
        let v = generate_phantoms(1, 1, [16, 16, 16], &PhantomConfig::default())
            .unwrap()
            .remove(0);
        assert!((ncc(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        let neg = Volume::new("neg", v.dims, v.voxels().iter().map(|x| -x).collect()).unwrap();
        assert!((ncc(&v, &neg).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_constant_volume_rejected() {
        let v = Volume::new("c", [8, 8, 8], vec![1.0; 512]).unwrap();
        let w = generate_phantoms(2, 1, [8, 8, 8], &PhantomConfig::default())
            .unwrap()
            .remove(0);
        assert!(matches!(
            ncc(&v, &w),
            Err(AuditError::UndefinedCorrelation(_))
        ));
    }

    #[test]
    fn ncc_misses_flipped_copy() {
        // a flipped phantom decorrelates in pixel space
        let v = generate_phantoms(3, 1, [16, 16, 16], &PhantomConfig::default())
            .unwrap()
            .remove(0);
        let flipped = apply_orientation(
            &v,
            &Orientation {
                perm: [0, 1, 2],
                flip: [false, false, true],
            },
        )
        .unwrap();
        assert!(ncc(&v, &flipped).unwrap().abs() < 0.9);
    }

    proptest! {
        #[test]
        fn msd_symmetric_nonnegative(
            a in proptest::collection::vec(-10.0f64..10.0, 8),
            b in proptest::collection::vec(-10.0f64..10.0, 8),
        ) {
            let d1 = msd(&a, &b).unwrap();
            let d2 = msd(&b, &a).unwrap();
            prop_assert!(d1 >= 0.0);
            prop_assert_eq!(d1, d2);
            prop_assert_eq!(msd(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn nearest_invariant_under_pool_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2usize..20);
            let dim = 4;
            let rows: Vec<(String, Vec<f64>)> = (0..n)
                .map(|i| {
                    (format!("id{i:03}"), (0..dim).map(|_| rng.gen_range(-1.0f64..1.0)).collect())
                })
                .collect();
            let query: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0f64..1.0)).collect();
            let mut t1 = EmbeddingTable::new("t", dim);
            for (id, r) in &rows {
                t1.push(id.clone(), r).unwrap();
            }
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut rng);
            let mut t2 = EmbeddingTable::new("t", dim);
            for (id, r) in &shuffled {
                t2.push(id.clone(), r).unwrap();
            }
            prop_assert_eq!(nearest(&query, &t1).unwrap(), nearest(&query, &t2).unwrap());
        }

        #[test]
        fn ncc_bounded(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| {
                Volume::new(
                    "v",
                    [8, 8, 8],
                    (0..512).map(|_| rng.gen_range(-1.0f64..1.0)).collect(),
                )
                .unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let r = ncc(&a, &b).unwrap();
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&r));
        }
    }
}
