use miaudit::attacks::AttackScoreRecord;
use miaudit::data::CanaryFamily;
use miaudit::eval::report::{population_report, sample_level_report, ReportMeta, SampleMode};
use miaudit::eval::{roc_curve, tpr_at_fpr, RocPoint};
use proptest::prelude::*;

fn records(pairs: &[(f64, bool)]) -> Vec<AttackScoreRecord> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, &(s, m))| AttackScoreRecord {
            victim_index: i,
            audit_index: i % 7,
            attack_score: s,
            is_member: m,
        })
        .collect()
}

/// Exhaustive sweep: one point per candidate threshold, counting every record.
fn brute_force(pairs: &[(f64, bool)]) -> Vec<RocPoint> {
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    std::iter::once(f64::INFINITY)
        .chain(thresholds)
        .map(|t| {
            let tp = pairs.iter().filter(|p| p.1 && p.0 >= t).count();
            let fp = pairs.iter().filter(|p| !p.1 && p.0 >= t).count();
            RocPoint {
                threshold: t,
                tpr: tp as f64 / pos as f64,
                fpr: fp as f64 / neg as f64,
            }
        })
        .collect()
}

fn brute_tpr(pairs: &[(f64, bool)], alpha: f64) -> f64 {
    brute_force(pairs)
        .iter()
        .filter(|p| p.fpr <= alpha)
        .map(|p| p.tpr)
        .fold(0.0, f64::max)
}

fn two_class(n: usize) -> impl Strategy<Value = Vec<(f64, bool)>> {
    // Small integer grid forces frequent ties.
    prop::collection::vec(
        ((-20i32..20).prop_map(|v| v as f64 / 4.0), any::<bool>()),
        2..=n,
    )
    .prop_filter("need both classes", |v| {
        v.iter().any(|p| p.1) && v.iter().any(|p| !p.1)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn curve_matches_exhaustive_sweep(pairs in two_class(200)) {
        let curve = roc_curve(&records(&pairs)).unwrap();
        prop_assert_eq!(curve.points, brute_force(&pairs));
    }

    #[test]
    fn operating_point_matches_sweep(pairs in two_class(200), alpha in 0.0f64..=1.0) {
        let curve = roc_curve(&records(&pairs)).unwrap();
        prop_assert_eq!(tpr_at_fpr(&curve, alpha).unwrap(), brute_tpr(&pairs, alpha));
    }

    #[test]
    fn tpr_is_monotone_in_alpha(pairs in two_class(100), a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let curve = roc_curve(&records(&pairs)).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(tpr_at_fpr(&curve, lo).unwrap() <= tpr_at_fpr(&curve, hi).unwrap());
        prop_assert_eq!(tpr_at_fpr(&curve, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn curve_is_monotone_and_bounded(pairs in two_class(100)) {
        let curve = roc_curve(&records(&pairs)).unwrap();
        prop_assert_eq!(curve.points[0], RocPoint { threshold: f64::INFINITY, tpr: 0.0, fpr: 0.0 });
        let last = curve.points.last().unwrap();
        prop_assert_eq!((last.tpr, last.fpr), (1.0, 1.0));
        for w in curve.points.windows(2) {
            prop_assert!(w[0].threshold > w[1].threshold);
            prop_assert!(w[0].tpr <= w[1].tpr && w[0].fpr <= w[1].fpr);
        }
    }
}

#[test]
fn pooled_lies_between_per_sample_extremes() {
    // Each sample sees the same number of members and non-members, so the
    // pooled ROC is a mixture of the per-sample ROCs at every threshold.
    let mut recs = Vec::new();
    for j in 0..5 {
        for v in 0..400 {
            let member = v % 2 == 0;
            let noise = ((v * 7919 + j * 104_729) % 1000) as f64 / 1000.0;
            let s = noise + if member { 0.1 * j as f64 } else { 0.0 };
            recs.push(AttackScoreRecord {
                victim_index: v,
                audit_index: j,
                attack_score: s,
                is_member: member,
            });
        }
    }
    let meta = ReportMeta {
        canary_family: CanaryFamily::Mislabeled,
        ..ReportMeta::default()
    };
    let targets = [0.01, 0.1];
    let pooled =
        sample_level_report(&recs, SampleMode::PooledCanaries, &targets, meta.clone()).unwrap();
    let per = sample_level_report(&recs, SampleMode::PerSample, &targets, meta.clone()).unwrap();
    for (k, &a) in targets.iter().enumerate() {
        let vals: Vec<f64> = per.per_sample.iter().map(|s| s.tpr[k]).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let p = pooled.at(a).unwrap().tpr;
        assert!(lo <= p && p <= hi, "alpha {a}: {lo} <= {p} <= {hi}");
        assert!(!per.at(a).unwrap().under_resolved);
    }
    let pop = population_report(&recs, &targets, meta).unwrap();
    assert_eq!(pop.at(0.1).unwrap().tpr, pooled.at(0.1).unwrap().tpr);
}
