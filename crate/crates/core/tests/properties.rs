use biasaudit::corpus::{assign_splits, Instance, Split, SplitPlan};
use biasaudit::disparity::{group_rates, per_axis_rates, AxisGroup, DisparityOptions, FnRule, FprBase};
use biasaudit::metrics::{
    binary_metrics, bootstrap_ci, exact_match_ratio, f1_scores, hamming_loss, BootstrapSettings, LabelPair, Metric,
};
use biasaudit::promptdetect::parse_response;
use biasaudit::{is_biased, Axis, LabelSet};
use proptest::prelude::*;

fn label_set() -> impl Strategy<Value = LabelSet> {
    (0u16..512).prop_map(|b| LabelSet::from_bits(b).unwrap())
}

fn pairs(max: usize) -> impl Strategy<Value = Vec<LabelPair>> {
    prop::collection::vec((label_set(), label_set()).prop_map(|(g, p)| LabelPair::new(g, p)), 1..max)
}

proptest! {
    #[test]
    fn metrics_are_permutation_invariant(mut ps in pairs(40), seed in any::<u64>()) {
        let before = (binary_metrics(&ps), exact_match_ratio(&ps).unwrap(), hamming_loss(&ps).unwrap(), f1_scores(&ps).unwrap());
        let n = ps.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ps.swap(i, (s >> 33) as usize % (i + 1));
        }
        let after = (binary_metrics(&ps), exact_match_ratio(&ps).unwrap(), hamming_loss(&ps).unwrap(), f1_scores(&ps).unwrap());
        prop_assert_eq!(before.0, after.0);
        prop_assert_eq!(before.1, after.1);
        prop_assert_eq!(before.2, after.2);
        prop_assert_eq!(before.3.per_axis, after.3.per_axis);
        prop_assert!((before.3.micro.unwrap_or(0.0) - after.3.micro.unwrap_or(0.0)).abs() < 1e-12);
    }

    #[test]
    fn exact_match_iff_no_hamming_loss(ps in pairs(30)) {
        let mr = exact_match_ratio(&ps).unwrap();
        let hl = hamming_loss(&ps).unwrap();
        prop_assert_eq!(mr == 1.0, hl == 0.0);
        prop_assert!(mr <= 1.0 - hl + 1e-12);
        prop_assert!((0.0..=1.0).contains(&hl));
    }

    #[test]
    fn binary_metrics_ignore_which_axes(ps in pairs(30), shift in 1u32..9) {
        // rotating the bit pattern keeps which sets are biased
        let rot = |l: LabelSet| {
            let b = l.bits() as u32;
            LabelSet::from_bits((((b << shift) | (b >> (9 - shift))) & 0x1FF) as u16).unwrap()
        };
        let moved: Vec<LabelPair> = ps.iter().map(|p| LabelPair::new(rot(p.gold), rot(p.pred))).collect();
        prop_assert_eq!(binary_metrics(&ps), binary_metrics(&moved));
    }

    #[test]
    fn bootstrap_point_ignores_seed_and_count(ps in pairs(30), seed in any::<u64>(), n in 1usize..60) {
        let base = bootstrap_ci(&ps, Metric::HammingLoss, &BootstrapSettings { n_resamples: 20, seed: 0, level: 0.9 }).unwrap();
        let other = bootstrap_ci(&ps, Metric::HammingLoss, &BootstrapSettings { n_resamples: n, seed, level: 0.9 }).unwrap();
        prop_assert_eq!(base.point, other.point);
        prop_assert!(other.ci_low.unwrap() <= other.point && other.point <= other.ci_high.unwrap());
    }

    #[test]
    fn group_rates_are_in_unit_interval(ps in pairs(40), a in 0usize..9, b in 0usize..9, disjoint in any::<bool>(), coverage in any::<bool>()) {
        let opts = DisparityOptions {
            fpr_base: if disjoint { FprBase::Disjoint } else { FprBase::UnbiasedOnly },
            fn_rule: if coverage { FnRule::Coverage } else { FnRule::Binary },
        };
        let (a, b) = (Axis::from_index(a).unwrap(), Axis::from_index(b).unwrap());
        let group = if a == b { AxisGroup::single(a) } else { AxisGroup::pair(a, b).unwrap() };
        let r = group_rates(&ps, group, &opts);
        for v in [r.fnr, r.fpr].into_iter().flatten() {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(r.fnr.is_some(), r.support_pos > 0);
        if a == b {
            prop_assert_eq!(r, per_axis_rates(&ps, &opts)[&a]);
        }
    }

    #[test]
    fn coverage_misses_include_binary_misses(ps in pairs(40), a in 0usize..9) {
        let axis = Axis::from_index(a).unwrap();
        let cov = group_rates(&ps, AxisGroup::single(axis), &DisparityOptions { fn_rule: FnRule::Coverage, ..Default::default() });
        let bin = group_rates(&ps, AxisGroup::single(axis), &DisparityOptions { fn_rule: FnRule::Binary, ..Default::default() });
        if let (Some(c), Some(b)) = (cov.fnr, bin.fnr) {
            prop_assert!(c >= b);
        }
    }

    #[test]
    fn rendered_codes_parse_back(l in label_set()) {
        let parsed = parse_response(&format!("Answer: {}", l.policy_codes()));
        prop_assert!(!parsed.invalid);
        prop_assert_eq!(parsed.labels, l);
    }

    #[test]
    fn splits_partition_and_reproduce(n in 1usize..300, seed in any::<u64>(), train in 0.05f64..0.95, dev in 0.0f64..0.5) {
        let items: Vec<Instance> = (0..n).map(|i| Instance::new(format!("i{i}"), "t", "d", LabelSet::EMPTY)).collect();
        let plan = SplitPlan { train_fraction: train, dev_fraction_of_train: dev, seed };
        let a = assign_splits(items.clone(), &plan).unwrap();
        let b = assign_splits(items, &plan).unwrap();
        prop_assert_eq!(&a, &b);
        let count = |s: Split| a.iter().filter(|i| i.split == s).count();
        prop_assert_eq!(count(Split::Train) + count(Split::Dev) + count(Split::Test), n);
        prop_assert!(count(Split::Train) + count(Split::Dev) <= (train * n as f64).ceil() as usize);
    }
}

#[test]
fn binary_reduction_matches_bit_or() {
    for l in LabelSet::all() {
        let any = Axis::ALL.iter().fold(false, |acc, a| acc | l.contains(*a));
        assert_eq!(is_biased(l), any);
    }
}
