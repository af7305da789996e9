use acs_core::data::Dataset;
use acs_core::engine::{self, Membership, ScreeningState};
use acs_core::policies::PolicyConfig;
use acs_core::result::AuditEvent;
use acs_core::sim::{self, SimConfig};
use proptest::prelude::*;

const POLICIES: [&str; 5] = ["random", "refit:knn[k=3][L=3]", "adv:knn[k=3]", "div:knn[k=3][lambda=0.5,L=4]", "aug:logistic[L=5]"];

fn dataset(setting: u8, n: usize, m: usize, seed: u64) -> Dataset {
    sim::generate(&SimConfig { setting, n, m, sigma: 0.5, seed }).unwrap()
}

fn instance() -> impl Strategy<Value = (Dataset, usize, f64, u64, PolicyConfig)> {
    (1u8..=5, 6usize..40, 2usize..20, 0.0f64..0.6, any::<u64>(), 0usize..POLICIES.len(), 0.1f64..0.9).prop_map(
        |(setting, n, m, alpha, seed, p, frac)| {
            let ds = dataset(setting, n, m, seed);
            let k = ((n as f64 * frac) as usize).clamp(1, n - 1);
            let policy: PolicyConfig = POLICIES[p].parse().unwrap();
            (ds, k, alpha, seed, policy.with_seed(seed))
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    /// The selection is the unscreened test units at the first step whose
    /// estimate is at most alpha, or empty on exhaustion.
    #[test]
    fn stopping_rule_and_selection((ds, k, alpha, seed, policy) in instance()) {
        let mut p = policy.build().unwrap();
        let res = engine::run(&ds, k, alpha, seed, &mut p, None).unwrap();
        let t = res.stopping_step.unwrap();
        prop_assert!(t >= k);
        prop_assert!(res.selected.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(res.selected.iter().all(|&j| j < ds.m()));
        prop_assert!(res.trajectory.windows(2).all(|w| w[0].step < w[1].step));
        prop_assert!(res.trajectory.iter().all(|pt| pt.step >= k && pt.step <= t));
        let (last, earlier) = res.trajectory.split_last().unwrap();
        prop_assert!(earlier.iter().all(|pt| pt.fdp_estimate > alpha));
        if res.exhausted {
            prop_assert!(res.selected.is_empty());
        } else {
            prop_assert!(last.fdp_estimate <= alpha);
            prop_assert_eq!(last.step, t);
            let screened_tests = res
                .audit
                .iter()
                .filter(|e| matches!(e.event, AuditEvent::Screened { membership: Membership::Test, .. }))
                .count();
            prop_assert_eq!(res.selected.len(), ds.m() - screened_tests);
        }
    }

    /// Each view agrees with the state's bookkeeping and never lists a
    /// unit twice.
    #[test]
    fn views_are_consistent((ds, k, alpha, seed, policy) in instance()) {
        let mut p = policy.build().unwrap();
        let mut state = ScreeningState::init(&ds, k, alpha, seed).unwrap();
        loop {
            let v = state.visible();
            let (null_labeled, nonnull_labeled, test) = state.counts();
            prop_assert_eq!(v.step, state.step());
            prop_assert_eq!(v.screened.len(), v.step);
            prop_assert!(v.screened.iter().enumerate().all(|(i, r)| r.position == i + 1));
            prop_assert_eq!(v.anonymous_pool.len(), null_labeled + test);
            prop_assert_eq!(v.revealed_nonnull_labeled.len(), nonnull_labeled);
            prop_assert_eq!((v.count_null_labeled, v.count_test), (null_labeled, test));
            prop_assert_eq!(v.fdp_estimate(), state.fdp_estimate());
            prop_assert_eq!(v.screened.len() + v.anonymous_pool.len() + v.revealed_nonnull_labeled.len(), ds.n() + ds.m());
            let mut handles: Vec<_> = v.screened.iter().map(|r| r.handle)
                .chain(v.anonymous_pool.iter().map(|e| e.handle))
                .chain(v.revealed_nonnull_labeled.iter().map(|r| r.handle))
                .collect();
            handles.sort_unstable();
            handles.dedup();
            prop_assert_eq!(handles.len(), ds.n() + ds.m());
            if !state.advance(&mut p, None).unwrap() {
                break;
            }
        }
    }

    #[test]
    fn runs_are_reproducible((ds, k, alpha, seed, policy) in instance()) {
        let a = engine::run(&ds, k, alpha, seed, &mut policy.build().unwrap(), None).unwrap();
        let b = engine::run(&ds, k, alpha, seed, &mut policy.build().unwrap(), None).unwrap();
        prop_assert_eq!(a, b);
    }

    /// Raising alpha can only stop screening earlier.
    #[test]
    fn larger_alpha_stops_no_later((ds, k, alpha, seed, _policy) in instance()) {
        let policy: PolicyConfig = "static:logistic".parse().unwrap();
        let lo = engine::run(&ds, k, alpha, seed, &mut policy.build().unwrap(), None).unwrap();
        let hi = engine::run(&ds, k, (alpha + 0.2).min(0.99), seed, &mut policy.build().unwrap(), None).unwrap();
        prop_assert!(hi.stopping_step <= lo.stopping_step);
        prop_assert!(lo.selected.iter().all(|j| hi.selected.contains(j)));
    }
}
