use misreport::bootstrap::{percentile, resample, ResamplePlan};
use misreport::cimetest::ts_from_weights;
use misreport::dataset::{Dataset, Support};
use misreport::latent::{linear_projection, LatentConditional, Target};
use misreport::simulate::{make_model, GeneratorSpec};
use proptest::prelude::*;

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    v.into_iter().map(|p| p / s).collect()
}

fn arb_dataset() -> impl Strategy<Value = Dataset> {
    (20usize..200).prop_flat_map(|n| {
        (
            proptest::collection::vec(1u8..=3, n),
            proptest::collection::vec(0u8..=1, n),
            proptest::collection::vec(1u8..=3, n),
            proptest::collection::vec(0u16..4, n),
        )
            .prop_map(|(x, y, z, w)| {
                Dataset::from_codes(x, y, z, w, 3, 3, vec!["a".into(), "b".into()]).unwrap()
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn percentile_is_monotone_in_level(values in proptest::collection::vec(-5.0f64..5.0, 1..300), a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(percentile(&values, lo).unwrap() <= percentile(&values, hi).unwrap());
    }

    #[test]
    fn stratified_resample_keeps_cell_counts(data in arb_dataset(), seed in any::<u64>()) {
        let again = resample(&data, seed, true);
        prop_assert_eq!(again.n(), data.n());
        prop_assert_eq!(again.cell_counts(), data.cell_counts());
        prop_assert_eq!(resample(&data, seed, true), again);
    }

    #[test]
    fn replicate_order_does_not_depend_on_the_pool(seed in any::<u64>(), b in 1usize..40) {
        let plan = ResamplePlan::new(b, seed, false).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
                .install(|| plan.run(|r, s| Some((r, s))))
        };
        prop_assert_eq!(run(1), run(4));
    }

    #[test]
    fn ts_is_zero_under_independence(
        fx in proptest::collection::vec(0.05f64..1.0, 3),
        fy in proptest::collection::vec(0.05f64..1.0, 6),
        fz in proptest::collection::vec(0.05f64..1.0, 9),
    ) {
        let support = Support::new(3, 2, 3);
        let mut w = vec![0.0; support.cells()];
        for x in 0..3 {
            let (py, pz) = (normalized(fy[2 * x..2 * x + 2].to_vec()), normalized(fz[3 * x..3 * x + 3].to_vec()));
            for y in 0..2 {
                for z in 0..3 {
                    w[support.index(x, y, z)] = fx[x] * py[y] * pz[z];
                }
            }
        }
        prop_assert!(ts_from_weights(&w, support).unwrap().0 < 1e-12);
    }

    #[test]
    fn ts_is_bounded_and_invariant_to_relabelling_z(w in proptest::collection::vec(0.01f64..1.0, 18)) {
        let support = Support::new(3, 2, 3);
        let (ts, _) = ts_from_weights(&w, support).unwrap();
        prop_assert!((0.0..=1.0).contains(&ts));
        let mut swapped = w.clone();
        for x in 0..3 {
            for y in 0..2 {
                swapped.swap(support.index(x, y, 0), support.index(x, y, 2));
            }
        }
        prop_assert!((ts_from_weights(&swapped, support).unwrap().0 - ts).abs() < 1e-15);
    }

    #[test]
    fn linear_projection_residuals_are_orthogonal(raw in proptest::collection::vec(0.05f64..1.0, 16), wts in proptest::collection::vec(0.1f64..1.0, 4)) {
        let wts = normalized(wts);
        let cells = (0..4).map(|c| (c, wts[c], normalized(raw[4 * c..4 * c + 4].to_vec()))).collect();
        let lc = LatentConditional::new(&["a".into(), "b".into()], cells).unwrap();
        let fit = linear_projection(&lc, Target::Latent).unwrap();
        let means = lc.conditional_means();
        for j in 0..lc.n_coefficients() {
            let score: f64 = lc
                .cells
                .iter()
                .zip(&means)
                .map(|(c, m)| {
                    let fitted: f64 = c.q.iter().zip(&fit.beta).map(|(q, b)| q * b).sum();
                    c.weight * c.q[j] * (m - fitted)
                })
                .sum();
            prop_assert!(score.abs() < 1e-10, "{}", score);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_models_are_valid_and_ordered(seed in any::<u64>(), strength in 0.05f64..0.4, sep in 0.1f64..0.4) {
        let spec = GeneratorSpec::new(3, strength, sep, seed);
        let models = make_model(&spec).unwrap();
        for m in &models {
            prop_assert!(m.validate(1e-9).is_ok());
            prop_assert!(m.ord_satisfied(0.0));
            let total: f64 = m.population_pmf().probs().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
