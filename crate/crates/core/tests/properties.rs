use mdcons::cccp::{run_chain, CccpConfig, ChainStatus};
use mdcons::constellation::{Metric, DEFAULT_KISSING_REL_TOL, DEFAULT_ZERO_TOL};
use mdcons::qforms::{realify, QuadFormIndex};
use mdcons::scma::{build_codebooks, IndicatorMatrix, OperatorSet};
use mdcons::sim::{demap, map_bits, ml_detect};
use mdcons::Constellation;
use num_complex::Complex64;
use proptest::prelude::*;
use proptest::sample::Index;

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

/// Random constellations with `K ≤ 4` and `M ≤ 16`.
fn constellation() -> impl Strategy<Value = Constellation> {
    (1usize..=4, 2usize..=16)
        .prop_flat_map(|(k, m)| (Just(k), Just(m), prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64), k * m)))
        .prop_map(|(k, m, v)| {
            Constellation::new(k, m, v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect()).unwrap()
        })
}

fn with_phases() -> impl Strategy<Value = (Constellation, Vec<f64>)> {
    constellation().prop_flat_map(|c| {
        let k = c.dims();
        (Just(c), prop::collection::vec(0.0..std::f64::consts::TAU, k))
    })
}

fn shuffled(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #[test]
    fn metrics_survive_per_dimension_rotation((c, phases) in with_phases()) {
        let r = c.map_entries(|_, k, z| z * Complex64::from_polar(1.0, phases[k])).unwrap();
        prop_assert!(close(c.med(), r.med(), 1e-9));
        prop_assert!(close(c.mpd(DEFAULT_ZERO_TOL).unwrap(), r.mpd(DEFAULT_ZERO_TOL).unwrap(), 1e-9));
    }

    #[test]
    fn metrics_survive_permutations(
        (c, dim_perm, vec_perm) in constellation().prop_flat_map(|c| {
            let (k, m) = (c.dims(), c.size());
            (Just(c), shuffled(k), shuffled(m))
        })
    ) {
        let columns: Vec<Vec<Complex64>> = vec_perm
            .iter()
            .map(|&i| dim_perm.iter().map(|&k| c.point(i, k)).collect())
            .collect();
        let p = Constellation::from_columns(&columns).unwrap();
        prop_assert!(close(c.med(), p.med(), 1e-12));
        prop_assert!(close(c.mpd(DEFAULT_ZERO_TOL).unwrap(), p.mpd(DEFAULT_ZERO_TOL).unwrap(), 1e-12));
        for metric in [Metric::Euclidean, Metric::Product] {
            prop_assert_eq!(
                c.kissing_number(metric, DEFAULT_KISSING_REL_TOL),
                p.kissing_number(metric, DEFAULT_KISSING_REL_TOL)
            );
        }
    }

    #[test]
    fn normalize_is_idempotent(c in constellation()) {
        let once = c.normalize().unwrap();
        let twice = once.normalize().unwrap();
        prop_assert!((once.average_power() - 1.0).abs() < 1e-12);
        for (a, b) in once.as_vec().iter().zip(twice.as_vec()) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn amgm_and_delta_bounds_hold(c in constellation()) {
        for e in c.amgm_check() {
            prop_assert!(!e.violated);
            prop_assert!(e.slack >= -1e-9 * e.rhs.max(1.0));
        }
        let delta = c.min_elementwise();
        if delta > DEFAULT_ZERO_TOL {
            let bound = delta.powi(c.dims() as i32);
            prop_assert!(c.mpd(DEFAULT_ZERO_TOL).unwrap() >= bound * (1.0 - 1e-9));
        }
    }

    #[test]
    fn kissing_numbers_are_positive(c in constellation()) {
        prop_assert!(c.kissing_number(Metric::Euclidean, DEFAULT_KISSING_REL_TOL) >= 1);
    }

    #[test]
    fn implicit_and_explicit_forms_agree(c in constellation(), pick in any::<(Index, Index, Index)>()) {
        let (k, m) = (c.dims(), c.size());
        let z = realify(c.as_vec());
        let i = pick.0.index(m - 1);
        let j = i + 1 + pick.1.index(m - 1 - i);
        let d = pick.2.index(k);
        for idx in [
            QuadFormIndex::euclidean_pair(i, j, k, m).unwrap(),
            QuadFormIndex::elementwise(i, j, d, k, m).unwrap(),
        ] {
            let implicit = idx.value(&z).unwrap();
            let mat = idx.to_matrix();
            prop_assert!((implicit - mat.quad_real(&z)).abs() <= 1e-12 * implicit.max(1.0));
            prop_assert!((implicit - mat.quad_complex(c.as_vec())).abs() <= 1e-12 * implicit.max(1.0));
            prop_assert!(implicit >= 0.0);
        }
    }

    #[test]
    fn labeling_is_a_bijection(bits in prop::collection::vec(0u8..=1, 1..=10)) {
        prop_assert_eq!(demap(map_bits(&bits), bits.len()), bits);
    }

    #[test]
    fn ml_detection_recovers_noise_free_symbols(c in constellation(), pick in any::<Index>(), gains in prop::collection::vec((0.1..2.0f64, 0.0..std::f64::consts::TAU), 4)) {
        let i = pick.index(c.size());
        let h: Vec<Complex64> = gains[..c.dims()].iter().map(|&(r, p)| Complex64::from_polar(r, p)).collect();
        let y: Vec<Complex64> = c.column(i).iter().zip(&h).map(|(x, g)| x * g).collect();
        let found = ml_detect(&y, &h, &c);
        // duplicates resolve to the lowest index
        prop_assert!(found <= i);
        let residual: f64 = c.column(found).iter().zip(&h).zip(&y).map(|((x, g), y)| (y - g * x).norm_sqr()).sum();
        prop_assert!(residual < 1e-20);
    }

    #[test]
    fn user_permutation_permutes_codebooks(
        perm in shuffled(6),
        phases in prop::collection::vec(prop::collection::vec(0.0..std::f64::consts::TAU, 2), 6),
        pts in prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), 8),
    ) {
        let base = Constellation::new(2, 4, pts.into_iter().map(|(a, b)| Complex64::new(a, b)).collect()).unwrap();
        let f = IndicatorMatrix::default_4x6();
        let cbs = build_codebooks(&f, &base, &OperatorSet::from_phases(phases.clone()).unwrap()).unwrap();
        let rows = f.rows().iter().map(|r| perm.iter().map(|&j| r[j]).collect()).collect();
        let fp = IndicatorMatrix::from_rows(rows).unwrap();
        let ops = OperatorSet::from_phases(perm.iter().map(|&j| phases[j].clone()).collect()).unwrap();
        let cbp = build_codebooks(&fp, &base, &ops).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            for m in 0..4 {
                for n in 0..4 {
                    prop_assert_eq!(cbp.entry(new, m, n), cbs.entry(old, m, n));
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn chains_stay_feasible_and_decrease_the_merit(seed in any::<u64>()) {
        let config = CccpConfig { seed, ..CccpConfig::new(2, 4) };
        let ch = run_chain(&config, 0).unwrap();
        prop_assert!(ch.status != ChainStatus::SolverStalled);
        prop_assert!(ch.trace.max_merit_increase() <= 1e-7);
        for rec in &ch.trace.records {
            prop_assert!(rec.min_med_slack >= -1e-9);
        }
        prop_assert!(ch.raw.med() >= 1.0 - 1e-9);
    }
}
