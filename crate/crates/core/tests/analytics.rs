use num_bigint::BigInt;
use num_rational::BigRational;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use selfheal::analytics::*;
use selfheal::bloom::{expected_download_chunks, false_positive_rate, prob_full_download, BloomParams};

#[test]
fn formula_matches_enumeration_up_to_eight() {
    for m in 1..=8 {
        assert_eq!(expected_transmitters(m).unwrap(), brute_force_transmitters(m).unwrap(), "m={m}");
    }
}

#[test]
fn slot_counts_match_enumeration() {
    for m in 2..=6 {
        let en = enumerate_slots(m).unwrap();
        for j in 1..m {
            for k in 1..=m {
                assert_eq!(slot_count(m, j, k).unwrap(), BigInt::from(en.by_slot[j][k]), "m={m} j={j} k={k}");
            }
        }
        // the only outcome not covered by slots 1..m-1: everyone in the last slot
        assert_eq!(en.by_slot[m][m], 1);
        assert!(en.by_slot[m][..m].iter().all(|&c| c == 0));
    }
}

#[test]
fn slot_values_are_joint_not_normalized() {
    let total: BigRational = (1..=3).map(|k| slot_pmf(3, 1, k).unwrap()).sum();
    assert!(total < BigRational::from_integer(1.into()));
}

#[test]
fn single_transmitter_matches_enumeration() {
    for m in 2..=7 {
        assert_eq!(single_transmitter_prob(m).unwrap(), enumerate_slots(m).unwrap().single_transmitter_prob(), "m={m}");
    }
}

#[test]
fn single_transmitter_rises_toward_its_limit() {
    let limit = 1.0 / (std::f64::consts::E - 1.0);
    let v: Vec<f64> = (2..=50).map(|m| to_f64(&single_transmitter_prob(m).unwrap())).collect();
    assert!(v.windows(2).all(|w| w[1] > w[0]));
    assert!(v.iter().all(|&x| x < limit));
    assert!(limit - v.last().unwrap() < 0.002);
}

#[test]
fn transmitter_table_two_decimals() {
    let rows = transmitter_table(&REPORT_NEIGHBOR_COUNTS).unwrap();
    assert_eq!(format_transmitter_row(&rows), "2: 1.50, 5: 1.57, 10: 1.57, 20: 1.58");
}

#[test]
fn enumeration_guard() {
    assert_eq!(enumerate_slots(9).unwrap_err(), AnalyticsError::TooLarge(9));
}

#[test]
fn monte_carlo_tracks_closed_form() {
    let params = BloomParams::default();
    let p = false_positive_rate(params.num_keys, params.mu);
    let (rate, chunks) = monte_carlo_bloom_download(params, 20_000, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    // four standard errors
    let se = (prob_full_download(p, 4) * (1.0 - prob_full_download(p, 4)) / 20_000.0).sqrt();
    assert!((rate - prob_full_download(p, 4)).abs() < 4.0 * se, "{rate}");
    assert!((chunks - expected_download_chunks(64, p, 4)).abs() < 4.0 * 60.0 * se, "{chunks}");
    assert_eq!(monte_carlo_bloom_download(params, 0, &mut ChaCha8Rng::seed_from_u64(9)), Err(AnalyticsError::NoTrials));
}

#[test]
fn monte_carlo_is_reproducible() {
    let params = BloomParams { kappa: 2, ..Default::default() };
    let a = monte_carlo_bloom_download(params, 500, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = monte_carlo_bloom_download(params, 500, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn pmf_is_count_over_total(m in 2usize..12, j_frac in 0.0f64..1.0, k_frac in 0.0f64..1.0) {
        let j = 1 + ((m - 1) as f64 * j_frac) as usize % (m - 1);
        let k = 1 + (m as f64 * k_frac) as usize % m;
        let pmf = slot_pmf(m, j, k).unwrap();
        let total = num_traits::pow(BigInt::from(m), m);
        prop_assert_eq!(pmf * BigRational::from_integer(total), BigRational::from_integer(slot_count(m, j, k).unwrap()));
    }

    #[test]
    fn expected_transmitters_bounded(m in 1usize..40) {
        let e = to_f64(&expected_transmitters(m).unwrap());
        prop_assert!(e >= 1.0 && e <= m as f64);
    }
}
