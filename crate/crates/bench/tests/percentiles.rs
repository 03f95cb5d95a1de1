use bench::report::{aggregate_rows, RawRow};
use bench::{percentile, Metric, PercentileReport};
use proptest::prelude::*;

/// Nearest rank with integer arithmetic: the smallest value whose 1-based
/// position is at least `ceil(num * n / den)`.
fn oracle(values: &[f64], num: u64, den: u64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as u64;
    let rank = ((num * n).div_ceil(den)).max(1);
    v[rank as usize - 1]
}

fn row(process: u32, value_us: f64) -> RawRow {
    RawRow {
        metric: Metric::E2e.label().to_string(),
        mode: "event".into(),
        backend: "inproc".into(),
        topics: 1,
        subscribers: 2,
        rate_hz: 100.0,
        iter: 0,
        process,
        value_us,
    }
}

#[test]
fn pooled_differs_from_averaged_per_stream() {
    let a = [1.0, 1.0, 1.0];
    let b = [100.0, 100.0, 100.0];
    let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
    assert_eq!(percentile(&pooled, 0.5).unwrap(), 1.0);
    let averaged = (percentile(&a, 0.5).unwrap() + percentile(&b, 0.5).unwrap()) / 2.0;
    assert_eq!(averaged, 50.5);

    let rows = a.iter().map(|&v| row(1, v)).chain(b.iter().map(|&v| row(2, v)));
    let agg = aggregate_rows(rows).unwrap();
    assert_eq!(agg.len(), 1);
    assert_eq!(agg[0].report, PercentileReport { p50: 1.0, p999: 100.0, n: 6 });
}

#[test]
fn hand_computed_examples() {
    let v: Vec<f64> = (1..=1000).map(f64::from).collect();
    assert_eq!(PercentileReport::pooled(&v).unwrap(), PercentileReport { p50: 500.0, p999: 999.0, n: 1000 });
    let v: Vec<f64> = (1..=10).map(f64::from).collect();
    assert_eq!(PercentileReport::pooled(&v).unwrap(), PercentileReport { p50: 5.0, p999: 10.0, n: 10 });
    assert_eq!(PercentileReport::pooled(&[3.5]).unwrap(), PercentileReport { p50: 3.5, p999: 3.5, n: 1 });
}

proptest! {
    #[test]
    fn matches_integer_oracle(values in prop::collection::vec(-1e6f64..1e6, 1..400), num in 1u64..1000) {
        prop_assert_eq!(percentile(&values, num as f64 / 1000.0).unwrap(), oracle(&values, num, 1000));
    }

    #[test]
    fn order_independent_and_monotone(mut values in prop::collection::vec(0f64..1e4, 1..200), q1 in 0.001f64..0.999, q2 in 0.001f64..0.999) {
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        let a = percentile(&values, lo).unwrap();
        let b = percentile(&values, hi).unwrap();
        prop_assert!(a <= b);
        values.reverse();
        prop_assert_eq!(percentile(&values, lo).unwrap(), a);
        prop_assert!(values.contains(&a));
    }
}
