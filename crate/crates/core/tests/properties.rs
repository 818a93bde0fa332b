use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use condiff::data::{load_csv, one_hot, split_indices, write_csv, SchemaSpec, SplitSpec};
use condiff::diffusion::{dsm_target, ou_coefficients, perturb};
use condiff::experiments::{replication_rng, DriftMode, ModelId, RunContext, ScheduleSpec, SimulationSpec, TestPoints};
use condiff::inference::{
    confidence_interval, coverage_probability, mse_bias_variance, prediction_interval, sample_moments,
};
use condiff::nn::init_network;
use condiff::oracle::{kl_gaussians, GaussianParams};
use condiff::stats::{normal_cdf, normal_quantile, t_cdf, t_quantile};
use condiff::training::Standardization;
use condiff::{make_schedule, Dataset, Spacing, TrainConfig};

fn finite() -> impl Strategy<Value = f64> {
    -1e3..1e3f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(n in 1usize..400, train in 0.05..1.0f64, val_share in 0.0..1.0f64, seed: u64) {
        let val = (1.0 - train) * val_share;
        let spec = SplitSpec { train, val, test: 1.0 - train - val, seed };
        let (a, b, c) = split_indices(n, &spec).unwrap();
        prop_assert_eq!(b.len(), (val * n as f64).floor() as usize);
        prop_assert_eq!(c.len(), (spec.test * n as f64).floor() as usize);
        let all: BTreeSet<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        prop_assert_eq!(all.len(), n);
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        prop_assert_eq!(all.into_iter().collect::<Vec<_>>(), (0..n).collect::<Vec<_>>());
        prop_assert_eq!(split_indices(n, &spec).unwrap(), (a, b, c));
    }

    #[test]
    fn one_hot_rows_sum_to_one(levels in prop::collection::vec(0usize..5, 1..60), other in prop::collection::vec(0usize..3, 1..60)) {
        let rows = levels.len().min(other.len());
        let mut text = String::from("kind,grade,y\n");
        for i in 0..rows {
            text.push_str(&format!("k{},g{},{}\n", levels[i], other[i], i));
        }
        let spec = SchemaSpec { target: vec!["y".into()], categorical: vec!["kind".into(), "grade".into()] };
        let table = load_csv(text.as_bytes(), &spec).unwrap();
        let (data, mapping) = one_hot(&table, None).unwrap();
        let mut start = 0;
        for (_, lv) in &mapping.columns {
            for r in 0..rows {
                let block = data.x.row(r);
                let sum: f64 = block.iter().skip(start).take(lv.len()).sum();
                prop_assert_eq!(sum, 1.0);
            }
            start += lv.len();
        }
        prop_assert_eq!(start, data.dim_x());
    }

    #[test]
    fn csv_round_trip_is_exact(values in prop::collection::vec(prop::num::f64::NORMAL, 6..60)) {
        let rows = values.len() / 3;
        let x = Array2::from_shape_vec((rows, 2), values[..2 * rows].to_vec()).unwrap();
        let y = Array2::from_shape_vec((rows, 1), values[2 * rows..3 * rows].to_vec()).unwrap();
        let data = Dataset::new(x, y).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &data).unwrap();
        let table = load_csv(buf.as_slice(), &SchemaSpec { target: vec!["y1".into()], categorical: vec![] }).unwrap();
        let (back, _) = one_hot(&table, None).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn mse_is_variance_plus_bias(estimates in prop::collection::vec(finite(), 1..200), truth in finite()) {
        let d = mse_bias_variance(&estimates, truth).unwrap();
        let sum = d.variance + d.bias2;
        prop_assert!((d.mse - sum).abs() <= 1e-8 * d.mse.abs().max(1e-300) + 1e-12);
    }

    #[test]
    fn standardization_round_trips(values in prop::collection::vec(finite(), 4..120), probe in prop::collection::vec(finite(), 2)) {
        let rows = values.len() / 2;
        let data = Array2::from_shape_vec((rows, 2), values[..2 * rows].to_vec()).unwrap();
        let s = Standardization::fit(data.view());
        let z = s.apply_rows(data.view());
        for c in 0..2 {
            let col = z.column(c);
            let mean = col.sum() / rows as f64;
            prop_assert!(mean.abs() < 1e-9);
        }
        let mut v = probe.clone();
        s.apply(&mut v);
        s.invert(&mut v);
        for (a, b) in v.iter().zip(&probe) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }

    #[test]
    fn prediction_interval_contains_confidence_interval(
        samples in prop::collection::vec(-50.0..50.0f64, 2..80),
        alpha in 0.01..0.5f64,
    ) {
        let pool = Array2::from_shape_vec((samples.len(), 1), samples.clone()).unwrap();
        let m = sample_moments(pool.view()).unwrap();
        let ci = confidence_interval(&m, alpha, 0).unwrap();
        let pi = prediction_interval(&m, alpha, 0).unwrap();
        prop_assert_eq!(ci.center, pi.center);
        prop_assert!(pi.lower <= ci.lower && ci.upper <= pi.upper);
        prop_assert!(ci.lower <= ci.center && ci.center <= ci.upper);
        if m.std_dev(0) > 0.0 {
            prop_assert!(pi.half_width() > ci.half_width());
        }
    }

    #[test]
    fn coverage_is_a_fraction(stats in prop::collection::vec(-5.0..5.0f64, 1..100), alpha in 0.01..0.5f64) {
        let cp = coverage_probability(&stats, alpha).unwrap();
        prop_assert!((0.0..=1.0).contains(&cp));
    }

    #[test]
    fn schedule_grid_is_increasing(t0 in 0.001..1.0f64, extra in 0.5..10.0f64, steps in 1usize..400, geometric: bool) {
        let t_end = t0 + extra;
        let spacing = if geometric { Spacing::Geometric } else { Spacing::Uniform };
        let s = make_schedule(t0, t_end, steps, spacing).unwrap();
        prop_assert_eq!(s.grid.len(), steps + 1);
        prop_assert_eq!(s.grid[0], 0.0);
        prop_assert_eq!(s.grid[steps], t_end - t0);
        prop_assert!(s.grid.windows(2).all(|w| w[1] > w[0]));
        prop_assert!(s.drift_times().iter().all(|&t| t >= t0 - 1e-12 && t <= t_end));
    }

    #[test]
    fn ou_marginal_preserves_unit_variance(t in 1e-3..20.0f64) {
        let (m, v) = ou_coefficients(t).unwrap();
        prop_assert!((m * m + v - 1.0).abs() < 1e-12);
        prop_assert!(m > 0.0 && m <= 1.0 && v > 0.0 && v <= 1.0);
    }

    #[test]
    fn dsm_target_matches_perturbation(y0 in finite(), z in -4.0..4.0f64, t in 0.01..5.0f64) {
        let yt = perturb(&[y0], t, &[z]).unwrap()[0];
        let target = dsm_target(&[y0], t, &[z], 0.01).unwrap()[0];
        let (_, v) = ou_coefficients(t).unwrap();
        prop_assert!((target - (yt - 2.0 * z / v.sqrt())).abs() <= 1e-9 * (1.0 + yt.abs() + (z / v.sqrt()).abs()));
    }

    #[test]
    fn normal_quantile_inverts_cdf(p in 1e-10..(1.0 - 1e-10)) {
        let q = normal_quantile(p).unwrap();
        prop_assert!((normal_cdf(q) - p).abs() <= 1e-12 + 1e-9 * p.min(1.0 - p));
    }

    #[test]
    fn t_quantile_inverts_cdf(p in 1e-6..(1.0 - 1e-6), df in 1.0..200.0f64) {
        let q = t_quantile(p, df).unwrap();
        prop_assert!((t_cdf(q, df).unwrap() - p).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_identity(
        m1 in -3.0..3.0f64, m2 in -3.0..3.0f64, s1 in 0.1..4.0f64, s2 in 0.1..4.0f64,
    ) {
        let p = GaussianParams::univariate(m1, s1).unwrap();
        let q = GaussianParams::univariate(m2, s2).unwrap();
        prop_assert!(kl_gaussians(&p, &q).unwrap() >= -1e-12);
        prop_assert!(kl_gaussians(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn input_clamp_equalizes_out_of_range_y(seed: u64, y in 1.0..100.0f64, t in 0.0..5.0f64, x in -2.0..2.0f64) {
        let net = init_network(&[3, 8, 1], seed).unwrap().with_input_clamp(1.0).unwrap();
        prop_assert_eq!(net.forward(t, &[y], &[x]).unwrap(), net.forward(t, &[1.0], &[x]).unwrap());
    }

    #[test]
    fn output_bound_is_respected(seed: u64, y in -50.0..50.0f64, k in 0.01..3.0f64) {
        let net = init_network(&[3, 16, 2], seed).unwrap().with_output_bound(k).unwrap();
        let out = net.forward(1.0, &[y, -y], &[]).unwrap();
        prop_assert!(out.iter().map(|v| v * v).sum::<f64>().sqrt() <= k * (1.0 + 1e-12));
    }
}

#[test]
fn replication_stream_depends_only_on_seed_and_index() {
    use rand::Rng;
    let a: u64 = replication_rng(5, 3).random();
    let b: u64 = replication_rng(5, 3).random();
    let c: u64 = replication_rng(5, 4).random();
    let d: u64 = replication_rng(6, 3).random();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(a, d);
}

#[test]
fn single_replication_reproduces_alone() {
    let spec = SimulationSpec {
        model: ModelId::II,
        n: 200,
        m: 20,
        m_tilde: 6,
        alpha: 0.05,
        test_points: TestPoints::Random,
        master_seed: 12,
        train_config: TrainConfig::default(),
        schedule: ScheduleSpec { steps: 50, spacing: Spacing::Uniform },
        drift: DriftMode::Oracle,
        test_fraction: 0.1,
        redraw: true,
    };
    let ctx = RunContext::new(&spec).unwrap();
    let in_order: Vec<_> = (1..=6).map(|j| ctx.replicate(j).unwrap()).collect();
    let fresh = RunContext::new(&spec).unwrap();
    assert_eq!(fresh.replicate(4).unwrap(), in_order[3]);
    assert_ne!(in_order[2], in_order[3]);
}
