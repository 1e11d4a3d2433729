use pgits::autodiff::Tensor;
use pgits::eval::{compute_metrics, knn_baseline, observed_mean_baseline};
use pgits::stations::{Station, StationGraph};
use pgits::Error;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, usize, Vec<usize>) {
    let nodes = rng.random_range(1..7);
    let len = nodes * rng.random_range(1..15);
    let y: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..250.0)).collect();
    let p: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..250.0)).collect();
    let mut omega: Vec<usize> = (0..len).filter(|_| rng.random::<f64>() < 0.7).collect();
    if omega.is_empty() {
        omega.push(0);
    }
    (y, p, nodes, omega)
}

#[test]
fn mre_is_mae_times_count_over_total_truth() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..500 {
        let (y, p, nodes, omega) = instance(&mut rng);
        let r = compute_metrics(&y, &p, nodes, &omega).unwrap();
        let total: f64 = omega.iter().map(|&k| y[k].abs()).sum();
        assert!((r.mre - r.mae * omega.len() as f64 / total).abs() < 1e-12);
        assert_eq!(r.n_points, omega.len());
        assert_eq!(r.mape_points + r.mape_excluded, r.n_points);
        assert_eq!(r.per_node.iter().map(|m| m.n_points).sum::<usize>(), r.n_points);
        let weighted: f64 = r.per_node.iter().map(|m| m.mae * m.n_points as f64).sum();
        assert!((weighted / r.n_points as f64 - r.mae).abs() < 1e-9);
    }
}

#[test]
fn metrics_ignore_the_order_of_the_index_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..200 {
        let (y, p, nodes, mut omega) = instance(&mut rng);
        let a = compute_metrics(&y, &p, nodes, &omega).unwrap();
        omega.shuffle(&mut rng);
        let b = compute_metrics(&y, &p, nodes, &omega).unwrap();
        assert!((a.mae - b.mae).abs() < 1e-9 && (a.mape - b.mape).abs() < 1e-12 && (a.mre - b.mre).abs() < 1e-12);
    }
}

#[test]
fn degenerate_inputs_are_data_errors() {
    assert!(matches!(compute_metrics(&[0.0, 0.0], &[1.0, 2.0], 2, &[0, 1]), Err(Error::Data(_))));
    assert!(matches!(compute_metrics(&[1.0], &[f64::NAN], 1, &[0]), Err(Error::Data(_))));
    assert!(matches!(compute_metrics(&[1.0], &[1.0], 1, &[]), Err(Error::Data(_))));
    assert!(matches!(compute_metrics(&[1.0], &[1.0], 1, &[3]), Err(Error::Shape(_))));
}

#[test]
fn small_truths_are_left_out_of_mape() {
    let r = compute_metrics(&[0.5, 10.0], &[1.5, 12.0], 2, &[0, 1]).unwrap();
    assert_eq!(r.mape_excluded, 1);
    assert!((r.mape - 0.2).abs() < 1e-12);
    assert!((r.mae - 1.5).abs() < 1e-12);
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize) -> StationGraph {
    let stations: Vec<Station> = (0..n)
        .map(|i| Station::new(format!("k{i}"), 39.8 + rng.random_range(0.0..0.3), 116.2 + rng.random_range(0.0..0.3)).unwrap())
        .collect();
    StationGraph::from_parts(stations, Tensor::zeros(n, n)).unwrap()
}

#[test]
fn knn_is_scale_equivariant_and_keeps_observed_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for _ in 0..100 {
        let n = rng.random_range(3..12);
        let graph = random_graph(&mut rng, n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut observed = idx[..rng.random_range(1..n)].to_vec();
        observed.sort_unstable();
        let frames = 6;
        let y = Tensor::from_fn(frames, n, |_, i| {
            if observed.contains(&i) && rng.random::<f64>() < 0.8 {
                rng.random_range(1.0..200.0)
            } else {
                f64::NAN
            }
        });
        let k = rng.random_range(1..=observed.len());
        let est = knn_baseline(&graph, &y, &observed, k).unwrap();
        let c = 3.5;
        let scaled = knn_baseline(&graph, &y.map(|v| v * c), &observed, k).unwrap();
        for t in 0..frames {
            for i in 0..n {
                let (a, b) = (est.get(t, i), scaled.get(t, i));
                if a.is_nan() {
                    assert!(b.is_nan() && observed.contains(&i));
                } else {
                    assert!((b - c * a).abs() <= 1e-9 * (1.0 + b.abs()));
                }
                if observed.contains(&i) {
                    assert_eq!(a.to_bits(), y.get(t, i).to_bits());
                }
            }
        }
    }
}

#[test]
fn observed_mean_is_the_frame_mean_of_observed_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let n = 8;
    let graph = random_graph(&mut rng, n);
    let observed = vec![0, 2, 3, 6];
    let y = Tensor::from_fn(4, n, |_, i| if observed.contains(&i) { rng.random_range(0.0..100.0) } else { f64::NAN });
    let est = observed_mean_baseline(&graph, &y, &observed).unwrap();
    for t in 0..4 {
        let m = observed.iter().map(|&i| y.get(t, i)).sum::<f64>() / 4.0;
        for i in [1, 4, 5, 7] {
            assert!((est.get(t, i) - m).abs() < 1e-12);
        }
    }
}
