use fledgesim_core::model::{loss_and_grad, Batch, Layout, Matrix, ParamVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_instance(seed: u64) -> (ParamVector, Batch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = Layout::new(rng.random_range(1..5), rng.random_range(0..5), rng.random_range(2..5));
    let n = rng.random_range(1..7);
    let params = ParamVector::from_values(
        layout,
        (0..layout.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let features = Matrix::from_vec(n, layout.inputs, (0..n * layout.inputs).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..layout.classes)).collect();
    (params, Batch::new(features, labels).unwrap())
}

/// Central differences, compared as `|a - n| / max(|a|, |n|)` over the whole
/// gradient vector.
#[test]
fn analytic_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for seed in 0..200 {
        let (params, batch) = random_instance(seed);
        let (_, grad) = loss_and_grad(&params, &batch).unwrap();
        let numeric: Vec<f64> = (0..params.len())
            .map(|i| {
                let mut plus = params.clone();
                plus.values[i] += h;
                let mut minus = params.clone();
                minus.values[i] -= h;
                (loss_and_grad(&plus, &batch).unwrap().0 - loss_and_grad(&minus, &batch).unwrap().0) / (2.0 * h)
            })
            .collect();
        let diff: f64 = grad.values.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let scale = grad.norm().max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt());
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        worst = worst.max(rel);
        assert!(rel < 1e-6, "seed {seed}: relative error {rel}");
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
    eprintln!("worst relative error {worst:e}");
}
