use lcx::latent::{regularized_loss, LatentDataset};
use lcx::LatentVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Noisy labels from a random hyperplane, so the optimum is finite even
/// without the ridge term.
pub fn noisy_instance(seed: u64, n: usize, d: usize) -> LatentDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
    loop {
        let mut latents = Vec::new();
        let mut soft = Vec::new();
        for _ in 0..n {
            let w: Vec<f32> = (0..d).map(|_| rng.random_range(-1.5f32..1.5)).collect();
            let z: f64 = truth.iter().zip(&w).map(|(a, &x)| a * x as f64).sum::<f64>() + 0.3;
            let p = 1.0 / (1.0 + (-z).exp());
            let label = rng.random::<f64>() < p;
            latents.push(LatentVector(w));
            soft.push(if label { 0.9 } else { 0.1 });
        }
        if soft.iter().any(|&s| s > 0.5) && soft.iter().any(|&s| s < 0.5) {
            return LatentDataset::from_rows(latents, soft, seed).unwrap();
        }
    }
}

pub fn hard_targets(ds: &LatentDataset) -> Vec<f64> {
    ds.hard_labels.iter().map(|&l| l as f64).collect()
}

/// Zooming grid search over `(alpha.., beta)`. The objective is convex, so
/// shrinking the box around the best grid point converges to the minimum.
pub fn grid_search_minimum(ds: &LatentDataset, l2: f64) -> f64 {
    let d = ds.dim();
    let y = hard_targets(ds);
    let mut center = vec![0.0; d + 1];
    let mut half = 16.0;
    let steps = 20i32;
    let mut best = f64::INFINITY;
    for _ in 0..40 {
        let mut best_point = center.clone();
        let base = (2 * steps + 1) as usize;
        for idx in 0..base.pow(d as u32 + 1) {
            let mut k = idx;
            let mut point = center.clone();
            for p in point.iter_mut() {
                let offset = (k % base) as i32 - steps;
                k /= base;
                *p += half * offset as f64 / steps as f64;
            }
            let loss = regularized_loss(&ds.latents, &y, &point[..d], point[d], l2);
            if loss < best {
                best = loss;
                best_point = point;
            }
        }
        center = best_point;
        half *= 0.35;
    }
    best
}
