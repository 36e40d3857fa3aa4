use breechmark::supcon::{supcon_grad, supcon_loss, supcon_loss_rewritten, LabeledBatch};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random batch where every class has at least two members.
fn random_batch(rng: &mut ChaCha8Rng, size: usize, classes: usize, dim: usize, tau: f64) -> LabeledBatch<usize> {
    let mut labels: Vec<usize> = (0..size).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let embeddings = (0..size)
        .map(|_| unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    LabeledBatch::new(embeddings, labels, tau).unwrap()
}

/// Direct evaluation of the definition with no stabilization.
fn naive_loss(b: &LabeledBatch<usize>) -> f64 {
    let z = b.embeddings();
    let l = b.labels();
    let dot = |i: usize, j: usize| z[i].iter().zip(&z[j]).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for a in 0..z.len() {
        let denom: f64 = (0..z.len()).filter(|&n| l[n] != l[a]).map(|n| (dot(a, n) / b.temperature()).exp()).sum();
        let pos: Vec<usize> = (0..z.len()).filter(|&p| p != a && l[p] == l[a]).collect();
        let s: f64 = pos.iter().map(|&p| ((dot(a, p) / b.temperature()).exp() / denom).ln()).sum();
        total -= s / pos.len() as f64;
    }
    total
}

#[test]
fn matches_unstabilized_definition() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let b = random_batch(&mut rng, 12, 3, 8, 0.5);
        assert!((supcon_loss(&b) - naive_loss(&b)).abs() < 1e-9);
    }
}

#[test]
fn small_temperature_does_not_overflow() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let b = random_batch(&mut rng, 16, 4, 4, 1e-3);
    assert!(supcon_loss(&b).is_finite());
    assert!(supcon_loss_rewritten(&b).is_finite());
}

#[test]
fn halving_temperature_doubles_exponents() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = random_batch(&mut rng, 10, 2, 6, 0.4);
    let half = LabeledBatch::new(b.embeddings().to_vec(), b.labels().to_vec(), 0.2).unwrap();
    // direct evaluation at t/2 equals evaluation at t with every dot product doubled
    let doubled: Vec<Vec<f64>> = b
        .embeddings()
        .iter()
        .map(|e| e.iter().map(|x| x * 2f64.sqrt()).collect())
        .collect();
    let scaled = LabeledBatch::new(doubled, b.labels().to_vec(), 0.4).unwrap();
    assert!((supcon_loss_rewritten(&half) - naive_loss(&scaled)).abs() < 1e-9);
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-6;
    for _ in 0..20 {
        let b = random_batch(&mut rng, 8, 3, 5, 0.3);
        let (_, grads) = supcon_grad(&b);
        for i in 0..b.len() {
            for d in 0..5 {
                let perturbed = |delta: f64| {
                    let mut e = b.embeddings().to_vec();
                    e[i][d] += delta;
                    supcon_loss(&LabeledBatch::new(e, b.labels().to_vec(), 0.3).unwrap())
                };
                let fd = (perturbed(h) - perturbed(-h)) / (2.0 * h);
                let rel = (fd - grads[i][d]).abs() / fd.abs().max(grads[i][d].abs()).max(1e-6);
                assert!(rel < 1e-4, "rel err {rel}");
            }
        }
    }
}

#[test]
fn gradient_step_lowers_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut improved = 0;
    for _ in 0..100 {
        let b = random_batch(&mut rng, 12, 3, 6, 0.2);
        let (loss, grads) = supcon_grad(&b);
        let moved: Vec<Vec<f64>> = b
            .embeddings()
            .iter()
            .zip(&grads)
            .map(|(e, g)| e.iter().zip(g).map(|(x, d)| x - 1e-4 * d).collect())
            .collect();
        let after = supcon_loss(&LabeledBatch::new(moved, b.labels().to_vec(), 0.2).unwrap());
        if after < loss {
            improved += 1;
        }
    }
    assert!(improved >= 95, "{improved}/100");
}

proptest! {
    #[test]
    fn order_and_label_names_do_not_matter(seed in any::<u64>(), size in 4usize..24, classes in 2usize..5) {
        let classes = classes.min(size / 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = random_batch(&mut rng, size, classes, 4, 0.1);
        let base = supcon_loss(&b);

        let mut order: Vec<usize> = (0..size).collect();
        order.shuffle(&mut rng);
        let e: Vec<Vec<f64>> = order.iter().map(|&i| b.embeddings()[i].clone()).collect();
        let l: Vec<usize> = order.iter().map(|&i| b.labels()[i]).collect();
        let permuted = LabeledBatch::new(e, l, 0.1).unwrap();
        prop_assert!((supcon_loss(&permuted) - base).abs() < 1e-9);

        let renamed: Vec<String> = b.labels().iter().map(|l| format!("gun-{}", 7 * l + 3)).collect();
        let relabeled = LabeledBatch::new(b.embeddings().to_vec(), renamed, 0.1).unwrap();
        prop_assert!((supcon_loss(&relabeled) - base).abs() < 1e-12);
    }
}
