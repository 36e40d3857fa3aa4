//! Central finite-difference checks of the analytic backward passes, for
//! each layer in isolation and for the whole network under the SupCon loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::*;
use super::{build_model, ModelConfig, NetError, Tensor, Variant};
use crate::supcon::{supcon_grad, supcon_loss, LabeledBatch};

/// Magnitude below which gradient entries are compared absolutely.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub entries: usize,
    /// Entries left out because the step crossed a ReLU kink.
    pub skipped: usize,
    pub max_rel_error: f64,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Central differences of `f` at `x` for the listed coordinates.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut x = x.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative disagreement between one-sided slopes taken as a kink crossing.
pub const KINK_SLACK: f64 = 1.5e-4;

/// Like [`central_difference`], but returns `None` where the forward and
/// backward one-sided slopes disagree by more than smooth curvature allows,
/// which happens when the step moves some activation across a ReLU kink.
pub fn kink_aware_difference(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    h: f64,
) -> Vec<Option<f64>> {
    let mut x = x.to_vec();
    let mid = f(&x);
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            let (fwd, bwd) = ((up - mid) / h, (mid - down) / h);
            let slack = KINK_SLACK * fwd.abs().max(bwd.abs()) + 1e-8;
            ((fwd - bwd).abs() <= slack).then(|| (up - down) / (2.0 * h))
        })
        .collect()
}

fn compare(name: &str, analytic: &[f64], numeric: &[f64], coords: &[usize]) -> GradCheck {
    let numeric: Vec<_> = numeric.iter().copied().map(Some).collect();
    compare_some(name, analytic, &numeric, coords)
}

fn compare_some(name: &str, analytic: &[f64], numeric: &[Option<f64>], coords: &[usize]) -> GradCheck {
    let mut skipped = 0;
    let mut max_rel_error = 0.0f64;
    for (&i, n) in coords.iter().zip(numeric) {
        match n {
            Some(n) => max_rel_error = max_rel_error.max(relative_error(analytic[i], *n)),
            None => skipped += 1,
        }
    }
    GradCheck {
        name: name.to_string(),
        entries: coords.len(),
        skipped,
        max_rel_error,
    }
}

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Values bounded away from zero so a step of `h` never crosses a ReLU kink.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen() { v } else { -v }
        })
        .collect()
}

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("matching shape")
}

fn dot(a: &Tensor, w: &[f64]) -> f64 {
    a.data().iter().zip(w).map(|(x, y)| x * y).sum()
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Checks every differentiable operation once on random inputs, with the
/// scalar objective `sum(w * op(x))` for a random `w`.
pub fn check_layers(seed: u64, h: f64) -> Result<Vec<GradCheck>, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // cyclic padding
    let shape = [2, 5, 3];
    let x = uniform(&mut rng, 30);
    let w = uniform(&mut rng, 2 * 9 * 3);
    let analytic = cyclic_pad_backward(&t(&[2, 9, 3], w.clone()), 2)?;
    let mut f = |x: &[f64]| dot(&cyclic_pad(&t(&shape, x.to_vec()), 2).unwrap(), &w);
    let num = central_difference(&mut f, &x, &all(30), h);
    out.push(compare("cyclic_pad", analytic.data(), &num, &all(30)));

    // convolution over the kernel sizes and radial extents the network uses
    let cases = [(1, (2, 3, 3, 6, 5)), (2, (2, 3, 3, 6, 5)), (1, (3, 3, 5, 7, 4)), (1, (3, 3, 5, 7, 2)), (1, (3, 3, 1, 7, 4)), (1, (1, 3, 5, 7, 8))];
    for (stride, (cin, cout, k, a, r)) in cases {
        let xs = [cin, a + k - 1, r];
        let ks = [cout, cin, k, k];
        let x = uniform(&mut rng, xs.iter().product());
        let kern = uniform(&mut rng, ks.iter().product());
        let bias = uniform(&mut rng, cout);
        let y = conv2d(&t(&xs, x.clone()), &t(&ks, kern.clone()), &t(&[cout], bias.clone()), stride)?;
        let w = uniform(&mut rng, y.len());
        let g = conv2d_backward(
            &t(&xs, x.clone()),
            &t(&ks, kern.clone()),
            &t(&[cout], bias.clone()),
            stride,
            &t(y.shape(), w.clone()),
        )?;
        let run = |x: &[f64], kern: &[f64], bias: &[f64]| {
            dot(&conv2d(&t(&xs, x.to_vec()), &t(&ks, kern.to_vec()), &t(&[cout], bias.to_vec()), stride).unwrap(), &w)
        };
        let num = central_difference(&mut |v| run(v, &kern, &bias), &x, &all(x.len()), h);
        out.push(compare(&format!("conv2d/s{stride}k{k}r{r}/input"), g.input.data(), &num, &all(x.len())));
        let num = central_difference(&mut |v| run(&x, v, &bias), &kern, &all(kern.len()), h);
        out.push(compare(&format!("conv2d/s{stride}k{k}r{r}/kernel"), g.kernel.data(), &num, &all(kern.len())));
        let num = central_difference(&mut |v| run(&x, &kern, v), &bias, &all(cout), h);
        out.push(compare(&format!("conv2d/s{stride}k{k}r{r}/bias"), g.bias.data(), &num, &all(cout)));
    }

    // relu
    let x = off_kink(&mut rng, 24);
    let w = uniform(&mut rng, 24);
    let y = relu(&t(&[2, 3, 4], x.clone()));
    let analytic = relu_backward(&y, &t(&[2, 3, 4], w.clone()));
    let num = central_difference(&mut |v| dot(&relu(&t(&[2, 3, 4], v.to_vec())), &w), &x, &all(24), h);
    out.push(compare("relu", analytic.data(), &num, &all(24)));

    // residual addition, gradient with respect to the first operand
    let (x, other, w) = (uniform(&mut rng, 12), uniform(&mut rng, 12), uniform(&mut rng, 12));
    let num = central_difference(
        &mut |v| dot(&add(&t(&[12], v.to_vec()), &t(&[12], other.clone())).unwrap(), &w),
        &x,
        &all(12),
        h,
    );
    out.push(compare("add", &w, &num, &all(12)));

    // average pooling
    for (fa, fr) in [(1, 2), (2, 2)] {
        let x = uniform(&mut rng, 2 * 4 * 6);
        let w = uniform(&mut rng, 2 * (4 / fa) * (6 / fr));
        let analytic = avg_pool_backward(&t(&[2, 4 / fa, 6 / fr], w.clone()), fa, fr)?;
        let num = central_difference(
            &mut |v| dot(&avg_pool(&t(&[2, 4, 6], v.to_vec()), fa, fr).unwrap(), &w),
            &x,
            &all(48),
            h,
        );
        out.push(compare(&format!("avg_pool/{fa}x{fr}"), analytic.data(), &num, &all(48)));
    }

    // global average pooling
    let x = uniform(&mut rng, 3 * 4 * 5);
    let w = uniform(&mut rng, 3);
    let analytic = global_avg_pool_backward(&t(&[3], w.clone()), 4, 5)?;
    let num = central_difference(&mut |v| dot(&global_avg_pool(&t(&[3, 4, 5], v.to_vec())).unwrap(), &w), &x, &all(60), h);
    out.push(compare("global_avg_pool", analytic.data(), &num, &all(60)));

    // dense
    let (din, dout) = (5, 4);
    let (x, wt, b, w) = (
        uniform(&mut rng, din),
        uniform(&mut rng, din * dout),
        uniform(&mut rng, dout),
        uniform(&mut rng, dout),
    );
    let g = dense_backward(&t(&[din], x.clone()), &t(&[dout, din], wt.clone()), &t(&[dout], w.clone()))?;
    let run = |x: &[f64], wt: &[f64], b: &[f64]| {
        dot(&dense(&t(&[din], x.to_vec()), &t(&[dout, din], wt.to_vec()), &t(&[dout], b.to_vec())).unwrap(), &w)
    };
    let num = central_difference(&mut |v| run(v, &wt, &b), &x, &all(din), h);
    out.push(compare("dense/input", g.input.data(), &num, &all(din)));
    let num = central_difference(&mut |v| run(&x, v, &b), &wt, &all(din * dout), h);
    out.push(compare("dense/weight", g.weight.data(), &num, &all(din * dout)));
    let num = central_difference(&mut |v| run(&x, &wt, v), &b, &all(dout), h);
    out.push(compare("dense/bias", g.bias.data(), &num, &all(dout)));

    // l2 normalization
    let x = uniform(&mut rng, 6);
    let w = uniform(&mut rng, 6);
    let analytic = l2_normalize_backward(&t(&[6], x.clone()), &t(&[6], w.clone()))?;
    let num = central_difference(&mut |v| dot(&l2_normalize(&t(&[6], v.to_vec())).unwrap(), &w), &x, &all(6), h);
    out.push(compare("l2_normalize", analytic.data(), &num, &all(6)));

    Ok(out)
}

/// Checks the SupCon loss gradient with respect to a random batch of raw
/// embeddings.
pub fn check_supcon(seed: u64, h: f64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = (rng.gen_range(4..=10), rng.gen_range(2..=6));
    let labels: Vec<usize> = (0..n).map(|i| i % 2 + 2 * usize::from(i >= n / 2 && n >= 8)).collect();
    let emb: Vec<Vec<f64>> = (0..n).map(|_| uniform(&mut rng, d)).collect();
    let tau = [0.05, 0.1, 0.5, 1.0][rng.gen_range(0..4)];
    let batch = LabeledBatch::new(emb.clone(), labels.clone(), tau).expect("valid batch");
    let (_, grad) = supcon_grad(&batch);
    let flat: Vec<f64> = emb.concat();
    let analytic: Vec<f64> = grad.concat();
    let mut f = |v: &[f64]| {
        let e = v.chunks(d).map(<[f64]>::to_vec).collect();
        supcon_loss(&LabeledBatch::new(e, labels.clone(), tau).expect("valid batch"))
    };
    let num = central_difference(&mut f, &flat, &all(flat.len()), h);
    compare("supcon", &analytic, &num, &all(flat.len()))
}

/// Checks the gradient of the SupCon loss of a small batch with respect to
/// every parameter tensor (a random sample of entries each) and the inputs,
/// through a narrow network of the given variant.
pub fn check_model(variant: Variant, seed: u64, h: f64, per_tensor: usize) -> Result<Vec<GradCheck>, NetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = ModelConfig {
        variant,
        width: 3,
        embedding_dim: 4,
        temperature: 0.5,
    };
    let mut model = build_model(&config, seed)?;
    // zero biases put pre-activations exactly on the ReLU kink wherever the
    // incoming activations are all zero
    for (p, name) in model.parameter_names().to_vec().iter().enumerate() {
        if name.ends_with(".bias") {
            let b = model.parameters_mut()[p].data_mut();
            b.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
        }
    }
    let shape = [1, 7, 8];
    let labels = [0usize, 0, 1, 1];
    let inputs: Vec<Vec<f64>> = labels.iter().map(|_| uniform(&mut rng, 56)).collect();

    let loss_of = |model: &super::Model, inputs: &[Vec<f64>]| -> f64 {
        let emb = inputs
            .iter()
            .map(|x| model.forward(&t(&shape, x.clone())).unwrap().0.vector)
            .collect();
        supcon_loss(&LabeledBatch::new(emb, labels.to_vec(), config.temperature).unwrap())
    };

    let passes: Vec<_> = inputs
        .iter()
        .map(|x| model.forward(&t(&shape, x.clone())))
        .collect::<Result<_, _>>()?;
    let emb = passes.iter().map(|(e, _)| e.vector.clone()).collect();
    let (_, g_emb) = supcon_grad(&LabeledBatch::new(emb, labels.to_vec(), config.temperature).expect("valid"));
    let mut grads = model.zero_gradients();
    let mut input_grads = Vec::new();
    for ((_, tape), g) in passes.iter().zip(&g_emb) {
        input_grads.push(model.backward(tape, g, &mut grads)?);
    }

    let mut out = Vec::new();
    let names = model.parameter_names().to_vec();
    for (p, name) in names.iter().enumerate() {
        let len = model.parameters()[p].len();
        let coords: Vec<usize> = if len <= per_tensor {
            all(len)
        } else {
            (0..per_tensor).map(|_| rng.gen_range(0..len)).collect()
        };
        let base = model.parameters()[p].data().to_vec();
        let mut f = |v: &[f64]| {
            model.parameters_mut()[p].data_mut().copy_from_slice(v);
            loss_of(&model, &inputs)
        };
        let num = kink_aware_difference(&mut f, &base, &coords, h);
        model.parameters_mut()[p].data_mut().copy_from_slice(&base);
        out.push(compare_some(&format!("{variant}/{name}"), &grads.0[p], &num, &coords));
    }
    let coords: Vec<usize> = (0..per_tensor).map(|_| rng.gen_range(0..56)).collect();
    let mut f = |v: &[f64]| {
        let mut xs = inputs.clone();
        xs[0] = v.to_vec();
        loss_of(&model, &xs)
    };
    let num = kink_aware_difference(&mut f, &inputs[0], &coords, h);
    out.push(compare_some(&format!("{variant}/input"), input_grads[0].data(), &num, &coords));
    Ok(out)
}
