#![allow(dead_code)]

pub mod exact;
pub mod gradsuite;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sidmlp::{ParamStore, Tensor};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data)
}

/// Largest relative gap between an analytic and a numeric derivative,
/// with the entry it was found at.
#[derive(Clone, Debug)]
pub struct GradGap {
    pub rel: f64,
    pub at: String,
    pub checked: usize,
}

/// Compares analytic gradients with central differences on a few entries
/// of every parameter. `loss` evaluates the model held in `store`; `grad`
/// returns the analytic gradient of parameter `name` (None if unreached).
pub fn gradient_gap<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
    grad: impl Fn(&str) -> Option<Vec<f64>>,
    samples: usize,
) -> GradGap {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst = GradGap { rel: 0.0, at: String::new(), checked: 0 };
    let ids: Vec<_> = store(model).ids().collect();
    for id in ids {
        let store_ref = store(model);
        let name = store_ref.name(id).to_string();
        let g = grad(&name).unwrap_or_else(|| vec![0.0; store_ref.get(id).numel()]);
        let base = store_ref.get(id).clone();
        let n = base.numel();
        for _ in 0..samples.min(n) {
            let j = rng.gen_range(0..n);
            let h = 1e-5 * base.data()[j].abs().max(1.0);
            let mut plus = base.to_vec();
            plus[j] += h;
            store(model).set(id, Tensor::new(base.shape().to_vec(), plus).unwrap());
            let lp = loss(model);
            let mut minus = base.to_vec();
            minus[j] -= h;
            store(model).set(id, Tensor::new(base.shape().to_vec(), minus).unwrap());
            let lm = loss(model);
            store(model).set(id, base.clone());
            let fd = (lp - lm) / (2.0 * h);
            let an = g[j];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            worst.checked += 1;
            if rel > worst.rel || !rel.is_finite() {
                worst.rel = rel;
                worst.at = format!("{name}[{j}]: analytic {an}, numeric {fd}");
            }
        }
    }
    worst
}

pub fn check_gradients<M>(
    model: &mut M,
    store: fn(&mut M) -> &mut ParamStore,
    loss: impl Fn(&M) -> f64,
    grad: impl Fn(&str) -> Option<Vec<f64>>,
    samples: usize,
    tol: f64,
) {
    let gap = gradient_gap(model, store, loss, grad, samples);
    assert!(gap.checked > 0, "no entries checked");
    assert!(gap.rel <= tol, "{}", gap.at);
}
