//! Central finite differences, used as an independent oracle for the
//! reverse pass. Only forward evaluations are involved here.

use rand::Rng;

use super::params::ParamStore;
use super::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `loss` w.r.t. element `idx` of parameter `id`.
pub fn central_difference(
    store: &ParamStore,
    id: usize,
    idx: usize,
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut s = store.clone();
    let base = s.entry(id).value.data()[idx];
    s.entry_mut(id).value.data_mut()[idx] = base + h;
    let up = loss(&s);
    s.entry_mut(id).value.data_mut()[idx] = base - h;
    let down = loss(&s);
    (up - down) / (2.0 * h)
}

/// Central difference along a unit direction spanning a whole parameter
/// tensor. Returns `(numeric, direction)`.
pub fn directional_difference(
    store: &ParamStore,
    id: usize,
    h: f64,
    rng: &mut impl Rng,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> (f64, Tensor<f64>) {
    let shape = store.entry(id).value.shape().to_vec();
    let n: usize = shape.iter().product();
    let mut dir: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for d in &mut dir {
        *d /= norm;
    }
    let mut s = store.clone();
    let base = s.entry(id).value.clone();
    let shifted = |sign: f64| {
        let mut t = base.clone();
        for (x, d) in t.data_mut().iter_mut().zip(&dir) {
            *x += sign * h * d;
        }
        t
    };
    s.entry_mut(id).value = shifted(1.0);
    let up = loss(&s);
    s.entry_mut(id).value = shifted(-1.0);
    let down = loss(&s);
    (
        (up - down) / (2.0 * h),
        Tensor::new(shape, dir).expect("shape"),
    )
}

/// Dot product of two same-shaped tensors.
pub fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}
