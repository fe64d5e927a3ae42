//! Central finite differences, the reference every reverse-mode gradient in
//! this crate is tested against. Only forward evaluations are used here.

use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default step for central differences in double precision.
pub const STEP: f64 = 1e-5;

/// `∂f/∂x` by central differences, one coordinate at a time.
pub fn numeric_gradient(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Central-difference gradient of `f` with respect to parameter `slot`.
pub fn numeric_param_gradient(
    params: &ParamStore,
    slot: usize,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Tensor {
    let mut probe = params.clone();
    let base = params.get_slot(slot).expect("slot in range").clone();
    numeric_gradient(&base, h, |x| {
        *probe.slot_mut(slot) = x.clone();
        f(&probe)
    })
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or the absolute difference norm when both
/// are below `1e-10`.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.sum_sq().sqrt().max(b.sum_sq().sqrt());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
