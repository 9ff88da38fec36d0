//! Minimal reverse-mode automatic differentiation, MLP building blocks and
//! first-order optimizers over flat named parameter arrays.

pub mod mlp;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use mlp::{Activation, Mlp, MlpSpec, OutputTransform, STD_FLOOR};
pub use optim::{sgd_step, Optimizer, OptimizerConfig};
pub use params::{Gradients, ParamEntry, ParamStore};
pub use tape::{Adjoints, Tape, Unary, Var};
pub use tensor::Tensor;

/// Relative error with an absolute floor on the denominator so that
/// coordinates whose true gradient is ~0 are judged on absolute error.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Central finite-difference gradient of `f` with respect to every flat
/// parameter coordinate of `store`.
pub fn finite_difference<F>(store: &ParamStore, step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&ParamStore) -> f64,
{
    let base = store.flat();
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(base.len());
    for (i, &x) in base.iter().enumerate() {
        probe.set_flat(i, x + step);
        let up = f(&probe);
        probe.set_flat(i, x - step);
        let down = f(&probe);
        probe.set_flat(i, x);
        out.push((up - down) / (2.0 * step));
    }
    out
}
