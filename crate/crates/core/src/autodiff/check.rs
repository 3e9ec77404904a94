use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Central finite-difference check of reverse-mode gradients.
///
/// Returns `max_i |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)` over every
/// coordinate of every input. Non-finite values anywhere report `f64::INFINITY`.
pub fn gradient_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(v, x)| grads.wrt(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for (n, ga) in analytic.iter().enumerate() {
        for i in 0..ga.len() {
            let orig = inputs[n].data()[i];
            inputs[n].data_mut()[i] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[n].data_mut()[i] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[n].data_mut()[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = ga.data()[i];
            if !fd.is_finite() || !ad.is_finite() {
                return Ok(f64::INFINITY);
            }
            worst = worst.max((ad - fd).abs() / (ad.abs() + fd.abs() + 1e-12));
        }
    }
    Ok(worst)
}

/// Single-input form of [`gradient_check_many`].
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}
