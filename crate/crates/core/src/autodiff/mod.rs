//! Dense reverse-mode differentiation over row-major `f64` matrices.

pub mod checkpoint;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::Adam;
pub use tape::{Axis, Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::Result;

/// Largest relative error between tape gradients and central differences.
///
/// `f` must build a scalar loss from the given leaves on a fresh tape. The
/// relative error of each entry is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check<F>(inputs: &[Tensor], h: f64, floor: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let l: Vec<Var> = values.iter().map(|v| t.leaf(v.clone())).collect();
        let out = f(&mut t, &l)?;
        Ok(t.value(out).item())
    };

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(*leaf);
        for j in 0..inputs[i].len() {
            let x = inputs[i].data()[j];
            work[i].data_mut()[j] = x + h;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x - h;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
