use serde::{Deserialize, Serialize};

use crate::closed_loop::{self, LoopConfig};
use crate::error::{Error, Result};
use crate::model::ClbpModel;
use crate::tensor::{Tape, Tensor, TensorError};

/// Column-centred copy of an `n x d` matrix as row-major data.
fn centred(x: &Tensor) -> Vec<f64> {
    let (n, d) = (x.rows(), x.cols());
    let mut out = x.data().to_vec();
    for j in 0..d {
        let mean = (0..n).map(|i| out[i * d + j]).sum::<f64>() / n as f64;
        (0..n).for_each(|i| out[i * d + j] -= mean);
    }
    out
}

/// `||A^T B||_F^2` for row-major `n x da` and `n x db`.
fn cross_frobenius_sq(a: &[f64], da: usize, b: &[f64], db: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for p in 0..da {
        for q in 0..db {
            let s: f64 = (0..n).map(|i| a[i * da + p] * b[i * db + q]).sum();
            total += s * s;
        }
    }
    total
}

/// Linear CKA between two feature matrices with the same number of rows.
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.ndim() != 2 || y.ndim() != 2 || x.rows() != y.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "linear_cka",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        }
        .into());
    }
    let n = x.rows();
    if n < 2 {
        return Err(Error::config("linear_cka needs at least two samples"));
    }
    let (dx, dy) = (x.cols(), y.cols());
    let (xc, yc) = (centred(x), centred(y));
    let xx = cross_frobenius_sq(&xc, dx, &xc, dx, n).sqrt();
    let yy = cross_frobenius_sq(&yc, dy, &yc, dy, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(TensorError::Degenerate {
            op: "linear_cka",
            reason: "zero-variance features".into(),
        }
        .into());
    }
    let xy = if dx <= dy {
        cross_frobenius_sq(&xc, dx, &yc, dy, n)
    } else {
        cross_frobenius_sq(&yc, dy, &xc, dx, n)
    };
    Ok((xy / (xx * yy)).clamp(0.0, 1.0))
}

/// Hidden and output activations of the image tower, conditioned on the
/// prompts the loop ends with, one row per input.
pub fn visual_layers(model: &ClbpModel, xs: &[Tensor], loop_cfg: &LoopConfig) -> Result<Vec<(&'static str, Tensor)>> {
    let mut hidden = Vec::with_capacity(xs.len());
    let mut output = Vec::with_capacity(xs.len());
    for x in xs {
        let out = closed_loop::run_closed_loop(model, x, loop_cfg)?;
        let tape = Tape::new();
        let bound = model.bind(&tape, false)?;
        let w = tape.constant(out.w);
        let bias = bound.prompt_bias(bound.t2v(w)?)?;
        let h = bound.image_hidden(tape.constant(x.clone()), bias)?;
        hidden.push(tape.value(h).into_data());
        output.push(out.z.into_data());
    }
    Ok(vec![
        ("visual_hidden", Tensor::from_rows(&hidden)?),
        ("visual_output", Tensor::from_rows(&output)?),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCka {
    pub layer: String,
    pub cka: f64,
}

/// CKA between two models' image-tower layers on the same inputs, e.g.
/// before and after training.
pub fn layerwise_cka(
    before: &ClbpModel,
    after: &ClbpModel,
    xs: &[Tensor],
    loop_cfg: &LoopConfig,
) -> Result<Vec<LayerCka>> {
    let a = visual_layers(before, xs, loop_cfg)?;
    let b = visual_layers(after, xs, loop_cfg)?;
    a.iter()
        .zip(&b)
        .map(|((name, fa), (_, fb))| {
            Ok(LayerCka {
                layer: name.to_string(),
                cka: linear_cka(fa, fb)?,
            })
        })
        .collect()
}
