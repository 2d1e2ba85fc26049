//! Anchor-initialised closed-loop inference.
//!
//! Starting from the anchor prototypes `W0`, one loop round maps the current
//! embedding through V2T and Compose to new prototypes, then through T2V back
//! to the image tower:
//!
//! ```text
//! z0 = H_x(W0);   W_{k+1} = G(z_k);   z_{k+1} = H_x(W_{k+1});   logits = s * z_N W_N^T
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundModel, ClbpModel};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    /// Number of loop rounds N; 0 predicts from the anchor directly.
    pub depth: usize,
    pub record_trajectory: bool,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub k: usize,
    pub w: Tensor,
    pub prompts: Tensor,
    pub z: Tensor,
    pub logits: Tensor,
}

/// Loop outputs as tape variables.
#[derive(Debug, Clone)]
pub struct LoopVars {
    pub z: Var,
    pub w: Var,
    pub logits: Var,
    pub trajectory: Vec<LoopState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutput {
    pub z: Tensor,
    pub w: Tensor,
    pub logits: Tensor,
    pub trajectory: Option<Vec<LoopState>>,
}

fn check(tape: &Tape, v: Var, iteration: usize, stage: &'static str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::LoopNumeric { iteration, stage })
    }
}

fn numeric(iteration: usize, stage: &'static str) -> impl Fn(crate::tensor::TensorError) -> Error {
    move |e| match e {
        crate::tensor::TensorError::NonFinite { .. } | crate::tensor::TensorError::Degenerate { .. } => {
            Error::LoopNumeric { iteration, stage }
        }
        other => Error::Tensor(other),
    }
}

/// Runs the loop on a tape. `initial_bias` may carry a precomputed
/// `prompt_bias(T2V(W0))`, which is the same for every input.
pub fn run_on(
    bound: &BoundModel<'_>,
    x: Var,
    initial_bias: Option<Var>,
    cfg: &LoopConfig,
) -> Result<LoopVars> {
    let t = bound.tape;
    let record = cfg.record_trajectory;
    let mut trajectory = Vec::new();

    let mut w = bound.anchor;
    let (bias0, p0) = match initial_bias {
        Some(b) => (b, None),
        None => {
            let p0 = bound.t2v(w).map_err(numeric(0, "t2v"))?;
            (bound.prompt_bias(p0).map_err(numeric(0, "t2v"))?, Some(p0))
        }
    };
    let mut z = bound.encode_image_biased(x, bias0).map_err(numeric(0, "encode_image"))?;
    check(t, z, 0, "encode_image")?;
    if record {
        let p0 = match p0 {
            Some(p) => p,
            None => bound.t2v(w)?,
        };
        let logits = bound.logits(z, w)?;
        trajectory.push(LoopState {
            k: 0,
            w: t.value(w),
            prompts: t.value(p0),
            z: t.value(z),
            logits: t.value(logits),
        });
    }
    for k in 1..=cfg.depth {
        w = bound.g_map(z).map_err(numeric(k, "g_map"))?;
        check(t, w, k, "g_map")?;
        let prompts = bound.t2v(w).map_err(numeric(k, "t2v"))?;
        z = bound.encode_image(x, prompts).map_err(numeric(k, "encode_image"))?;
        check(t, z, k, "encode_image")?;
        if record {
            let logits = bound.logits(z, w)?;
            trajectory.push(LoopState {
                k,
                w: t.value(w),
                prompts: t.value(prompts),
                z: t.value(z),
                logits: t.value(logits),
            });
        }
    }
    let logits = bound.logits(z, w)?;
    Ok(LoopVars {
        z,
        w,
        logits,
        trajectory,
    })
}

/// Value-level loop inference for one input.
pub fn run_closed_loop(model: &ClbpModel, x: &Tensor, cfg: &LoopConfig) -> Result<LoopOutput> {
    if !x.is_finite() {
        return Err(Error::LoopNumeric {
            iteration: 0,
            stage: "input",
        });
    }
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let xv = tape.constant(x.clone());
    let out = run_on(&bound, xv, None, cfg)?;
    Ok(LoopOutput {
        z: tape.value(out.z),
        w: tape.value(out.w),
        logits: tape.value(out.logits),
        trajectory: cfg.record_trajectory.then_some(out.trajectory),
    })
}

/// `G(z)` as a value.
pub fn apply_g(model: &ClbpModel, z: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let zv = tape.constant(z.clone());
    Ok(tape.value(bound.g_map(zv)?))
}

/// `H_x(W)` as a value.
pub fn apply_h(model: &ClbpModel, x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    Ok(tape.value(bound.h_map(xv, wv)?))
}

/// Result of iterating `T_x` to numerical convergence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    /// Last iterate, used as the empirical fixed point.
    pub z_star: Tensor,
    /// Number of loop rounds applied.
    pub iterations: usize,
    pub converged: bool,
    /// `||z_{k+1} - z_k||` for each round.
    pub residuals: Vec<f64>,
    /// Iterates `z_0, z_1, ...`.
    pub zs: Vec<Tensor>,
    /// Prototype matrices `W_0, W_1, ...` matching `zs`.
    pub ws: Vec<Tensor>,
}

impl FixedPoint {
    /// `d_k = ||z_k - z*||` for every recorded iterate.
    pub fn distances(&self) -> Vec<f64> {
        self.zs.iter().map(|z| z.distance(&self.z_star)).collect()
    }

    /// Final residual, or infinity when no round ran.
    pub fn residual(&self) -> f64 {
        self.residuals.last().copied().unwrap_or(f64::INFINITY)
    }
}

pub const FIXED_POINT_TOL: f64 = 1e-10;
pub const FIXED_POINT_MAX_ITER: usize = 50;

/// Iterates the loop from the anchor until the residual drops below `tol`
/// or `max_iter` rounds have run. Non-convergence is reported, not an error.
pub fn fixed_point(model: &ClbpModel, x: &Tensor, max_iter: usize, tol: f64) -> Result<FixedPoint> {
    if max_iter == 0 || !(tol > 0.0) {
        return Err(Error::config("fixed_point needs max_iter >= 1 and tol > 0"));
    }
    let tape = Tape::new();
    let bound = model.bind(&tape, false)?;
    let xv = tape.constant(x.clone());
    let mut w = bound.anchor;
    let mut z = bound.h_map(xv, w).map_err(numeric(0, "encode_image"))?;
    let mut zs = vec![tape.value(z)];
    let mut ws = vec![tape.value(w)];
    let mut residuals = Vec::new();
    let mut converged = false;
    for k in 1..=max_iter {
        w = bound.g_map(z).map_err(numeric(k, "g_map"))?;
        z = bound.h_map(xv, w).map_err(numeric(k, "encode_image"))?;
        let zval = tape.value(z);
        let r = zval.distance(zs.last().expect("non-empty"));
        if !r.is_finite() {
            return Err(Error::LoopNumeric {
                iteration: k,
                stage: "residual",
            });
        }
        residuals.push(r);
        zs.push(zval);
        ws.push(tape.value(w));
        if r < tol {
            converged = true;
            break;
        }
    }
    Ok(FixedPoint {
        z_star: zs.last().expect("non-empty").clone(),
        iterations: residuals.len(),
        converged,
        residuals,
        zs,
        ws,
    })
}
