//! Differentiable end-to-end classifiers that attacks and evaluation run on.

use crate::aggregate::{self, AggregationConfig, AggregationVars};
use crate::closed_loop::{self, LoopConfig};
use crate::error::Result;
use crate::model::{BoundModel, ClbpModel};
use crate::tensor::{Tape, Tensor, Var};

/// An input-to-logits map that can be recorded on a tape.
///
/// `view_seed` selects the randomness of stochastic pipelines; deterministic
/// ones ignore it.
pub trait Pipeline: Sync {
    fn num_classes(&self) -> usize;

    fn is_stochastic(&self) -> bool;

    fn logits_on(&self, tape: &Tape, x: Var, view_seed: u64) -> Result<Var>;

    fn logits(&self, x: &Tensor, view_seed: u64) -> Result<Tensor> {
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.logits_on(&tape, xv, view_seed)?;
        Ok(tape.value(out))
    }

    fn predict(&self, x: &Tensor, view_seed: u64) -> Result<usize> {
        Ok(self.logits(x, view_seed)?.argmax())
    }

    /// The unaugmented image embedding and the prototype matrix it is
    /// scored against.
    fn features(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;
}

/// All intermediate variables of one CLBP forward pass.
#[derive(Debug, Clone)]
pub struct ClbpForward {
    pub logits: Var,
    pub view_logits: Vec<Var>,
    pub view_embeddings: Vec<Var>,
    pub aggregation: AggregationVars,
}

/// Views, closed loop on each view, similarity-weighted aggregation.
#[derive(Debug, Clone)]
pub struct ClbpPipeline<'m> {
    pub model: &'m ClbpModel,
    pub loop_cfg: LoopConfig,
    pub aggregation: AggregationConfig,
}

impl<'m> ClbpPipeline<'m> {
    pub fn new(model: &'m ClbpModel, loop_cfg: LoopConfig, aggregation: AggregationConfig) -> Self {
        Self {
            model,
            loop_cfg,
            aggregation,
        }
    }

    /// Forward pass against an already bound model, so training can use
    /// trainable leaves and attacks constant ones.
    pub fn forward(&self, bound: &BoundModel<'_>, x: Var, view_seed: u64) -> Result<ClbpForward> {
        let tape = bound.tape;
        let augs = aggregate::sample_augmentations(
            self.model.config.input_dim,
            &self.aggregation,
            view_seed,
        );
        let p0 = bound.t2v(bound.anchor)?;
        let bias0 = bound.prompt_bias(p0)?;
        let mut per_view = Vec::with_capacity(augs.len());
        for aug in &augs {
            let xv = aug.apply_on(tape, x)?;
            let out = closed_loop::run_on(bound, xv, Some(bias0), &self.loop_cfg)?;
            per_view.push((out.logits, out.z));
        }
        let aggregation = aggregate::aggregate_on(tape, &per_view, &self.aggregation)?;
        Ok(ClbpForward {
            logits: aggregation.logits,
            view_logits: per_view.iter().map(|p| p.0).collect(),
            view_embeddings: per_view.iter().map(|p| p.1).collect(),
            aggregation,
        })
    }
}

impl Pipeline for ClbpPipeline<'_> {
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn is_stochastic(&self) -> bool {
        self.aggregation.num_views > 1
    }

    fn logits_on(&self, tape: &Tape, x: Var, view_seed: u64) -> Result<Var> {
        let bound = self.model.bind(tape, false)?;
        Ok(self.forward(&bound, x, view_seed)?.logits)
    }

    fn features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let out = closed_loop::run_closed_loop(self.model, x, &self.loop_cfg)?;
        Ok((out.z, out.w))
    }
}

/// The frozen zero-shot classifier: unprompted image embedding against the
/// anchor prototypes, one view, no loop.
#[derive(Debug, Clone, Copy)]
pub struct AnchorOnly<'m> {
    pub model: &'m ClbpModel,
}

impl<'m> AnchorOnly<'m> {
    pub fn new(model: &'m ClbpModel) -> Self {
        Self { model }
    }

    pub fn embed_on(&self, bound: &BoundModel<'_>, x: Var) -> Result<Var> {
        Ok(bound.encode_image(x, bound.zero_prompts())?)
    }
}

impl Pipeline for AnchorOnly<'_> {
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn logits_on(&self, tape: &Tape, x: Var, _view_seed: u64) -> Result<Var> {
        let bound = self.model.bind(tape, false)?;
        let z = self.embed_on(&bound, x)?;
        Ok(bound.logits(z, bound.anchor)?)
    }

    fn features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let z = self.model.embed_without_prompts(x)?;
        Ok((z, self.model.anchor.prototypes.clone()))
    }
}
