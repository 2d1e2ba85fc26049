use crate::error::Result;
use crate::tensor::{Tape, Tensor, TensorResult, Var};

use super::{ClbpModel, Dense, ModelConfig, TextEncoder, Vocabulary};

#[derive(Debug, Clone, Copy)]
pub struct BoundDense {
    pub weight: Var,
    pub bias: Var,
}

impl BoundDense {
    fn bind(tape: &Tape, dense: &Dense, train: bool) -> Self {
        Self {
            weight: tape.leaf(dense.weight.clone(), train),
            bias: tape.leaf(dense.bias.clone(), train),
        }
    }

    /// `x W + b` for a vector or a batch of rows.
    pub fn forward(&self, tape: &Tape, x: Var) -> TensorResult<Var> {
        let h = tape.matmul(x, self.weight)?;
        tape.add_row(h, self.bias)
    }
}

/// A model whose weights live on one tape.
pub struct BoundModel<'t> {
    pub tape: &'t Tape,
    pub config: &'t ModelConfig,
    w_input: Var,
    w_prompt: Var,
    visual_bias: Var,
    w_out: Var,
    text: TextVars,
    pub class_tokens: Var,
    /// The fixed prototype matrix the loop starts from.
    pub anchor: Var,
    pub t2v_hidden: BoundDense,
    pub t2v_out: BoundDense,
    pub v2t_hidden: BoundDense,
    pub v2t_out: BoundDense,
    pub context: Var,
    pub compose_hidden: BoundDense,
    pub compose_out: BoundDense,
}

#[derive(Debug, Clone, Copy)]
struct TextVars {
    embed: Var,
    pos_context: Var,
    pos_class: Var,
    proj: Var,
    context_len: usize,
}

impl TextVars {
    fn bind(tape: &Tape, text: &TextEncoder, context_len: usize) -> Self {
        let cols = text.positions.cols();
        let data = text.positions.data();
        let ctx = Tensor::matrix(context_len, cols, data[..context_len * cols].to_vec())
            .expect("positions shape");
        let cls = Tensor::vector(data[context_len * cols..].to_vec());
        Self {
            embed: tape.constant(text.embed.clone()),
            pos_context: tape.constant(ctx),
            pos_class: tape.constant(cls),
            proj: tape.constant(text.proj.clone()),
            context_len,
        }
    }

    /// Each class's sequence is the shared context followed by its class
    /// token; per-token features are mean-pooled, projected and normalized.
    fn encode(&self, t: &Tape, ctx: Var, class_tokens: Var) -> TensorResult<Var> {
        let ctx_h = t.tanh(t.add(t.matmul(ctx, self.embed)?, self.pos_context)?);
        let ctx_sum = t.sum_axis(ctx_h, 0)?;
        let cls_h = t.tanh(t.add_row(t.matmul(class_tokens, self.embed)?, self.pos_class)?);
        let pooled = t.scale(t.add_row(cls_h, ctx_sum)?, 1.0 / (self.context_len + 1) as f64);
        t.l2_normalize(t.matmul(pooled, self.proj)?)
    }
}

impl<'t> BoundModel<'t> {
    pub(super) fn new(model: &'t ClbpModel, tape: &'t Tape, train: bool) -> Result<Self> {
        Ok(Self {
            tape,
            config: &model.config,
            w_input: tape.constant(model.visual.w_input.clone()),
            w_prompt: tape.constant(model.visual.w_prompt.clone()),
            visual_bias: tape.constant(model.visual.bias.clone()),
            w_out: tape.constant(model.visual.w_out.clone()),
            text: TextVars::bind(tape, &model.text, model.config.context_len),
            class_tokens: tape.constant(model.vocab.class_tokens.clone()),
            anchor: tape.constant(model.anchor.prototypes.clone()),
            t2v_hidden: BoundDense::bind(tape, &model.t2v.hidden, train),
            t2v_out: BoundDense::bind(tape, &model.t2v.out, train),
            v2t_hidden: BoundDense::bind(tape, &model.v2t.hidden, train),
            v2t_out: BoundDense::bind(tape, &model.v2t.out, train),
            context: tape.leaf(model.compose.context.clone(), train),
            compose_hidden: BoundDense::bind(tape, &model.compose.hidden, train),
            compose_out: BoundDense::bind(tape, &model.compose.out, train),
        })
    }

    /// Trainable leaves in [`ClbpModel::trainable_mut`] order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        vec![
            self.t2v_hidden.weight,
            self.t2v_hidden.bias,
            self.t2v_out.weight,
            self.t2v_out.bias,
            self.v2t_hidden.weight,
            self.v2t_hidden.bias,
            self.v2t_out.weight,
            self.v2t_out.bias,
            self.context,
            self.compose_hidden.weight,
            self.compose_hidden.bias,
            self.compose_out.weight,
            self.compose_out.bias,
        ]
    }

    /// All-zero prompt tokens.
    pub fn zero_prompts(&self) -> Var {
        let c = self.config;
        self.tape
            .constant(Tensor::zeros(&[c.num_visual_prompts, c.prompt_dim]))
    }

    /// First-layer contribution of the prompt tokens: `mean(P) W_p + b`.
    /// It depends only on the prompts, so views that share prompts can share it.
    pub fn prompt_bias(&self, prompts: Var) -> TensorResult<Var> {
        let t = self.tape;
        let pooled = t.mean_axis(prompts, 0)?;
        let h = t.matmul(pooled, self.w_prompt)?;
        t.add(h, self.visual_bias)
    }

    /// Hidden layer of the image tower.
    pub fn image_hidden(&self, x: Var, prompt_bias: Var) -> TensorResult<Var> {
        let t = self.tape;
        let pre = t.add(t.matmul(x, self.w_input)?, prompt_bias)?;
        Ok(t.tanh(pre))
    }

    /// `Norm(f_V(x | P))` given a precomputed [`BoundModel::prompt_bias`].
    pub fn encode_image_biased(&self, x: Var, prompt_bias: Var) -> TensorResult<Var> {
        let t = self.tape;
        let feat = t.matmul(self.image_hidden(x, prompt_bias)?, self.w_out)?;
        t.l2_normalize(feat)
    }

    /// `Norm(f_V(x | P))` for input `x` and prompt tokens `P`.
    pub fn encode_image(&self, x: Var, prompts: Var) -> TensorResult<Var> {
        let bias = self.prompt_bias(prompts)?;
        self.encode_image_biased(x, bias)
    }

    /// Row-normalized prototypes for context tokens `ctx` and the model's
    /// class tokens.
    pub fn encode_text(&self, ctx: Var) -> TensorResult<Var> {
        self.encode_text_with(ctx, self.class_tokens)
    }

    /// Prototype matrix from explicit context and class tokens.
    pub fn encode_text_with(&self, ctx: Var, class_tokens: Var) -> TensorResult<Var> {
        self.text.encode(self.tape, ctx, class_tokens)
    }

    /// Visual prompt tokens `[num_visual_prompts, prompt_dim]` from a prototype matrix.
    pub fn t2v(&self, w: Var) -> TensorResult<Var> {
        let t = self.tape;
        let c = self.config;
        let flat = t.reshape(w, &[c.num_classes * c.embed_dim])?;
        let h = t.tanh(self.t2v_hidden.forward(t, flat)?);
        let p = self.t2v_out.forward(t, h)?;
        t.reshape(p, &[c.num_visual_prompts, c.prompt_dim])
    }

    /// Text shift vector from a unit image embedding.
    pub fn v2t(&self, z: Var) -> TensorResult<Var> {
        let t = self.tape;
        let h = t.tanh(self.v2t_hidden.forward(t, z)?);
        self.v2t_out.forward(t, h)
    }

    /// Additive context-token bias `[context_len, token_dim]` from a shift.
    pub fn compose_bias(&self, shift: Var) -> TensorResult<Var> {
        let t = self.tape;
        let c = self.config;
        let h = t.tanh(self.compose_hidden.forward(t, shift)?);
        let b = self.compose_out.forward(t, h)?;
        t.reshape(b, &[c.context_len, c.token_dim])
    }

    /// Shifted context tokens: learnable context plus the bias from `shift`.
    pub fn compose(&self, shift: Var) -> TensorResult<Var> {
        let bias = self.compose_bias(shift)?;
        self.tape.add(self.context, bias)
    }

    /// Full token sequence for class `c` after composing: the shifted
    /// context rows followed by the unmodified class token.
    pub fn compose_sequence(&self, ctx: Var, class: usize) -> TensorResult<Var> {
        let t = self.tape;
        let cls = t.slice_rows(self.class_tokens, class, class + 1)?;
        t.concat(&[ctx, cls], 0)
    }

    /// `G(z) = Norm(f_T(Compose(t0, V2T(z))))`.
    pub fn g_map(&self, z: Var) -> TensorResult<Var> {
        let shift = self.v2t(z)?;
        let ctx = self.compose(shift)?;
        self.encode_text(ctx)
    }

    /// `H_x(W) = Norm(f_V(x | T2V(W)))`.
    pub fn h_map(&self, x: Var, w: Var) -> TensorResult<Var> {
        let prompts = self.t2v(w)?;
        self.encode_image(x, prompts)
    }

    /// `s * W z`, cosine logits for a unit embedding.
    pub fn logits(&self, z: Var, w: Var) -> TensorResult<Var> {
        let t = self.tape;
        let wt = t.transpose(w)?;
        Ok(t.scale(t.matmul(z, wt)?, self.config.logit_scale))
    }
}

/// Prototypes of the template sequences under frozen encoders, as a value.
pub(super) fn encode_text_frozen(
    tape: &Tape,
    config: &ModelConfig,
    text: &TextEncoder,
    vocab: &Vocabulary,
) -> Result<Tensor> {
    let vars = TextVars::bind(tape, text, config.context_len);
    let ctx = tape.constant(vocab.template.clone());
    let cls = tape.constant(vocab.class_tokens.clone());
    let w = vars.encode(tape, ctx, cls)?;
    Ok(tape.value(w))
}
