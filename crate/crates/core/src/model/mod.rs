//! Frozen toy dual-tower encoders and the trainable prompt adapters.
//!
//! The visual tower is a two-layer tanh network over the input vector
//! concatenated with the mean visual prompt token. The text tower embeds a
//! sequence of continuous tokens (context tokens then one class token),
//! mean-pools them and projects to the joint space. Both are frozen after
//! construction. The trainable pieces are the T2V adapter, the V2T adapter and
//! the Compose network with its learnable context tokens.

mod bound;
pub mod checkpoint;

pub use bound::{BoundDense, BoundModel};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::AdamW;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    /// Number of learnable context tokens L.
    pub context_len: usize,
    pub num_visual_prompts: usize,
    pub prompt_dim: usize,
    pub token_dim: usize,
    pub visual_hidden: usize,
    pub text_hidden: usize,
    pub adapter_hidden: usize,
    /// Length of the V2T shift vector.
    pub shift_dim: usize,
    /// Width of the Compose bottleneck.
    pub compose_hidden: usize,
    pub logit_scale: f64,
    pub visual_bias_std: f64,
    pub template_std: f64,
    pub position_std: f64,
    pub class_token_std: f64,
    /// Multiplier on the init scale of the prompt block of the first visual layer.
    pub prompt_gain: f64,
    pub rng_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            embed_dim: 16,
            num_classes: 4,
            context_len: 4,
            num_visual_prompts: 4,
            prompt_dim: 64,
            token_dim: 16,
            visual_hidden: 64,
            text_hidden: 32,
            adapter_hidden: 32,
            shift_dim: 16,
            compose_hidden: 4,
            logit_scale: 100.0,
            visual_bias_std: 0.1,
            template_std: 0.1,
            position_std: 0.05,
            class_token_std: 0.5,
            prompt_gain: 0.2,
            rng_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
            ("context_len", self.context_len),
            ("num_visual_prompts", self.num_visual_prompts),
            ("prompt_dim", self.prompt_dim),
            ("token_dim", self.token_dim),
            ("visual_hidden", self.visual_hidden),
            ("text_hidden", self.text_hidden),
            ("adapter_hidden", self.adapter_hidden),
            ("shift_dim", self.shift_dim),
            ("compose_hidden", self.compose_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be at least 1")));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::config("model.logit_scale must be positive"));
        }
        Ok(())
    }
}

/// Affine layer `x W + b` with `W` stored as `[in, out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn gaussian(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Tensor::randn(&[inp, out], 1.0 / (inp as f64).sqrt(), rng),
            bias: Tensor::zeros(&[out]),
        }
    }

    fn zeros(inp: usize, out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inp, out]),
            bias: Tensor::zeros(&[out]),
        }
    }
}

/// Frozen image tower. The first layer's weight is split into the block that
/// multiplies the input and the block that multiplies the pooled prompt,
/// which is the same map as one matrix over the concatenation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoder {
    pub w_input: Tensor,
    pub w_prompt: Tensor,
    pub bias: Tensor,
    pub w_out: Tensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    /// Token-to-hidden map, `[token_dim, text_hidden]`.
    pub embed: Tensor,
    /// One positional row per slot: `context_len` context slots, then the class slot.
    pub positions: Tensor,
    pub proj: Tensor,
}

/// Fixed text-side token embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    /// Generic template tokens, `[context_len, token_dim]`.
    pub template: Tensor,
    /// One class-name token per class, `[num_classes, token_dim]`.
    pub class_tokens: Tensor,
}

/// Maps the flattened prototype matrix to visual prompt tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T2VAdapter {
    pub hidden: Dense,
    pub out: Dense,
}

/// Maps a unit image embedding to the text shift vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct V2TAdapter {
    pub hidden: Dense,
    pub out: Dense,
}

/// Learnable context tokens plus the bottleneck that turns a text shift into
/// an additive bias on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComposeNet {
    pub context: Tensor,
    pub hidden: Dense,
    pub out: Dense,
}

/// Prototype matrix of the generic template, plus the token sequences it was
/// encoded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticAnchor {
    pub prototypes: Tensor,
    pub template: Tensor,
    pub class_tokens: Tensor,
}

impl SemanticAnchor {
    /// Template token sequence for class `c`: context slots then the class token.
    pub fn tokens(&self, c: usize) -> Tensor {
        let mut data = self.template.data().to_vec();
        data.extend_from_slice(self.class_tokens.row(c));
        let rows = self.template.rows() + 1;
        Tensor::matrix(rows, self.template.cols(), data).expect("template shape")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClbpModel {
    pub config: ModelConfig,
    pub visual: VisualEncoder,
    pub text: TextEncoder,
    pub vocab: Vocabulary,
    pub anchor: SemanticAnchor,
    pub t2v: T2VAdapter,
    pub v2t: V2TAdapter,
    pub compose: ComposeNet,
}

/// Settings for fitting class tokens to image-side class centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroundingConfig {
    pub iterations: usize,
    pub learning_rate: f64,
}

impl Default for GroundingConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.05,
        }
    }
}

impl ClbpModel {
    /// Random frozen encoders, random vocabulary, and adapters whose output
    /// layers start at zero so the first forward pass reproduces the anchor.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.rng_seed);
        let first_std = 1.0 / ((c.input_dim + c.prompt_dim) as f64).sqrt();
        let visual = VisualEncoder {
            w_input: Tensor::randn(&[c.input_dim, c.visual_hidden], first_std, &mut rng),
            w_prompt: Tensor::randn(&[c.prompt_dim, c.visual_hidden], first_std * c.prompt_gain, &mut rng),
            bias: Tensor::randn(&[c.visual_hidden], c.visual_bias_std, &mut rng),
            w_out: Tensor::randn(
                &[c.visual_hidden, c.embed_dim],
                1.0 / (c.visual_hidden as f64).sqrt(),
                &mut rng,
            ),
        };
        let text = TextEncoder {
            embed: Tensor::randn(
                &[c.token_dim, c.text_hidden],
                1.0 / (c.token_dim as f64).sqrt(),
                &mut rng,
            ),
            positions: Tensor::randn(&[c.context_len + 1, c.text_hidden], c.position_std, &mut rng),
            proj: Tensor::randn(
                &[c.text_hidden, c.embed_dim],
                1.0 / (c.text_hidden as f64).sqrt(),
                &mut rng,
            ),
        };
        let vocab = Vocabulary {
            template: Tensor::randn(&[c.context_len, c.token_dim], c.template_std, &mut rng),
            class_tokens: Tensor::randn(&[c.num_classes, c.token_dim], c.class_token_std, &mut rng),
        };
        let t2v = T2VAdapter {
            hidden: Dense::gaussian(c.num_classes * c.embed_dim, c.adapter_hidden, &mut rng),
            out: Dense::zeros(c.adapter_hidden, c.num_visual_prompts * c.prompt_dim),
        };
        let v2t = V2TAdapter {
            hidden: Dense::gaussian(c.embed_dim, c.adapter_hidden, &mut rng),
            out: Dense::gaussian(c.adapter_hidden, c.shift_dim, &mut rng),
        };
        let compose = ComposeNet {
            context: vocab.template.clone(),
            hidden: Dense::gaussian(c.shift_dim, c.compose_hidden, &mut rng),
            out: Dense::zeros(c.compose_hidden, c.context_len * c.token_dim),
        };
        let anchor = bootstrap_anchor(&config, &text, &vocab)?;
        Ok(Self {
            config,
            visual,
            text,
            vocab,
            anchor,
            t2v,
            v2t,
            compose,
        })
    }

    /// Registers every weight on `tape`. With `train` the adapter and context
    /// weights become gradient leaves; encoders and anchor are always constants.
    pub fn bind<'t>(&'t self, tape: &'t Tape, train: bool) -> Result<BoundModel<'t>> {
        BoundModel::new(self, tape, train)
    }

    /// Names of the trainable tensors, in [`ClbpModel::trainable_mut`] order.
    pub fn trainable_names(&self) -> Vec<&'static str> {
        self.trainable().into_iter().map(|(n, _)| n).collect()
    }

    /// Every trainable tensor by name.
    pub fn trainable(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("t2v.hidden.weight", &self.t2v.hidden.weight),
            ("t2v.hidden.bias", &self.t2v.hidden.bias),
            ("t2v.out.weight", &self.t2v.out.weight),
            ("t2v.out.bias", &self.t2v.out.bias),
            ("v2t.hidden.weight", &self.v2t.hidden.weight),
            ("v2t.hidden.bias", &self.v2t.hidden.bias),
            ("v2t.out.weight", &self.v2t.out.weight),
            ("v2t.out.bias", &self.v2t.out.bias),
            ("compose.context", &self.compose.context),
            ("compose.hidden.weight", &self.compose.hidden.weight),
            ("compose.hidden.bias", &self.compose.hidden.bias),
            ("compose.out.weight", &self.compose.out.weight),
            ("compose.out.bias", &self.compose.out.bias),
        ]
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.t2v.hidden.weight,
            &mut self.t2v.hidden.bias,
            &mut self.t2v.out.weight,
            &mut self.t2v.out.bias,
            &mut self.v2t.hidden.weight,
            &mut self.v2t.hidden.bias,
            &mut self.v2t.out.weight,
            &mut self.v2t.out.bias,
            &mut self.compose.context,
            &mut self.compose.hidden.weight,
            &mut self.compose.hidden.bias,
            &mut self.compose.out.weight,
            &mut self.compose.out.bias,
        ]
    }

    /// Frozen tensors (encoders, vocabulary, anchor) by name.
    pub fn frozen(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("visual.w_input", &self.visual.w_input),
            ("visual.w_prompt", &self.visual.w_prompt),
            ("visual.bias", &self.visual.bias),
            ("visual.w_out", &self.visual.w_out),
            ("text.embed", &self.text.embed),
            ("text.positions", &self.text.positions),
            ("text.proj", &self.text.proj),
            ("vocab.template", &self.vocab.template),
            ("vocab.class_tokens", &self.vocab.class_tokens),
            ("anchor.prototypes", &self.anchor.prototypes),
        ]
    }

    /// SHA-256 over the bit patterns of every frozen tensor.
    pub fn frozen_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in self.frozen() {
            hasher.update(name.as_bytes());
            for d in t.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_bits().to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Pulls each class token towards the centroid of its class's zero-prompt
    /// image embeddings, then rebuilds the anchor. This plays the part of the
    /// image-text pretraining a real dual encoder would have had; afterwards
    /// the vocabulary is frozen like the encoders.
    pub fn ground_class_tokens(
        &mut self,
        xs: &[Tensor],
        ys: &[usize],
        cfg: &GroundingConfig,
    ) -> Result<()> {
        let (c, d) = (self.config.num_classes, self.config.embed_dim);
        if xs.len() != ys.len() || xs.is_empty() {
            return Err(Error::config("grounding needs a non-empty labelled set"));
        }
        let mut sums = vec![0.0; c * d];
        for (x, &y) in xs.iter().zip(ys) {
            let z = self.embed_without_prompts(x)?;
            for (s, v) in sums[y * d..(y + 1) * d].iter_mut().zip(z.data()) {
                *s += v;
            }
        }
        let mut targets = Vec::with_capacity(c * d);
        for row in sums.chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::config("a class has no grounding samples"));
            }
            targets.extend(row.iter().map(|v| v / n));
        }
        let targets = Tensor::matrix(c, d, targets)?;

        let mut opt = AdamW::new(&[self.vocab.class_tokens.len()], 0.0);
        for _ in 0..cfg.iterations {
            let tape = Tape::new();
            let bound = self.bind(&tape, false)?;
            let cls = tape.param(self.vocab.class_tokens.clone());
            let ctx = tape.constant(self.vocab.template.clone());
            let w = bound.encode_text_with(ctx, cls)?;
            let t = tape.constant(targets.clone());
            let agreement = tape.sum(tape.mul(w, t)?);
            let loss = tape.scale(agreement, -1.0);
            let grads = tape.backward(loss)?;
            let g = grads.wrt(cls);
            opt.step(&mut [&mut self.vocab.class_tokens], &[g], cfg.learning_rate);
        }
        self.anchor = bootstrap_anchor(&self.config, &self.text, &self.vocab)?;
        Ok(())
    }

    /// `Norm(f_V(x | P = 0))`, the frozen encoder with no prompting.
    pub fn embed_without_prompts(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false)?;
        let xv = tape.constant(x.clone());
        let z = bound.encode_image(xv, bound.zero_prompts())?;
        Ok(tape.value(z))
    }
}

/// Encodes the generic template for every class: row `c` of the result is
/// `Norm(f_T(template, class_c))`.
pub fn bootstrap_anchor(
    config: &ModelConfig,
    text: &TextEncoder,
    vocab: &Vocabulary,
) -> Result<SemanticAnchor> {
    let tape = Tape::new();
    let prototypes = bound::encode_text_frozen(&tape, config, text, vocab)?;
    Ok(SemanticAnchor {
        prototypes,
        template: vocab.template.clone(),
        class_tokens: vocab.class_tokens.clone(),
    })
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_rows_are_unit() {
        let cfg = ModelConfig {
            num_classes: 4,
            embed_dim: 16,
            rng_seed: 7,
            ..ModelConfig::default()
        };
        let m = ClbpModel::new(cfg).unwrap();
        for r in 0..4 {
            let n: f64 = m.anchor.prototypes.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_class_anchor() {
        let cfg = ModelConfig {
            num_classes: 1,
            ..ModelConfig::default()
        };
        let m = ClbpModel::new(cfg).unwrap();
        assert_eq!(m.anchor.prototypes.shape(), &[1, 16]);
        assert!((m.anchor.prototypes.norm_l2() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distinct_class_tokens_give_distinct_rows() {
        let m = ClbpModel::new(ModelConfig::default()).unwrap();
        let p = &m.anchor.prototypes;
        for i in 0..4 {
            for j in i + 1..4 {
                let d: f64 = p
                    .row(i)
                    .iter()
                    .zip(p.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                assert!(d > 1e-6, "rows {i} and {j} collide");
            }
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            context_len: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(ClbpModel::new(cfg), Err(Error::Config(_))));
        let cfg = ModelConfig {
            logit_scale: 0.0,
            ..ModelConfig::default()
        };
        assert!(ClbpModel::new(cfg).is_err());
    }

    #[test]
    fn checksum_tracks_frozen_weights_only() {
        let mut m = ClbpModel::new(ModelConfig::default()).unwrap();
        let before = m.frozen_checksum();
        m.t2v.out.bias.data_mut()[0] = 1.0;
        assert_eq!(m.frozen_checksum(), before);
        let v = &mut m.visual.bias.data_mut()[0];
        *v = f64::from_bits(v.to_bits() + 1);
        assert_ne!(m.frozen_checksum(), before);
    }
}
