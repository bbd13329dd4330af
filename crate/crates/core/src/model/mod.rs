//! The detection/classification model: tubelet tokenizer, joint
//! spatio-temporal transformer encoder, and one head per dataset (linear
//! classifier over mean-pooled tokens, or ROI-Align + linear projection for
//! detection). Forward passes record the activations needed for the
//! hand-written backward pass.

mod checkpoint;
mod encoder;
mod heads;
pub mod ops;
mod roi;
mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use encoder::{encode, encode_with_cache, EncodeMode, LayerCache};
pub use heads::{classify_head, detect_head};
pub use roi::roi_align;
pub use tokenizer::tokenize;

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BoxCoords, TaskKind, VideoClip};
use crate::error::{Error, Result};
use crate::rng::{derive_rng, trunc_normal};
use crate::scalar::Float;

/// Head declaration: one per co-finetuning dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub task: TaskKind,
    pub num_classes: usize,
}

/// Model architecture configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input clip shape (T, H, W, C).
    pub input_t: usize,
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    /// Tubelet size (t, h, w); each tubelet becomes one token.
    pub tubelet: (usize, usize, usize),
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub stochastic_depth_rate: f64,
    /// ROI-Align bin grid (s_h, s_w).
    pub roi_grid: (usize, usize),
    pub heads: Vec<HeadSpec>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let (tp, hp, wp) = self.tubelet;
        if tp == 0 || hp == 0 || wp == 0 {
            return Err(Error::Config("tubelet dims must be positive".into()));
        }
        if self.input_t % tp != 0 || self.input_h % hp != 0 || self.input_w % wp != 0 {
            return Err(Error::Shape(format!(
                "input {}x{}x{} not divisible by tubelet {}x{}x{}",
                self.input_t, self.input_h, self.input_w, tp, hp, wp
            )));
        }
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.stochastic_depth_rate) {
            return Err(Error::Config("stochastic_depth_rate must be in [0, 1)".into()));
        }
        if self.roi_grid.0 == 0 || self.roi_grid.1 == 0 {
            return Err(Error::Config("roi_grid dims must be positive".into()));
        }
        if self.heads.is_empty() {
            return Err(Error::Config("at least one head is required".into()));
        }
        if self.heads.iter().any(|h| h.num_classes == 0) {
            return Err(Error::Config("head num_classes must be positive".into()));
        }
        Ok(())
    }

    /// Token grid dims (t, h, w) after tokenization.
    pub fn grid_dims(&self) -> (usize, usize, usize) {
        (
            self.input_t / self.tubelet.0,
            self.input_h / self.tubelet.1,
            self.input_w / self.tubelet.2,
        )
    }

    pub fn num_tokens(&self) -> usize {
        let (t, h, w) = self.grid_dims();
        t * h * w
    }

    /// Flattened tubelet size: the tokenizer projection input width.
    pub fn patch_dim(&self) -> usize {
        self.tubelet.0 * self.tubelet.1 * self.tubelet.2 * self.input_c
    }
}

/// Encoded token grid of shape t x h x w x d, stored as (t*h*w) x d rows in
/// (t, h, w) row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<F> {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub tokens: Array2<F>,
}

impl<F: Float> TokenGrid<F> {
    pub fn new(t: usize, h: usize, w: usize, tokens: Array2<F>) -> Result<Self> {
        if tokens.nrows() != t * h * w {
            return Err(Error::Shape(format!(
                "token grid {}x{}x{} expects {} rows, found {}",
                t,
                h,
                w,
                t * h * w,
                tokens.nrows()
            )));
        }
        Ok(TokenGrid { t, h, w, tokens })
    }

    pub fn num_tokens(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }

    pub fn row_index(&self, tau: usize, y: usize, x: usize) -> usize {
        (tau * self.h + y) * self.w + x
    }
}

/// Parameters of one encoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gamma: Array1<F>,
    pub ln1_beta: Array1<F>,
    pub wq: Array2<F>,
    pub bq: Array1<F>,
    pub wk: Array2<F>,
    pub bk: Array1<F>,
    pub wv: Array2<F>,
    pub bv: Array1<F>,
    pub wo: Array2<F>,
    pub bo: Array1<F>,
    pub ln2_gamma: Array1<F>,
    pub ln2_beta: Array1<F>,
    pub w1: Array2<F>,
    pub b1: Array1<F>,
    pub w2: Array2<F>,
    pub b2: Array1<F>,
}

/// Shared backbone parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams<F> {
    pub patch_weight: Array2<F>,
    pub patch_bias: Array1<F>,
    pub pos_embed: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
}

/// Per-dataset head parameters. The classification head is the bare linear
/// projection `y = W z^v`; the detection head includes a bias term.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadParams<F> {
    Classification { weight: Array2<F> },
    Detection { weight: Array2<F>, bias: Array1<F> },
}

/// Full model state: shared backbone plus one head block per dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<F> {
    pub config: ModelConfig,
    pub backbone: BackboneParams<F>,
    pub heads: Vec<HeadParams<F>>,
}

const INIT_STD: f64 = 0.02;

fn init_matrix<F: Float>(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<F> {
    Array2::from_shape_fn((rows, cols), |_| F::from_f64(trunc_normal(rng, INIT_STD)))
}

impl<F: Float> ModelState<F> {
    /// Random initialization: truncated normal (std 0.02) weights and
    /// positional embeddings, zero biases, identity layer norms. The
    /// backbone and each head draw from independent derived streams so a
    /// sequential stage re-initializes its head to exactly this state.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let m = config.mlp_hidden;
        let n = config.num_tokens();
        let p = config.patch_dim();
        let mut rng = derive_rng(seed, "init-backbone", 0, 0);
        let patch_weight = init_matrix(&mut rng, p, d);
        let patch_bias = Array1::zeros(d);
        let pos_embed = init_matrix(&mut rng, n, d);
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                ln1_gamma: Array1::ones(d),
                ln1_beta: Array1::zeros(d),
                wq: init_matrix(&mut rng, d, d),
                bq: Array1::zeros(d),
                wk: init_matrix(&mut rng, d, d),
                bk: Array1::zeros(d),
                wv: init_matrix(&mut rng, d, d),
                bv: Array1::zeros(d),
                wo: init_matrix(&mut rng, d, d),
                bo: Array1::zeros(d),
                ln2_gamma: Array1::ones(d),
                ln2_beta: Array1::zeros(d),
                w1: init_matrix(&mut rng, d, m),
                b1: Array1::zeros(m),
                w2: init_matrix(&mut rng, m, d),
                b2: Array1::zeros(d),
            })
            .collect();
        let heads = config
            .heads
            .iter()
            .enumerate()
            .map(|(i, spec)| Self::init_head(&config, spec, seed, i))
            .collect();
        Ok(ModelState {
            config,
            backbone: BackboneParams {
                patch_weight,
                patch_bias,
                pos_embed,
                layers,
            },
            heads,
        })
    }

    /// Fresh parameters for head `index`, as drawn at `init`.
    pub fn init_head(config: &ModelConfig, spec: &HeadSpec, seed: u64, index: usize) -> HeadParams<F> {
        let mut rng = derive_rng(seed, "init-head", index as u64, 0);
        let weight = init_matrix(&mut rng, config.hidden_dim, spec.num_classes);
        match spec.task {
            TaskKind::Classification => HeadParams::Classification { weight },
            TaskKind::Detection => HeadParams::Detection {
                weight,
                bias: Array1::zeros(spec.num_classes),
            },
        }
    }

    /// Same structure with every parameter zero; gradient and momentum
    /// containers share this shape.
    pub fn zeros_like(&self) -> Self {
        let z2 = |a: &Array2<F>| Array2::zeros(a.dim());
        let z1 = |a: &Array1<F>| Array1::zeros(a.len());
        ModelState {
            config: self.config.clone(),
            backbone: BackboneParams {
                patch_weight: z2(&self.backbone.patch_weight),
                patch_bias: z1(&self.backbone.patch_bias),
                pos_embed: z2(&self.backbone.pos_embed),
                layers: self
                    .backbone
                    .layers
                    .iter()
                    .map(|l| LayerParams {
                        ln1_gamma: z1(&l.ln1_gamma),
                        ln1_beta: z1(&l.ln1_beta),
                        wq: z2(&l.wq),
                        bq: z1(&l.bq),
                        wk: z2(&l.wk),
                        bk: z1(&l.bk),
                        wv: z2(&l.wv),
                        bv: z1(&l.bv),
                        wo: z2(&l.wo),
                        bo: z1(&l.bo),
                        ln2_gamma: z1(&l.ln2_gamma),
                        ln2_beta: z1(&l.ln2_beta),
                        w1: z2(&l.w1),
                        b1: z1(&l.b1),
                        w2: z2(&l.w2),
                        b2: z1(&l.b2),
                    })
                    .collect(),
            },
            heads: self
                .heads
                .iter()
                .map(|h| match h {
                    HeadParams::Classification { weight } => HeadParams::Classification {
                        weight: z2(weight),
                    },
                    HeadParams::Detection { weight, bias } => HeadParams::Detection {
                        weight: z2(weight),
                        bias: z1(bias),
                    },
                })
                .collect(),
        }
    }

    /// Named flat views of every parameter array, in a fixed order.
    pub fn named_slices(&self) -> Vec<(String, Vec<usize>, &[F])> {
        let mut out: Vec<(String, Vec<usize>, &[F])> = Vec::new();
        let b = &self.backbone;
        out.push(("backbone.patch_weight".into(), b.patch_weight.shape().to_vec(), b.patch_weight.as_slice().unwrap()));
        out.push(("backbone.patch_bias".into(), b.patch_bias.shape().to_vec(), b.patch_bias.as_slice().unwrap()));
        out.push(("backbone.pos_embed".into(), b.pos_embed.shape().to_vec(), b.pos_embed.as_slice().unwrap()));
        for (i, l) in b.layers.iter().enumerate() {
            let p = format!("backbone.layers.{i}");
            out.push((format!("{p}.ln1_gamma"), l.ln1_gamma.shape().to_vec(), l.ln1_gamma.as_slice().unwrap()));
            out.push((format!("{p}.ln1_beta"), l.ln1_beta.shape().to_vec(), l.ln1_beta.as_slice().unwrap()));
            out.push((format!("{p}.wq"), l.wq.shape().to_vec(), l.wq.as_slice().unwrap()));
            out.push((format!("{p}.bq"), l.bq.shape().to_vec(), l.bq.as_slice().unwrap()));
            out.push((format!("{p}.wk"), l.wk.shape().to_vec(), l.wk.as_slice().unwrap()));
            out.push((format!("{p}.bk"), l.bk.shape().to_vec(), l.bk.as_slice().unwrap()));
            out.push((format!("{p}.wv"), l.wv.shape().to_vec(), l.wv.as_slice().unwrap()));
            out.push((format!("{p}.bv"), l.bv.shape().to_vec(), l.bv.as_slice().unwrap()));
            out.push((format!("{p}.wo"), l.wo.shape().to_vec(), l.wo.as_slice().unwrap()));
            out.push((format!("{p}.bo"), l.bo.shape().to_vec(), l.bo.as_slice().unwrap()));
            out.push((format!("{p}.ln2_gamma"), l.ln2_gamma.shape().to_vec(), l.ln2_gamma.as_slice().unwrap()));
            out.push((format!("{p}.ln2_beta"), l.ln2_beta.shape().to_vec(), l.ln2_beta.as_slice().unwrap()));
            out.push((format!("{p}.w1"), l.w1.shape().to_vec(), l.w1.as_slice().unwrap()));
            out.push((format!("{p}.b1"), l.b1.shape().to_vec(), l.b1.as_slice().unwrap()));
            out.push((format!("{p}.w2"), l.w2.shape().to_vec(), l.w2.as_slice().unwrap()));
            out.push((format!("{p}.b2"), l.b2.shape().to_vec(), l.b2.as_slice().unwrap()));
        }
        for (i, h) in self.heads.iter().enumerate() {
            match h {
                HeadParams::Classification { weight } => {
                    out.push((format!("heads.{i}.weight"), weight.shape().to_vec(), weight.as_slice().unwrap()));
                }
                HeadParams::Detection { weight, bias } => {
                    out.push((format!("heads.{i}.weight"), weight.shape().to_vec(), weight.as_slice().unwrap()));
                    out.push((format!("heads.{i}.bias"), bias.shape().to_vec(), bias.as_slice().unwrap()));
                }
            }
        }
        out
    }

    /// Flat mutable views of the backbone parameters.
    pub fn backbone_slices_mut(&mut self) -> Vec<&mut [F]> {
        let b = &mut self.backbone;
        let mut out: Vec<&mut [F]> = vec![
            b.patch_weight.as_slice_mut().unwrap(),
            b.patch_bias.as_slice_mut().unwrap(),
            b.pos_embed.as_slice_mut().unwrap(),
        ];
        for l in b.layers.iter_mut() {
            out.push(l.ln1_gamma.as_slice_mut().unwrap());
            out.push(l.ln1_beta.as_slice_mut().unwrap());
            out.push(l.wq.as_slice_mut().unwrap());
            out.push(l.bq.as_slice_mut().unwrap());
            out.push(l.wk.as_slice_mut().unwrap());
            out.push(l.bk.as_slice_mut().unwrap());
            out.push(l.wv.as_slice_mut().unwrap());
            out.push(l.bv.as_slice_mut().unwrap());
            out.push(l.wo.as_slice_mut().unwrap());
            out.push(l.bo.as_slice_mut().unwrap());
            out.push(l.ln2_gamma.as_slice_mut().unwrap());
            out.push(l.ln2_beta.as_slice_mut().unwrap());
            out.push(l.w1.as_slice_mut().unwrap());
            out.push(l.b1.as_slice_mut().unwrap());
            out.push(l.w2.as_slice_mut().unwrap());
            out.push(l.b2.as_slice_mut().unwrap());
        }
        out
    }

    pub fn backbone_slices(&self) -> Vec<&[F]> {
        self.named_slices()
            .into_iter()
            .filter(|(name, _, _)| name.starts_with("backbone."))
            .map(|(_, _, s)| s)
            .collect()
    }

    /// Flat mutable views of head `i`'s parameters.
    pub fn head_slices_mut(&mut self, i: usize) -> Vec<&mut [F]> {
        match &mut self.heads[i] {
            HeadParams::Classification { weight } => vec![weight.as_slice_mut().unwrap()],
            HeadParams::Detection { weight, bias } => vec![
                weight.as_slice_mut().unwrap(),
                bias.as_slice_mut().unwrap(),
            ],
        }
    }

    pub fn head_slices(&self, i: usize) -> Vec<&[F]> {
        match &self.heads[i] {
            HeadParams::Classification { weight } => vec![weight.as_slice().unwrap()],
            HeadParams::Detection { weight, bias } => {
                vec![weight.as_slice().unwrap(), bias.as_slice().unwrap()]
            }
        }
    }

    /// Total number of scalar parameters.
    pub fn num_params(&self) -> usize {
        self.named_slices().iter().map(|(_, _, s)| s.len()).sum()
    }
}

/// Which head handles a forward pass, and its proposals when detecting.
#[derive(Debug, Clone)]
pub struct TaskTicket {
    pub dataset_index: usize,
    pub proposals: Option<Vec<BoxCoords>>,
}

/// Model output: one logit vector for classification, one row per proposal
/// for detection.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction<F> {
    Classification { logits: Array1<F> },
    Detection { logits: Array2<F> },
}

impl<F: Float> Prediction<F> {
    pub fn assert_finite(&self) -> Result<()> {
        let finite = match self {
            Prediction::Classification { logits } => logits.iter().all(|v| v.is_finite()),
            Prediction::Detection { logits } => logits.iter().all(|v| v.is_finite()),
        };
        if finite {
            Ok(())
        } else {
            Err(Error::NonFinite("head logits".into()))
        }
    }
}

/// Activation record of one full forward pass, consumed by [`backward`].
pub struct ForwardCache<F> {
    pub dataset_index: usize,
    pub tok_x: Array2<F>,
    pub layers: Vec<LayerCache<F>>,
    pub encoded: TokenGrid<F>,
    pub head: HeadCache<F>,
}

pub enum HeadCache<F> {
    Classification { mean: Array1<F> },
    Detection { pooled: Array2<F>, boxes: Vec<BoxCoords> },
}

/// Full forward pass: tokenize, encode, then the ticket's head. Only that
/// head's parameters influence the output.
pub fn forward_with_cache<F: Float>(
    clip: &VideoClip<F>,
    ticket: &TaskTicket,
    state: &ModelState<F>,
    mode: EncodeMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Prediction<F>, ForwardCache<F>)> {
    let head = state
        .heads
        .get(ticket.dataset_index)
        .ok_or(Error::MissingHead(ticket.dataset_index))?;
    let (tokens, tok_x) = tokenizer::tokenize_with_cache(clip, &state.config, &state.backbone)?;
    let (encoded, layers) = encode_with_cache(
        tokens,
        &state.backbone.layers,
        state.config.num_heads,
        F::from_f64(state.config.stochastic_depth_rate),
        mode,
        rng,
    )?;
    let (prediction, head_cache) = match head {
        HeadParams::Classification { weight } => {
            if ticket.proposals.is_some() {
                return Err(Error::Config(
                    "classification tickets carry no proposals".into(),
                ));
            }
            let (logits, mean) = heads::classify_with_cache(&encoded, weight);
            (
                Prediction::Classification { logits },
                HeadCache::Classification { mean },
            )
        }
        HeadParams::Detection { weight, bias } => {
            let boxes = ticket
                .proposals
                .clone()
                .ok_or(Error::MissingProposals)?;
            if boxes.is_empty() {
                return Err(Error::MissingProposals);
            }
            let (logits, pooled) =
                heads::detect_with_cache(&encoded, &boxes, state.config.roi_grid, weight, bias)?;
            (
                Prediction::Detection { logits },
                HeadCache::Detection { pooled, boxes },
            )
        }
    };
    prediction.assert_finite()?;
    Ok((
        prediction,
        ForwardCache {
            dataset_index: ticket.dataset_index,
            tok_x,
            layers,
            encoded,
            head: head_cache,
        },
    ))
}

/// Forward pass without keeping the cache.
pub fn forward<F: Float>(
    clip: &VideoClip<F>,
    ticket: &TaskTicket,
    state: &ModelState<F>,
    mode: EncodeMode,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Prediction<F>> {
    forward_with_cache(clip, ticket, state, mode, rng).map(|(p, _)| p)
}

/// Backward pass from head-logit gradients to a full gradient tree. Only
/// the backbone and the cached head receive nonzero gradients.
pub fn backward<F: Float>(
    state: &ModelState<F>,
    cache: &ForwardCache<F>,
    dlogits_cls: Option<&Array1<F>>,
    dlogits_det: Option<&Array2<F>>,
) -> Result<ModelState<F>> {
    let mut grads = state.zeros_like();
    let head_index = cache.dataset_index;
    let dtokens = match (&cache.head, &state.heads[head_index], &mut grads.heads[head_index]) {
        (
            HeadCache::Classification { mean },
            HeadParams::Classification { weight },
            HeadParams::Classification { weight: gweight },
        ) => {
            let dlogits = dlogits_cls.ok_or_else(|| {
                Error::Shape("classification backward expects classification logit grads".into())
            })?;
            heads::classify_backward(&cache.encoded, mean, weight, dlogits, gweight)
        }
        (
            HeadCache::Detection { pooled, boxes },
            HeadParams::Detection { weight, .. },
            HeadParams::Detection {
                weight: gweight,
                bias: gbias,
            },
        ) => {
            let dlogits = dlogits_det.ok_or_else(|| {
                Error::Shape("detection backward expects detection logit grads".into())
            })?;
            heads::detect_backward(
                &cache.encoded,
                pooled,
                boxes,
                state.config.roi_grid,
                weight,
                dlogits,
                gweight,
                gbias,
            )?
        }
        _ => return Err(Error::Shape("head cache does not match head params".into())),
    };
    let dtokens0 = encoder::encode_backward(
        &cache.layers,
        &state.backbone.layers,
        &mut grads.backbone.layers,
        state.config.num_heads,
        dtokens,
    );
    tokenizer::tokenize_backward(
        &cache.tok_x,
        &state.backbone.patch_weight,
        &dtokens0,
        &mut grads.backbone,
    );
    Ok(grads)
}
