//! The on-device multi-task ranking model.
//!
//! Inputs are encoded by shared attribute embeddings and per-feature AutoDis
//! blocks; two target-attention blocks summarize the real-time watch history
//! and the already-ordered candidates; their outputs, the target encoding and
//! the context encoding feed a multi-gate mixture of experts whose per-task
//! mixtures go through a ReLU tower and a sigmoid. Tasks are, in order,
//! `has_next`, `effective_view` and `like`.

pub mod io;
pub mod layers;
pub mod loss;
mod network;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::features::{
    FeatureConfig, CONTEXT_SCALARS, CROSS_CODES, DURATION_BUCKETS, FEEDBACK_CODES,
    HISTORY_SCALARS, NET_CODES, ORDERED_SCALARS, TARGET_SCALARS,
};

pub use layers::{attention, Matrix};
pub use loss::{loss, Labels, LOSS_EPS};
pub use network::ForwardTrace;
pub use train::{epoch_order, fit, loss_and_gradients, train_step, Adam, AdamConfig, Example, StepInfo, TrainConfig, TrainingBatch};

pub const TASKS: [&str; 3] = ["has_next", "effective_view", "like"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionTriple {
    pub p_has_next: f64,
    pub p_effective_view: f64,
    pub p_like: f64,
}

impl PredictionTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.p_has_next, self.p_effective_view, self.p_like]
    }

    pub fn from_array(p: [f64; 3]) -> Self {
        Self {
            p_has_next: p[0],
            p_effective_view: p[1],
            p_like: p[2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub heads: usize,
    pub head_dim: usize,
    pub experts: usize,
    pub expert_hidden: usize,
    /// Hidden sizes of each task tower; the last entry must be 1.
    pub tower_dims: Vec<usize>,
    pub autodis_buckets: usize,
    pub autodis_dim: usize,
    pub autodis_tau: f64,
    /// Category and duration embedding size.
    pub attribute_dim: usize,
    /// Feedback, cross and net-condition embedding size.
    pub feedback_dim: usize,
    pub loss_weights: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration used for simulation and tests.
    pub fn desk() -> Self {
        Self {
            features: FeatureConfig::default(),
            heads: 2,
            head_dim: 8,
            experts: 4,
            expert_hidden: 16,
            tower_dims: vec![32, 16, 1],
            autodis_buckets: 16,
            autodis_dim: 8,
            autodis_tau: 1.0,
            attribute_dim: 16,
            feedback_dim: 8,
            loss_weights: [1.0, 1.0, 1.0],
        }
    }

    /// Deployment-shaped configuration.
    pub fn production() -> Self {
        Self {
            features: FeatureConfig {
                category_vocab: 300,
                ..FeatureConfig::default()
            },
            heads: 8,
            head_dim: 16,
            experts: 12,
            expert_hidden: 64,
            tower_dims: vec![128, 64, 32, 1],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let dims = [
            self.heads,
            self.head_dim,
            self.experts,
            self.expert_hidden,
            self.autodis_buckets,
            self.autodis_dim,
            self.attribute_dim,
            self.feedback_dim,
            self.features.history_len,
            self.features.ordered_len,
        ];
        if dims.iter().any(|d| *d == 0) || self.tower_dims.contains(&0) {
            return Err(crate::Error::Config("all model dimensions must be positive".into()));
        }
        if self.tower_dims.last() != Some(&1) {
            return Err(crate::Error::Config("tower must end in a single unit".into()));
        }
        if !(self.autodis_tau > 0.0) {
            return Err(crate::Error::Config("autodis temperature must be positive".into()));
        }
        if self.loss_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(crate::Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }

    pub fn attention_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn history_dim(&self) -> usize {
        HISTORY_SCALARS * self.autodis_dim + 2 * self.attribute_dim + 2 * self.feedback_dim
    }

    pub fn ordered_dim(&self) -> usize {
        ORDERED_SCALARS * self.autodis_dim + 2 * self.attribute_dim + self.feedback_dim
    }

    pub fn target_dim(&self) -> usize {
        TARGET_SCALARS * self.autodis_dim + 2 * self.attribute_dim
    }

    pub fn context_dim(&self) -> usize {
        CONTEXT_SCALARS * self.autodis_dim + self.feedback_dim
    }

    pub fn mmoe_input_dim(&self) -> usize {
        2 * self.attention_dim() + self.target_dim() + self.context_dim()
    }
}

pub type TensorId = usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct DenseIds {
    pub w: TensorId,
    pub b: Option<TensorId>,
    pub input: usize,
    pub output: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AutoDisIds {
    pub w: TensorId,
    pub b: TensorId,
    pub mix: TensorId,
    pub meta: TensorId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct AttentionIds {
    pub q: DenseIds,
    pub k: DenseIds,
    pub v: DenseIds,
    pub o: DenseIds,
}

/// Where each parameter group lives in the tensor list.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub category: TensorId,
    pub duration: TensorId,
    pub feedback: TensorId,
    pub cross: TensorId,
    pub net: TensorId,
    pub history_autodis: Vec<AutoDisIds>,
    pub ordered_autodis: Vec<AutoDisIds>,
    pub target_autodis: Vec<AutoDisIds>,
    pub context_autodis: Vec<AutoDisIds>,
    pub history_attention: AttentionIds,
    pub ordered_attention: AttentionIds,
    pub experts: Vec<DenseIds>,
    pub gates: Vec<DenseIds>,
    pub towers: Vec<Vec<DenseIds>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Embedding,
    Glorot { fan_in: usize, fan_out: usize },
    Uniform(u32),
    Zero,
}

struct Builder {
    tensors: Vec<(Tensor, Init)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> TensorId {
        let n = shape.iter().product();
        self.tensors.push((
            Tensor {
                name,
                shape,
                data: vec![0.0; n],
            },
            init,
        ));
        self.tensors.len() - 1
    }

    fn dense(&mut self, name: &str, input: usize, output: usize, bias: bool) -> DenseIds {
        let w = self.add(
            format!("{name}.weight"),
            vec![output, input],
            Init::Glorot {
                fan_in: input,
                fan_out: output,
            },
        );
        let b = bias.then(|| self.add(format!("{name}.bias"), vec![output], Init::Zero));
        DenseIds {
            w,
            b,
            input,
            output,
        }
    }

    fn autodis(&mut self, name: &str, h: usize, d: usize) -> AutoDisIds {
        AutoDisIds {
            w: self.add(format!("{name}.w"), vec![h], Init::Uniform(100)),
            b: self.add(format!("{name}.b"), vec![h], Init::Uniform(50)),
            mix: self.add(
                format!("{name}.mix"),
                vec![h, h],
                Init::Glorot {
                    fan_in: h,
                    fan_out: h,
                },
            ),
            meta: self.add(format!("{name}.meta"), vec![h, d], Init::Embedding),
        }
    }

    fn attention(&mut self, name: &str, query_dim: usize, kv_dim: usize, att: usize) -> AttentionIds {
        AttentionIds {
            q: self.dense(&format!("{name}.query"), query_dim, att, false),
            k: self.dense(&format!("{name}.key"), kv_dim, att, false),
            v: self.dense(&format!("{name}.value"), kv_dim, att, false),
            o: self.dense(&format!("{name}.output"), att, att, false),
        }
    }
}

const HISTORY_SCALAR_NAMES: [&str; HISTORY_SCALARS] = [
    "diff_ev",
    "diff_like",
    "diff_follow",
    "p_like",
    "watch_ratio",
    "time_since",
    "position_gap",
];
const ORDERED_SCALAR_NAMES: [&str; ORDERED_SCALARS] = ["diff_ev", "diff_like", "diff_follow", "slot_gap"];
const TARGET_SCALAR_NAMES: [&str; TARGET_SCALARS] = ["p_ev", "p_like", "p_follow"];
const CONTEXT_SCALAR_NAMES: [&str; CONTEXT_SCALARS] = ["position", "buffered_len", "buffer_ratio"];

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<(Tensor, Init)>) {
    let mut b = Builder { tensors: Vec::new() };
    let (h, d) = (cfg.autodis_buckets, cfg.autodis_dim);
    let category = b.add(
        "embedding.category".into(),
        vec![cfg.features.category_codes() as usize, cfg.attribute_dim],
        Init::Embedding,
    );
    let duration = b.add(
        "embedding.duration".into(),
        vec![DURATION_BUCKETS as usize, cfg.attribute_dim],
        Init::Embedding,
    );
    let feedback = b.add(
        "embedding.feedback".into(),
        vec![FEEDBACK_CODES as usize, cfg.feedback_dim],
        Init::Embedding,
    );
    let cross = b.add(
        "embedding.cross".into(),
        vec![CROSS_CODES as usize, cfg.feedback_dim],
        Init::Embedding,
    );
    let net = b.add(
        "embedding.net".into(),
        vec![NET_CODES as usize, cfg.feedback_dim],
        Init::Embedding,
    );
    let mut autodis = |prefix: &str, names: &[&str]| -> Vec<AutoDisIds> {
        names
            .iter()
            .map(|n| b.autodis(&format!("autodis.{prefix}.{n}"), h, d))
            .collect()
    };
    let history_autodis = autodis("history", &HISTORY_SCALAR_NAMES);
    let ordered_autodis = autodis("ordered", &ORDERED_SCALAR_NAMES);
    let target_autodis = autodis("target", &TARGET_SCALAR_NAMES);
    let context_autodis = autodis("context", &CONTEXT_SCALAR_NAMES);
    let att = cfg.attention_dim();
    let history_attention = b.attention("attention.history", cfg.target_dim(), cfg.history_dim(), att);
    let ordered_attention = b.attention("attention.ordered", cfg.target_dim(), cfg.ordered_dim(), att);
    let input = cfg.mmoe_input_dim();
    let experts = (0..cfg.experts)
        .map(|e| b.dense(&format!("mmoe.expert{e}"), input, cfg.expert_hidden, true))
        .collect();
    let gates = TASKS
        .iter()
        .map(|t| b.dense(&format!("mmoe.gate.{t}"), input, cfg.experts, true))
        .collect();
    let towers = TASKS
        .iter()
        .map(|t| {
            let mut prev = cfg.expert_hidden;
            cfg.tower_dims
                .iter()
                .enumerate()
                .map(|(l, &out)| {
                    let ids = b.dense(&format!("tower.{t}.{l}"), prev, out, true);
                    prev = out;
                    ids
                })
                .collect()
        })
        .collect();
    (
        Layout {
            category,
            duration,
            feedback,
            cross,
            net,
            history_autodis,
            ordered_autodis,
            target_autodis,
            context_autodis,
            history_attention,
            ordered_attention,
            experts,
            gates,
            towers,
        },
        b.tensors,
    )
}

/// Rounds to the nearest single-precision value; parameters are kept
/// f32-representable so that weights files round-trip exactly.
pub(crate) fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// All learnable tensors of the ranking model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    pub(crate) layout: Layout,
    pub(crate) tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> crate::Result<Self> {
        config.validate()?;
        let (layout, tensors) = build_layout(&config);
        Ok(Self {
            config,
            layout,
            tensors: tensors.into_iter().map(|(t, _)| t).collect(),
        })
    }

    /// Embeddings uniform in (-0.05, 0.05), dense weights Glorot-uniform,
    /// biases zero.
    pub fn init(config: ModelConfig, seed: u64) -> crate::Result<Self> {
        config.validate()?;
        let (layout, tensors) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = tensors
            .into_iter()
            .map(|(mut t, init)| {
                let limit = match init {
                    Init::Embedding => 0.05,
                    Init::Glorot { fan_in, fan_out } => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                    Init::Uniform(centi) => centi as f64 / 100.0,
                    Init::Zero => 0.0,
                };
                if limit > 0.0 {
                    for x in t.data.iter_mut() {
                        *x = round_f32(rng.random_range(-limit..limit));
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn schema_version(&self) -> &'static str {
        crate::features::SCHEMA_VERSION
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> crate::Result<Self> {
        let mut p = Self::zeros(config)?;
        if tensors.len() != p.tensors.len() {
            return Err(crate::Error::Format(format!(
                "expected {} tensors, found {}",
                p.tensors.len(),
                tensors.len()
            )));
        }
        for (dst, src) in p.tensors.iter_mut().zip(tensors) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(crate::Error::Format(format!(
                    "tensor {} {:?} does not match expected {} {:?}",
                    src.name, src.shape, dst.name, dst.shape
                )));
            }
            dst.data = src.data;
        }
        Ok(p)
    }

    /// Gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            data: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub data: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.data.iter_mut() {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }
}
