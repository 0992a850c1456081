mod cnn;
mod loss;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cnn::{
    cnn_channels, cnn_forward, embed_segment, init_cnn, pooled_extent, DEFAULT_CHANNELS,
    MIN_FRAMES, N_STAGES,
};
pub use loss::{binary_loss, hinge_loss, multi_loss, objective};

use crate::embedding::{cosine, AudioEmbedding, UserEmbedding, EMBEDDING_DIM};
use crate::error::{ensure, Error, Result};
use crate::frontend::{LogMelSegment, MAX_SECONDS};
use crate::index::EmbeddingStore;
use crate::nd::{Graph, ParamSet, Real, Tensor};

/// Default hinge margin.
pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantKind {
    /// Unpaired liked/disliked classification of one track.
    BasicBinary,
    /// Hinge loss against trainable per-user lookup anchors.
    Dcue,
    /// Softmax over the positive and negative similarities.
    Multi,
    /// Hinge loss against the frozen user embedding.
    Metric,
}

impl VariantKind {
    pub fn name(self) -> &'static str {
        match self {
            VariantKind::BasicBinary => "basic_binary",
            VariantKind::Dcue => "dcue",
            VariantKind::Multi => "multi",
            VariantKind::Metric => "metric",
        }
    }

    fn code(self) -> u8 {
        match self {
            VariantKind::BasicBinary => 0,
            VariantKind::Dcue => 1,
            VariantKind::Multi => 2,
            VariantKind::Metric => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => VariantKind::BasicBinary,
            1 => VariantKind::Dcue,
            2 => VariantKind::Multi,
            3 => VariantKind::Metric,
            _ => return Err(Error::Format(format!("unknown variant code {code}"))),
        })
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "basic_binary" => Ok(VariantKind::BasicBinary),
            "dcue" => Ok(VariantKind::Dcue),
            "multi" => Ok(VariantKind::Multi),
            "metric" => Ok(VariantKind::Metric),
            other => Err(Error::Parse(format!(
                "unknown variant `{other}` (basic_binary | dcue | multi | metric)"
            ))),
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Training objective of the audio branch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VariantConfig {
    pub kind: VariantKind,
    pub n_negatives: usize,
    pub margin: f64,
    pub context_duration: f64,
}

impl VariantConfig {
    pub fn basic_binary(context_duration: f64) -> Self {
        Self {
            kind: VariantKind::BasicBinary,
            n_negatives: 0,
            margin: DEFAULT_MARGIN,
            context_duration,
        }
    }

    pub fn dcue(context_duration: f64) -> Self {
        Self {
            kind: VariantKind::Dcue,
            n_negatives: 1,
            margin: DEFAULT_MARGIN,
            context_duration,
        }
    }

    pub fn multi(n_negatives: usize, context_duration: f64) -> Self {
        Self {
            kind: VariantKind::Multi,
            n_negatives,
            margin: DEFAULT_MARGIN,
            context_duration,
        }
    }

    pub fn metric(n_negatives: usize, context_duration: f64) -> Self {
        Self {
            kind: VariantKind::Metric,
            n_negatives,
            margin: DEFAULT_MARGIN,
            context_duration,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.context_duration > 0.0 && self.context_duration <= MAX_SECONDS,
            Contract,
            "context duration {} s outside (0, {MAX_SECONDS}]",
            self.context_duration
        );
        match self.kind {
            VariantKind::BasicBinary => {}
            VariantKind::Dcue | VariantKind::Metric => {
                ensure!(self.margin > 0.0, Contract, "margin must be positive, got {}", self.margin);
                ensure!(self.n_negatives >= 1, Contract, "{} needs at least one negative", self.kind);
            }
            VariantKind::Multi => {
                ensure!(self.n_negatives >= 1, Contract, "multi needs at least one negative");
            }
        }
        Ok(())
    }

    /// Whether training groups pair a positive with negatives.
    pub fn is_ranked(&self) -> bool {
        self.kind != VariantKind::BasicBinary
    }

    /// Short label such as `metric-1vs4`.
    pub fn label(&self) -> String {
        match self.kind {
            VariantKind::BasicBinary => "basic-binary".into(),
            k => format!("{}-1vs{}", k.name().replace('_', "-"), self.n_negatives),
        }
    }

    fn to_meta(self) -> Tensor {
        Tensor::vector(vec![
            self.kind.code() as f32,
            self.n_negatives as f32,
            self.margin as f32,
            self.context_duration as f32,
        ])
    }

    fn from_meta(t: &Tensor) -> Result<Self> {
        ensure!(t.shape() == [4], Format, "variant record must hold 4 values");
        let d = t.data();
        // shortest decimal form, so 0.2 comes back as 0.2 rather than its f32 neighbour
        let widen = |v: f32| v.to_string().parse::<f64>().expect("float display parses");
        let cfg = Self {
            kind: VariantKind::from_code(d[0] as u8)?,
            n_negatives: d[1] as usize,
            margin: widen(d[2]),
            context_duration: widen(d[3]),
        };
        cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(cfg)
    }
}

/// Inputs of one example group, as log-mel segments.
#[derive(Clone, Debug)]
pub enum GroupInputs<'a> {
    Labeled {
        track: &'a LogMelSegment,
        liked: bool,
    },
    Ranked {
        positive: &'a LogMelSegment,
        negatives: Vec<&'a LogMelSegment>,
    },
}

/// A user anchor with its tracks: the unit the Siamese objective scores.
#[derive(Clone, Debug)]
pub struct ExampleGroup<'a> {
    pub user: &'a str,
    pub inputs: GroupInputs<'a>,
}

const META: &str = "meta.variant";
const ANCHOR_PREFIX: &str = "anchor.";

fn anchor_name(user: &str) -> String {
    format!("{ANCHOR_PREFIX}{user}")
}

/// Audio-branch CNN plus its objective and, for `dcue`, the user lookup rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioModel {
    variant: VariantConfig,
    params: ParamSet,
}

impl AudioModel {
    /// Fresh model; `users` are only used by the `dcue` kind.
    pub fn new(variant: VariantConfig, channels: &[usize], users: &[String], seed: u64) -> Result<Self> {
        variant.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_cnn(&mut params, channels, &mut rng)?;
        if variant.kind == VariantKind::Dcue {
            ensure!(!users.is_empty(), Contract, "dcue needs at least one user");
            for user in users {
                let name = anchor_name(user);
                ensure!(!params.contains(&name), Contract, "duplicate user `{user}`");
                params.init_uniform(&name, &[EMBEDDING_DIM], 1, EMBEDDING_DIM, &mut rng);
            }
        }
        params.insert(META, variant.to_meta());
        Ok(Self { variant, params })
    }

    /// Rebuilds a model from checkpointed parameters.
    pub fn from_params(mut params: ParamSet) -> Result<Self> {
        let meta = params.get_mut(META)?;
        meta.set_requires_grad(false);
        let variant = VariantConfig::from_meta(meta)?;
        cnn_channels(&params)?;
        for (name, t) in params.iter() {
            ensure!(
                name == META || name.starts_with("cnn.") || name.starts_with(ANCHOR_PREFIX),
                Format,
                "unexpected parameter `{name}`"
            );
            if name.starts_with(ANCHOR_PREFIX) {
                ensure!(variant.kind == VariantKind::Dcue, Format, "lookup anchors in a {} model", variant.kind);
                ensure!(t.shape() == [EMBEDDING_DIM], Format, "anchor `{name}` must be [{EMBEDDING_DIM}]");
            }
        }
        Ok(Self { variant, params })
    }

    pub fn variant(&self) -> &VariantConfig {
        &self.variant
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for the optimizer; names and shapes must not change.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Same variant with other parameter values (e.g. an optimizer look-ahead).
    pub(crate) fn with_params(&self, params: ParamSet) -> Self {
        Self {
            variant: self.variant,
            params,
        }
    }

    pub fn into_params(self) -> ParamSet {
        self.params
    }

    pub fn channels(&self) -> Vec<usize> {
        cnn_channels(&self.params).expect("validated at construction")
    }

    pub fn embed(&self, segment: &LogMelSegment) -> Result<AudioEmbedding> {
        embed_segment(&self.params, segment)
    }

    /// The anchor the objective compares against: a lookup row for `dcue`,
    /// otherwise the frozen user embedding.
    pub fn user_anchor(&self, user: &str, frozen: Option<&EmbeddingStore>) -> Result<UserEmbedding> {
        match self.variant.kind {
            VariantKind::Dcue => {
                let row = self
                    .params
                    .get(&anchor_name(user))
                    .map_err(|_| Error::Vocabulary(format!("user `{user}` has no lookup anchor")))?;
                UserEmbedding::new(row.data().to_vec())
            }
            _ => frozen
                .ok_or_else(|| Error::Contract("frozen user embeddings required".into()))?
                .get(user),
        }
    }

    /// Cosine between the segment's embedding and `u`.
    pub fn score_track(&self, u: &UserEmbedding, segment: &LogMelSegment) -> Result<f32> {
        cosine(u.as_slice(), self.embed(segment)?.as_slice())
    }

    /// Loss of one group and the gradients of every parameter it touches.
    pub fn group_gradients(
        &self,
        group: &ExampleGroup,
        frozen: Option<&EmbeddingStore>,
    ) -> Result<(f64, ParamSet)> {
        let mut g = Graph::<f32>::new();
        let anchor_param = anchor_name(group.user);
        let dcue = self.variant.kind == VariantKind::Dcue;
        let bound = self
            .params
            .bind_where(&mut g, |n| n.starts_with("cnn.") || (dcue && n == anchor_param));
        let anchor = if dcue {
            bound
                .var(&anchor_param)
                .map_err(|_| Error::Vocabulary(format!("user `{}` has no lookup anchor", group.user)))?
        } else {
            let ue = self.user_anchor(group.user, frozen)?;
            g.constant(Tensor::vector(ue.into_vec()))
        };
        let (segments, liked) = match &group.inputs {
            GroupInputs::Labeled { track, liked } => (vec![*track], *liked),
            GroupInputs::Ranked { positive, negatives } => {
                let mut all = vec![*positive];
                all.extend(negatives.iter().copied());
                (all, true)
            }
        };
        let inputs: Vec<_> = segments.iter().map(|s| g.constant(s.to_tensor())).collect();
        let loss = objective(&self.variant, &mut g, &bound, anchor, &inputs, liked)?;
        let value = g.value(loss).data()[0] as f64;
        let grads = g.backward(loss)?;
        Ok((value, self.params.gradients_from(&bound, &grads)?))
    }
}

/// Converts a segment to a network input of any precision.
pub fn segment_tensor<T: Real>(segment: &LogMelSegment) -> Tensor<T> {
    cnn::input_tensor(segment)
}
