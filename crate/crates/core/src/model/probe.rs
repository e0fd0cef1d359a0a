//! Classification probes over frozen patch features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::config::ParamKind;
use crate::model::params::{init_tensor, Bound, ParamStore};
use crate::model::ModelError;
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    /// Mean-pooled features into a linear classifier.
    Linear,
    /// Multi-head attention pooling with one learnable query per head.
    Attentive,
}

impl std::str::FromStr for ProbeKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(Self::Linear),
            "attentive" => Ok(Self::Attentive),
            _ => Err(ModelError::InvalidConfig(format!("unknown probe kind {s:?}"))),
        }
    }
}

/// Pooling (attentive only) plus a linear classifier with bias.
///
/// Attentive pooling owns `pool.wk`, `pool.wv` (`[d, d]`) and `pool.query`
/// (`[d]`, head `h` uses entries `h*d_h..(h+1)*d_h`).
#[derive(Clone, Debug, PartialEq)]
pub struct Probe<T> {
    pub kind: ProbeKind,
    pub width: usize,
    pub heads: usize,
    pub classes: usize,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Probe<T> {
    pub fn new(kind: ProbeKind, width: usize, heads: usize, classes: usize, seed: u64) -> Result<Self, ModelError> {
        if width == 0 || heads == 0 || !width.is_multiple_of(heads) {
            return Err(ModelError::InvalidConfig(format!(
                "probe width {width} not divisible by {heads} heads"
            )));
        }
        if classes < 2 {
            return Err(ModelError::InvalidConfig("a probe needs at least 2 classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        if kind == ProbeKind::Attentive {
            params.insert(
                "pool.query",
                init_tensor(&[width], ParamKind::Embedding, &mut rng),
                ParamKind::Embedding,
            )?;
            params.param_mut("pool.query")?.decay = false;
            for name in ["pool.wk", "pool.wv"] {
                params.insert(
                    name,
                    init_tensor(&[width, width], ParamKind::Weight, &mut rng),
                    ParamKind::Weight,
                )?;
            }
        }
        params.insert(
            "cls.weight",
            init_tensor(&[width, classes], ParamKind::Weight, &mut rng),
            ParamKind::Weight,
        )?;
        params.insert("cls.bias", Tensor::zeros([classes]), ParamKind::Weight)?;
        params.param_mut("cls.bias")?.decay = false;
        Ok(Self {
            kind,
            width,
            heads,
            classes,
            params,
        })
    }

    /// Learnable parameters of the pooling stage alone.
    pub fn pool_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with("pool."))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Pooled descriptor `[B, d]` from features `[B, K, d]`.
    pub fn descriptor_graph(&self, tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var, ModelError> {
        let s = tape.shape(features).to_vec();
        if s.len() != 3 || s[2] != self.width {
            return Err(ModelError::PlanMismatch(format!(
                "probe of width {} got features {s:?}",
                self.width
            )));
        }
        let (b, k, d) = (s[0], s[1], s[2]);
        match self.kind {
            ProbeKind::Linear => {
                let t = tape.transpose(features)?;
                Ok(tape.mean_last(t)?)
            }
            ProbeKind::Attentive => {
                let keys = tape.matmul(features, bound.var("pool.wk")?)?;
                let values = tape.matmul(features, bound.var("pool.wv")?)?;
                let query = tape.reshape(bound.var("pool.query")?, &[d, 1])?;
                let dh = d / self.heads;
                let mut outs = Vec::with_capacity(self.heads);
                for h in 0..self.heads {
                    let (lo, hi) = (h * dh, (h + 1) * dh);
                    let kh = tape.slice(keys, 2, lo, hi)?;
                    let vh = tape.slice(values, 2, lo, hi)?;
                    let qh = tape.slice(query, 0, lo, hi)?;
                    let scores = tape.matmul(kh, qh)?;
                    let scores = tape.reshape(scores, &[b, 1, k])?;
                    let weights = tape.softmax(scores)?;
                    outs.push(tape.matmul(weights, vh)?);
                }
                let merged = if outs.len() == 1 {
                    outs[0]
                } else {
                    tape.concat(&outs, 2)?
                };
                Ok(tape.reshape(merged, &[b, d])?)
            }
        }
    }

    /// Class logits `[B, classes]`.
    pub fn logits_graph(&self, tape: &mut Tape<T>, bound: &Bound, features: Var) -> Result<Var, ModelError> {
        let desc = self.descriptor_graph(tape, bound, features)?;
        let logits = tape.matmul(desc, bound.var("cls.weight")?)?;
        Ok(tape.add(logits, bound.var("cls.bias")?)?)
    }

    fn eval(&self, features: &Tensor<T>, logits: bool) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let f = tape.constant(features.clone());
        let out = if logits {
            self.logits_graph(&mut tape, &bound, f)?
        } else {
            self.descriptor_graph(&mut tape, &bound, f)?
        };
        Ok(tape.value(out).clone())
    }

    pub fn logits(&self, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.eval(features, true)
    }

    /// Argmax class per row; ties go to the lowest class.
    pub fn predict(&self, features: &Tensor<T>) -> Result<Vec<usize>, ModelError> {
        let logits = self.logits(features)?;
        Ok(logits
            .data()
            .chunks(self.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, T::neg_infinity()),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect())
    }
}

/// Descriptor `[B, d]` from the probe's pooling stage.
pub fn attentive_pool<T: Scalar>(probe: &Probe<T>, features: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
    probe.eval(features, false)
}
