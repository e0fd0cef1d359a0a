//! Low-rank adapters on trunk attention projections.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::config::{ModelConfig, ParamKind};
use crate::model::network::ModelState;
use crate::model::ModelError;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    fn matrix(self) -> &'static str {
        match self {
            Self::Query => "q",
            Self::Key => "k",
            Self::Value => "v",
            Self::Output => "o",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 8.0,
            targets: vec![LoraTarget::Query, LoraTarget::Value, LoraTarget::Output],
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            alpha: rank as f64,
            ..Self::default()
        }
    }

    /// Multiplier `alpha / rank` on the low-rank update.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Adapter parameters for `cfg`: `rank * (d_in + d_out)` per adapted matrix.
    pub fn param_count(&self, cfg: &ModelConfig) -> usize {
        cfg.depth * self.targets.len() * self.rank * 2 * cfg.width
    }
}

/// Freezes every existing parameter and adds `A` (`[rank, d_in]`, uniform in
/// `±1/sqrt(d_in)`) and `B` (`[d_out, rank]`, zeros) for each target matrix
/// of every trunk block.
pub fn attach_lora<T: Scalar>(state: &mut ModelState<T>, lora: LoraConfig, seed: u64) -> Result<(), ModelError> {
    if state.lora.is_some() {
        return Err(ModelError::LoraAlreadyAttached);
    }
    if lora.rank == 0 || lora.targets.is_empty() || !lora.alpha.is_finite() {
        return Err(ModelError::InvalidConfig(
            "LoRA needs rank >= 1, finite alpha and at least one target".into(),
        ));
    }
    let mut targets = lora.targets.clone();
    targets.sort_by_key(|t| t.matrix());
    targets.dedup();
    let d = state.config.width;
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    state.params.set_trainable(false);
    for l in 0..state.config.depth {
        for t in &targets {
            let base = format!("blocks.{l}.attn.{}", t.matrix());
            let a = Tensor::from_fn([lora.rank, d], |_| T::lit(rng.random_range(-bound..bound)));
            state.params.insert(format!("{base}.lora_a"), a, ParamKind::Weight)?;
            state.params.insert(
                format!("{base}.lora_b"),
                Tensor::zeros([d, lora.rank]),
                ParamKind::Weight,
            )?;
        }
    }
    state.lora = Some(LoraConfig { targets, ..lora });
    Ok(())
}
