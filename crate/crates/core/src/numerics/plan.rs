use serde::{Deserialize, Serialize};

use crate::numerics::NumericsError;

/// Which keys a query may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Query `i` sees keys `k <= i`.
    Causal,
    /// The first `S` slots attend bidirectionally among themselves; every query
    /// sees the prefix, later keys stay causally hidden.
    Prefix(usize),
    Bidirectional,
    /// Arbitrary visibility supplied by the caller.
    Custom,
}

/// Per-sample `K x K` visibility mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPlan {
    mode: AttentionMode,
    k: usize,
    visibility: Vec<bool>,
}

impl AttentionPlan {
    pub fn causal(k: usize) -> Result<Self, NumericsError> {
        Self::build(AttentionMode::Causal, k)
    }

    /// Prefix attention with `S` in `[1, K-1]`.
    pub fn prefix(k: usize, s: usize) -> Result<Self, NumericsError> {
        if k < 2 || s == 0 || s >= k {
            return Err(NumericsError::InvalidPlan(format!(
                "prefix length {s} outside [1, {}]",
                k.saturating_sub(1)
            )));
        }
        Self::build(AttentionMode::Prefix(s), k)
    }

    pub fn bidirectional(k: usize) -> Result<Self, NumericsError> {
        Self::build(AttentionMode::Bidirectional, k)
    }

    pub fn new(mode: AttentionMode, k: usize) -> Result<Self, NumericsError> {
        match mode {
            AttentionMode::Prefix(s) => Self::prefix(k, s),
            AttentionMode::Custom => Err(NumericsError::InvalidPlan(
                "custom plans need an explicit visibility matrix".into(),
            )),
            _ => Self::build(mode, k),
        }
    }

    /// Plan from an explicit row-major `K x K` visibility matrix.
    pub fn custom(k: usize, visibility: Vec<bool>) -> Result<Self, NumericsError> {
        if k == 0 || visibility.len() != k * k {
            return Err(NumericsError::InvalidPlan(format!(
                "visibility has {} entries, expected {}",
                visibility.len(),
                k * k
            )));
        }
        if let Some(row) = (0..k).find(|&i| !visibility[i * k..(i + 1) * k].iter().any(|&v| v)) {
            return Err(NumericsError::FullyMaskedRow { row });
        }
        Ok(Self {
            mode: AttentionMode::Custom,
            k,
            visibility,
        })
    }

    fn build(mode: AttentionMode, k: usize) -> Result<Self, NumericsError> {
        if k == 0 {
            return Err(NumericsError::InvalidPlan("sequence length must be positive".into()));
        }
        let visibility = (0..k * k).map(|idx| Self::rule(mode, idx / k, idx % k)).collect();
        Ok(Self { mode, k, visibility })
    }

    fn rule(mode: AttentionMode, i: usize, key: usize) -> bool {
        match mode {
            AttentionMode::Causal => key <= i,
            AttentionMode::Prefix(s) => key <= i.max(s - 1),
            AttentionMode::Bidirectional => true,
            AttentionMode::Custom => unreachable!("custom plans carry explicit visibility"),
        }
    }

    pub fn mode(&self) -> AttentionMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn visible(&self, query: usize, key: usize) -> bool {
        self.visibility[query * self.k + key]
    }

    pub fn visibility(&self) -> &[bool] {
        &self.visibility
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_is_prefix_of_one() {
        for k in 2..10 {
            let c = AttentionPlan::causal(k).unwrap();
            let p = AttentionPlan::prefix(k, 1).unwrap();
            assert_eq!(c.visibility(), p.visibility());
        }
    }

    #[test]
    fn prefix_agrees_with_causal_past_the_prefix() {
        let k = 9;
        for s in 1..k {
            let p = AttentionPlan::prefix(k, s).unwrap();
            let c = AttentionPlan::causal(k).unwrap();
            for i in (s - 1)..k {
                for key in 0..k {
                    assert_eq!(p.visible(i, key), c.visible(i, key), "s={s} i={i} k={key}");
                }
            }
            // inside the prefix everything is visible
            for i in 0..s {
                for key in 0..s {
                    assert!(p.visible(i, key));
                }
            }
        }
    }

    #[test]
    fn prefix_bounds_are_checked() {
        assert!(AttentionPlan::prefix(4, 0).is_err());
        assert!(AttentionPlan::prefix(4, 4).is_err());
        assert!(AttentionPlan::prefix(1, 1).is_err());
    }

    #[test]
    fn custom_rejects_empty_rows() {
        let err = AttentionPlan::custom(2, vec![true, false, false, false]).unwrap_err();
        assert!(matches!(err, NumericsError::FullyMaskedRow { row: 1 }));
    }
}
