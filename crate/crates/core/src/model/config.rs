use serde::{Deserialize, Serialize};

use crate::bcm::TaskBundle;
use crate::diffengine::Activation;
use crate::digest::json_digest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionVariant {
    /// One masked self-attention over observational and interventional rows.
    MaskedSelf,
    /// Self-attention over observational rows, then cross-attention from interventional rows.
    SelfPlusCross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub layers: usize,
    pub heads: usize,
    pub n_comp: usize,
    pub attention_variant: AttentionVariant,
    pub decoder_activation: Activation,
    /// Std of weight matrices at initialization; `None` uses `1/√fan_in`.
    /// A fixed 0.02 leaves the scalar value embeddings near zero, where
    /// layer norm is dominated by its epsilon and training stalls.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_std: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            d_ff: 128,
            layers: 2,
            heads: 8,
            n_comp: 10,
            attention_variant: AttentionVariant::SelfPlusCross,
            decoder_activation: Activation::Gelu,
            init_std: None,
        }
    }
}

impl ModelConfig {
    /// Width used for the high-dimensional experiments.
    pub fn high_dim() -> Self {
        Self {
            d_model: 256,
            d_ff: 1024,
            layers: 4,
            ..Self::default()
        }
    }

    /// Small network that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            d_ff: 32,
            layers: 2,
            heads: 4,
            n_comp: 3,
            ..Self::default()
        }
    }

    /// The configuration used for finite-difference checks.
    pub fn tiny(variant: AttentionVariant) -> Self {
        Self {
            d_model: 16,
            d_ff: 16,
            layers: 1,
            heads: 2,
            n_comp: 3,
            attention_variant: variant,
            decoder_activation: Activation::Gelu,
            init_std: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_model and d_ff must be positive".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.n_comp == 0 {
            return Err(Error::Config("n_comp must be at least 1".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one encoder layer is required".into()));
        }
        if self.init_std.is_some_and(|s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("init_std must be positive".into()));
        }
        Ok(())
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

/// Which node is intervened on (`j`) and which is predicted (`i`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub int_node: usize,
    pub outcome_node: usize,
    pub num_nodes: usize,
}

impl RoleAssignment {
    pub fn new(int_node: usize, outcome_node: usize, num_nodes: usize) -> Result<Self> {
        if int_node >= num_nodes || outcome_node >= num_nodes || int_node == outcome_node {
            return Err(Error::Invalid(format!(
                "invalid roles i={outcome_node} j={int_node} for {num_nodes} nodes"
            )));
        }
        Ok(Self {
            int_node,
            outcome_node,
            num_nodes,
        })
    }

    pub fn from_bundle(bundle: &TaskBundle) -> Result<Self> {
        Self::new(bundle.int_node, bundle.outcome_node, bundle.num_nodes())
    }

    pub fn role_of(&self, node: usize) -> Role {
        if node == self.int_node {
            Role::Intervention
        } else if node == self.outcome_node {
            Role::Outcome
        } else {
            Role::Marginal
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Intervention,
    Outcome,
    Marginal,
}

impl Role {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Role::Intervention => "intervention",
            Role::Outcome => "outcome",
            Role::Marginal => "marginal",
        }
    }
}
