use std::sync::Arc;

use rand::Rng;

use super::config::{AttentionVariant, ModelConfig, Role, RoleAssignment};
use crate::diffengine::{Mask, ParamStore, Tensor, Trace, Var};
use crate::error::{Error, Result};

const ROLES: [Role; 3] = [Role::Intervention, Role::Outcome, Role::Marginal];

/// Everything the network conditions on for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInput {
    /// `N_obs × D`.
    pub obs: Tensor,
    /// Fully observed interventional rows, `M_int × D` (may be empty).
    pub context: Tensor,
    /// One query per value of `x_j`.
    pub int_values: Vec<f64>,
    pub roles: RoleAssignment,
}

impl ModelInput {
    pub fn new(obs: Tensor, context: Tensor, int_values: Vec<f64>, roles: RoleAssignment) -> Result<Self> {
        let d = roles.num_nodes;
        if obs.rank() != 2 || obs.shape()[1] != d || obs.shape()[0] == 0 {
            return Err(Error::shape("model input obs", obs.shape(), &[0, d]));
        }
        if context.rank() != 2 || context.shape()[1] != d {
            return Err(Error::shape("model input context", context.shape(), &[0, d]));
        }
        if !(obs.all_finite() && context.all_finite() && int_values.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("model input".into()));
        }
        Ok(Self {
            obs,
            context,
            int_values,
            roles,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.roles.num_nodes
    }

    /// Observational plus context rows.
    pub fn n_ctx(&self) -> usize {
        self.obs.shape()[0] + self.context.shape()[0]
    }

    pub fn n_int(&self) -> usize {
        self.int_values.len()
    }

    /// The interventional input matrix: `x_j` in column `j`, zeros elsewhere.
    pub fn int_matrix(&self) -> Tensor {
        let d = self.num_nodes();
        let mut data = vec![0.0; self.n_int() * d];
        for (r, x) in self.int_values.iter().enumerate() {
            data[r * d + self.roles.int_node] = *x;
        }
        Tensor::new(vec![self.n_int(), d], data).expect("consistent shape")
    }
}

fn normal<R: Rng + ?Sized>(store: &mut ParamStore, name: String, shape: &[usize], c: &ModelConfig, rng: &mut R) -> Result<()> {
    let std = c.init_std.unwrap_or_else(|| 1.0 / (shape[0] as f64).sqrt());
    store.insert_normal(name, shape, std, rng)
}

fn zeros(store: &mut ParamStore, name: String, n: usize) -> Result<()> {
    store.insert(name, Tensor::zeros(&[n]))
}

fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, p: &str, c: &ModelConfig, rng: &mut R) -> Result<()> {
    let (d, f) = (c.d_model, c.d_ff);
    store.insert(format!("{p}.ln1.g"), Tensor::filled(&[d], 1.0))?;
    zeros(store, format!("{p}.ln1.b"), d)?;
    for w in ["wq", "wk", "wv", "wo"] {
        normal(store, format!("{p}.{w}"), &[d, d], c, rng)?;
    }
    store.insert(format!("{p}.ln2.g"), Tensor::filled(&[d], 1.0))?;
    zeros(store, format!("{p}.ln2.b"), d)?;
    normal(store, format!("{p}.ff.w1"), &[d, f], c, rng)?;
    zeros(store, format!("{p}.ff.b1"), f)?;
    normal(store, format!("{p}.ff.w2"), &[f, d], c, rng)?;
    zeros(store, format!("{p}.ff.b2"), d)
}

fn sample_block(layer: usize) -> String {
    format!("layer{layer}.sample")
}

fn cross_block(layer: usize) -> String {
    format!("layer{layer}.cross")
}

fn node_block(layer: usize) -> String {
    format!("layer{layer}.node")
}

fn embed_prefix(interventional: bool, role: Role) -> String {
    let kind = if interventional { "int" } else { "obs" };
    format!("embed.{kind}.{}", role.name())
}

pub(crate) fn init_params<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<ParamStore> {
    config.validate()?;
    let d = config.d_model;
    let mut store = ParamStore::new();
    for interventional in [false, true] {
        for role in ROLES {
            let p = embed_prefix(interventional, role);
            normal(&mut store, format!("{p}.w1"), &[1, d], config, rng)?;
            zeros(&mut store, format!("{p}.b1"), d)?;
            normal(&mut store, format!("{p}.w2"), &[d, d], config, rng)?;
            zeros(&mut store, format!("{p}.b2"), d)?;
        }
    }
    for l in 0..config.layers {
        init_block(&mut store, &sample_block(l), config, rng)?;
        if config.attention_variant == AttentionVariant::SelfPlusCross {
            init_block(&mut store, &cross_block(l), config, rng)?;
        }
        init_block(&mut store, &node_block(l), config, rng)?;
    }
    for layer in ["dec.l1", "dec.l2"] {
        normal(&mut store, format!("{layer}.w"), &[d, d], config, rng)?;
        zeros(&mut store, format!("{layer}.b"), d)?;
    }
    for head in ["dec.mean", "dec.std", "dec.logit"] {
        normal(&mut store, format!("{head}.w"), &[d, config.n_comp], config, rng)?;
        zeros(&mut store, format!("{head}.b"), config.n_comp)?;
    }
    Ok(store)
}

/// Forward pass recorded on a trace. Intermediate states use the layout
/// `[rows, D, d_model]`, observational rows first, then context rows.
pub(crate) struct Network<'a> {
    pub config: &'a ModelConfig,
    pub store: &'a ParamStore,
}

/// Per-query mixture parameters as trace variables, each `[N_int, N_comp]`.
pub(crate) struct MogVars {
    pub mean: Var,
    pub std: Var,
    pub logits: Var,
}

impl Network<'_> {
    fn p(&self, t: &mut Trace, name: &str) -> Result<Var> {
        t.param(self.store, name)
    }

    fn linear(&self, t: &mut Trace, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(t, &format!("{prefix}.w"))?;
        let b = self.p(t, &format!("{prefix}.b"))?;
        t.affine(x, w, Some(b))
    }

    fn embed_column(&self, t: &mut Trace, values: Vec<f64>, prefix: &str) -> Result<Var> {
        let n = values.len();
        let x = t.input(Tensor::new(vec![n, 1], values)?)?;
        let (w1, b1) = (self.p(t, &format!("{prefix}.w1"))?, self.p(t, &format!("{prefix}.b1"))?);
        let (w2, b2) = (self.p(t, &format!("{prefix}.w2"))?, self.p(t, &format!("{prefix}.b2"))?);
        let h = t.affine(x, w1, Some(b1))?;
        let h = t.gelu(h)?;
        let h = t.affine(h, w2, Some(b2))?;
        t.reshape(h, &[n, 1, self.config.d_model])
    }

    /// Embeds every column of `rows` with the MLP of its role and sample type.
    fn embed_rows(&self, t: &mut Trace, rows: &Tensor, roles: &RoleAssignment, interventional: bool) -> Result<Var> {
        let (n, d) = (rows.shape()[0], rows.shape()[1]);
        let columns = (0..d)
            .map(|c| {
                let values = (0..n).map(|r| rows.data()[r * d + c]).collect();
                self.embed_column(t, values, &embed_prefix(interventional, roles.role_of(c)))
            })
            .collect::<Result<Vec<_>>>()?;
        t.concat(&columns, 1)
    }

    /// Returns `(context, interventional)` embeddings; the second is `None` without queries.
    pub fn embed(&self, t: &mut Trace, input: &ModelInput) -> Result<(Var, Option<Var>)> {
        let obs = self.embed_rows(t, &input.obs, &input.roles, false)?;
        let ctx = if input.context.shape()[0] > 0 {
            let extra = self.embed_rows(t, &input.context, &input.roles, true)?;
            t.concat(&[obs, extra], 0)?
        } else {
            obs
        };
        let int = if input.n_int() > 0 {
            Some(self.embed_rows(t, &input.int_matrix(), &input.roles, true)?)
        } else {
            None
        };
        Ok((ctx, int))
    }

    /// Pre-norm attention block followed by a pointwise MLP, each with a residual.
    /// `x` is `[B, N, d]`; `kv`, when given, supplies keys and values.
    fn block(&self, t: &mut Trace, prefix: &str, x: Var, kv: Option<Var>, mask: Option<&Mask>) -> Result<Var> {
        let g1 = self.p(t, &format!("{prefix}.ln1.g"))?;
        let b1 = self.p(t, &format!("{prefix}.ln1.b"))?;
        let h = t.layer_norm(x, g1, b1)?;
        let src = match kv {
            Some(kv) => t.layer_norm(kv, g1, b1)?,
            None => h,
        };
        let wq = self.p(t, &format!("{prefix}.wq"))?;
        let wk = self.p(t, &format!("{prefix}.wk"))?;
        let wv = self.p(t, &format!("{prefix}.wv"))?;
        let wo = self.p(t, &format!("{prefix}.wo"))?;
        let q = t.affine(h, wq, None)?;
        let k = t.affine(src, wk, None)?;
        let v = t.affine(src, wv, None)?;
        let a = t.attention(q, k, v, self.config.heads, mask)?;
        let a = t.affine(a, wo, None)?;
        let x = t.add(x, a)?;

        let g2 = self.p(t, &format!("{prefix}.ln2.g"))?;
        let b2 = self.p(t, &format!("{prefix}.ln2.b"))?;
        let h = t.layer_norm(x, g2, b2)?;
        let w1 = self.p(t, &format!("{prefix}.ff.w1"))?;
        let c1 = self.p(t, &format!("{prefix}.ff.b1"))?;
        let w2 = self.p(t, &format!("{prefix}.ff.w2"))?;
        let c2 = self.p(t, &format!("{prefix}.ff.b2"))?;
        let h = t.affine(h, w1, Some(c1))?;
        let h = t.gelu(h)?;
        let h = t.affine(h, w2, Some(c2))?;
        t.add(x, h)
    }

    /// One encoder layer: attention among samples (per node), then among nodes (per row).
    pub fn layer(&self, t: &mut Trace, l: usize, ctx: Var, int: Option<Var>) -> Result<(Var, Option<Var>)> {
        let n_ctx = t.value(ctx).shape()[0];
        let by_node_ctx = t.permute(ctx, &[1, 0, 2])?;
        let by_node_int = int.map(|i| t.permute(i, &[1, 0, 2])).transpose()?;

        let (c, i) = match (self.config.attention_variant, by_node_int) {
            (AttentionVariant::SelfPlusCross, int) => {
                let c = self.block(t, &sample_block(l), by_node_ctx, None, None)?;
                let i = int.map(|i| self.block(t, &cross_block(l), i, Some(c), None)).transpose()?;
                (c, i)
            }
            (AttentionVariant::MaskedSelf, None) => (self.block(t, &sample_block(l), by_node_ctx, None, None)?, None),
            (AttentionVariant::MaskedSelf, Some(i)) => {
                let n_int = t.value(i).shape()[1];
                let total = n_ctx + n_int;
                let mask: Mask = Arc::new((0..total * total).map(|idx| idx % total < n_ctx).collect());
                let z = t.concat(&[by_node_ctx, i], 1)?;
                let z = self.block(t, &sample_block(l), z, None, Some(&mask))?;
                (t.slice(z, 1, 0, n_ctx)?, Some(t.slice(z, 1, n_ctx, n_int)?))
            }
        };

        let z = match i {
            Some(i) => t.concat(&[c, i], 1)?,
            None => c,
        };
        let z = t.permute(z, &[1, 0, 2])?;
        let z = self.block(t, &node_block(l), z, None, None)?;
        let total = t.value(z).shape()[0];
        if total == n_ctx {
            return Ok((z, None));
        }
        Ok((t.slice(z, 0, 0, n_ctx)?, Some(t.slice(z, 0, n_ctx, total - n_ctx)?)))
    }

    /// MoG head on `[N_int, d]` outcome-node features.
    pub fn decode(&self, t: &mut Trace, h: Var) -> Result<MogVars> {
        let act = self.config.decoder_activation;
        let h = self.linear(t, h, "dec.l1")?;
        let h = t.activation(h, act)?;
        let h = self.linear(t, h, "dec.l2")?;
        let h = t.activation(h, act)?;
        let mean = self.linear(t, h, "dec.mean")?;
        let raw = self.linear(t, h, "dec.std")?;
        let std = t.softplus(raw)?;
        let logits = self.linear(t, h, "dec.logit")?;
        Ok(MogVars { mean, std, logits })
    }

    /// Selects node `node` from `[N, D, d]`, giving `[N, d]`.
    pub fn node_slice(&self, t: &mut Trace, z: Var, node: usize) -> Result<Var> {
        let n = t.value(z).shape()[0];
        let s = t.slice(z, 1, node, 1)?;
        t.reshape(s, &[n, self.config.d_model])
    }

    pub fn forward(&self, t: &mut Trace, input: &ModelInput) -> Result<MogVars> {
        if input.n_int() == 0 {
            return Err(Error::Invalid("forward needs at least one interventional query".into()));
        }
        let (mut ctx, mut int) = self.embed(t, input)?;
        for l in 0..self.config.layers {
            (ctx, int) = self.layer(t, l, ctx, int)?;
        }
        let int = int.expect("queries present");
        let h = self.node_slice(t, int, input.roles.outcome_node)?;
        self.decode(t, h)
    }
}
