use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster_sim::ExpertCluster;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};

use super::attention::{Attention, AttentionOutput};
use super::layer::{MoeLayer, MoeLayerConfig, MoeOutput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDims {
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
}

struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain)?, g.param(store, self.bias)?);
        g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
    }
}

pub struct BlockOutput {
    pub output: Var,
    pub attention: AttentionOutput,
    pub ffn: MoeOutput,
}

impl BlockOutput {
    /// Sum of the balancing losses of every routed layer in the block.
    pub fn aux_loss(&self, g: &mut Graph) -> Result<Var> {
        let mut total = self.ffn.aux_loss;
        for m in &self.attention.moe {
            total = g.add(total, m.aux_loss)?;
        }
        Ok(total)
    }
}

/// Pre-norm transformer block: `h = x + Attn(LN(x))`, `y = h + MoE(LN(h))`.
pub struct TransformerBlock {
    ln1: Norm,
    attention: Attention,
    ln2: Norm,
    ffn: MoeLayer,
}

impl TransformerBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        dims: BlockDims,
        config: MoeLayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.model_dim == 0 || dims.hidden_dim == 0 {
            return Err(Error::Config("block dimensions must be positive".into()));
        }
        Ok(Self {
            ln1: Norm::new(store, &format!("{name}.ln1"), dims.model_dim)?,
            attention: Attention::new(store, &format!("{name}.attn"), dims.model_dim, dims.heads, &config, rng)?,
            ln2: Norm::new(store, &format!("{name}.ln2"), dims.model_dim)?,
            ffn: MoeLayer::ffn(store, &format!("{name}.moe"), dims.model_dim, dims.hidden_dim, config, rng)?,
        })
    }

    pub fn attention(&self) -> &Attention {
        &self.attention
    }

    pub fn ffn(&self) -> &MoeLayer {
        &self.ffn
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cluster: &mut ExpertCluster,
        x: Var,
        seq_len: usize,
    ) -> Result<BlockOutput> {
        let a_in = self.ln1.forward(g, store, x)?;
        let attention = self.attention.forward(g, store, cluster, a_in, seq_len)?;
        let h = g.add(x, attention.output)?;
        let f_in = self.ln2.forward(g, store, h)?;
        // A token the MoE layer drops entirely keeps `h` as the block output.
        let shape = g.shape(h).to_vec();
        let nothing = g.input(Tensor::zeros(&shape))?;
        let ffn = self.ffn.forward_with_passthrough(g, store, cluster, f_in, nothing)?;
        let output = g.add(h, ffn.output)?;
        Ok(BlockOutput {
            output,
            attention,
            ffn,
        })
    }
}
