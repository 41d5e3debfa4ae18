use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cluster_sim::ExpertCluster;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var, LAYER_NORM_EPS};

use super::block::{BlockDims, BlockOutput, TransformerBlock};
use super::layer::{MoeLayerConfig, MoeOutput};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub seq_len: usize,
    pub layers: usize,
    pub dims: BlockDims,
    pub moe: MoeLayerConfig,
}

/// Decoder-only language model built from MoE transformer blocks.
pub struct MoeLanguageModel {
    config: ModelConfig,
    token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: Vec<TransformerBlock>,
    final_gain: ParamId,
    final_bias: ParamId,
    head: ParamId,
}

pub struct ModelOutput {
    pub logits: Var,
    /// Mean next-token cross-entropy.
    pub lm_loss: Var,
    /// Sum of every routed layer's weighted balancing loss.
    pub aux_loss: Var,
    /// `lm_loss + aux_loss`.
    pub loss: Var,
    pub blocks: Vec<BlockOutput>,
}

impl ModelOutput {
    /// Every routed layer invocation, block by block, attention projections
    /// before the feed-forward layer.
    pub fn moe_layers(&self) -> impl Iterator<Item = &MoeOutput> {
        self.blocks
            .iter()
            .flat_map(|b| b.attention.moe.iter().chain(std::iter::once(&b.ffn)))
    }
}

impl MoeLanguageModel {
    pub fn new<R: Rng>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        if config.vocab == 0 || config.seq_len == 0 || config.layers == 0 {
            return Err(Error::Config("vocab, seq_len and layers must be positive".into()));
        }
        let m = config.dims.model_dim;
        let token_embedding = store.add("embed.tokens", Tensor::randn(&[config.vocab, m], 1.0, rng))?;
        let position_embedding = store.add("embed.positions", Tensor::randn(&[config.seq_len, m], 0.1, rng))?;
        let blocks = (0..config.layers)
            .map(|l| TransformerBlock::new(store, &format!("block{l}"), config.dims, config.moe, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_gain = store.add("final_ln.gain", Tensor::full(&[m], 1.0))?;
        let final_bias = store.add("final_ln.bias", Tensor::zeros(&[m]))?;
        let head = store.add("head", Tensor::randn(&[m, config.vocab], 0.02, rng))?;
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_gain,
            final_bias,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[TransformerBlock] {
        &self.blocks
    }

    /// `inputs` and `targets` hold `B` sequences of `seq_len` tokens back to back.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cluster: &mut ExpertCluster,
        inputs: &[usize],
        targets: &[usize],
    ) -> Result<ModelOutput> {
        let l = self.config.seq_len;
        if inputs.is_empty() || !inputs.len().is_multiple_of(l) || targets.len() != inputs.len() {
            return Err(Error::Input(format!(
                "{} inputs and {} targets do not form whole length-{l} sequences",
                inputs.len(),
                targets.len()
            )));
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Input(format!("token {bad} outside vocabulary of {}", self.config.vocab)));
        }
        let emb = g.param(store, self.token_embedding)?;
        let pos = g.param(store, self.position_embedding)?;
        let tok = g.gather_rows(emb, inputs.iter().map(|&t| Some(t)).collect())?;
        let at = g.gather_rows(pos, (0..inputs.len()).map(|i| Some(i % l)).collect())?;
        let mut h = g.add(tok, at)?;

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(g, store, cluster, h, l)?;
            h = out.output;
            blocks.push(out);
        }
        let (gain, bias) = (g.param(store, self.final_gain)?, g.param(store, self.final_bias)?);
        let h = g.layer_norm(h, gain, bias, LAYER_NORM_EPS)?;
        let head = g.param(store, self.head)?;
        let logits = g.matmul(h, head)?;
        let lm_loss = g.cross_entropy(logits, targets)?;

        let mut aux_loss = blocks[0].aux_loss(g)?;
        for b in &blocks[1..] {
            let a = b.aux_loss(g)?;
            aux_loss = g.add(aux_loss, a)?;
        }
        let loss = g.add(lm_loss, aux_loss)?;
        Ok(ModelOutput {
            logits,
            lm_loss,
            aux_loss,
            loss,
            blocks,
        })
    }
}
