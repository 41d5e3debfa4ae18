use rand::Rng;

use crate::cluster_sim::ExpertCluster;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

use super::layer::{MoeLayer, MoeLayerConfig, MoeOutput};

/// One of the Q, K, V, O maps.
pub enum Projection {
    Dense { w: ParamId, b: ParamId },
    Moe(MoeLayer),
}

impl Projection {
    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cluster: &mut ExpertCluster,
        x: Var,
        moe: &mut Vec<MoeOutput>,
    ) -> Result<Var> {
        match self {
            Projection::Dense { w, b } => {
                let (w, b) = (g.param(store, *w)?, g.param(store, *b)?);
                let y = g.matmul(x, w)?;
                g.add_row(y, b)
            }
            Projection::Moe(layer) => {
                let out = layer.forward(g, store, cluster, x)?;
                let y = out.output;
                moe.push(out);
                Ok(y)
            }
        }
    }
}

pub struct AttentionOutput {
    pub output: Var,
    /// Routed projections in Q, K, V, O order; empty for dense attention.
    pub moe: Vec<MoeOutput>,
}

/// Causal multi-head self-attention over `T = B·L` tokens laid out
/// sequence after sequence.
pub struct Attention {
    heads: usize,
    model_dim: usize,
    projections: [Projection; 4],
}

const PROJECTION_NAMES: [&str; 4] = ["q", "k", "v", "o"];

impl Attention {
    /// Dense projections unless `config.moe_attention` is set, in which case
    /// each projection is its own routed layer of linear experts with its own
    /// router.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        model_dim: usize,
        heads: usize,
        config: &MoeLayerConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide model width {model_dim}"
            )));
        }
        let std = 1.0 / (model_dim as f64).sqrt();
        let mut make = |p: &str| -> Result<Projection> {
            let pname = format!("{name}.{p}");
            if config.moe_attention {
                Ok(Projection::Moe(MoeLayer::linear(store, &pname, model_dim, *config, rng)?))
            } else {
                Ok(Projection::Dense {
                    w: store.add(format!("{pname}.w"), Tensor::randn(&[model_dim, model_dim], std, rng))?,
                    b: store.add(format!("{pname}.b"), Tensor::zeros(&[model_dim]))?,
                })
            }
        };
        let projections = [
            make(PROJECTION_NAMES[0])?,
            make(PROJECTION_NAMES[1])?,
            make(PROJECTION_NAMES[2])?,
            make(PROJECTION_NAMES[3])?,
        ];
        Ok(Self {
            heads,
            model_dim,
            projections,
        })
    }

    pub fn projections(&self) -> &[Projection; 4] {
        &self.projections
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cluster: &mut ExpertCluster,
        x: Var,
        seq_len: usize,
    ) -> Result<AttentionOutput> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.model_dim || seq_len == 0 || !shape[0].is_multiple_of(seq_len) {
            return Err(Error::Config(format!(
                "attention input {shape:?} is not a whole number of length-{seq_len} sequences of width {}",
                self.model_dim
            )));
        }
        let mut moe = Vec::new();
        let q = self.projections[0].forward(g, store, cluster, x, &mut moe)?;
        let k = self.projections[1].forward(g, store, cluster, x, &mut moe)?;
        let v = self.projections[2].forward(g, store, cluster, x, &mut moe)?;

        let head_dim = self.model_dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut sequences = Vec::with_capacity(shape[0] / seq_len);
        for b in 0..shape[0] / seq_len {
            let (qb, kb, vb) = (
                g.slice_rows(q, b * seq_len, seq_len)?,
                g.slice_rows(k, b * seq_len, seq_len)?,
                g.slice_rows(v, b * seq_len, seq_len)?,
            );
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.slice_cols(qb, h * head_dim, head_dim)?;
                let kh = g.slice_cols(kb, h * head_dim, head_dim)?;
                let vh = g.slice_cols(vb, h * head_dim, head_dim)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale)?;
                let attn = g.causal_softmax(scores)?;
                heads.push(g.matmul(attn, vh)?);
            }
            sequences.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(heads)? });
        }
        let ctx = if sequences.len() == 1 { sequences[0] } else { g.concat_rows(sequences)? };
        let output = self.projections[3].forward(g, store, cluster, ctx, &mut moe)?;
        Ok(AttentionOutput { output, moe })
    }
}
