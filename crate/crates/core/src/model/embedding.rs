use rand::Rng;

use super::{Ablation, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, LayerNorm, Linear, ParamStore, Scalar, Tensor, Var};

/// Fixed sinusoidal position table, `len × width`.
pub fn positional_encoding<T: Scalar>(len: usize, width: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * width);
    for pos in 0..len {
        for i in 0..width {
            let exponent = (2 * (i / 2)) as f64 / width as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data.push(T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, width], data).expect("length matches")
}

/// Token, temporal and position embeddings, with static context fused in
/// through time-softmax weights.
#[derive(Clone, Debug)]
pub struct SiEmbedding {
    token: Linear,
    temporal: Linear,
    fusion: Option<Fusion>,
}

#[derive(Clone, Debug)]
struct Fusion {
    static_proj: Linear,
    time_weight: Linear,
    norm: LayerNorm,
}

impl SiEmbedding {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        config: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let dm = config.d_model;
        let token = Linear::new(store, &format!("{name}.token"), config.token_width(), dm, true, rng)?;
        let temporal = Linear::new(store, &format!("{name}.temporal"), config.mark_dim.max(1), dm, true, rng)?;
        let fusion = if config.has_static() && config.ablation != Ablation::DeSi {
            Some(Fusion {
                static_proj: Linear::new(store, &format!("{name}.static_proj"), config.static_dim, dm, true, rng)?,
                time_weight: Linear::new(store, &format!("{name}.time_weight"), dm, 1, true, rng)?,
                norm: LayerNorm::new(store, &format!("{name}.norm"), dm)?,
            })
        } else {
            None
        };
        Ok(SiEmbedding {
            token,
            temporal,
            fusion,
        })
    }

    /// `x: B × len × token_width`, `marks: B × len × m`, `statics: B × c`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        config: &ModelConfig,
        x: Var,
        marks: Var,
        statics: Option<Var>,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || g.shape(marks)[..2] != shape[..2] {
            return Err(Error::config(format!(
                "embedding inputs disagree: x {:?}, marks {:?}",
                shape,
                g.shape(marks)
            )));
        }
        let (b, len) = (shape[0], shape[1]);
        let tok = self.token.forward(g, store, x)?;
        let marks = if config.mark_dim == 0 {
            g.constant(Tensor::zeros(vec![b, len, 1]))
        } else {
            marks
        };
        let tmp = self.temporal.forward(g, store, marks)?;
        let pos = g.constant(positional_encoding(len, config.d_model));
        let sum = g.add(tok, tmp)?;
        let e_x = g.add(sum, pos)?;
        let Some(fusion) = &self.fusion else {
            return Ok(e_x);
        };
        let statics = statics.ok_or_else(|| Error::config("static context is missing"))?;
        if g.shape(statics) != [b, config.static_dim] {
            return Err(Error::config(format!(
                "static context has shape {:?}, expected [{b}, {}]",
                g.shape(statics),
                config.static_dim
            )));
        }
        let e_si = fusion.static_proj.forward(g, store, statics)?;
        let e_si = g.reshape(e_si, &[b, 1, config.d_model])?;
        let logits = fusion.time_weight.forward(g, store, e_x)?;
        let weights = g.softmax(logits, 1)?;
        let e_f = g.mul(weights, e_si)?;
        let e_f = g.dropout(e_f, config.dropout);
        let sum = g.add(e_x, e_f)?;
        fusion.norm.forward(g, store, sum)
    }

    /// Time-axis fusion weights, `B × len × 1`, for inspection.
    pub fn fusion_weights<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        config: &ModelConfig,
        x: Var,
        marks: Var,
    ) -> Result<Option<Var>> {
        let Some(fusion) = &self.fusion else {
            return Ok(None);
        };
        let cfg = ModelConfig {
            static_dim: 0,
            ..config.clone()
        };
        let plain = SiEmbedding {
            token: self.token.clone(),
            temporal: self.temporal.clone(),
            fusion: None,
        };
        let e_x = plain.forward(g, store, &cfg, x, marks, None)?;
        let logits = fusion.time_weight.forward(g, store, e_x)?;
        Ok(Some(g.softmax(logits, 1)?))
    }
}
