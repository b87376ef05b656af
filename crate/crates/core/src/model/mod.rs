//! Transformer encoder-decoder with static-context embedding, echo layers in
//! the encoder and echo-padded decoder inputs.

mod checkpoint;
mod embedding;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::echo::{echo_layer, echo_padding, EchoConfig, EchoProjections, EchoSelection};
use crate::error::{Error, Result};
use crate::pool::MetaPatternPool;
use crate::tensor::{
    causal_mask, FeedForward, Graph, LayerNorm, Linear, MultiHeadAttention, ParamStore, Scalar,
    Tensor, Var,
};

pub use checkpoint::{
    from_bytes as checkpoint_from_bytes, load_checkpoint, save_checkpoint, to_bytes as checkpoint_to_bytes,
    Checkpoint, CheckpointMeta,
};
pub use embedding::{positional_encoding, SiEmbedding};

/// Which component is replaced, for ablation runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Pool filled with random waveforms and never updated.
    DeMpp,
    /// Echo layer replaced by a linear fusion of the pool mean.
    DeEl,
    /// Echo padding replaced by zeros.
    DeEp,
    /// Static context stacked onto the inputs instead of fused.
    DeSi,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::None,
        Ablation::DeMpp,
        Ablation::DeEl,
        Ablation::DeEp,
        Ablation::DeSi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::DeMpp => "de_mpp",
            Ablation::DeEl => "de_el",
            Ablation::DeEp => "de_ep",
            Ablation::DeSi => "de_si",
        }
    }
}

fn d_lookback() -> usize {
    48
}
fn d_horizon() -> usize {
    24
}
fn d_start_token() -> usize {
    12
}
fn d_features() -> usize {
    1
}
fn d_model() -> usize {
    64
}
fn d_heads() -> usize {
    4
}
fn d_enc() -> usize {
    2
}
fn d_dec() -> usize {
    1
}
fn d_top_k() -> usize {
    16
}
fn d_slice() -> usize {
    16
}
fn d_marks() -> usize {
    2
}
fn d_dropout() -> f64 {
    0.05
}
fn d_period() -> usize {
    24
}
fn d_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Lookback length `L`.
    #[serde(default = "d_lookback")]
    pub lookback: usize,
    /// Forecast horizon `L_y`.
    #[serde(default = "d_horizon")]
    pub horizon: usize,
    /// Observed steps prepended to the decoder input.
    #[serde(default = "d_start_token")]
    pub start_token: usize,
    /// Input features `d`.
    #[serde(default = "d_features")]
    pub features: usize,
    #[serde(default = "d_model")]
    pub d_model: usize,
    #[serde(default = "d_heads")]
    pub heads: usize,
    #[serde(default = "d_enc")]
    pub encoder_layers: usize,
    #[serde(default = "d_dec")]
    pub decoder_layers: usize,
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    #[serde(default = "d_slice")]
    pub slice_len: usize,
    /// Static context width `c`; 0 disables static fusion.
    #[serde(default)]
    pub static_dim: usize,
    /// Temporal mark features per step.
    #[serde(default = "d_marks")]
    pub mark_dim: usize,
    #[serde(default = "d_dropout")]
    pub dropout: f64,
    /// Decomposition period used by echo padding.
    #[serde(default = "d_period")]
    pub period: usize,
    /// Echo after every encoder layer, or only after the last.
    #[serde(default = "d_true")]
    pub echo_every_layer: bool,
    #[serde(default)]
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("start_token", self.start_token),
            ("features", self.features),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("top_k", self.top_k),
            ("slice_len", self.slice_len),
            ("period", self.period),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::config(format!("d_model = {} must be even", self.d_model)));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_model = {} is not divisible by heads = {}",
                self.d_model, self.heads
            )));
        }
        if !self.lookback.is_multiple_of(self.slice_len) {
            return Err(Error::config(format!(
                "L mod s != 0: lookback L = {} is not a multiple of slice length s = {}",
                self.lookback, self.slice_len
            )));
        }
        if self.start_token >= self.lookback {
            return Err(Error::config(format!(
                "start token {} must be shorter than the lookback {}",
                self.start_token, self.lookback
            )));
        }
        if self.ablation != Ablation::DeEp
            && self.horizon.div_ceil(self.slice_len) * self.slice_len > self.lookback
        {
            return Err(Error::config(format!(
                "echo padding needs ceil(L_y / s) * s = {} lookback steps, L = {}",
                self.horizon.div_ceil(self.slice_len) * self.slice_len,
                self.lookback
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn echo_config(&self) -> EchoConfig {
        EchoConfig {
            top_k: self.top_k,
            slice_len: self.slice_len,
            d_model: self.d_model,
        }
    }

    /// Decoder sequence length.
    pub fn decoder_len(&self) -> usize {
        self.start_token + self.horizon
    }

    /// Static context reaches the model (fused or stacked).
    fn has_static(&self) -> bool {
        self.static_dim > 0
    }

    fn token_width(&self) -> usize {
        if self.ablation == Ablation::DeSi {
            self.features + self.static_dim
        } else {
            self.features
        }
    }
}

/// Model inputs for one batch.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    /// `B × L × d` lookback values.
    pub x: Tensor<T>,
    /// `B × L × m` lookback marks.
    pub marks_x: Tensor<T>,
    /// `B × (L_token + L_y) × m` decoder marks.
    pub marks_y: Tensor<T>,
    /// `B × c` static context, when `c > 0`.
    pub statics: Option<Tensor<T>>,
    /// `B × L_y × d` targets, when known.
    pub y: Option<Tensor<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn size(&self) -> usize {
        self.x.shape()[0]
    }
}

/// Selections made during one forward pass, for inspection.
#[derive(Clone, Debug, Default)]
pub struct EchoTrace {
    /// Per encoder layer with an echo layer: one selection per block.
    pub layers: Vec<Vec<EchoSelection>>,
    /// Selections made by echo padding.
    pub padding: Vec<EchoSelection>,
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// `B × L_y × d` prediction.
    pub prediction: Var,
    pub trace: EchoTrace,
}

#[derive(Clone, Debug)]
enum EchoBlock {
    Echo(EchoProjections),
    /// Linear fusion of the second feature half with the tiled pool mean.
    Fuse(Linear),
    Off,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm1: LayerNorm,
    ff: FeedForward,
    norm2: LayerNorm,
    echo: EchoBlock,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: MultiHeadAttention,
    norm1: LayerNorm,
    cross_attn: MultiHeadAttention,
    norm2: LayerNorm,
    ff: FeedForward,
    norm3: LayerNorm,
}

/// The forecasting model: parameters plus the layer layout over them.
#[derive(Clone, Debug)]
pub struct EchoFormer<T: Scalar = f32> {
    config: ModelConfig,
    store: ParamStore<T>,
    enc_embed: SiEmbedding,
    dec_embed: SiEmbedding,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    pad_reduce: Option<Linear>,
    head: Linear,
}

impl<T: Scalar> EchoFormer<T> {
    /// Fresh model with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dm = config.d_model;
        let enc_embed = SiEmbedding::new(&mut store, "enc_embed", &config, &mut rng)?;
        let dec_embed = SiEmbedding::new(&mut store, "dec_embed", &config, &mut rng)?;
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for i in 0..config.encoder_layers {
            let name = format!("encoder.{i}");
            let attn = MultiHeadAttention::new(&mut store, &format!("{name}.attn"), dm, config.heads, &mut rng)?;
            let norm1 = LayerNorm::new(&mut store, &format!("{name}.norm1"), dm)?;
            let ff = FeedForward::new(&mut store, &format!("{name}.ff"), dm, 4 * dm, &mut rng)?;
            let norm2 = LayerNorm::new(&mut store, &format!("{name}.norm2"), dm)?;
            let with_echo = config.echo_every_layer || i + 1 == config.encoder_layers;
            let echo = match (with_echo, config.ablation) {
                (false, _) => EchoBlock::Off,
                (true, Ablation::DeEl) => EchoBlock::Fuse(Linear::new(
                    &mut store,
                    &format!("{name}.fuse"),
                    dm / 2 + 1,
                    dm / 2,
                    true,
                    &mut rng,
                )?),
                (true, _) => EchoBlock::Echo(EchoProjections::new(
                    &mut store,
                    &format!("{name}.echo"),
                    dm,
                    config.top_k,
                    &mut rng,
                )?),
            };
            encoder.push(EncoderLayer {
                attn,
                norm1,
                ff,
                norm2,
                echo,
            });
        }
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for i in 0..config.decoder_layers {
            let name = format!("decoder.{i}");
            decoder.push(DecoderLayer {
                self_attn: MultiHeadAttention::new(&mut store, &format!("{name}.self_attn"), dm, config.heads, &mut rng)?,
                norm1: LayerNorm::new(&mut store, &format!("{name}.norm1"), dm)?,
                cross_attn: MultiHeadAttention::new(&mut store, &format!("{name}.cross_attn"), dm, config.heads, &mut rng)?,
                norm2: LayerNorm::new(&mut store, &format!("{name}.norm2"), dm)?,
                ff: FeedForward::new(&mut store, &format!("{name}.ff"), dm, 4 * dm, &mut rng)?,
                norm3: LayerNorm::new(&mut store, &format!("{name}.norm3"), dm)?,
            });
        }
        let pad_reduce = if config.ablation == Ablation::DeEp {
            None
        } else {
            Some(Linear::new(
                &mut store,
                "pad_reduce",
                config.features,
                config.top_k,
                true,
                &mut rng,
            )?)
        };
        let head = Linear::new(&mut store, "head", dm, config.features, true, &mut rng)?;
        Ok(EchoFormer {
            config,
            store,
            enc_embed,
            dec_embed,
            encoder,
            decoder,
            pad_reduce,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    fn check_batch(&self, batch: &Batch<T>) -> Result<usize> {
        let c = &self.config;
        let b = batch.x.shape().first().copied().unwrap_or(0);
        let expect = |name: &str, got: &[usize], want: &[usize]| -> Result<()> {
            if got != want {
                return Err(Error::config(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )));
            }
            Ok(())
        };
        expect("x", batch.x.shape(), &[b, c.lookback, c.features])?;
        expect("marks_x", batch.marks_x.shape(), &[b, c.lookback, c.mark_dim])?;
        expect("marks_y", batch.marks_y.shape(), &[b, c.decoder_len(), c.mark_dim])?;
        match (&batch.statics, c.static_dim) {
            (None, 0) => {}
            (Some(_), 0) => return Err(Error::config("static context given but static_dim is 0")),
            (Some(s), dim) => expect("static", s.shape(), &[b, dim])?,
            (None, dim) => {
                return Err(Error::config(format!("static context of width {dim} is missing")))
            }
        }
        if let Some(y) = &batch.y {
            expect("y", y.shape(), &[b, c.horizon, c.features])?;
        }
        Ok(b)
    }

    /// Stacks static context onto every step of `x` (`de_si`).
    fn stack_static(&self, g: &mut Graph<T>, x: Var, statics: Option<&Tensor<T>>) -> Result<Var> {
        if self.config.ablation != Ablation::DeSi || !self.config.has_static() {
            return Ok(x);
        }
        let s = statics.expect("checked by check_batch");
        let shape = g.shape(x).to_vec();
        let (b, len, c) = (shape[0], shape[1], s.shape()[1]);
        let mut data = Vec::with_capacity(b * len * c);
        for bi in 0..b {
            let row = &s.data()[bi * c..(bi + 1) * c];
            for _ in 0..len {
                data.extend_from_slice(row);
            }
        }
        let tiled = g.constant(Tensor::new(vec![b, len, c], data)?);
        g.concat(&[x, tiled], 2)
    }

    /// Full forward pass on tape `g`.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        batch: &Batch<T>,
        pool: Option<&MetaPatternPool>,
    ) -> Result<ForwardOutput> {
        let c = &self.config;
        let b = self.check_batch(batch)?;
        let pool = match pool {
            Some(p) if p.occupancy() > 0 => p,
            _ => return Err(Error::state("forward pass needs a constructed pattern pool")),
        };
        c.echo_config().validate(c.lookback, Some(pool))?;
        let store = &self.store;
        let statics = batch.statics.as_ref().map(|s| g.constant(s.clone()));
        let mut trace = EchoTrace::default();

        // Encoder.
        let x = g.constant(batch.x.clone());
        let x_in = self.stack_static(g, x, batch.statics.as_ref())?;
        let marks = g.constant(batch.marks_x.clone());
        let mut h = self.enc_embed.forward(g, store, c, x_in, marks, statics)?;
        for layer in &self.encoder {
            let a = layer.attn.forward(g, store, h, h, None)?;
            let a = g.dropout(a, c.dropout);
            let sum = g.add(h, a)?;
            h = layer.norm1.forward(g, store, sum)?;
            let f = layer.ff.forward(g, store, h)?;
            let f = g.dropout(f, c.dropout);
            let sum = g.add(h, f)?;
            h = layer.norm2.forward(g, store, sum)?;
            match &layer.echo {
                EchoBlock::Echo(proj) => {
                    let (out, sel) = echo_layer(g, store, proj, h, pool, c.top_k)?;
                    trace.layers.push(sel);
                    h = out;
                }
                EchoBlock::Fuse(fuse) => h = self.fuse_pool_mean(g, store, fuse, h, pool)?,
                EchoBlock::Off => {}
            }
        }
        let memory = h;

        // Decoder input: start token followed by the horizon filler.
        let token = g.slice(x, 1, c.lookback - c.start_token, c.lookback)?;
        let filler = match &self.pad_reduce {
            Some(pad) => {
                let out = echo_padding(g, store, pad, &batch.x, pool, c.top_k, c.horizon, c.period)?;
                trace.padding = out.selections;
                out.values
            }
            None => g.constant(Tensor::zeros(vec![b, c.horizon, c.features])),
        };
        let x_de = g.concat(&[token, filler], 1)?;
        let x_de = self.stack_static(g, x_de, batch.statics.as_ref())?;
        let marks_de = g.constant(batch.marks_y.clone());
        let mut d = self.dec_embed.forward(g, store, c, x_de, marks_de, statics)?;
        let mask = g.constant(causal_mask(c.decoder_len()));
        for layer in &self.decoder {
            let a = layer.self_attn.forward(g, store, d, d, Some(mask))?;
            let a = g.dropout(a, c.dropout);
            let sum = g.add(d, a)?;
            d = layer.norm1.forward(g, store, sum)?;
            let a = layer.cross_attn.forward(g, store, d, memory, None)?;
            let a = g.dropout(a, c.dropout);
            let sum = g.add(d, a)?;
            d = layer.norm2.forward(g, store, sum)?;
            let f = layer.ff.forward(g, store, d)?;
            let f = g.dropout(f, c.dropout);
            let sum = g.add(d, f)?;
            d = layer.norm3.forward(g, store, sum)?;
        }
        let out = self.head.forward(g, store, d)?;
        let prediction = g.slice(out, 1, c.start_token, c.decoder_len())?;
        Ok(ForwardOutput { prediction, trace })
    }

    fn fuse_pool_mean(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fuse: &Linear,
        h: Var,
        pool: &MetaPatternPool,
    ) -> Result<Var> {
        let shape = g.shape(h).to_vec();
        let (b, len, dm) = (shape[0], shape[1], shape[2]);
        let first = g.slice(h, 2, 0, dm / 2)?;
        let second = g.slice(h, 2, dm / 2, dm)?;
        let mean = pool.mean_pattern();
        let s = mean.len();
        let tiled: Vec<f64> = (0..b * len).map(|i| mean[(i % len) % s]).collect();
        let tiled = g.constant(Tensor::from_f64(vec![b, len, 1], &tiled)?);
        let joined = g.concat(&[second, tiled], 2)?;
        let fused = fuse.forward(g, store, joined)?;
        g.concat(&[first, fused], 2)
    }

    /// Forward pass plus mean squared error against `batch.y`.
    pub fn loss(
        &self,
        g: &mut Graph<T>,
        batch: &Batch<T>,
        pool: Option<&MetaPatternPool>,
    ) -> Result<(Var, ForwardOutput)> {
        let y = batch
            .y
            .as_ref()
            .ok_or_else(|| Error::input("batch has no targets"))?;
        let out = self.forward(g, batch, pool)?;
        let target = g.constant(y.clone());
        let loss = g.mse(out.prediction, target)?;
        Ok((loss, out))
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, batch: &Batch<T>, pool: Option<&MetaPatternPool>) -> Result<(Tensor<T>, EchoTrace)> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, batch, pool)?;
        Ok((g.value(out.prediction).clone(), out.trace))
    }

    /// Copies parameter values from another precision.
    pub fn cast<U: Scalar>(&self) -> EchoFormer<U> {
        let mut store = ParamStore::new();
        for (_, p) in self.store.iter() {
            store
                .register(p.name.clone(), p.value.cast())
                .expect("names are unique in the source");
        }
        EchoFormer {
            config: self.config.clone(),
            store,
            enc_embed: self.enc_embed.clone(),
            dec_embed: self.dec_embed.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            pad_reduce: self.pad_reduce.clone(),
            head: self.head.clone(),
        }
    }
}
