use ndgrad::nn::{self, Conv2d, Ctx, LayerNorm, Linear, MultiHeadAttention, ParamInit};
use ndgrad::{Real, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use microrts::{Observation, ENTITY_FEATURES, NUM_PLANES, SCALAR_LAYOUT, SCALAR_SIZE};

use crate::config::NetConfig;

pub(crate) fn constant<T: Real>(ctx: &Ctx<'_, T>, shape: &[usize], values: &[f32]) -> Result<Var, TensorError> {
    Ok(ctx.tape.constant(Tensor::new(shape.to_vec(), values.iter().map(|v| T::from_f64(*v as f64)).collect())?))
}

#[derive(Clone, Debug)]
struct TransformerLayer {
    attention: MultiHeadAttention,
    norm1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    norm2: LayerNorm,
}

/// Entity encoder output.
pub struct EntityEncoding {
    /// `[max_entities, entity_embedding_size]`.
    pub entity_embeddings: Var,
    /// `[original_256]`.
    pub embedded_entity: Var,
    /// Transformer output before the per-entity convolution.
    pub transformer_out: Option<Var>,
    /// One `[heads, N, N]` tensor per encoder layer.
    pub attention: Vec<Tensor<f64>>,
    /// False when no slot is valid; the embeddings are then all zero.
    pub any_valid: bool,
}

#[derive(Clone, Debug)]
pub struct EntityEncoder {
    embed: Linear,
    layers: Vec<TransformerLayer>,
    conv: Linear,
    pool: Linear,
    n: usize,
    width: usize,
    pooled: usize,
    dropout: f64,
}

impl EntityEncoder {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, cfg: &NetConfig) -> Result<Self, TensorError> {
        let e = cfg.entity_embedding_size;
        init.scope("entity", |p| {
            let layers = (0..cfg.transformer_layers)
                .map(|i| {
                    p.scope(&format!("layer{i}"), |q| {
                        Ok(TransformerLayer {
                            attention: MultiHeadAttention::new(q, "attention", e, cfg.transformer_heads)?,
                            norm1: LayerNorm::new(q, "norm1", e)?,
                            ff1: Linear::new(q, "ff1", e, cfg.original_1024)?,
                            ff2: Linear::new(q, "ff2", cfg.original_1024, e)?,
                            norm2: LayerNorm::new(q, "norm2", e)?,
                        })
                    })
                })
                .collect::<Result<_, TensorError>>()?;
            Ok(EntityEncoder {
                embed: Linear::new(p, "embed", ENTITY_FEATURES, e)?,
                layers,
                conv: Linear::new(p, "conv", e, e)?,
                pool: Linear::new(p, "pool", e, cfg.original_256)?,
                n: cfg.max_entities,
                width: e,
                pooled: cfg.original_256,
                dropout: cfg.transformer_dropout,
            })
        })
    }

    /// Pooling layer applied to the masked mean of the transformer output.
    pub fn pool<T: Real>(&self, ctx: &Ctx<'_, T>, mean: Var) -> Result<Var, TensorError> {
        self.pool.forward_relu(ctx, mean)
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &Ctx<'_, T>,
        obs: &Observation,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EntityEncoding, TensorError> {
        let tape = ctx.tape;
        let valid = &obs.entity_valid;
        let k = valid.iter().filter(|v| **v).count();
        if k == 0 {
            return Ok(EntityEncoding {
                entity_embeddings: tape.constant(Tensor::zeros(&[self.n, self.width])),
                embedded_entity: tape.constant(Tensor::zeros(&[self.pooled])),
                transformer_out: None,
                attention: Vec::new(),
                any_valid: false,
            });
        }
        let x = constant(ctx, &[self.n, ENTITY_FEATURES], &obs.entities)?;
        let mut x = self.embed.forward(ctx, x)?;
        let mut attention = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (att, weights) = layer.attention.forward(ctx, x, valid)?;
            attention.push(weights.cast::<f64>());
            x = layer.norm1.forward(ctx, tape.add(x, att)?)?;
            let h = layer.ff1.forward_relu(ctx, x)?;
            let h = nn::dropout(tape, h, self.dropout, dropout_rng.as_deref_mut())?;
            let ff = layer.ff2.forward(ctx, h)?;
            x = layer.norm2.forward(ctx, tape.add(x, ff)?)?;
        }
        let entity_embeddings = self.conv.forward_relu(ctx, tape.relu(x)?)?;
        let inv = T::from_f64(1.0 / k as f64);
        let w = Tensor::new(vec![1, self.n], valid.iter().map(|v| if *v { inv } else { T::from_f64(0.0) }).collect())?;
        let w = tape.constant(w);
        let mean = tape.reshape(tape.matmul(w, x)?, &[self.width])?;
        let embedded_entity = self.pool(ctx, mean)?;
        Ok(EntityEncoding { entity_embeddings, embedded_entity, transformer_out: Some(x), attention, any_valid: true })
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResBlock {
    fn new<R: Rng>(init: &mut ParamInit<'_, R>, name: &str, channels: usize) -> Result<Self, TensorError> {
        init.scope(name, |p| {
            Ok(ResBlock {
                conv1: Conv2d::new(p, "conv1", channels, channels, 3, 1, 1)?,
                conv2: Conv2d::new(p, "conv2", channels, channels, 3, 1, 1)?,
            })
        })
    }

    fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, x: Var) -> Result<Var, TensorError> {
        let y = ctx.tape.relu(self.conv1.forward(ctx, x)?)?;
        let y = self.conv2.forward(ctx, y)?;
        ctx.tape.relu(ctx.tape.add(x, y)?)
    }
}

#[derive(Clone, Debug)]
pub struct SpatialEncoder {
    project: Conv2d,
    down: Vec<Conv2d>,
    res: Vec<ResBlock>,
    fc: Linear,
    size: usize,
    skip_channels: usize,
    skip_size: usize,
}

impl SpatialEncoder {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, cfg: &NetConfig) -> Result<Self, TensorError> {
        let s = cfg.map_skip_size();
        init.scope("spatial", |p| {
            let chans = [cfg.original_32, cfg.original_64, cfg.original_128, cfg.original_128];
            Ok(SpatialEncoder {
                project: Conv2d::new(p, "project", cfg.map_channels, cfg.original_32, 1, 1, 0)?,
                down: (0..3)
                    .map(|i| Conv2d::new(p, &format!("down{i}"), chans[i], chans[i + 1], 4, 2, 1))
                    .collect::<Result<_, _>>()?,
                res: (0..cfg.n_resblocks)
                    .map(|i| ResBlock::new(p, &format!("res{i}"), cfg.original_128))
                    .collect::<Result<_, _>>()?,
                fc: Linear::new(p, "fc", cfg.original_128 * s * s, cfg.original_256)?,
                size: cfg.minimap_size,
                skip_channels: cfg.original_128,
                skip_size: s,
            })
        })
    }

    /// Returns `(map_skip [original_128, M/8, M/8], embedded_spatial)`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, obs: &Observation) -> Result<(Var, Var), TensorError> {
        let tape = ctx.tape;
        let x = constant(ctx, &[NUM_PLANES, self.size, self.size], &obs.spatial)?;
        let mut x = tape.relu(self.project.forward(ctx, x)?)?;
        for conv in &self.down {
            x = tape.relu(conv.forward(ctx, x)?)?;
        }
        for block in &self.res {
            x = block.forward(ctx, x)?;
        }
        let flat = tape.reshape(x, &[self.skip_channels * self.skip_size * self.skip_size])?;
        let embedded = self.fc.forward_relu(ctx, flat)?;
        Ok((x, embedded))
    }
}

#[derive(Clone, Debug)]
pub struct ScalarEncoder {
    elements: Vec<(Linear, usize, usize, bool)>,
    embed: Linear,
    context: Linear,
}

impl ScalarEncoder {
    pub fn new<R: Rng>(init: &mut ParamInit<'_, R>, cfg: &NetConfig) -> Result<Self, TensorError> {
        let widths = cfg.scalar_element_widths();
        init.scope("scalar", |p| {
            let mut offset = 0;
            let mut elements = Vec::new();
            for (field, (width, is_ctx)) in SCALAR_LAYOUT.iter().zip(&widths) {
                elements.push((Linear::new(p, field.name, field.width, *width)?, offset, field.width, *is_ctx));
                offset += field.width;
            }
            let [total, ctx_total] = cfg.scalar_encoder_fc_input;
            Ok(ScalarEncoder {
                elements,
                embed: Linear::new(p, "embed", total, cfg.embedded_scalar_size())?,
                context: Linear::new(p, "context", ctx_total, cfg.context_size)?,
            })
        })
    }

    /// Returns `(embedded_scalar, scalar_context)`.
    pub fn forward<T: Real>(&self, ctx: &Ctx<'_, T>, obs: &Observation) -> Result<(Var, Var), TensorError> {
        let tape = ctx.tape;
        if obs.scalar.len() != SCALAR_SIZE {
            return Err(TensorError::Shape {
                op: "scalar_encoder",
                detail: format!("{} scalar features, layout has {SCALAR_SIZE}", obs.scalar.len()),
            });
        }
        let x = constant(ctx, &[SCALAR_SIZE], &obs.scalar)?;
        let mut all = Vec::with_capacity(self.elements.len());
        let mut context = Vec::new();
        for (linear, offset, width, is_ctx) in &self.elements {
            let part = tape.narrow(x, 0, *offset, *width)?;
            let e = linear.forward_relu(ctx, part)?;
            all.push(e);
            if *is_ctx {
                context.push(e);
            }
        }
        let embedded = self.embed.forward_relu(ctx, tape.concat(&all, 0)?)?;
        let scalar_context = self.context.forward_relu(ctx, tape.concat(&context, 0)?)?;
        Ok((embedded, scalar_context))
    }
}
