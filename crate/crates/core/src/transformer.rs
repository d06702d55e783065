//! Relational attention layers over flattened feature grids.
//!
//! A layer runs `m` heads, each `softmax(A / √C) · X · W_val`, concatenates
//! them, fuses with `W^o, b^o`, then applies `act(·) W^f + b^f`. Layers have
//! no internal residual or normalisation; stacks re-inject the original
//! features before every layer.

use rand::Rng;

use crate::feature::Grid;
use crate::posenc::{absolute_encoding, relative_terms_from_projections, PosMode, RelativeTable, RelativeVars};
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Logit added for keys outside the part when masking logits instead of features.
const MASKED_LOGIT: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub channels: usize,
    pub head_dim: usize,
    pub heads: usize,
    pub mode: PosMode,
    /// Width of the relative offset rows; equals `channels` for sinusoid tables.
    pub rel_dim: usize,
    pub activation: Activation,
    /// Mask attention logits of keys outside the part instead of the features.
    pub mask_logits: bool,
}

impl LayerConfig {
    pub fn new(channels: usize, head_dim: usize, heads: usize, mode: PosMode) -> Self {
        Self {
            channels,
            head_dim,
            heads,
            mode,
            rel_dim: channels,
            activation: Activation::Relu,
            mask_logits: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeParams {
    /// `D×C_h`.
    pub w_rel: ParamId,
    /// `C_h×1`.
    pub u: ParamId,
    /// `C_h×1`.
    pub v: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadParams {
    pub w_qry: ParamId,
    pub w_key: ParamId,
    pub w_val: ParamId,
    pub rel: Option<RelativeParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayerParams {
    pub config: LayerConfig,
    pub heads: Vec<HeadParams>,
    /// `(m·C_h)×C`.
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub w_f: ParamId,
    pub b_f: ParamId,
    /// Trainable `(W·H)×C` table for [`PosMode::Learnable`].
    pub encoding: Option<ParamId>,
}

/// Uniform in `±1/√fan_in`.
pub fn uniform_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

/// Uniform in `±√(6/fan_in)`, for layers followed by a ReLU.
pub fn he_uniform_init<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

impl TransformerLayerParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        config: LayerConfig,
        grid: Grid,
        rng: &mut R,
    ) -> Self {
        let (c, ch) = (config.channels, config.head_dim);
        let heads = (0..config.heads)
            .map(|h| {
                let p = format!("{prefix}.head{h}");
                let w_qry = store.add(format!("{p}.w_qry"), uniform_init(rng, c, ch, c));
                let w_key = store.add(format!("{p}.w_key"), uniform_init(rng, c, ch, c));
                let w_val = store.add(format!("{p}.w_val"), he_uniform_init(rng, c, ch, c));
                let rel = (config.mode == PosMode::Relative).then(|| RelativeParams {
                    w_rel: store.add(
                        format!("{p}.w_rel"),
                        uniform_init(rng, config.rel_dim, ch, config.rel_dim),
                    ),
                    u: store.add(format!("{p}.u"), uniform_init(rng, ch, 1, ch)),
                    v: store.add(format!("{p}.v"), uniform_init(rng, ch, 1, ch)),
                });
                HeadParams { w_qry, w_key, w_val, rel }
            })
            .collect();
        let w_o = store.add(
            format!("{prefix}.w_o"),
            he_uniform_init(rng, config.heads * ch, c, config.heads * ch),
        );
        let b_o = store.add(format!("{prefix}.b_o"), Tensor::zeros(&[c]));
        let w_f = store.add(format!("{prefix}.w_f"), he_uniform_init(rng, c, c, c));
        let b_f = store.add(format!("{prefix}.b_f"), Tensor::zeros(&[c]));
        let encoding = (config.mode == PosMode::Learnable)
            .then(|| store.add(format!("{prefix}.pos"), Tensor::zeros(&[grid.pixels(), c])));
        Self { config, heads, w_o, b_o, w_f, b_f, encoding }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for h in &self.heads {
            ids.extend([h.w_qry, h.w_key, h.w_val]);
            if let Some(r) = h.rel {
                ids.extend([r.w_rel, r.u, r.v]);
            }
        }
        ids.extend([self.w_o, self.b_o, self.w_f, self.b_f]);
        ids.extend(self.encoding);
        ids
    }
}

/// Grid-dependent constants shared by every layer evaluated on that grid.
#[derive(Debug, Clone)]
pub struct PositionContext {
    pub grid: Grid,
    pub absolute: Option<Tensor>,
    pub relative: Option<RelativeTable>,
}

impl PositionContext {
    pub fn new(grid: Grid, channels: usize, mode: PosMode) -> Result<Self> {
        let absolute = match mode {
            PosMode::Absolute => Some(absolute_encoding(grid, channels)?),
            _ => None,
        };
        let relative = match mode {
            PosMode::Relative => Some(RelativeTable::sinusoid(grid, channels)?),
            _ => None,
        };
        Ok(Self { grid, absolute, relative })
    }

    pub fn with_relative_table(table: RelativeTable) -> Self {
        Self { grid: table.grid(), absolute: None, relative: Some(table) }
    }

    /// Positional encoding `E_t` to add before computing logits, if any.
    pub fn encoding(&self, g: &mut Graph, layer: &TransformerLayerParams) -> Option<Var> {
        match layer.config.mode {
            PosMode::Absolute => self.absolute.clone().map(|e| g.tape.constant(e)),
            PosMode::Learnable => layer.encoding.map(|id| g.param(id)),
            _ => None,
        }
    }
}

/// Attention logits `A` (`WH×WH`) for one head.
///
/// `none`: `X W_q (X W_k)ᵀ`; `absolute`/`learnable`: the same on `X + E`;
/// `relative`: content term plus the three offset/bias terms.
pub fn attention_logits(
    g: &mut Graph,
    x: Var,
    e: Option<Var>,
    head: &HeadParams,
    mode: PosMode,
    ctx: &PositionContext,
) -> Result<Var> {
    let w_qry = g.param(head.w_qry);
    let w_key = g.param(head.w_key);
    let input = match (mode, e) {
        (PosMode::Absolute | PosMode::Learnable, Some(e)) => g.tape.add(x, e)?,
        (PosMode::Absolute | PosMode::Learnable, None) => {
            return Err(TensorError::Argument(format!("mode {mode} needs a positional encoding")))
        }
        _ => x,
    };
    let q = g.tape.matmul(input, w_qry)?;
    let k = g.tape.matmul(input, w_key)?;
    let kt = g.tape.transpose(k);
    let content = g.tape.matmul(q, kt)?;
    if mode != PosMode::Relative {
        return Ok(content);
    }
    let (rel, table) = match (head.rel, ctx.relative.as_ref()) {
        (Some(rel), Some(table)) => (rel, table),
        _ => {
            return Err(TensorError::Argument(
                "relative mode needs relative head parameters and an offset table".into(),
            ))
        }
    };
    let vars = RelativeVars { w_rel: g.param(rel.w_rel), u: g.param(rel.u), v: g.param(rel.v) };
    let terms = relative_terms_from_projections(&mut g.tape, q, k, vars, table)?;
    g.tape.add(content, terms)
}

/// `softmax_rows(A, √C) · X · W_val`, with `C` the feature width of `x`.
pub fn attention_head(tape: &mut Tape, x: Var, a: Var, w_val: Var) -> Result<Var> {
    let p = tape.value(x).rows();
    let t = tape.value(a);
    if t.rows() != p || t.cols() != p {
        return Err(TensorError::Dimension {
            op: "attention_head",
            lhs: t.shape().to_vec(),
            rhs: tape.value(x).shape().to_vec(),
        });
    }
    let scale = (tape.value(x).cols() as f64).sqrt();
    let weights = tape.softmax_rows(a, scale)?;
    let values = tape.matmul(x, w_val)?;
    tape.matmul(weights, values)
}

/// `Concat(H_1..H_m) · W^o + b^o`.
pub fn multi_head(tape: &mut Tape, heads: &[Var], w_o: Var, b_o: Var) -> Result<Var> {
    let cat = tape.concat_cols(heads)?;
    let fused = tape.matmul(cat, w_o)?;
    tape.add_row_bias(fused, b_o)
}

fn mask_features(tape: &mut Tape, x: Var, mask: &[bool]) -> Result<Var> {
    let (p, c) = (tape.value(x).rows(), tape.value(x).cols());
    if mask.len() != p {
        return Err(TensorError::Dimension { op: "mask", lhs: vec![mask.len()], rhs: vec![p, c] });
    }
    let data = mask.iter().flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(c)).collect();
    let m = tape.constant(Tensor::matrix(p, c, data)?);
    tape.mul(x, m)
}

fn mask_logits(tape: &mut Tape, a: Var, mask: &[bool]) -> Result<Var> {
    let p = tape.value(a).rows();
    if mask.len() != p {
        return Err(TensorError::Dimension { op: "mask", lhs: vec![mask.len()], rhs: vec![p, p] });
    }
    let row: Vec<f64> = mask.iter().map(|&m| if m { 0.0 } else { MASKED_LOGIT }).collect();
    let data = row.iter().copied().cycle().take(p * p).collect();
    let bias = tape.constant(Tensor::matrix(p, p, data)?);
    tape.add(a, bias)
}

/// One head on part-masked input `X ⊙ p` (plus `E` for absolute modes),
/// attending over the full grid.
pub fn masked_head(
    g: &mut Graph,
    x: Var,
    e: Option<Var>,
    mask: &[bool],
    head: &HeadParams,
    mode: PosMode,
    ctx: &PositionContext,
) -> Result<Var> {
    let xm = mask_features(&mut g.tape, x, mask)?;
    let a = attention_logits(g, xm, e, head, mode, ctx)?;
    let w_val = g.param(head.w_val);
    attention_head(&mut g.tape, xm, a, w_val)
}

/// Multi-head attention, fusion and feed-forward: `act(O) W^f + b^f`.
pub fn transformer_layer(
    g: &mut Graph,
    input: Var,
    layer: &TransformerLayerParams,
    e: Option<Var>,
    ctx: &PositionContext,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let cfg = &layer.config;
    let mut heads = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let h = match mask {
            Some(m) if cfg.mask_logits => {
                let a = attention_logits(g, input, e, head, cfg.mode, ctx)?;
                let a = mask_logits(&mut g.tape, a, m)?;
                let w_val = g.param(head.w_val);
                attention_head(&mut g.tape, input, a, w_val)?
            }
            Some(m) => masked_head(g, input, e, m, head, cfg.mode, ctx)?,
            None => {
                let a = attention_logits(g, input, e, head, cfg.mode, ctx)?;
                let w_val = g.param(head.w_val);
                attention_head(&mut g.tape, input, a, w_val)?
            }
        };
        heads.push(h);
    }
    let (w_o, b_o) = (g.param(layer.w_o), g.param(layer.b_o));
    let o = multi_head(&mut g.tape, &heads, w_o, b_o)?;
    let o = match cfg.activation {
        Activation::Relu => g.tape.relu(o),
        Activation::Identity => o,
    };
    let (w_f, b_f) = (g.param(layer.w_f), g.param(layer.b_f));
    let y = g.tape.matmul(o, w_f)?;
    g.tape.add_row_bias(y, b_f)
}

/// `O_0 = X`, `O_t = layer_t(O_{t-1} + X)` with a fresh encoding per layer.
pub fn stack_forward(
    g: &mut Graph,
    x: Var,
    layers: &[TransformerLayerParams],
    ctx: &PositionContext,
    mask: Option<&[bool]>,
) -> Result<Var> {
    if layers.is_empty() {
        return Err(TensorError::Argument("a stack needs at least one layer".into()));
    }
    let mut o = x;
    for layer in layers {
        let input = g.tape.add(o, x)?;
        let e = ctx.encoding(g, layer);
        o = transformer_layer(g, input, layer, e, ctx, mask)?;
    }
    Ok(o)
}
