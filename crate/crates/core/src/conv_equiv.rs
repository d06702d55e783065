//! Constructive check that relative-position attention reproduces a
//! convolution: one head per kernel offset, each head's logits set to
//! `-α‖k - q - Δ‖² + αc` so that its softmax concentrates on the key at
//! `q + Δ`, and the kernel slices assembled into the fusion weights.

use crate::feature::{FeatureMap, Grid};
use crate::posenc::{PosMode, RelativeTable};
use crate::tensor::{Graph, ParamStore, Result, Tensor, TensorError};
use crate::transformer::{
    attention_logits, transformer_layer, Activation, HeadParams, LayerConfig, PositionContext,
    RelativeParams, TransformerLayerParams,
};

/// `k×k×C_in×C_out` kernel, stored `[ky][kx][ci][co]`. Offset `(dx, dy)`
/// maps to `kx = dx + k/2`, `ky = dy + k/2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    pub size: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub data: Vec<f64>,
}

impl ConvKernel {
    pub fn new(size: usize, c_in: usize, c_out: usize, data: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(TensorError::Argument(format!("kernel size must be odd, got {size}")));
        }
        if data.len() != size * size * c_in * c_out {
            return Err(TensorError::Argument("kernel data length mismatch".into()));
        }
        Ok(Self { size, c_in, c_out, data })
    }

    pub fn zeros(size: usize, c_in: usize, c_out: usize) -> Self {
        Self::new(size, c_in, c_out, vec![0.0; size * size * c_in * c_out]).expect("odd size")
    }

    fn idx(&self, dx: isize, dy: isize, ci: usize, co: usize) -> usize {
        let r = (self.size / 2) as isize;
        let (kx, ky) = ((dx + r) as usize, (dy + r) as usize);
        ((ky * self.size + kx) * self.c_in + ci) * self.c_out + co
    }

    pub fn get(&self, dx: isize, dy: isize, ci: usize, co: usize) -> f64 {
        self.data[self.idx(dx, dy, ci, co)]
    }

    pub fn set(&mut self, dx: isize, dy: isize, ci: usize, co: usize, v: f64) {
        let i = self.idx(dx, dy, ci, co);
        self.data[i] = v;
    }

    /// Kernel offsets in row-major kernel order.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = (self.size / 2) as isize;
        (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect()
    }

    /// `C_in×C_out` slice at one offset.
    pub fn slice(&self, dx: isize, dy: isize) -> Tensor {
        let mut t = Tensor::zeros(&[self.c_in, self.c_out]);
        for ci in 0..self.c_in {
            for co in 0..self.c_out {
                t.set(ci, co, self.get(dx, dy, ci, co));
            }
        }
        t
    }
}

/// Zero-padded, stride-1 cross-correlation:
/// `Y[q] = Σ_Δ X[q + Δ] · K[Δ] + b`.
pub fn conv2d_reference(x: &FeatureMap, kernel: &ConvKernel, bias: &[f64]) -> Result<FeatureMap> {
    if x.channels() != kernel.c_in || bias.len() != kernel.c_out {
        return Err(TensorError::Argument("conv channel mismatch".into()));
    }
    let grid = x.grid();
    let (w, h) = (grid.width as isize, grid.height as isize);
    let mut y = FeatureMap::zeros(grid, kernel.c_out);
    for qy in 0..h {
        for qx in 0..w {
            for co in 0..kernel.c_out {
                let mut s = bias[co];
                for (dx, dy) in kernel.offsets() {
                    let (sx, sy) = (qx + dx, qy + dy);
                    if sx < 0 || sy < 0 || sx >= w || sy >= h {
                        continue;
                    }
                    for ci in 0..kernel.c_in {
                        s += x.get(sx as usize, sy as usize, ci) * kernel.get(dx, dy, ci, co);
                    }
                }
                y.set(qx as usize, qy as usize, co, s);
            }
        }
    }
    Ok(y)
}

/// Offset table with rows `(‖δ‖², δx, δy, 1)`, `δ = pos(query) - pos(key)`.
pub fn quadratic_table(grid: Grid) -> Result<RelativeTable> {
    RelativeTable::from_fn(grid, 4, |dx, dy| {
        let (x, y) = (dx as f64, dy as f64);
        vec![x * x + y * y, x, y, 1.0]
    })
}

/// Sharpness and constant of the quadratic logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvSpec {
    pub alpha: f64,
    pub c: f64,
}

impl ConvSpec {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, c: 0.0 }
    }
}

/// `v` realising `v · (‖δ‖², δx, δy, 1) = -α‖δ + Δ‖² + αc`, which equals
/// `-α‖k - q - Δ‖² + αc` for key `k` and query `q`.
fn quadratic_bias(offset: (isize, isize), spec: ConvSpec) -> [f64; 4] {
    let (ox, oy) = (offset.0 as f64, offset.1 as f64);
    let a = spec.alpha;
    [-a, -2.0 * a * ox, -2.0 * a * oy, a * (spec.c - (ox * ox + oy * oy))]
}

/// Head parameters attending from every query to the key at `query + offset`:
/// `W_qry = W_key = 0`, identity offset projection, and `v` from the quadratic.
pub fn construct_conv_attention(
    store: &mut ParamStore,
    prefix: &str,
    offset: (isize, isize),
    spec: ConvSpec,
    grid: Grid,
    channels: usize,
    head_dim: usize,
) -> Result<HeadParams> {
    if !(spec.alpha > 0.0) {
        return Err(TensorError::Argument(format!("alpha must be positive, got {}", spec.alpha)));
    }
    if offset.0.unsigned_abs() >= grid.width || offset.1.unsigned_abs() >= grid.height {
        return Err(TensorError::Argument(format!(
            "offset {offset:?} not representable on a {}x{} grid",
            grid.width, grid.height
        )));
    }
    if head_dim < 4 || head_dim < channels {
        return Err(TensorError::Argument(format!(
            "head dimension {head_dim} must cover 4 offset features and {channels} channels"
        )));
    }
    let mut w_rel = Tensor::zeros(&[4, head_dim]);
    for i in 0..4 {
        w_rel.set(i, i, 1.0);
    }
    let mut v = Tensor::zeros(&[head_dim, 1]);
    for (i, b) in quadratic_bias(offset, spec).into_iter().enumerate() {
        v.set(i, 0, b);
    }
    let mut w_val = Tensor::zeros(&[channels, head_dim]);
    for i in 0..channels {
        w_val.set(i, i, 1.0);
    }
    let rel = RelativeParams {
        w_rel: store.add(format!("{prefix}.w_rel"), w_rel),
        u: store.add(format!("{prefix}.u"), Tensor::zeros(&[head_dim, 1])),
        v: store.add(format!("{prefix}.v"), v),
    };
    Ok(HeadParams {
        w_qry: store.add(format!("{prefix}.w_qry"), Tensor::zeros(&[channels, head_dim])),
        w_key: store.add(format!("{prefix}.w_key"), Tensor::zeros(&[channels, head_dim])),
        w_val: store.add(format!("{prefix}.w_val"), w_val),
        rel: Some(rel),
    })
}

/// A full layer (one head per kernel offset) that mimics `kernel` and `bias`
/// on interior pixels. Output channels beyond `C_out` are zero.
pub fn build_conv_layer(
    kernel: &ConvKernel,
    bias: &[f64],
    spec: ConvSpec,
    grid: Grid,
) -> Result<(ParamStore, TransformerLayerParams, PositionContext)> {
    let channels = kernel.c_in;
    if kernel.c_out > channels {
        return Err(TensorError::Argument(format!(
            "C_out {} exceeds the layer width {channels}",
            kernel.c_out
        )));
    }
    let head_dim = channels.max(4);
    let offsets = kernel.offsets();
    let mut store = ParamStore::new();
    let mut heads = Vec::with_capacity(offsets.len());
    let mut w_o = Tensor::zeros(&[offsets.len() * head_dim, channels]);
    for (h, &(dx, dy)) in offsets.iter().enumerate() {
        heads.push(construct_conv_attention(
            &mut store,
            &format!("conv.head{h}"),
            (dx, dy),
            spec,
            grid,
            channels,
            head_dim,
        )?);
        for ci in 0..channels {
            for co in 0..kernel.c_out {
                w_o.set(h * head_dim + ci, co, kernel.get(dx, dy, ci, co));
            }
        }
    }
    let mut b_o = Tensor::zeros(&[channels]);
    b_o.data_mut()[..kernel.c_out].copy_from_slice(bias);
    let config = LayerConfig {
        channels,
        head_dim,
        heads: offsets.len(),
        mode: PosMode::Relative,
        rel_dim: 4,
        activation: Activation::Identity,
        mask_logits: false,
    };
    let layer = TransformerLayerParams {
        config,
        heads,
        w_o: store.add("conv.w_o", w_o),
        b_o: store.add("conv.b_o", b_o),
        w_f: store.add("conv.w_f", Tensor::identity(channels)),
        b_f: store.add("conv.b_f", Tensor::zeros(&[channels])),
        encoding: None,
    };
    let ctx = PositionContext::with_relative_table(quadratic_table(grid)?);
    Ok((store, layer, ctx))
}

/// Softmax attention weights (`WH×WH`) of a constructed conv head.
pub fn conv_attention_weights(grid: Grid, channels: usize, offset: (isize, isize), spec: ConvSpec) -> Result<Tensor> {
    let mut store = ParamStore::new();
    let head_dim = channels.max(4);
    let head = construct_conv_attention(&mut store, "h", offset, spec, grid, channels, head_dim)?;
    let ctx = PositionContext::with_relative_table(quadratic_table(grid)?);
    let mut g = Graph::new(&store);
    // Content terms vanish with W_qry = W_key = 0, so any input works.
    let x = g.tape.constant(Tensor::zeros(&[grid.pixels(), channels]));
    let a = attention_logits(&mut g, x, None, &head, PosMode::Relative, &ctx)?;
    let w = g.tape.softmax_rows(a, (channels as f64).sqrt())?;
    Ok(g.tape.value(w).clone())
}

/// Pixels at least `k/2` away from every border.
pub fn interior_pixels(grid: Grid, kernel_size: usize) -> Vec<(usize, usize)> {
    let r = kernel_size / 2;
    let mut out = Vec::new();
    for y in r..grid.height.saturating_sub(r) {
        for x in r..grid.width.saturating_sub(r) {
            out.push((x, y));
        }
    }
    out
}

/// Layer output of the constructed attention on `x`.
pub fn conv_attention_forward(x: &FeatureMap, kernel: &ConvKernel, bias: &[f64], spec: ConvSpec) -> Result<FeatureMap> {
    let grid = x.grid();
    let (store, layer, ctx) = build_conv_layer(kernel, bias, spec, grid)?;
    let mut g = Graph::new(&store);
    let xv = g.tape.constant(x.to_tensor());
    let y = transformer_layer(&mut g, xv, &layer, None, &ctx, None)?;
    FeatureMap::from_tensor(grid, g.tape.value(y))
}

/// Largest absolute deviation between the attention layer and the reference
/// convolution over interior pixels and the `C_out` output channels.
pub fn equivalence_gap(x: &FeatureMap, kernel: &ConvKernel, bias: &[f64], spec: ConvSpec) -> Result<f64> {
    let attn = conv_attention_forward(x, kernel, bias, spec)?;
    let conv = conv2d_reference(x, kernel, bias)?;
    let mut gap: f64 = 0.0;
    for (px, py) in interior_pixels(x.grid(), kernel.size) {
        for co in 0..kernel.c_out {
            gap = gap.max((attn.get(px, py, co) - conv.get(px, py, co)).abs());
        }
    }
    Ok(gap)
}
