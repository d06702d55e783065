//! Positional information: sinusoid tables, absolute per-pixel encodings and
//! the offset-dependent logit terms of relative attention.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::feature::Grid;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum PosMode {
    None,
    /// Fixed sinusoid added to the features entering the logits.
    Absolute,
    /// Zero-initialised trainable table added like `Absolute`.
    Learnable,
    /// Content and offset terms with learnable `u`, `v` and key-offset projection.
    #[default]
    Relative,
}

impl FromStr for PosMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "absolute" => Ok(Self::Absolute),
            "learnable" => Ok(Self::Learnable),
            "relative" => Ok(Self::Relative),
            other => Err(format!("unknown positional mode {other:?}")),
        }
    }
}

impl fmt::Display for PosMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Absolute => "absolute",
            Self::Learnable => "learnable",
            Self::Relative => "relative",
        })
    }
}

fn inv_freq(i: usize, dim: usize) -> f64 {
    1.0 / 10000f64.powf((2 * i) as f64 / dim as f64)
}

/// Writes the `dim`-wide sinusoid of position `p` into `out`.
fn sinusoid_into(p: f64, out: &mut [f64]) {
    let dim = out.len();
    for i in 0..dim / 2 {
        let a = p * inv_freq(i, dim);
        out[2 * i] = a.sin();
        out[2 * i + 1] = a.cos();
    }
}

/// Rows for signed offsets `-(L-1) ..= L-1`, interleaved sin/cos at
/// geometric frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidTable {
    max_extent: usize,
    dim: usize,
    data: Vec<f64>,
}

impl SinusoidTable {
    pub fn new(max_extent: usize, dim: usize) -> Result<Self> {
        if dim == 0 || dim % 2 != 0 {
            return Err(TensorError::Argument(format!("sinusoid dimension must be even, got {dim}")));
        }
        if max_extent == 0 {
            return Err(TensorError::Argument("sinusoid table needs L >= 1".into()));
        }
        let rows = 2 * max_extent - 1;
        let mut data = vec![0.0; rows * dim];
        for (r, row) in data.chunks_mut(dim).enumerate() {
            let delta = r as f64 - (max_extent as f64 - 1.0);
            sinusoid_into(delta, row);
        }
        Ok(Self { max_extent, dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_extent(&self) -> usize {
        self.max_extent
    }

    pub fn row(&self, delta: isize) -> Result<&[f64]> {
        let l = self.max_extent as isize;
        if delta <= -l || delta >= l {
            return Err(TensorError::Argument(format!(
                "offset {delta} outside table range ±{}",
                l - 1
            )));
        }
        let r = (delta + l - 1) as usize;
        Ok(&self.data[r * self.dim..(r + 1) * self.dim])
    }
}

pub fn sinusoid_table(max_extent: usize, dim: usize) -> Result<SinusoidTable> {
    SinusoidTable::new(max_extent, dim)
}

/// Fixed absolute encoding for a grid: first `C/2` dims encode the column,
/// last `C/2` the row.
pub fn absolute_encoding(grid: Grid, channels: usize) -> Result<Tensor> {
    if channels % 4 != 0 {
        return Err(TensorError::Argument(format!(
            "absolute encoding needs C divisible by 4, got {channels}"
        )));
    }
    let half = channels / 2;
    let mut data = vec![0.0; grid.pixels() * channels];
    for (i, row) in data.chunks_mut(channels).enumerate() {
        let (x, y) = grid.coords(i);
        let (col_part, row_part) = row.split_at_mut(half);
        sinusoid_into(x as f64, col_part);
        sinusoid_into(y as f64, row_part);
    }
    Tensor::matrix(grid.pixels(), channels, data)
}

/// Per-displacement rows `R_δ` for every query/key pair on a grid, with
/// `δ = pos(query) - pos(key)`.
#[derive(Debug, Clone)]
pub struct RelativeTable {
    grid: Grid,
    rows: Tensor,
    /// `pair[i * WH + j]` is the row of `R` for query `i`, key `j`.
    pair: Arc<[usize]>,
    key_broadcast: Arc<[usize]>,
    query_offset: Arc<[usize]>,
}

impl RelativeTable {
    /// Builds a table by evaluating `f(dx, dy)` for every reachable offset.
    pub fn from_fn(grid: Grid, dim: usize, f: impl Fn(isize, isize) -> Vec<f64>) -> Result<Self> {
        let (w, h) = (grid.width as isize, grid.height as isize);
        let n = ((2 * w - 1) * (2 * h - 1)) as usize;
        let mut data = Vec::with_capacity(n * dim);
        for dy in -(h - 1)..h {
            for dx in -(w - 1)..w {
                let row = f(dx, dy);
                if row.len() != dim {
                    return Err(TensorError::Argument(format!(
                        "offset row has {} entries, expected {dim}",
                        row.len()
                    )));
                }
                data.extend(row);
            }
        }
        let rows = Tensor::matrix(n, dim, data)?;
        let p = grid.pixels();
        let mut pair = Vec::with_capacity(p * p);
        for i in 0..p {
            let (xi, yi) = grid.coords(i);
            for j in 0..p {
                let (xj, yj) = grid.coords(j);
                let dx = xi as isize - xj as isize;
                let dy = yi as isize - yj as isize;
                pair.push(Self::offset_row(grid, dx, dy).expect("reachable offset"));
            }
        }
        let key_broadcast: Vec<usize> = (0..p * p).map(|k| k % p).collect();
        let query_offset: Vec<usize> = pair.iter().enumerate().map(|(k, &r)| (k / p) * n + r).collect();
        Ok(Self {
            grid,
            rows,
            pair: pair.into(),
            key_broadcast: key_broadcast.into(),
            query_offset: query_offset.into(),
        })
    }

    /// Factorised sinusoid: first half encodes column displacement, second
    /// half row displacement.
    pub fn sinusoid(grid: Grid, dim: usize) -> Result<Self> {
        if dim % 4 != 0 {
            return Err(TensorError::Argument(format!(
                "relative sinusoid needs dimension divisible by 4, got {dim}"
            )));
        }
        let half = dim / 2;
        let cols = SinusoidTable::new(grid.width, half)?;
        let rows = SinusoidTable::new(grid.height, half)?;
        Self::from_fn(grid, dim, |dx, dy| {
            let mut v = cols.row(dx).expect("in range").to_vec();
            v.extend_from_slice(rows.row(dy).expect("in range"));
            v
        })
    }

    fn offset_row(grid: Grid, dx: isize, dy: isize) -> Result<usize> {
        let (w, h) = (grid.width as isize, grid.height as isize);
        if dx <= -w || dx >= w || dy <= -h || dy >= h {
            return Err(TensorError::Argument(format!(
                "offset ({dx}, {dy}) not representable on a {}x{} grid",
                grid.width, grid.height
            )));
        }
        Ok(((dy + h - 1) * (2 * w - 1) + (dx + w - 1)) as usize)
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn offset(&self, dx: isize, dy: isize) -> Result<&[f64]> {
        let r = Self::offset_row(self.grid, dx, dy)?;
        Ok(self.rows.row(r))
    }

    pub fn pair_map(&self) -> Arc<[usize]> {
        self.pair.clone()
    }

    /// `map[i * WH + j] = j`: broadcasts a per-key column across queries.
    fn key_broadcast(&self) -> Arc<[usize]> {
        self.key_broadcast.clone()
    }

    /// `map[i * WH + j] = i * D + pair(i, j)` into a `WH×D` matrix.
    fn query_offset_map(&self) -> Arc<[usize]> {
        self.query_offset.clone()
    }
}

/// Tape handles for one head's relative parameters.
#[derive(Debug, Clone, Copy)]
pub struct RelativeVars {
    /// `D×C_h` projection of offset rows.
    pub w_rel: Var,
    /// `C_h×1`.
    pub u: Var,
    /// `C_h×1`.
    pub v: Var,
}

/// Terms 2–4 of the relative logits for queries/keys on `table.grid()`:
/// `q_i·(R_{i-j} Ŵ) + u·k_j + v·(R_{i-j} Ŵ)` where `q = X W_qry`, `k = X W_key`.
pub fn relative_logit_terms(
    tape: &mut Tape,
    x: Var,
    w_qry: Var,
    w_key: Var,
    rel: RelativeVars,
    table: &RelativeTable,
) -> Result<Var> {
    let q = tape.matmul(x, w_qry)?;
    let k = tape.matmul(x, w_key)?;
    relative_terms_from_projections(tape, q, k, rel, table)
}

pub(crate) fn relative_terms_from_projections(
    tape: &mut Tape,
    q: Var,
    k: Var,
    rel: RelativeVars,
    table: &RelativeTable,
) -> Result<Var> {
    let p = table.grid().pixels();
    if tape.value(q).rows() != p {
        return Err(TensorError::Argument(format!(
            "{} query rows for a {}-pixel offset table",
            tape.value(q).rows(),
            p
        )));
    }
    let shape = vec![p, p];
    let r = tape.constant(table.rows().clone());
    let proj = tape.matmul(r, rel.w_rel)?; // D×C_h
    let proj_t = tape.transpose(proj);
    let qr = tape.matmul(q, proj_t)?; // WH×D
    let t2 = tape.gather(qr, table.query_offset_map(), shape.clone())?;
    let ku = tape.matmul(k, rel.u)?; // WH×1
    let t3 = tape.gather(ku, table.key_broadcast(), shape.clone())?;
    let rv = tape.matmul(proj, rel.v)?; // D×1
    let t4 = tape.gather(rv, table.pair_map(), shape)?;
    let s = tape.add(t2, t3)?;
    tape.add(s, t4)
}
