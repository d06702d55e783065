use crate::tensor::{Tensor, TensorError};

/// Spatial grid extents. Pixels are flattened row-then-column:
/// `index = y * width + x`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
}

impl Grid {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }
}

/// `W×H×C` activations stored pixel-major, i.e. as a `(W·H)×C` row-major
/// matrix whose rows follow [`Grid`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    grid: Grid,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(grid: Grid, channels: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if grid.pixels() == 0 || channels == 0 {
            return Err(TensorError::Argument("feature map needs W, H, C >= 1".into()));
        }
        if data.len() != grid.pixels() * channels {
            return Err(TensorError::Argument(format!(
                "{}x{}x{} feature map needs {} values, got {}",
                grid.width,
                grid.height,
                channels,
                grid.pixels() * channels,
                data.len()
            )));
        }
        Ok(Self { grid, channels, data })
    }

    pub fn zeros(grid: Grid, channels: usize) -> Self {
        Self { grid, channels, data: vec![0.0; grid.pixels() * channels] }
    }

    /// Wraps a `(W·H)×C` tensor.
    pub fn from_tensor(grid: Grid, t: &Tensor) -> Result<Self, TensorError> {
        if t.rows() != grid.pixels() {
            return Err(TensorError::Dimension {
                op: "feature_map",
                lhs: vec![grid.pixels()],
                rhs: t.shape().to_vec(),
            });
        }
        Self::new(grid, t.cols(), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.grid.pixels(), self.channels, self.data.clone()).expect("consistent")
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn width(&self) -> usize {
        self.grid.width
    }

    pub fn height(&self) -> usize {
        self.grid.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[self.grid.index(x, y) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        let i = self.grid.index(x, y) * self.channels + c;
        self.data[i] = value;
    }

    /// One channel as a `W·H` map in grid order.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Reorders channels so that output channel `k` is input channel `perm[k]`.
    pub fn permute_channels(&self, perm: &[usize]) -> FeatureMap {
        assert_eq!(perm.len(), self.channels);
        let mut data = Vec::with_capacity(self.data.len());
        for px in self.data.chunks(self.channels) {
            data.extend(perm.iter().map(|&c| px[c]));
        }
        FeatureMap { grid: self.grid, channels: self.channels, data }
    }
}
