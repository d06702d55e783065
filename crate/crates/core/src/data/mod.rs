//! Images, the synthetic dataset, netpbm I/O and batch sampling.

mod dataset;
mod pnm;
mod sampler;
mod synth;

pub use dataset::{load_dataset, save_dataset, DatasetError, MANIFEST};
pub use pnm::{decode_pnm, encode_pgm, encode_ppm, load_pgm, load_ppm, save_pgm, save_ppm, PnmError};
pub use sampler::{group_sampler, SamplerError};
pub use synth::{
    class_patterns, generate_dataset, render_template, Dataset, MotifLayout, Sample, SynthError, SynthSpec,
    PATTERNS,
};

use crate::tensor::Tensor;

/// `height×width×channels` image, pixel-major (`(y·W + x)·C + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![0.0; width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == width * height * channels).then_some(Self { width, height, channels, data })
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        let i = (y * self.width + x) * self.channels + c;
        self.data[i] = v;
    }

    /// `(H·W)×C` matrix.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.width * self.height, self.channels, self.data.clone()).expect("consistent image")
    }

    /// Content moved by `(dx, dy)`; uncovered pixels repeat the nearest edge.
    pub fn translated(&self, dx: isize, dy: isize) -> Self {
        let mut out = Self::new(self.width, self.height, self.channels);
        let (w, h) = (self.width as isize, self.height as isize);
        for y in 0..self.height {
            let sy = (y as isize - dy).clamp(0, h - 1) as usize;
            for x in 0..self.width {
                let sx = (x as isize - dx).clamp(0, w - 1) as usize;
                for c in 0..self.channels {
                    out.set(x, y, c, self.get(sx, sy, c));
                }
            }
        }
        out
    }

    pub fn clip(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
}
