use super::part_model::PartModel;
use crate::data::Image;
use crate::feature::Grid;
use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Class activation heatmap on the feature grid, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub grid: Grid,
    /// Grid order, min-max normalised.
    pub values: Vec<f64>,
    /// Before normalisation.
    pub raw: Vec<f64>,
}

/// Grad-CAM from features `xp` (`WH×C`) and their gradient `d score / d xp`.
pub fn grad_cam_map(grid: Grid, xp: &Tensor, grad: &[f64]) -> Heatmap {
    let (p, c) = (xp.rows(), xp.cols());
    let mut weights = vec![0.0; c];
    for i in 0..p {
        for (w, g) in weights.iter_mut().zip(&grad[i * c..(i + 1) * c]) {
            *w += g / p as f64;
        }
    }
    let raw: Vec<f64> = (0..p)
        .map(|i| xp.row(i).iter().zip(&weights).map(|(x, w)| x * w).sum::<f64>().max(0.0))
        .collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let values = if hi > lo { raw.iter().map(|v| (v - lo) / (hi - lo)).collect() } else { vec![0.0; p] };
    Heatmap { grid, values, raw }
}

/// Grad-CAM for a score built on the graph from `xp`. `xp` must be tracked.
pub fn grad_cam_with(g: &mut Graph, xp: Var, grid: Grid, score: Var) -> Result<Heatmap> {
    g.tape.backward(score)?;
    let xv = g.tape.value(xp).clone();
    let grad = g.tape.grad(xp).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; xv.len()]);
    Ok(grad_cam_map(grid, &xv, &grad))
}

/// Grad-CAM of class `k` on `X^p`. The global logit does not depend on
/// `X^p`, so the score is the part-branch logit for `k`, averaged over the
/// part stacks, each evaluated with a full-grid mask.
pub fn grad_cam(model: &PartModel, image: &Image, class: usize) -> Result<Heatmap> {
    if !model.has_parts() {
        return Err(TensorError::Argument("grad-cam needs the part branches".into()));
    }
    if class >= model.config.classes {
        return Err(TensorError::Argument(format!("class {class} out of range")));
    }
    let mut g = Graph::new(&model.store);
    let out = model.backbone_forward(&mut g, image)?;
    let full = vec![true; out.grid.pixels()];
    let mut pick = vec![0.0; model.config.classes];
    pick[class] = 1.0 / model.parts.len() as f64;
    let pick = g.tape.constant(Tensor::matrix(model.config.classes, 1, pick)?);
    let mut score: Option<Var> = None;
    for i in 0..model.parts.len() {
        let logits = model.part_logits(&mut g, out.xp, out.grid, i, &full)?.expect("full mask");
        let s = g.tape.matmul(logits, pick)?;
        score = Some(match score {
            Some(acc) => g.tape.add(acc, s)?,
            None => s,
        });
    }
    let score = g.tape.sum(score.expect("at least one part"));
    grad_cam_with(&mut g, out.xp, out.grid, score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    #[test]
    fn channel_mean_score_recovers_channel() {
        let grid = Grid::new(3, 2);
        let x = Tensor::matrix(6, 2, vec![0.0, 5.0, 1.0, 4.0, 4.0, 3.0, 2.0, 2.0, 3.0, 1.0, 0.5, 0.0]).unwrap();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let xv = g.tape.leaf(x.clone().with_requires_grad(true));
        let pick = g.tape.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
        let col = g.tape.matmul(xv, pick).unwrap();
        let mean = g.tape.sum(col);
        let score = g.tape.scale(mean, 1.0 / 6.0);
        let map = grad_cam_with(&mut g, xv, grid, score).unwrap();
        let expected = [0.0, 0.25, 1.0, 0.5, 0.75, 0.125];
        for (a, b) in map.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dead_map_is_zero_not_nan() {
        let x = Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let m = grad_cam_map(Grid::new(2, 1), &x, &[-1.0, -1.0]);
        assert_eq!(m.values, vec![0.0, 0.0]);
        let m = grad_cam_map(Grid::new(2, 1), &x, &[0.0, 0.0]);
        assert_eq!(m.values, vec![0.0, 0.0]);
    }
}
