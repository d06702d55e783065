use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::backbone::{backbone_forward, BackboneConfig, BackboneOutput, BackboneParams};
use crate::data::Image;
use crate::discovery::{discover_parts, DiscoveryConfig, PartProposal, PartSet};
use crate::feature::{FeatureMap, Grid};
use crate::posenc::PosMode;
use crate::tensor::{Grads, Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};
use crate::transformer::{stack_forward, uniform_init, LayerConfig, PositionContext, TransformerLayerParams};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub classes: usize,
    /// Input image width and height; fixes the feature grid used by
    /// learnable encodings.
    pub image: (usize, usize),
    pub backbone: BackboneConfig,
    pub head_dim: usize,
    pub heads_global: usize,
    pub heads_part: usize,
    pub stack_global: usize,
    pub stack_part: usize,
    pub pos_mode: PosMode,
    pub mask_logits: bool,
    /// Without the transformer the model is the backbone, mean pooling and
    /// the global classifier.
    pub use_transformer: bool,
    pub discovery: DiscoveryConfig,
    pub lambda: f64,
    /// One classifier shared by all part branches, or one per part.
    pub shared_part_classifier: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 8,
            image: (48, 48),
            backbone: BackboneConfig::default(),
            head_dim: 8,
            heads_global: 4,
            heads_part: 1,
            stack_global: 3,
            stack_part: 1,
            pos_mode: PosMode::Relative,
            mask_logits: false,
            use_transformer: true,
            discovery: DiscoveryConfig::default(),
            lambda: 0.1,
            shared_part_classifier: true,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.backbone.channels
    }

    pub fn feature_grid(&self) -> Grid {
        let s = |n: usize| n.div_ceil(2).div_ceil(2).div_ceil(2);
        Grid::new(s(self.image.0), s(self.image.1))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(TensorError::Argument(m));
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.image.0 < 8 || self.image.1 < 8 {
            return fail(format!("image {:?} smaller than 8x8", self.image));
        }
        if self.use_transformer {
            if self.head_dim == 0 || self.heads_global == 0 || self.heads_part == 0 {
                return fail("head counts and head dimension must be positive".into());
            }
            if self.stack_global == 0 || self.stack_part == 0 {
                return fail("stack depths must be at least 1".into());
            }
            let c = self.channels();
            if matches!(self.pos_mode, PosMode::Absolute | PosMode::Relative) && c % 4 != 0 {
                return fail(format!("{} encoding needs channels divisible by 4, got {c}", self.pos_mode));
            }
        }
        if !(self.lambda >= 0.0) {
            return fail(format!("lambda must be >= 0, got {}", self.lambda));
        }
        self.discovery.validate().map_err(|e| TensorError::Argument(e.to_string()))
    }
}

/// Backbone, global stack, part stacks and classifiers, with all weights
/// in one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct PartModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub backbone: BackboneParams,
    pub global: Vec<TransformerLayerParams>,
    pub parts: Vec<Vec<TransformerLayerParams>>,
    /// `C×K`.
    pub w_g: ParamId,
    /// `C×K`, shared or per part.
    pub w_l: Vec<ParamId>,
    /// Loss weight of each part branch.
    pub lambdas: Vec<f64>,
    context: PositionContext,
}

/// Per-sample forward result of the training objective.
#[derive(Debug, Clone, Copy)]
pub struct SampleLoss {
    pub loss: Var,
    pub global_logits: Var,
}

fn mean_pool(g: &mut Graph, x: Var, weights: Vec<f64>) -> Result<Var> {
    let p = weights.len();
    let w = g.tape.constant(Tensor::matrix(1, p, weights)?);
    g.tape.matmul(w, x)
}

impl PartModel {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let grid = config.feature_grid();
        let c = config.channels();
        let backbone = BackboneParams::init(&mut store, "backbone", config.backbone.clone(), rng);
        let layer_cfg = |heads: usize| LayerConfig {
            mask_logits: config.mask_logits,
            ..LayerConfig::new(c, config.head_dim, heads, config.pos_mode)
        };
        let (mut global, mut parts) = (Vec::new(), Vec::new());
        if config.use_transformer {
            for s in 0..config.stack_global {
                global.push(TransformerLayerParams::init(
                    &mut store,
                    &format!("global.layer{s}"),
                    layer_cfg(config.heads_global),
                    grid,
                    rng,
                ));
            }
            for p in 0..config.discovery.parts {
                parts.push(
                    (0..config.stack_part)
                        .map(|s| {
                            TransformerLayerParams::init(
                                &mut store,
                                &format!("part{p}.layer{s}"),
                                layer_cfg(config.heads_part),
                                grid,
                                rng,
                            )
                        })
                        .collect(),
                );
            }
        }
        let k = config.classes;
        let w_g = store.add("classifier.global", uniform_init(rng, c, k, c));
        let mut w_l = Vec::new();
        if config.use_transformer {
            let n = if config.shared_part_classifier { 1 } else { config.discovery.parts };
            for i in 0..n {
                w_l.push(store.add(format!("classifier.part{i}"), uniform_init(rng, c, k, c)));
            }
        }
        let lambdas = vec![config.lambda; parts.len()];
        let context = PositionContext::new(grid, c, if config.use_transformer { config.pos_mode } else { PosMode::None })?;
        Ok(Self { config, store, backbone, global, parts, w_g, w_l, lambdas, context })
    }

    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn has_parts(&self) -> bool {
        !self.parts.is_empty()
    }

    fn context(&self, grid: Grid) -> Result<Cow<'_, PositionContext>> {
        if grid == self.context.grid {
            return Ok(Cow::Borrowed(&self.context));
        }
        if self.config.use_transformer && self.config.pos_mode == PosMode::Learnable {
            return Err(TensorError::Argument(format!(
                "learnable encodings are sized for a {:?} grid, got {grid:?}",
                self.context.grid
            )));
        }
        let mode = if self.config.use_transformer { self.config.pos_mode } else { PosMode::None };
        Ok(Cow::Owned(PositionContext::new(grid, self.config.channels(), mode)?))
    }

    pub fn backbone_forward(&self, g: &mut Graph, image: &Image) -> Result<BackboneOutput> {
        backbone_forward(g, &self.backbone, image)
    }

    /// `1×K` logits: global stack, mean pooling, `w_g`.
    pub fn global_logits(&self, g: &mut Graph, xg: Var, grid: Grid) -> Result<Var> {
        let feats = if self.global.is_empty() {
            xg
        } else {
            let ctx = self.context(grid)?;
            stack_forward(g, xg, &self.global, &ctx, None)?
        };
        let p = grid.pixels();
        let pooled = mean_pool(g, feats, vec![1.0 / p as f64; p])?;
        let w = g.param(self.w_g);
        g.tape.matmul(pooled, w)
    }

    /// `1×K` logits of part branch `index`: masked stack, pooling over the
    /// in-mask pixels, part classifier. `None` for an empty mask.
    pub fn part_logits(&self, g: &mut Graph, xp: Var, grid: Grid, index: usize, mask: &[bool]) -> Result<Option<Var>> {
        let stack = self
            .parts
            .get(index)
            .ok_or_else(|| TensorError::Argument(format!("no part branch {index}")))?;
        let area = mask.iter().filter(|&&m| m).count();
        if area == 0 {
            log::warn!("part branch {index} skipped: empty mask");
            return Ok(None);
        }
        let ctx = self.context(grid)?;
        let feats = stack_forward(g, xp, stack, &ctx, Some(mask))?;
        let weights = mask.iter().map(|&m| if m { 1.0 / area as f64 } else { 0.0 }).collect();
        let pooled = mean_pool(g, feats, weights)?;
        let w = g.param(self.w_l[index.min(self.w_l.len() - 1)]);
        Ok(Some(g.tape.matmul(pooled, w)?))
    }

    /// Part proposals from the (detached) values of `X^p`.
    pub fn discover(&self, xp: &Tensor, grid: Grid, rng: &mut impl Rng) -> Result<PartSet> {
        let fm = FeatureMap::from_tensor(grid, xp)?;
        discover_parts(&fm, &self.config.discovery, rng).map_err(|e| TensorError::Argument(e.to_string()))
    }

    /// `CE(global) + Σ_p λ_p CE(part_p)` with every branch sharing `label`.
    pub fn sample_loss(&self, g: &mut Graph, image: &Image, label: usize, parts: &[PartProposal]) -> Result<SampleLoss> {
        let out = self.backbone_forward(g, image)?;
        self.loss_from_features(g, out, label, parts)
    }

    pub fn loss_from_features(
        &self,
        g: &mut Graph,
        out: BackboneOutput,
        label: usize,
        parts: &[PartProposal],
    ) -> Result<SampleLoss> {
        let global_logits = self.global_logits(g, out.xg, out.grid)?;
        let mut loss = g.tape.cross_entropy(global_logits, &[label])?;
        for (i, part) in parts.iter().enumerate().take(self.parts.len()) {
            let lambda = self.lambdas[i];
            if lambda == 0.0 {
                continue;
            }
            if let Some(logits) = self.part_logits(g, out.xp, out.grid, i, &part.mask)? {
                let ce = g.tape.cross_entropy(logits, &[label])?;
                let weighted = g.tape.scale(ce, lambda);
                loss = g.tape.add(loss, weighted)?;
            }
        }
        Ok(SampleLoss { loss, global_logits })
    }

    /// Runs discovery on this sample's `X^p`, then returns the loss value,
    /// gradients, global logits and the parts used.
    pub fn loss_and_grads(
        &self,
        image: &Image,
        label: usize,
        rng: &mut impl Rng,
    ) -> Result<(f64, Grads, Vec<f64>, PartSet)> {
        let mut g = Graph::new(&self.store);
        let out = self.backbone_forward(&mut g, image)?;
        let parts = if self.has_parts() {
            self.discover(g.tape.value(out.xp), out.grid, rng)?
        } else {
            PartSet { parts: Vec::new(), status: crate::discovery::DiscoveryStatus::Complete, passes: 0 }
        };
        let s = self.loss_from_features(&mut g, out, label, &parts.parts)?;
        let value = g.scalar(s.loss)?;
        let logits = g.tape.value(s.global_logits).data().to_vec();
        let grads = g.backward(s.loss)?;
        Ok((value, grads, logits, parts))
    }

    /// Loss value with parts discovered from this sample.
    pub fn total_loss(&self, image: &Image, label: usize, rng: &mut impl Rng) -> Result<f64> {
        let mut g = Graph::new(&self.store);
        let out = self.backbone_forward(&mut g, image)?;
        let parts = if self.has_parts() {
            self.discover(g.tape.value(out.xp), out.grid, rng)?.parts
        } else {
            Vec::new()
        };
        let s = self.loss_from_features(&mut g, out, label, &parts)?;
        g.scalar(s.loss)
    }

    /// Global-branch logits only; part stacks are never evaluated.
    pub fn logits(&self, image: &Image) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let out = self.backbone_forward(&mut g, image)?;
        let l = self.global_logits(&mut g, out.xg, out.grid)?;
        Ok(g.tape.value(l).data().to_vec())
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(argmax(&self.logits(image)?))
    }

    /// Deletes every part stack and part classifier from the model and its
    /// parameter store.
    pub fn strip_parts(&mut self) {
        for layer in self.parts.drain(..).flatten() {
            for id in layer.param_ids() {
                self.store.remove(id);
            }
        }
        for id in self.w_l.drain(..) {
            self.store.remove(id);
        }
        self.lambdas.clear();
    }

    /// Parameters of every part branch, including the part classifiers.
    pub fn part_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.parts.iter().flatten().flat_map(|l| l.param_ids()).collect();
        ids.extend(&self.w_l);
        ids
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
