use super::{Grads, ParamStore};

/// Plain gradient step `w <- w - lr * g` on every parameter with a gradient.
pub fn sgd_step(store: &mut ParamStore, grads: &Grads, lr: f64) {
    assert!(lr >= 0.0, "negative learning rate {lr}");
    if lr == 0.0 {
        return;
    }
    for (id, g) in grads.iter() {
        if !store.contains(id) {
            continue;
        }
        for (w, dw) in store.get_mut(id).data_mut().iter_mut().zip(g) {
            *w -= lr * dw;
        }
    }
}

/// Step decay: `lr0 * gamma^floor(epoch / step)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub gamma: f64,
    pub step: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { base: 8e-4, gamma: 0.1, step: 60 }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        lr_schedule(self.base, self.gamma, self.step, epoch)
    }
}

pub fn lr_schedule(base: f64, gamma: f64, step: usize, epoch: usize) -> f64 {
    let k = epoch / step.max(1);
    base * gamma.powi(k as i32)
}

/// Heavy-ball momentum on top of [`sgd_step`]; `beta = 0` reduces to plain SGD.
#[derive(Debug, Clone, Default)]
pub struct Momentum {
    beta: f64,
    velocity: Grads,
}

impl Momentum {
    pub fn new(beta: f64) -> Self {
        Self { beta, velocity: Grads::default() }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        if self.beta == 0.0 {
            sgd_step(store, grads, lr);
            return;
        }
        self.velocity.scale(self.beta);
        self.velocity.accumulate(grads);
        sgd_step(store, &self.velocity, lr);
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    moments: Vec<Option<(Vec<f64>, Vec<f64>)>>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, moments: Vec::new() }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        assert!(lr >= 0.0, "negative learning rate {lr}");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads.iter() {
            if !store.contains(id) {
                continue;
            }
            if self.moments.len() <= id.index() {
                self.moments.resize(id.index() + 1, None);
            }
            let (m, v) = self.moments[id.index()].get_or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let w = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Update rule selected by configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum(f64),
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "momentum" => Ok(Self::Momentum(0.9)),
            "adam" => Ok(Self::Adam),
            _ => Err(format!("unknown optimizer {s:?} (sgd|momentum|adam)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Momentum(_) => "momentum",
            Self::Adam => "adam",
        })
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Momentum(Momentum),
    Adam(Adam),
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Self::Sgd,
            OptimizerKind::Momentum(beta) => Self::Momentum(Momentum::new(beta)),
            OptimizerKind::Adam => Self::Adam(Adam::default()),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        match self {
            Self::Sgd => sgd_step(store, grads, lr),
            Self::Momentum(m) => m.step(store, grads, lr),
            Self::Adam(a) => a.step(store, grads, lr),
        }
    }
}
