//! Adam and AdamW over a fixed list of variables.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use crate::datamodel::OptimizerKind;
use crate::error::Result;

#[derive(Debug)]
pub struct Adam {
    vars: Vec<(String, Var)>,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    step: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl Adam {
    /// AdamW applies `weight_decay` decoupled from the gradient; Adam ignores it.
    pub fn new(kind: OptimizerKind, vars: Vec<(String, Var)>, weight_decay: f64) -> Self {
        let n = vars.len();
        Self {
            vars,
            first: vec![None; n],
            second: vec![None; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: match kind {
                OptimizerKind::Adamw => weight_decay,
                OptimizerKind::Adam => 0.0,
            },
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn var_names(&self) -> impl Iterator<Item = &str> {
        self.vars.iter().map(|(n, _)| n.as_str())
    }

    /// First and second moment estimates of variable `i`, once it has been updated.
    pub fn moments(&self, i: usize) -> Option<(&Tensor, &Tensor)> {
        Some((self.first.get(i)?.as_ref()?, self.second.get(i)?.as_ref()?))
    }

    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match &self.first[i] {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match &self.second[i] {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
            let w = var.as_tensor().detach();
            let mut next = (&w - (update * lr)?)?;
            if self.weight_decay > 0.0 {
                next = (next - (&w * (lr * self.weight_decay))?)?;
            }
            var.set(&next)?;
            self.first[i] = Some(m);
            self.second[i] = Some(v);
        }
        Ok(())
    }
}
