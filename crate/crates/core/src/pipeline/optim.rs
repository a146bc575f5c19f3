use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::serialize::Container;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment gradient descent with bias correction. Moments are kept
/// per variable so they can be checkpointed and restored exactly.
pub struct Adam {
    pub params: AdamParams,
    vars: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, params: AdamParams) -> Result<Self> {
        let m = vars
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().zeros_like()?))
            .collect::<Result<Vec<_>>>()?;
        let v = m.clone();
        Ok(Self {
            params,
            vars,
            m,
            v,
            t: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let p = self.params;
        let bc1 = 1.0 - p.beta1.powi(self.t as i32);
        let bc2 = 1.0 - p.beta2.powi(self.t as i32);
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let m = ((&self.m[i] * p.beta1)? + (g * (1.0 - p.beta1))?)?;
            let v = ((&self.v[i] * p.beta2)? + (g.sqr()? * (1.0 - p.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + p.eps)?)?;
            var.set(&(var.as_tensor() - (update * p.lr)?)?)?;
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }

    pub fn store(&self, prefix: &str, c: &mut Container) -> Result<()> {
        for (i, (name, _)) in self.vars.iter().enumerate() {
            c.push(&format!("{prefix}.m"), name, &self.m[i])?;
            c.push(&format!("{prefix}.v"), name, &self.v[i])?;
        }
        Ok(())
    }

    pub fn restore(&mut self, prefix: &str, c: &Container, t: u64) -> Result<()> {
        let gm = format!("{prefix}.m");
        let gv = format!("{prefix}.v");
        let ms: Vec<_> = c.group(&gm).collect();
        let vs: Vec<_> = c.group(&gv).collect();
        if ms.len() != self.vars.len() || vs.len() != self.vars.len() {
            return Err(Error::Checkpoint(format!(
                "optimizer state {prefix}: expected {} moments",
                self.vars.len()
            )));
        }
        for (i, (name, var)) in self.vars.iter().enumerate() {
            if &ms[i].0.name != name || &vs[i].0.name != name {
                return Err(Error::Checkpoint(format!(
                    "optimizer state {prefix}: moment for {name} out of order"
                )));
            }
            self.m[i] = ms[i].1.to_dtype(var.dtype())?;
            self.v[i] = vs[i].1.to_dtype(var.dtype())?;
        }
        self.t = t;
        Ok(())
    }
}
