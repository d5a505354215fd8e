use serde::{Deserialize, Serialize};

use super::{NumError, ParamTape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// `p ← p − lr·g`
    Sgd,
    /// Bias-corrected first/second moment method.
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!("unknown optimizer `{other}` (expected sgd or adam)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, tape: &ParamTape) -> Result<Self, NumError> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(NumError::Usage(format!("learning rate must be positive, got {lr}")));
        }
        let moments = |k| match k {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Adam => tape.ids().map(|id| Tensor::zeros(tape.param(id).shape())).collect(),
        };
        Ok(Self {
            kind,
            lr,
            first: moments(kind),
            second: moments(kind),
            step: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `tape`.
    ///
    /// Gradients are validated before any parameter is touched, so a
    /// non-finite gradient leaves the tape unchanged.
    pub fn step(&mut self, tape: &mut ParamTape) -> Result<(), NumError> {
        for id in tape.ids() {
            if !tape.grad(id).is_finite() {
                return Err(NumError::NonFiniteGradient {
                    param: tape.name(id).to_string(),
                });
            }
        }
        if self.kind == OptimizerKind::Adam {
            if self.first.len() != tape.len() {
                return Err(NumError::Usage(format!(
                    "optimizer tracks {} parameters, tape has {}",
                    self.first.len(),
                    tape.len()
                )));
            }
            for (m, id) in self.first.iter().zip(tape.ids()) {
                if m.shape() != tape.param(id).shape() {
                    return Err(NumError::Shape {
                        op: "optimizer_step",
                        left: m.shape().to_vec(),
                        right: tape.param(id).shape().to_vec(),
                    });
                }
            }
        }
        self.step += 1;
        let lr = self.lr;
        let (params, grads, _) = tape.params_and_grads_mut();
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (p, g) in p.data_mut().iter_mut().zip(g.data()) {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let it = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((p, &g), m), v) in it {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
