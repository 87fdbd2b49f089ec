use crate::policy::{PolicyGradient, TabularPolicy};

use super::config::{OptimizerKind, RunConfig};

/// First-order update rules over the logits table. Gradients are of a loss,
/// so every rule descends.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Momentum { mu: f64, velocity: Vec<f64> },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    },
}

impl Optimizer {
    pub fn from_config(cfg: &RunConfig, num_params: usize) -> Self {
        match cfg.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Momentum => Optimizer::Momentum {
                mu: cfg.momentum,
                velocity: vec![0.0; num_params],
            },
            OptimizerKind::Adam => Optimizer::Adam {
                beta1: cfg.adam_beta1,
                beta2: cfg.adam_beta2,
                eps: cfg.adam_eps,
                m: vec![0.0; num_params],
                v: vec![0.0; num_params],
                t: 0,
            },
        }
    }

    /// ω ← ω - α·update(∇L). A zero learning rate leaves ω untouched.
    pub fn step(&mut self, policy: &mut TabularPolicy, grad: &PolicyGradient, lr: f64) {
        if lr == 0.0 {
            return;
        }
        let w = policy.logits_mut();
        let g = grad.values();
        match self {
            Optimizer::Sgd => {
                for (w, g) in w.iter_mut().zip(g) {
                    *w -= lr * g;
                }
            }
            Optimizer::Momentum { mu, velocity } => {
                for ((w, g), v) in w.iter_mut().zip(g).zip(velocity.iter_mut()) {
                    *v = *mu * *v + g;
                    *w -= lr * *v;
                }
            }
            Optimizer::Adam {
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t);
                let c2 = 1.0 - beta2.powi(*t);
                for (i, (w, g)) in w.iter_mut().zip(g).enumerate() {
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    *w -= lr * mh / (vh.sqrt() + *eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alphabet::Alphabet;

    fn setup() -> (TabularPolicy, PolicyGradient) {
        let p = TabularPolicy::random(Alphabet::new(3).unwrap(), 1, 2, 1.0, 7).unwrap();
        let mut g = PolicyGradient::zeros_like(&p);
        for (i, v) in g.values_mut().iter_mut().enumerate() {
            *v = (i as f64 * 0.37).sin();
        }
        (p, g)
    }

    #[test]
    fn sgd_is_plain_descent() {
        let (mut p, g) = setup();
        let before = p.logits().to_vec();
        Optimizer::Sgd.step(&mut p, &g, 0.1);
        for ((a, b), g) in p.logits().iter().zip(&before).zip(g.values()) {
            assert_eq!(*a, b - 0.1 * g);
        }
    }

    #[test]
    fn zero_rate_is_a_no_op_for_every_rule() {
        let (p0, g) = setup();
        let mut cfg = crate::trainer::RunConfig::for_task(crate::env::TaskSpec {
            kind: crate::env::TaskKind::ParityGoal { prompt_len: 1 },
            alphabet_size: 3,
            response_len: 2,
            eos_id: None,
            delimiter_id: None,
        });
        for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum, OptimizerKind::Adam] {
            cfg.optimizer = kind;
            let mut p = p0.clone();
            let mut opt = Optimizer::from_config(&cfg, p.logits().len());
            for _ in 0..5 {
                opt.step(&mut p, &g, 0.0);
            }
            assert_eq!(p, p0);
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let (mut p, g) = setup();
        let before = p.logits().to_vec();
        let mut opt = Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 0.0,
            m: vec![0.0; before.len()],
            v: vec![0.0; before.len()],
            t: 0,
        };
        opt.step(&mut p, &g, 0.01);
        for ((a, b), g) in p.logits().iter().zip(&before).zip(g.values()) {
            if *g != 0.0 {
                assert!(((b - a) - 0.01 * g.signum()).abs() < 1e-12);
            }
        }
    }
}
