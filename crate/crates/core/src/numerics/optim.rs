use super::tensor::Tensor;

/// SGD with heavy-ball momentum: `v <- momentum * v + g; p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        assert!(learning_rate > 0.0, "learning rate must be positive");
        assert!((0.0..1.0).contains(&momentum), "momentum must lie in [0, 1)");
        Self { learning_rate, momentum, velocity: Vec::new() }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update to every parameter holding a gradient, then zeroes
    /// the gradients. Parameters must be passed in the same order each call.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            assert_eq!(v.len(), p.len(), "velocity buffer shape drifted");
            let Some(g) = p.grad.take() else { continue };
            let lr = self.learning_rate;
            let mom = self.momentum;
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                *vv = mom * *vv + gv;
                *pv -= lr * *vv;
            }
            p.grad = Some(vec![0.0; g.len()]);
        }
    }
}
