//! Adam optimizer with per-tensor state and a step-decay learning-rate
//! schedule.

use ndarray::Array2;

/// Learning-rate schedule: `lr0 * factor^(epoch / interval)` with integer
/// division, i.e. the rate drops by `factor` at every `interval` boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSchedule {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_interval: usize,
}

impl AdamSchedule {
    pub fn constant(lr0: f64) -> Self {
        AdamSchedule {
            lr0,
            decay_factor: 1.0,
            decay_interval: usize::MAX,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_interval) as i32;
        self.lr0 * self.decay_factor.powi(steps)
    }
}

/// One optimizer group: a set of tensors updated with a shared schedule.
/// Moments and step counters are tracked per tensor so that sparsely
/// touched tensors (latent codes outside the current batch) are skipped
/// without biasing their moment estimates.
#[derive(Debug, Clone)]
pub struct AdamGroup {
    pub schedule: AdamSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    epoch: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: Vec<u64>,
}

impl AdamGroup {
    /// `shapes` must match the tensors later passed to [`AdamGroup::step`],
    /// in the same order.
    pub fn new(schedule: AdamSchedule, shapes: &[(usize, usize)]) -> Self {
        AdamGroup {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epoch: 0,
            m: shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect(),
            v: shapes.iter().map(|&(r, c)| Array2::zeros((r, c))).collect(),
            t: vec![0; shapes.len()],
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr_at(self.epoch)
    }

    /// Applies one Adam update. `grads[i] = None` leaves tensor `i` and its
    /// state untouched.
    pub fn step(&mut self, params: &mut [&mut Array2<f64>], grads: &[Option<Array2<f64>>]) {
        assert_eq!(params.len(), self.m.len(), "adam group shape mismatch");
        assert_eq!(grads.len(), self.m.len(), "adam group grads mismatch");
        let lr = self.current_lr();
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            assert_eq!(
                g.dim(),
                params[i].dim(),
                "adam gradient shape mismatch at tensor {i}"
            );
            self.t[i] += 1;
            let t = self.t[i] as f64;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let bc1 = 1.0 - self.beta1.powf(t);
            let bc2 = 1.0 - self.beta2.powf(t);
            let p = &mut params[i];
            for ((p, &m), &v) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }

    /// Serializes moments and step counters for checkpointing.
    pub fn state_tensors(&self) -> (&[Array2<f64>], &[Array2<f64>], &[u64], usize) {
        (&self.m, &self.v, &self.t, self.epoch)
    }

    pub fn restore_state(
        &mut self,
        m: Vec<Array2<f64>>,
        v: Vec<Array2<f64>>,
        t: Vec<u64>,
        epoch: usize,
    ) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        assert_eq!(t.len(), self.t.len());
        self.m = m;
        self.v = v;
        self.t = t;
        self.epoch = epoch;
    }
}
