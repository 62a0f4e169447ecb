//! Adaptive-moment gradient descent.

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of `params` (viewed as a single concatenated vector) from
    /// `grads` of matching layout.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut [f64]>, grads: impl IntoIterator<Item = &'a [f64]>) {
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let mut offset = 0;
        for (p, g) in params.into_iter().zip(grads) {
            assert_eq!(p.len(), g.len(), "parameter/gradient length mismatch");
            let m = &mut self.m[offset..offset + p.len()];
            let v = &mut self.v[offset..offset + p.len()];
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / b1t;
                let vh = v[i] / b2t;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            offset += p.len();
        }
        assert_eq!(offset, self.m.len(), "optimizer built for {} values, stepped {offset}", self.m.len());
    }
}
