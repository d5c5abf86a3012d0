//! First-order adaptive-moment optimizer over flat parameter buffers.

#[derive(Debug, Clone, PartialEq)]
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
            eps: 1e-15,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "optimizer state out of sync with parameters");
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = self.lr * bc2.sqrt() / bc1;
        for i in 0..params.len() {
            let g = grads[i];
            let m = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            self.m[i] = m;
            self.v[i] = v;
            params[i] -= step * m / (v.sqrt() + self.eps * bc2.sqrt());
        }
    }

    /// Rebuilds the moment buffers for rows of `width` values: new row `r`
    /// copies old row `sources[r]`, or starts from zero when `None`.
    pub fn remap_rows(&mut self, width: usize, sources: &[Option<usize>]) {
        let mut m = Vec::with_capacity(sources.len() * width);
        let mut v = Vec::with_capacity(sources.len() * width);
        for s in sources {
            match s {
                Some(old) => {
                    m.extend_from_slice(&self.m[old * width..(old + 1) * width]);
                    v.extend_from_slice(&self.v[old * width..(old + 1) * width]);
                }
                None => {
                    m.extend(std::iter::repeat_n(0.0, width));
                    v.extend(std::iter::repeat_n(0.0, width));
                }
            }
        }
        self.m = m;
        self.v = v;
    }
}
