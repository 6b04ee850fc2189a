use serde::{Deserialize, Serialize};

/// Models expose their weights as an ordered list of flat tensors so the
/// optimizer and gradient checks can treat them uniformly.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Flat index -> (tensor, offset).
    fn locate(&self, mut index: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors().iter().enumerate() {
            if index < t.len() {
                return Some((i, index));
            }
            index -= t.len();
        }
        None
    }

    fn get(&self, index: usize) -> f64 {
        let (t, o) = self.locate(index).expect("parameter index in range");
        self.tensors()[t][o]
    }

    fn set(&mut self, index: usize, value: f64) {
        let (t, o) = self.locate(index).expect("parameter index in range");
        self.tensors_mut()[t][o] = value;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(cfg: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
        Self {
            cfg,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let grads = grads.tensors();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            debug_assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}


/// Gradients must be contiguous for [`Parameters::tensors`]; products with a
/// transposed operand may come back column-major.
pub(crate) fn standard(a: ndarray::Array2<f64>) -> ndarray::Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}
