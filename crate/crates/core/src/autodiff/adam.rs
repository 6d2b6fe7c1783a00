use super::{AutodiffError, ParamId, ParamStore, Result, Tensor};

/// Bias-corrected Adam over a fixed group of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    params: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, lr: f64) -> Self {
        let m: Vec<Tensor> = params
            .iter()
            .map(|&id| Tensor::zeros(store.value(id).shape()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            v: m.clone(),
            m,
            params,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_parts(
        params: Vec<ParamId>,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        step: u64,
        lr: f64,
    ) -> Result<Self> {
        if m.len() != params.len() || v.len() != params.len() {
            return Err(AutodiffError::Shape(
                "adam moment count does not match parameters".into(),
            ));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step,
            params,
            m,
            v,
        })
    }

    /// One update from the gradients currently held in `store`. A non-finite
    /// gradient aborts before any parameter is touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        for &id in &self.params {
            if !store.get(id).grad.is_finite() {
                return Err(AutodiffError::NonFiniteGradient(store.get(id).name.clone()));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, &id) in self.params.iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m)
                .zip(v)
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
