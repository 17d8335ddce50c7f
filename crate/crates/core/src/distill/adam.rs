use super::config::AdamConfig;
use crate::model::Params;
use crate::numerics::Tensor;

/// Adam with bias correction, no weight decay. Moment buffers follow the
/// order of the tensors passed to [`Adam::new`].
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new<'a>(cfg: AdamConfig, like: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = like.into_iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn for_params(cfg: AdamConfig, params: &Params<Tensor>) -> Self {
        Self::new(cfg, params.iter())
    }

    pub fn step<'a, 'b>(
        &mut self,
        params: impl IntoIterator<Item = &'a mut Tensor>,
        grads: impl IntoIterator<Item = &'b Tensor>,
        lr: f64,
    ) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        let slots = params
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()));
        for ((p, g), (m, v)) in slots {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (j, &gj) in g.data().iter().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
