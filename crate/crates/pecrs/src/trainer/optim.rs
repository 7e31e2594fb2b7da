//! AdamW with decoupled weight decay over the model's trainable tensors.

use crate::recommender::{Model, ModelGrads};

pub struct AdamW {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(model: &mut Model, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> AdamW {
        let sizes: Vec<usize> = model.trainable_tensors_mut().iter().map(|(_, s)| s.len()).collect();
        AdamW {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
            weight_decay,
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &ModelGrads, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let tensors = model.trainable_tensors_mut();
        let gviews = grads.flat_views();
        debug_assert_eq!(tensors.len(), gviews.len());
        for (((name, params), (gname, gslice)), (m, v)) in
            tensors.into_iter().zip(gviews).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(name, gname);
            debug_assert_eq!(params.len(), gslice.len());
            for i in 0..params.len() {
                let g = gslice[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                params[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * params[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::recommender::ModelOptions;

    #[test]
    fn step_moves_params_against_gradient() {
        let cfg = BackboneConfig::tiny(24);
        let mut model = Model::init(cfg, ModelOptions::default(), 4).unwrap();
        let mut opt = AdamW::new(&mut model, 0.9, 0.999, 1e-8, 0.0);
        let mut grads = ModelGrads::zeros(&cfg);
        grads.heads.g_w[0] = 1.0;
        grads.backbone.layers[0].lora_q.a[[0, 0]] = -2.0;
        let gw_before = model.heads.g_w[0];
        let la_before = model.backbone.layers[0].lora_q.a[[0, 0]];
        let frozen_before = model.backbone.layers[0].w_q.clone();
        opt.step(&mut model, &grads, 1e-2);
        assert!(model.heads.g_w[0] < gw_before);
        assert!(model.backbone.layers[0].lora_q.a[[0, 0]] > la_before);
        // tensors with zero grad and zero decay stay put
        assert_eq!(model.backbone.layers[0].w_q, frozen_before);
        assert_eq!(model.heads.g_b[0], 0.0);
    }

    #[test]
    fn weight_decay_shrinks_params_without_gradient() {
        let cfg = BackboneConfig::tiny(24);
        let mut model = Model::init(cfg, ModelOptions::default(), 4).unwrap();
        model.heads.g_w[1] = 1.0;
        let mut opt = AdamW::new(&mut model, 0.9, 0.999, 1e-8, 0.1);
        let grads = ModelGrads::zeros(&cfg);
        opt.step(&mut model, &grads, 1e-2);
        assert!(model.heads.g_w[1] < 1.0 && model.heads.g_w[1] > 0.99);
    }
}
