use crate::model::ModelParams;

/// Adam with bias correction; moments kept in `f32` like the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams<f32>, grads: &ModelParams<f32>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (k, (p, g)) in params.tensors.iter_mut().zip(&grads.tensors).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p.data[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for t in &mut grads.tensors {
            t.data.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Tensor};

    fn single(values: Vec<f32>) -> ModelParams<f32> {
        ModelParams {
            config: ModelConfig::desk(1),
            tensors: vec![Tensor {
                name: "x".into(),
                shape: vec![values.len()],
                data: values,
            }],
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g)
        let mut p = single(vec![1.0, -1.0]);
        let g = single(vec![0.5, -3.0]);
        let mut adam = Adam::new(&p, 0.9, 0.98, 1e-9);
        adam.step(&mut p, &g, 0.1);
        assert!((p.tensors[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p.tensors[0].data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = single(vec![3.0, -2.0]);
        let mut adam = Adam::new(&p, 0.9, 0.98, 1e-9);
        for _ in 0..2000 {
            let g = single(p.tensors[0].data.iter().map(|x| 2.0 * x).collect());
            adam.step(&mut p, &g, 0.01);
        }
        assert!(p.tensors[0].data.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping() {
        let mut g = single(vec![3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g.tensors[0].data[0] - 0.6).abs() < 1e-7);
        let mut g = single(vec![0.3, 0.4]);
        clip_grad_norm(&mut g, 1.0);
        assert_eq!(g.tensors[0].data, vec![0.3, 0.4]);
    }
}
