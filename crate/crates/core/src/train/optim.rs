use crate::model::Model;
use crate::nn::Module;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update of a single tensor at step `t` (1-based).
///
/// Decay is decoupled and applied first, `p ← p − lr·wd·p`, then the
/// bias-corrected Adam step `p ← p − lr·m̂ / (√v̂ + eps)`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    t: u64,
    lr: f64,
    h: &AdamWHyper,
    decay: bool,
) {
    let (b1, b2) = (h.beta1 as f32, h.beta2 as f32);
    let c1 = (1.0 - h.beta1.powf(t as f64)) as f32;
    let c2 = (1.0 - h.beta2.powf(t as f64)) as f32;
    let lr32 = lr as f32;
    let shrink = (lr * h.weight_decay) as f32;
    let eps = h.eps as f32;
    for i in 0..param.len() {
        if decay && shrink != 0.0 {
            param[i] -= shrink * param[i];
        }
        let g = grad[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let mh = m[i] / c1;
        let vh = v[i] / c2;
        param[i] -= lr32 * mh / (vh.sqrt() + eps);
    }
}

/// Optimizer state: first and second moments per parameter tensor, in the
/// model's visiting order.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub hyper: AdamWHyper,
    pub t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(model: &Model<f32>, hyper: AdamWHyper) -> Self {
        let mut m = Vec::new();
        model.visit(&mut |p| m.push(vec![0.0; p.len()]));
        let v = m.clone();
        AdamW { hyper, t: 0, m, v }
    }

    /// Applies one update from the gradients accumulated in the parameters.
    pub fn step(&mut self, model: &mut Model<f32>, lr: f64) {
        self.t += 1;
        let (t, h) = (self.t, self.hyper);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut(&mut |p| {
            adamw_step(
                p.value.data_mut(),
                p.grad.data(),
                &mut ms[i],
                &mut vs[i],
                t,
                lr,
                &h,
                p.decay,
            );
            i += 1;
        });
    }
}
