use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Hat;
use crate::dataio::{Fixation, ImageRaster};
use crate::error::Result;
use crate::numerics::{Graph, Objective, ParamId, Scalar, Tensor, Var};

/// End-to-end scalar function of the image and every model parameter:
/// a fixed random projection of one task's full-resolution heatmap plus a
/// fixed multiple of its termination probability. Used to verify gradients
/// through the whole network.
pub struct ModelProbe {
    model: Hat<f64>,
    image: Tensor<f64>,
    fixations: Vec<Fixation>,
    task: usize,
    heat_weights: Tensor<f64>,
    tau_weight: f64,
    params: Vec<ParamId>,
}

impl ModelProbe {
    pub fn new(model: &Hat<f64>, image: &ImageRaster, fixations: &[Fixation], task: usize, seed: u64) -> Result<Self> {
        model.check_task(task)?;
        let (h, w) = model.config().canvas;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let heat_weights = Tensor::from_fn(&[1, h, w], |_| rng.gen_range(-1.0..1.0));
        Ok(ModelProbe {
            model: model.clone(),
            image: model.image_tensor(image)?,
            fixations: fixations.to_vec(),
            task,
            heat_weights,
            tau_weight: rng.gen_range(0.5..2.0),
            params: model.params.ids().filter(|&id| !model.params.is_frozen(id)).collect(),
        })
    }

    /// Input tensors in objective order: the image, then every trainable
    /// parameter.
    pub fn inputs(&self) -> Vec<Tensor<f64>> {
        let mut out = vec![self.image.clone()];
        out.extend(self.params.iter().map(|&id| self.model.params.get(id).clone()));
        out
    }

    /// Name of objective input `i`.
    pub fn input_name(&self, i: usize) -> String {
        if i == 0 {
            "image".into()
        } else {
            self.model.params.name(self.params[i - 1]).to_string()
        }
    }
}

impl Objective for ModelProbe {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, inputs: &[Var]) -> Result<Var> {
        let model: Hat<T> = self.model.cast();
        for (&id, &v) in self.params.iter().zip(&inputs[1..]) {
            g.bind_param(id, v);
        }
        let pv = model.pyramid_graph(g, inputs[0])?;
        let feats = model.image_features(g, pv.p1, pv.p4)?;
        let out = model.step(g, &feats, &self.fixations)?;
        let heat = model.task_heatmap(g, out.heat_low, self.task)?;
        let tau = model.task_tau(g, out.tau, self.task)?;
        let w = g.constant(self.heat_weights.cast());
        let weighted = g.mul(heat, w)?;
        let s = g.sum(weighted);
        let t = g.sum(tau);
        let t = g.scale(t, self.tau_weight);
        g.add(s, t)
    }
}
