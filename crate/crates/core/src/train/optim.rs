use ndarray::{ArrayD, Zip};
use serde::{Deserialize, Serialize};

use crate::embed::{EncoderPair, Gradients, ParamId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid AdamW settings: {self:?}")))
        }
    }
}

/// First and second moments per tensor. Step counts are per tensor because a group
/// starts counting when it is unfrozen.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    steps: Vec<u64>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(pair: &EncoderPair<F>) -> Self {
        let zeros = || -> Vec<ArrayD<F>> {
            ParamId::ALL
                .iter()
                .map(|&id| ArrayD::zeros(pair.tensor(id).raw_dim()))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            steps: vec![0; ParamId::ALL.len()],
        }
    }

    pub fn steps(&self, id: ParamId) -> u64 {
        self.steps[id as usize]
    }
}

/// One decoupled-weight-decay Adam update of every trainable tensor, followed by the
/// temperature clamp. Frozen tensors and their moments are untouched.
pub fn adamw_step<F: Scalar>(
    pair: &mut EncoderPair<F>,
    grads: &Gradients<F>,
    state: &mut AdamState<F>,
    config: &AdamWConfig,
) -> Result<()> {
    if state.m.len() != ParamId::ALL.len() {
        return Err(Error::State("optimizer state has the wrong tensor count".into()));
    }
    for id in ParamId::ALL {
        let shape = pair.tensor(id).shape().to_vec();
        let k = id as usize;
        if grads.get(id).shape() != shape.as_slice() || state.m[k].shape() != shape.as_slice() {
            return Err(Error::State(format!(
                "{id}: parameter {:?}, gradient {:?}, moments {:?}",
                shape,
                grads.get(id).shape(),
                state.m[k].shape()
            )));
        }
    }
    let lr = F::of(config.learning_rate);
    let (b1, b2) = (F::of(config.beta1), F::of(config.beta2));
    let eps = F::of(config.epsilon);
    let decay = F::one() - lr * F::of(config.weight_decay);
    for id in ParamId::ALL {
        if !pair.is_trainable(id) {
            continue;
        }
        let k = id as usize;
        state.steps[k] += 1;
        let t = state.steps[k] as i32;
        let c1 = F::one() - b1.powi(t);
        let c2 = F::one() - b2.powi(t);
        let mut theta = pair.tensor_mut(id);
        Zip::from(&mut theta)
            .and(&mut state.m[k])
            .and(&mut state.v[k])
            .and(grads.get(id))
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p = *p * decay - lr * m_hat / (v_hat.sqrt() + eps);
            });
    }
    pair.clamp_temperature();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::{init_params, EncoderDims, FreezeMask, LayerGroup, Vocabulary};

    fn pair() -> EncoderPair<f64> {
        let dims = EncoderDims {
            patch: 2,
            image_hidden: 3,
            image_block: 3,
            text_embed: 2,
            text_hidden: 3,
            embed_dim: 2,
            ..EncoderDims::default()
        };
        init_params(5, &dims, Vocabulary::build(["a b"])).unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = pair();
        p.freeze = FreezeMask::all_trainable();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let g = Gradients::zeros_like(&p);
        adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_scalar_hand_check() {
        let mut p = pair();
        p.freeze = FreezeMask::with(&[LayerGroup::Heads]);
        let mut g = Gradients::zeros_like(&p);
        g.get_mut(ParamId::ImageHeadBias)[[0]] = 0.5;
        let theta0 = p.image.head_bias[0];
        let theta1 = p.image.head_bias[1];
        let cfg = AdamWConfig::default();
        let mut st = AdamState::new(&p);
        adamw_step(&mut p, &g, &mut st, &cfg).unwrap();
        // m̂ = g, v̂ = g², so the Adam part is −lr·g/(|g|+ε).
        let expected = theta0 * (1.0 - 1e-3 * 0.01) - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.image.head_bias[0] - expected).abs() < 1e-15);
        assert!((p.image.head_bias[1] - theta1 * (1.0 - 1e-5)).abs() < 1e-15);
        assert_eq!(st.steps(ParamId::ImageHeadBias), 1);
        assert_eq!(st.steps(ParamId::PatchWeight), 0);
    }

    #[test]
    fn frozen_tensors_bit_identical_over_many_steps() {
        let mut p = pair();
        p.freeze = FreezeMask::with(&[LayerGroup::Heads, LayerGroup::LogTemperature]);
        let frozen = p.image.patch_weight.clone();
        let embedding = p.text.embedding.clone();
        let mut g = Gradients::zeros_like(&p);
        for id in ParamId::ALL {
            g.get_mut(id).fill(0.3);
        }
        let mut st = AdamState::new(&p);
        for _ in 0..100 {
            adamw_step(&mut p, &g, &mut st, &AdamWConfig::default()).unwrap();
        }
        assert_eq!(p.image.patch_weight, frozen);
        assert_eq!(p.text.embedding, embedding);
        assert!(p.temperature() >= 0.01 - 1e-12);
    }

    #[test]
    fn shape_mismatch_is_state_error() {
        let mut p = pair();
        let other = init_params::<f64>(1, &EncoderDims::default(), Vocabulary::build(["a"])).unwrap();
        let mut st = AdamState::new(&other);
        let g = Gradients::zeros_like(&p);
        assert!(matches!(
            adamw_step(&mut p, &g, &mut st, &AdamWConfig::default()),
            Err(Error::State(_))
        ));
    }
}
