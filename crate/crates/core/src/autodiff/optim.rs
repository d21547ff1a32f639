use super::{DiffError, Gradients, Tensor};

/// ADAM hyper-parameters; defaults are the standard ones.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// A named trainable tensor together with its ADAM state.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub first_moment: Tensor,
    pub second_moment: Tensor,
    pub step_count: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let shape = value.shape().to_vec();
        Self {
            name: name.into(),
            value,
            first_moment: Tensor::zeros(shape.clone()),
            second_moment: Tensor::zeros(shape),
            step_count: 0,
        }
    }
}

/// Apply one bias-corrected ADAM update to every parameter that has a
/// gradient. Parameters without a gradient entry are left untouched.
/// A non-finite gradient aborts the step with the offending name.
pub fn adam_step(
    params: &mut [Parameter],
    grads: &Gradients,
    hyper: &AdamHyper,
) -> Result<(), DiffError> {
    for p in params.iter_mut() {
        let g = match grads.get(&p.name) {
            Some(g) => g,
            None => continue,
        };
        if g.shape() != p.value.shape() {
            return Err(DiffError::ShapeMismatch {
                op: "adam".to_string(),
                detail: format!(
                    "gradient {:?} vs parameter '{}' {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                ),
            });
        }
        if !g.all_finite() {
            return Err(DiffError::NonFiniteGradient(p.name.clone()));
        }
        p.step_count += 1;
        let t = p.step_count as i32;
        let bc1 = 1.0 - hyper.beta1.powi(t);
        let bc2 = 1.0 - hyper.beta2.powi(t);
        let m = p.first_moment.data_mut();
        let v = p.second_moment.data_mut();
        let x = p.value.data_mut();
        for i in 0..x.len() {
            let gi = g.data()[i];
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * gi;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            x[i] -= hyper.learning_rate * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}
