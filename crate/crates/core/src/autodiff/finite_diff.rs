use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Bindings, DiffError, Graph, NodeId, Tensor};

/// If a checked tensor has more coordinates than this, a fixed-seed random
/// subsample of this size is probed instead of every coordinate.
const MAX_COORDS_PER_TENSOR: usize = 10_000;
const SUBSAMPLE_SEED: u64 = 0x5eed_f1d1;

/// Result of comparing analytic and numerical derivatives over a set of
/// parameter coordinates.
#[derive(Debug, Clone)]
pub struct FiniteDiffReport {
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index where the worst error occurred.
    pub worst: Option<(String, usize)>,
}

/// Central-difference check of `graph.backward` at `root` against numerical
/// derivatives, for the parameters named in `check` (all parameters when
/// `check` is empty). Relative error uses max(|analytic|, |numeric|, 1e-4)
/// in the denominator. `eps` must lie in (0, 1e-2].
pub fn finite_diff_check(
    graph: &Graph,
    bindings: &Bindings,
    root: NodeId,
    check: &[&str],
    eps: f64,
) -> Result<FiniteDiffReport, DiffError> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(DiffError::BadEpsilon(eps));
    }
    let eval = graph.forward(bindings)?;
    let grads = graph.backward(&eval, root)?;

    let names: Vec<String> = if check.is_empty() {
        graph.param_names()
    } else {
        check.iter().map(|s| s.to_string()).collect()
    };

    let mut report = FiniteDiffReport {
        coords_checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(SUBSAMPLE_SEED);

    for name in &names {
        let analytic = grads
            .get(name)
            .ok_or_else(|| DiffError::MissingGradient(name.clone()))?
            .clone();
        let base = bindings
            .get(name)
            .ok_or_else(|| DiffError::UnboundLeaf(name.clone()))?
            .clone();
        let numel = base.numel();
        let coords: Vec<usize> = if numel > MAX_COORDS_PER_TENSOR {
            let mut all: Vec<usize> = (0..numel).collect();
            all.shuffle(&mut rng);
            all.truncate(MAX_COORDS_PER_TENSOR);
            all
        } else {
            (0..numel).collect()
        };

        for &i in &coords {
            let orig = base.data()[i];
            let plus = eval_perturbed(graph, bindings, root, name, i, orig + eps)?;
            let minus = eval_perturbed(graph, bindings, root, name, i, orig - eps)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            let rel = (a - numeric).abs() / denom;
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

fn eval_perturbed(
    graph: &Graph,
    bindings: &Bindings,
    root: NodeId,
    name: &str,
    index: usize,
    value: f64,
) -> Result<f64, DiffError> {
    let mut b = bindings.clone();
    let mut t: Tensor = b.get(name).unwrap().clone();
    t.data_mut()[index] = value;
    b.set(name, t);
    let eval = graph.forward(&b)?;
    Ok(eval.value(root).item())
}
