//! Analytic label recovery from the classifier's weight gradient.

use alloc::vec::Vec;

use crate::nn::ModelSpec;
use crate::{Error, Result, Tensor};

/// Recovers `n` distinct labels from gradients aligned with `spec`.
///
/// For `n = 1` this is the class whose classifier-weight gradient row has the
/// smallest (negative) sum. For `n > 1` it is the `n` classes whose rows hold
/// the most negative single entries. The result is sorted ascending.
pub fn infer_labels(spec: &ModelSpec, grads: &[Tensor], n: usize) -> Result<Vec<usize>> {
    let classes = spec.classes;
    if n == 0 || n > classes {
        return Err(Error::arg(
            "infer_labels",
            alloc::format!("cannot infer {n} distinct labels among {classes} classes"),
        ));
    }
    let w = grads
        .get(spec.fc_weight_index()?)
        .ok_or_else(|| Error::arg("infer_labels", "gradient list too short"))?;
    let cols = w.shape()[1];
    let rows = w.data().chunks(cols);
    let score: Vec<f64> = if n == 1 {
        rows.map(|r| r.iter().sum()).collect()
    } else {
        rows.map(|r| r.iter().copied().fold(f64::INFINITY, f64::min)).collect()
    };
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| score[a].total_cmp(&score[b]).then(a.cmp(&b)));
    let mut out = order[..n].to_vec();
    out.sort_unstable();
    Ok(out)
}
