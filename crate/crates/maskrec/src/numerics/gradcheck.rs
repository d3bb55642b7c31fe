//! Central finite-difference verification of autodiff gradients.

use crate::error::{Error, Result};
use crate::numerics::params::ParamSet;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate within the tensor.
    pub worst_coord: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }
}

/// Compare `ad_grads` against central differences of `loss_fn` for every
/// coordinate of every parameter.
///
/// Relative error per coordinate is
/// `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)`; the report passes iff all
/// errors are within `tol`.
pub fn grad_check<F>(
    params: &ParamSet,
    ad_grads: &ParamSet,
    loss_fn: F,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet) -> Result<f64>,
{
    if h <= 0.0 || tol <= 0.0 {
        return Err(Error::InvalidArgument(
            "grad_check requires h > 0 and tol > 0".into(),
        ));
    }
    if !params.same_layout(ad_grads) {
        return Err(Error::ShapeMismatch {
            op: "grad_check",
            expected: "gradients with the same layout as params".into(),
            actual: format!("{} vs {} tensors", params.len(), ad_grads.len()),
        });
    }

    let mut probe = params.clone();
    let mut entries = Vec::new();
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();

    for name in &names {
        let n = params.get(name).numel();
        let mut max_rel = 0.0_f64;
        let mut worst = 0;
        for i in 0..n {
            let orig = probe.get(name).data()[i];

            probe.get_mut(name).data_mut()[i] = orig + h;
            let up = loss_fn(&probe).map_err(|e| probe_err(name, i, e))?;
            probe.get_mut(name).data_mut()[i] = orig - h;
            let down = loss_fn(&probe).map_err(|e| probe_err(name, i, e))?;
            probe.get_mut(name).data_mut()[i] = orig;

            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("grad_check probe at {name}[{i}]"),
                });
            }
            let g_fd = (up - down) / (2.0 * h);
            let g_ad = ad_grads.get(name).data()[i];
            let rel = (g_ad - g_fd).abs() / g_ad.abs().max(g_fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            max_rel_err: max_rel,
            worst_coord: worst,
        });
    }

    let pass = entries.iter().all(|e| e.max_rel_err <= tol);
    Ok(GradCheckReport { entries, tol, pass })
}

fn probe_err(name: &str, coord: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFinite {
            op: format!("grad_check probe at {name}[{coord}]"),
        },
        other => other,
    }
}
