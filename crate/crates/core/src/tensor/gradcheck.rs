//! Central finite-difference gradient verification.
//!
//! The loss closure is evaluated at perturbed parameter values; its analytic
//! gradients come from whatever backward path the caller wires up. Relative
//! errors use a small floor in the denominator so that noise on
//! near-zero coordinates does not dominate the report.

use std::collections::BTreeMap;

use super::{Element, ParamStore, Tensor};
use crate::rng::RandomStream;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub mean_rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl GradCheckReport {
    fn empty(tol: f64) -> Self {
        GradCheckReport {
            entries: Vec::new(),
            max_rel_err: 0.0,
            mean_rel_err: 0.0,
            tol,
            pass: true,
        }
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.partial_cmp(&b.rel_err).unwrap())
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Check analytic gradients of `loss_fn` against central differences.
///
/// `loss_fn(params, want_grads)` must be deterministic given its inputs
/// (fix all noise beforehand) and return the scalar loss, plus the analytic
/// gradients when asked. At most `sample` coordinates per parameter are
/// probed, chosen by `rng`. `denom_floor` bounds the relative-error
/// denominator from below so coordinates with near-zero gradients are
/// judged on absolute agreement.
pub fn grad_check<E, F>(
    params: &ParamStore<E>,
    mut loss_fn: F,
    step: f64,
    tol: f64,
    denom_floor: f64,
    sample: usize,
    rng: &mut RandomStream,
) -> crate::Result<GradCheckReport>
where
    E: Element,
    F: FnMut(&ParamStore<E>, bool) -> crate::Result<(f64, Option<BTreeMap<String, Tensor<E>>>)>,
{
    if params.is_empty() {
        return Ok(GradCheckReport::empty(tol));
    }
    let (_, grads) = loss_fn(params, true)?;
    let grads = grads.ok_or_else(|| {
        crate::error::Error::Invalid("loss_fn returned no gradients when asked".into())
    })?;

    let mut entries = Vec::new();
    for (name, base) in params.iter() {
        let n = base.len();
        let coords: Vec<usize> = if n <= sample {
            (0..n).collect()
        } else {
            let mut picked: Vec<usize> = (0..sample).map(|_| rng.below(n as u64) as usize).collect();
            picked.sort_unstable();
            picked.dedup();
            picked
        };
        let analytic_t = grads.get(name);
        for coord in coords {
            let mut hi = params.clone();
            let mut lo = params.clone();
            {
                let t = hi.get_mut(name)?;
                let v = t.data()[coord].to_f64();
                t.data_mut()[coord] = E::from_f64(v + step);
            }
            {
                let t = lo.get_mut(name)?;
                let v = t.data()[coord].to_f64();
                t.data_mut()[coord] = E::from_f64(v - step);
            }
            let (fhi, _) = loss_fn(&hi, false)?;
            let (flo, _) = loss_fn(&lo, false)?;
            let numeric = (fhi - flo) / (2.0 * step);
            let analytic = analytic_t
                .map(|t| t.data()[coord].to_f64())
                .unwrap_or(0.0);
            entries.push(GradCheckEntry {
                name: name.clone(),
                coord,
                analytic,
                numeric,
                rel_err: rel_err(analytic, numeric, denom_floor),
            });
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let mean_rel_err = if entries.is_empty() {
        0.0
    } else {
        entries.iter().map(|e| e.rel_err).sum::<f64>() / entries.len() as f64
    };
    Ok(GradCheckReport {
        pass: max_rel_err < tol,
        entries,
        max_rel_err,
        mean_rel_err,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;
    use crate::tensor::Graph;

    #[test]
    fn quadratic_loss_is_exact() {
        // loss = |p|^2 / 2, grad = p; central differences are exact for
        // quadratics up to roundoff.
        let mut params = ParamStore::<f64>::new();
        params
            .insert("p", Tensor::from_f64_slice(&[4], &[0.3, -1.2, 2.0, 0.7]).unwrap())
            .unwrap();
        let mut rng = RandomStream::new(0, Purpose::Test, 0, 0);
        let report = grad_check(
            &params,
            |p, want| {
                let mut g = Graph::<f64>::new();
                let x = g.leaf(p.get("p")?.clone());
                let sq = g.mul(x, x)?;
                let s = g.sum_all(sq);
                let loss = g.mul_scalar(s, 0.5);
                let value = g.value(loss).item();
                let grads = if want {
                    let mut back = g.backward(loss)?;
                    let mut m = BTreeMap::new();
                    m.insert("p".to_string(), back.take(x).unwrap());
                    Some(m)
                } else {
                    None
                };
                Ok((value, grads))
            },
            1e-5,
            1e-9,
            1e-3,
            16,
            &mut rng,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn empty_params_pass() {
        let params = ParamStore::<f64>::new();
        let mut rng = RandomStream::new(0, Purpose::Test, 0, 0);
        let report = grad_check(
            &params,
            |_, _| Ok((0.0, Some(BTreeMap::new()))),
            1e-5,
            1e-6,
            1e-3,
            4,
            &mut rng,
        )
        .unwrap();
        assert!(report.pass);
        assert!(report.entries.is_empty());
    }

    #[test]
    fn detects_wrong_gradient() {
        let mut params = ParamStore::<f64>::new();
        params.insert("p", Tensor::filled(&[2], 1.0)).unwrap();
        let mut rng = RandomStream::new(0, Purpose::Test, 0, 0);
        let report = grad_check(
            &params,
            |p, want| {
                let v: f64 = p.get("p")?.data().iter().map(|x| x * x).sum();
                let grads = if want {
                    let mut m = BTreeMap::new();
                    // Deliberately wrong: claims gradient 1 instead of 2p.
                    m.insert("p".to_string(), Tensor::filled(&[2], 1.0));
                    Some(m)
                } else {
                    None
                };
                Ok((v, grads))
            },
            1e-5,
            1e-6,
            1e-3,
            4,
            &mut rng,
        )
        .unwrap();
        assert!(!report.pass);
        assert!(report.max_rel_err > 0.1);
    }
}
