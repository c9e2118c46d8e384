//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use super::{Element, Tensor};
use crate::error::Error;

/// Named parameter tensors. BTreeMap keeps iteration order deterministic,
/// which matters for checkpoint layout and global-norm reductions.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<E> {
    entries: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<E>) -> crate::Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::Invalid(format!("duplicate parameter name {name}")));
        }
        self.entries.insert(name.to_string(), t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> crate::Result<&Tensor<E>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> crate::Result<&mut Tensor<E>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<E>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn value_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.all_finite())
    }

    pub fn cast<T: Element>(&self) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, beta1: f64) -> Self {
        AdamHyper {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<E> {
    pub hyper: AdamHyper,
    pub step: u64,
    m: BTreeMap<String, Tensor<E>>,
    v: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> AdamState<E> {
    pub fn new(hyper: AdamHyper) -> Self {
        AdamState {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Standard bias-corrected Adam update. Moment arithmetic runs in f64
    /// and is stored back at parameter precision.
    pub fn step(
        &mut self,
        params: &mut ParamStore<E>,
        grads: &BTreeMap<String, Tensor<E>>,
    ) -> crate::Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.hyper.beta1;
        let b2 = self.hyper.beta2;
        let corr1 = 1.0 - b1.powi(t);
        let corr2 = 1.0 - b2.powi(t);
        let lr = self.hyper.lr;
        let eps = self.hyper.eps;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            if p.dims() != g.dims() {
                return Err(Error::Shape(format!(
                    "adam: grad {:?} vs param {:?} for {name}",
                    g.dims(),
                    p.dims()
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.dims()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.dims()));
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i].to_f64();
                let mi = b1 * md[i].to_f64() + (1.0 - b1) * gi;
                let vi = b2 * vd[i].to_f64() + (1.0 - b2) * gi * gi;
                md[i] = E::from_f64(mi);
                vd[i] = E::from_f64(vi);
                let m_hat = mi / corr1;
                let v_hat = vi / corr2;
                pd[i] = E::from_f64(pd[i].to_f64() - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&BTreeMap<String, Tensor<E>>, &BTreeMap<String, Tensor<E>>) {
        (&self.m, &self.v)
    }

    pub fn set_moments(
        &mut self,
        m: BTreeMap<String, Tensor<E>>,
        v: BTreeMap<String, Tensor<E>>,
        step: u64,
    ) {
        self.m = m;
        self.v = v;
        self.step = step;
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_global_norm<E: Element>(grads: &mut BTreeMap<String, Tensor<E>>, max_norm: f64) -> f64 {
    let sq: f64 = grads.values().map(|g| g.squared_l2()).sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grads_of(name: &str, dims: &[usize], val: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut m = BTreeMap::new();
        m.insert(name.to_string(), Tensor::filled(dims, val));
        m
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With eps << 1 the first bias-corrected step is -lr * sign(g).
        let mut params = ParamStore::<f64>::new();
        params
            .insert("p", Tensor::from_f64_slice(&[2], &[1.0, -2.0]).unwrap())
            .unwrap();
        let mut adam = AdamState::new(AdamHyper::new(1e-3, 0.9));
        adam.step(&mut params, &grads_of("p", &[2], 0.5)).unwrap();
        let p = params.get("p").unwrap().data();
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-8, "{}", p[0]);
        assert!((p[1] - (-2.0 - 1e-3)).abs() < 1e-8, "{}", p[1]);
    }

    #[test]
    fn zero_grad_zero_moments_is_noop() {
        let mut params = ParamStore::<f64>::new();
        params.insert("p", Tensor::filled(&[3], 0.7)).unwrap();
        let mut adam = AdamState::new(AdamHyper::new(1e-2, 0.9));
        adam.step(&mut params, &grads_of("p", &[3], 0.0)).unwrap();
        assert_eq!(params.get("p").unwrap().data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn identical_calls_identical_results() {
        let run = || {
            let mut params = ParamStore::<f32>::new();
            params.insert("p", Tensor::filled(&[4], 0.25f32)).unwrap();
            let mut adam = AdamState::new(AdamHyper::new(2e-4, 0.5));
            let mut g = BTreeMap::new();
            g.insert("p".to_string(), Tensor::filled(&[4], 0.1f32));
            for _ in 0..5 {
                adam.step(&mut params, &g).unwrap();
            }
            params.get("p").unwrap().data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn clip_bounds_norm() {
        let mut g = grads_of("p", &[2], 30.0);
        let norm = clip_global_norm(&mut g, 10.0);
        assert!((norm - 30.0 * 2f64.sqrt()).abs() < 1e-9);
        let after: f64 = g.values().map(|t| t.squared_l2()).sum::<f64>().sqrt();
        assert!((after - 10.0).abs() < 1e-9);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut params = ParamStore::<f64>::new();
        params.insert("p", Tensor::zeros(&[2])).unwrap();
        let mut adam = AdamState::new(AdamHyper::new(1e-3, 0.9));
        let g = grads_of("p", &[3], 1.0);
        assert!(adam.step(&mut params, &g).is_err());
    }
}
