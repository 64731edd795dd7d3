//! SGD with momentum and weight decay.
//!
//! Update rule: `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`. Velocity buffers are
//! keyed by parameter name so the optimizer survives checkpoint round-trips
//! of the model it drives.

use std::collections::BTreeMap;

use ndarray::ArrayViewD;

use super::NamedViewsMut;

#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one step. `params` and `grads` must list the same names in the
    /// same order (this is asserted).
    pub fn step(&mut self, params: NamedViewsMut<'_>, grads: &[(String, ArrayViewD<'_, f64>)]) {
        assert_eq!(params.len(), grads.len(), "param/grad arity");
        for ((pname, mut pview), (gname, gview)) in params.into_iter().zip(grads.iter()) {
            assert_eq!(&pname, gname, "param/grad name order");
            let v = self
                .velocity
                .entry(pname)
                .or_insert_with(|| vec![0.0; pview.len()]);
            debug_assert_eq!(v.len(), pview.len());
            let p = pview.as_slice_mut().expect("contiguous param");
            let mut gi = gview.iter();
            for (pi, vi) in p.iter_mut().zip(v.iter_mut()) {
                let g = gi.next().expect("grad len") + self.weight_decay * *pi;
                *vi = self.momentum * *vi + g;
                *pi -= self.learning_rate * *vi;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn plain_sgd_descends_a_quadratic() {
        // f(p) = p², grad = 2p
        let mut p = Array1::from_elem(1, 1.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0);
        for _ in 0..50 {
            let g = Array1::from_elem(1, 2.0 * p[0]);
            opt.step(
                vec![("p".into(), p.view_mut().into_dyn())],
                &[("p".into(), g.view().into_dyn())],
            );
        }
        assert!(p[0].abs() < 1e-4);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Array1::from_elem(1, 0.0);
        let g = Array1::from_elem(1, 1.0);
        let mut opt = Sgd::new(1.0, 0.5, 0.0);
        opt.step(
            vec![("p".into(), p.view_mut().into_dyn())],
            &[("p".into(), g.view().into_dyn())],
        );
        assert!((p[0] + 1.0).abs() < 1e-12); // v=1, p=-1
        opt.step(
            vec![("p".into(), p.view_mut().into_dyn())],
            &[("p".into(), g.view().into_dyn())],
        );
        assert!((p[0] + 2.5).abs() < 1e-12); // v=1.5, p=-2.5
    }
}
