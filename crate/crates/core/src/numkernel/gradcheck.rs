use super::matrix::Matrix;
use crate::error::{Error, Result};

/// A fixed, ordered set of named trainable tensors.
///
/// Gradients are stored in the same type, so a gradient is just another
/// value of the parameter container.
pub trait Parameters: Clone {
    fn tensors(&self) -> Vec<(&str, &Matrix)>;
    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)>;

    fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        out
    }

    fn entry_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Ad-hoc parameter list, used for checking individual primitives.
#[derive(Clone, Debug)]
pub struct NamedTensors(Vec<(String, Matrix)>);

impl NamedTensors {
    pub fn new(entries: Vec<(String, Matrix)>) -> Self {
        Self(entries)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.0.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn get(&self, i: usize) -> &Matrix {
        &self.0[i].1
    }

    /// Same names, new tensors computed from the position and old tensor.
    pub fn map_with(&self, mut f: impl FnMut(usize, &Matrix) -> Matrix) -> Self {
        Self(
            self.0
                .iter()
                .enumerate()
                .map(|(i, (n, m))| (n.clone(), f(i, m)))
                .collect(),
        )
    }
}

impl Parameters for NamedTensors {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        self.0.iter_mut().map(|(n, m)| (n.as_str(), m)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over entries of |analytic − numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares the analytic gradient returned by `loss_fn` with central finite
/// differences over every parameter entry.
pub fn grad_check<P, F>(params: &P, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    P: Parameters,
    F: Fn(&P) -> Result<(f64, P)>,
{
    let (base_loss, analytic) = loss_fn(params)?;
    if !base_loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            param: "<unperturbed>".into(),
        });
    }
    let analytic: Vec<(String, Matrix)> = analytic
        .tensors()
        .into_iter()
        .map(|(n, m)| (n.to_string(), m.clone()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.to_string()).collect();
    for (t, name) in names.iter().enumerate() {
        let len = params.tensors()[t].1.len();
        if analytic[t].1.len() != len {
            return Err(Error::shape("grad_check", format!("gradient shape for `{name}`")));
        }
        for i in 0..len {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.tensors_mut()[t].1.data_mut()[i] += delta;
                let (l, _) = loss_fn(&p)?;
                if l.is_finite() {
                    Ok(l)
                } else {
                    Err(Error::NonFiniteLoss { param: name.clone() })
                }
            };
            let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
            let rel = (analytic[t].1.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::tape::Tape;

    #[test]
    fn quadratic_norm_gradient() {
        let w = Matrix::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap();
        let params = NamedTensors::new(vec![("w".into(), w)]);
        let report = grad_check(&params, 1e-5, |p| {
            let mut tape = Tape::new();
            let v = tape.leaf(p.get(0).clone());
            let sq = tape.mul(v, v)?;
            let s = tape.sum(sq)?;
            let mut g = tape.backward(s)?;
            let grad = g.take(v);
            for (gv, wv) in grad.data().iter().zip(p.get(0).data()) {
                assert!((gv - 2.0 * wv).abs() < 1e-15);
            }
            Ok((tape.scalar(s), p.map_with(|_, _| grad.clone())))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn dead_parameter_zero_gradient() {
        let params = NamedTensors::new(vec![
            ("used".into(), Matrix::filled(1, 3, 0.5).unwrap()),
            ("dead".into(), Matrix::filled(2, 2, 1.0).unwrap()),
        ]);
        let report = grad_check(&params, 1e-5, |p| {
            let mut tape = Tape::new();
            let u = tape.leaf(p.get(0).clone());
            let d = tape.leaf(p.get(1).clone());
            let s = tape.sigmoid(u)?;
            let l = tape.sum(s)?;
            let g = tape.backward(l)?;
            assert_eq!(g.get(d), Matrix::zeros(2, 2));
            Ok((tape.scalar(l), p.map_with(|i, _| g.get(if i == 0 { u } else { d }))))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-9);
    }

    #[test]
    fn non_finite_loss_names_parameter() {
        let params = NamedTensors::new(vec![("theta".into(), Matrix::filled(1, 1, 0.0).unwrap())]);
        let err = grad_check(&params, 1e-5, |p| {
            let x = p.get(0).data()[0];
            let loss = if x > 0.0 { f64::NAN } else { x };
            Ok((loss, p.clone()))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { ref param } if param == "theta"));
    }
}
