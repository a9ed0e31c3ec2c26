use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore, Session};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub epsilon: f64,
    /// Check a seeded random subset of at most this many coordinates per tensor.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |g_a - g_n| / max(1e-12, |g_a| + |g_n|)` over checked coordinates.
    pub max_rel_error: f64,
    pub worst_tensor: usize,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub coords_checked: usize,
}

/// Compares tape gradients of `f` at `theta` with central differences.
///
/// `f` receives a fresh tape and one leaf per entry of `theta`. Kinks (for
/// example `|x|` at 0) are outside the contract: the two one-sided slopes
/// disagree and the reported error is meaningless there.
pub fn finite_diff_check<F>(f: F, theta: &[Tensor], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |params: &[Tensor], grad: bool| -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = params.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
        let loss = f(&mut tape, &leaves)?;
        let value = scalar_value(&tape, loss)?;
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = match tape.backward(loss) {
            Ok(g) => leaves.iter().map(|v| g.get(*v)).collect(),
            Err(Error::DetachedLoss) => params.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            Err(e) => return Err(e),
        };
        Ok((value, grads))
    };
    let (_, analytic) = eval(theta, true)?;
    let mut work = theta.to_vec();
    compare(&analytic, cfg, |ti, idx, delta| {
        let orig = work[ti].data()[idx];
        work[ti].data_mut()[idx] = orig + delta;
        let r = eval(&work, false).map(|(v, _)| v);
        work[ti].data_mut()[idx] = orig;
        r
    })
}

/// Same check over parameters of a store; `ids = None` checks all of them.
pub fn finite_diff_check_params<F>(
    store: &ParamStore,
    ids: Option<&[ParamId]>,
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let ids: Vec<ParamId> = ids.map_or_else(|| store.ids().collect(), |s| s.to_vec());
    let analytic: Vec<Tensor> = {
        let mut sess = Session::new(store, true);
        let loss = f(&mut sess)?;
        scalar_value(&sess.tape, loss)?;
        match sess.tape.backward(loss) {
            Ok(g) => {
                let by_id = sess.param_grads(&g);
                ids.iter()
                    .map(|id| {
                        by_id
                            .iter()
                            .find(|(p, _)| p == id)
                            .map(|(_, t)| t.clone())
                            .unwrap_or_else(|| Tensor::zeros(store.value(*id).shape()))
                    })
                    .collect()
            }
            Err(Error::DetachedLoss) => ids.iter().map(|id| Tensor::zeros(store.value(*id).shape())).collect(),
            Err(e) => return Err(e),
        }
    };
    let mut work = store.clone();
    compare(&analytic, cfg, |ti, idx, delta| {
        let id = ids[ti];
        let orig = work.value(id).data()[idx];
        work.value_mut(id).data_mut()[idx] = orig + delta;
        let r = {
            let mut sess = Session::new(&work, false);
            f(&mut sess).and_then(|l| scalar_value(&sess.tape, l))
        };
        work.value_mut(id).data_mut()[idx] = orig;
        r
    })
}

fn scalar_value(tape: &Tape, loss: Var) -> Result<f64> {
    let t = tape.value(loss);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(Error::NonFinite("finite-difference objective".into()));
    }
    Ok(v)
}

fn compare(
    analytic: &[Tensor],
    cfg: &GradCheckConfig,
    mut eval_shifted: impl FnMut(usize, usize, f64) -> Result<f64>,
) -> Result<GradCheckReport> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: 0,
        worst_index: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        coords_checked: 0,
    };
    for (ti, g) in analytic.iter().enumerate() {
        let n = g.numel();
        let coords: Vec<usize> = match cfg.max_coords_per_tensor {
            Some(m) if m < n => {
                let mut c = sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for idx in coords {
            let plus = eval_shifted(ti, idx, cfg.epsilon)?;
            let minus = eval_shifted(ti, idx, -cfg.epsilon)?;
            let numeric = (plus - minus) / (2.0 * cfg.epsilon);
            let a = g.data()[idx];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            report.coords_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_tensor = ti;
                report.worst_index = idx;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let r = finite_diff_check(
            |t, x| {
                let y = t.mul(x[0], x[0])?;
                Ok(t.sum(y))
            },
            &[Tensor::scalar(3.0)],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert!((r.worst_analytic - 6.0).abs() < 1e-12 || r.max_rel_error == 0.0);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let r = finite_diff_check(
            |t, x| {
                let z = t.scale(x[0], 0.0);
                let s = t.sum(z);
                Ok(t.shift(s, 2.0))
            },
            &[Tensor::from_vec(vec![1.0, -1.0])],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let r = finite_diff_check(
            |t, x| {
                let y = t.powf(x[0], -1.0);
                Ok(t.sum(y))
            },
            &[Tensor::scalar(0.0)],
            &GradCheckConfig::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rejects_non_positive_epsilon() {
        let cfg = GradCheckConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        let r = finite_diff_check(|t, x| Ok(t.sum(x[0])), &[Tensor::scalar(1.0)], &cfg);
        assert!(r.is_err());
    }

    #[test]
    fn abs_at_kink_is_outside_the_contract() {
        // |x| = relu(x) + relu(-x): the tape reports 0 at x = 0 while central
        // differences see the average slope 0 as well, but a shifted probe
        // shows the disagreement that makes kinks unusable.
        let f = |t: &mut Tape, x: &[Var]| {
            let n = t.scale(x[0], -1.0);
            let a = t.relu(x[0]);
            let b = t.relu(n);
            let s = t.add(a, b)?;
            Ok(t.sum(s))
        };
        let cfg = GradCheckConfig {
            epsilon: 1e-3,
            ..Default::default()
        };
        let r = finite_diff_check(f, &[Tensor::scalar(4e-4)], &cfg).unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
