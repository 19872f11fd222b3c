//! Central finite-difference checks of analytic gradients.

use crate::autograd::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::exec::Exec;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheck {
    /// Max over checked coordinates of `|a - n| / (|a| + |n| + 1e-12)`.
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub coords: Vec<usize>,
}

fn eval<F>(f: &F, point: &Tensor, grad: bool) -> Result<(f64, Option<Vec<f64>>)>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let x = g.leaf(point.clone(), grad);
    let y = f(&mut g, x)?;
    if g.value(y).numel() != 1 {
        return Err(invalid("grad_check function must return a scalar"));
    }
    let v = g.value(y).item();
    if !grad {
        return Ok((v, None));
    }
    g.backward(y)?;
    let gr = g.grad(x).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; point.numel()]);
    Ok((v, Some(gr)))
}

/// Checks every coordinate of `point`.
pub fn grad_check<F>(f: F, point: &Tensor, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync + Send,
{
    let coords: Vec<usize> = (0..point.numel()).collect();
    grad_check_coords(f, point, step, &coords, Exec::default())
}

/// Checks the listed coordinates only (useful for large parameter tensors).
pub fn grad_check_coords<F>(f: F, point: &Tensor, step: f64, coords: &[usize], exec: Exec) -> Result<GradCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var> + Sync + Send,
{
    if !(step > 0.0) {
        return Err(invalid(format!("grad_check step must be positive, got {step}")));
    }
    let (v0, analytic) = eval(&f, point, true)?;
    if !v0.is_finite() {
        return Err(Error::NonFinite(format!("function value {v0} at the base point")));
    }
    let analytic = analytic.expect("requested");
    let numeric = exec.try_map(coords, |&c| -> Result<f64> {
        let mut plus = point.clone();
        plus.data_mut()[c] += step;
        let mut minus = point.clone();
        minus.data_mut()[c] -= step;
        let (fp, _) = eval(&f, &plus, false)?;
        let (fm, _) = eval(&f, &minus, false)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("function value at coordinate {c}: f(+h)={fp}, f(-h)={fm}")));
        }
        Ok((fp - fm) / (2.0 * step))
    })?;
    let mut worst = (0.0, coords.first().copied().unwrap_or(0));
    let picked: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    for (k, &c) in coords.iter().enumerate() {
        let (a, n) = (picked[k], numeric[k]);
        let e = (a - n).abs() / (a.abs() + n.abs() + 1e-12);
        if e > worst.0 {
            worst = (e, c);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_coord: worst.1,
        analytic: picked,
        numeric,
        coords: coords.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;
    use std::sync::Arc;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_form_is_exact() {
        let a = random(&[4, 4], 1);
        let r = grad_check(
            move |g, x| {
                let m = g.constant(a.clone());
                let xa = g.matmul(x, m)?;
                let xx = g.mul(xa, x)?;
                Ok(g.sum(xx))
            },
            &random(&[1, 4], 2),
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{}", r.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let r = grad_check(|g, _x| Ok(g.constant(Tensor::scalar(4.0))), &random(&[3], 3), 1e-5).unwrap();
        assert!(r.analytic.iter().all(|v| *v == 0.0));
        assert!(r.numeric.iter().all(|v| v.abs() < 1e-12));
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn reports_non_finite_coordinate() {
        let err = grad_check(
            |g, x| {
                let ls = g.log_softmax(x);
                let s = g.scale(ls, f64::INFINITY);
                Ok(g.sum(s))
            },
            &random(&[1, 3], 4),
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(grad_check(|g, x| Ok(g.sum(x)), &random(&[2], 5), 0.0).is_err());
    }

    /// Every primitive on random inputs, 100 seeded trials.
    #[test]
    fn every_primitive_passes_on_random_inputs() {
        for trial in 0..100u64 {
            let p = random(&[3, 6], 100 + trial);
            let w = random(&[6, 4], 200 + trial);
            let gain = random(&[6], 300 + trial);
            let tgt = {
                let mut t = random(&[2, 4], 400 + trial);
                for v in t.data_mut() {
                    *v = v.abs() + 0.1;
                }
                for r in 0..2 {
                    let s: f64 = t.row(r).iter().sum();
                    t.row_mut(r).iter_mut().for_each(|v| *v /= s);
                }
                Arc::new(t)
            };
            let probes: Vec<Box<dyn Fn(&mut Graph, Var) -> Result<Var> + Sync + Send>> = vec![
                Box::new(|g, x| {
                    let y = g.add(x, x)?;
                    let z = g.mul(y, x)?;
                    let s = g.sub(z, x)?;
                    Ok(g.sum(s))
                }),
                Box::new(|g, x| {
                    let m = g.constant(w.clone());
                    let y = g.matmul(x, m)?;
                    let s = g.square(y);
                    Ok(g.mean(s))
                }),
                Box::new(|g, x| {
                    let m = g.constant(w.clone());
                    let y = g.matmul(x, m)?;
                    let y2 = g.matmul_nt(y, y)?;
                    let a = g.gelu(y2);
                    Ok(g.sum(a))
                }),
                Box::new(|g, x| {
                    let s = g.softmax(x);
                    let sq = g.square(s);
                    Ok(g.sum(sq))
                }),
                Box::new(|g, x| {
                    let s = g.log_softmax(x);
                    let sq = g.square(s);
                    Ok(g.mean(sq))
                }),
                Box::new(|g, x| {
                    let gn = g.constant(gain.clone());
                    let bias = g.constant(Tensor::full(&[6], 0.2));
                    let y = g.layer_norm(x, gn, bias, 1e-5)?;
                    let m = g.constant(w.clone());
                    let z = g.matmul(y, m)?;
                    let z = g.square(z);
                    Ok(g.sum(z))
                }),
                Box::new(|g, x| {
                    let y = g.gather(x, &[2, 0, 2])?;
                    let z = g.select_rows(y, &[1, 2])?;
                    let c = g.concat_rows(&[z, x])?;
                    let b = g.constant(Tensor::full(&[6], 0.5));
                    let c = g.add_bias(c, b)?;
                    let c = g.square(c);
                    let ls = g.log_sigmoid(c);
                    Ok(g.sum(ls))
                }),
                Box::new(|g, x| {
                    // [3,6] as qkv with d=2, two heads of width 1
                    let a = g.causal_attention(x, &[(0, 2), (2, 1)], 2)?;
                    let a = g.square(a);
                    Ok(g.sum(a))
                }),
                Box::new(|g, x| {
                    let m = g.constant(w.clone());
                    let y = g.matmul(x, m)?;
                    g.cross_entropy(y, &[(0, 1), (2, 3), (1, 0)])
                }),
                Box::new(|g, x| {
                    let m = g.constant(w.clone());
                    let y = g.matmul(x, m)?;
                    let y = g.offset(y, 0.3);
                    let y = g.scale(y, 1.7);
                    g.soft_cross_entropy(y, &[2, 0], tgt.clone())
                }),
            ];
            for (i, f) in probes.iter().enumerate() {
                let r = grad_check(f, &p, 1e-5).unwrap();
                assert!(r.max_rel_error < 1e-4, "trial {trial} probe {i}: {}", r.max_rel_error);
            }
        }
    }
}
