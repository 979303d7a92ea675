//! Central finite-difference gradient checking.
//!
//! Relative error per scalar is `|a - n| / max(|a|, |n|, floor)`, where the
//! floor is `1e-3` of the largest gradient magnitude in the check (plus a
//! tiny absolute term). The floor keeps near-zero components from reporting
//! huge relative errors caused purely by rounding.

use super::{Graph, Result, Scalar, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst component.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Largest relative error between analytic and numerical gradient vectors.
pub fn max_relative_error(analytic: &[f64], numerical: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numerical.len());
    let scale = analytic
        .iter()
        .chain(numerical)
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-300;
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(numerical).enumerate() {
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = (a - n).abs() / denom;
        if rel > worst.0 {
            worst = (rel, i);
        }
    }
    worst
}

fn eval_loss<T, F>(build: &F, inputs: &[Tensor<T>]) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &vars)?;
    scalar_of(&g, out)
}

fn scalar_of<T: Scalar>(g: &Graph<T>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0].as_f64())
}

fn analytic<T, F>(build: &F, inputs: &[Tensor<T>]) -> Result<Vec<Vec<f64>>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .map(|&v| grads.get(v).data().iter().map(|x| x.as_f64()).collect())
        .collect())
}

fn numerical<F>(build: &F, inputs: &[Tensor<f64>], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut grad = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval_loss(build, &work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval_loss(build, &work)?;
            work[i].data_mut()[j] = orig;
            grad.push((plus - minus) / (2.0 * eps));
        }
        out.push(grad);
    }
    Ok(out)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            detail: format!("eps {eps} outside (0, 1e-2]"),
        });
    }
    Ok(())
}

fn compare(analytic: Vec<Vec<f64>>, numerical: Vec<Vec<f64>>) -> GradCheckReport {
    let offsets: Vec<usize> = analytic
        .iter()
        .scan(0, |acc, v| {
            let start = *acc;
            *acc += v.len();
            Some(start)
        })
        .collect();
    let a: Vec<f64> = analytic.into_iter().flatten().collect();
    let n: Vec<f64> = numerical.into_iter().flatten().collect();
    let (err, flat) = max_relative_error(&a, &n);
    let input = offsets.iter().rposition(|&o| o <= flat).unwrap_or(0);
    GradCheckReport {
        max_rel_error: err,
        worst: (input, flat - offsets[input]),
        checked: a.len(),
    }
}

/// Check the gradient of the scalar produced by `build` with respect to every
/// element of every input, in double precision.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let a = analytic(&build, inputs)?;
    let n = numerical(&build, inputs, eps)?;
    Ok(compare(a, n))
}

/// Single-precision check: analytic gradients from the `f32` graph compared
/// against central differences of the same function evaluated in `f64`.
pub fn grad_check_mixed<F32, F64>(
    build32: F32,
    build64: F64,
    inputs: &[Tensor<f64>],
    eps: f64,
) -> Result<GradCheckReport>
where
    F32: Fn(&mut Graph<f32>, &[Var]) -> Result<Var>,
    F64: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let single: Vec<Tensor<f32>> = inputs.iter().map(|t| t.cast()).collect();
    // the reference must see exactly the rounded f32 inputs
    let rounded: Vec<Tensor<f64>> = single.iter().map(|t| t.cast()).collect();
    let a = analytic(&build32, &single)?;
    let n = numerical(&build64, &rounded, eps)?;
    Ok(compare(a, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_op_has_zero_error() {
        let x = Tensor::new(&[3], vec![0.5, -1.25, 2.0]).unwrap();
        let w = Tensor::new(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let r = grad_check(move |g, v| g.project(v[0], w.clone()), &[x], 1.0 / 1024.0).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::new(&[1], vec![0.5]).unwrap();
        assert!(grad_check(|_, v| Ok(v[0]), &[x.clone()], 0.1).is_err());
        assert!(grad_check(|_, v| Ok(v[0]), &[x], 0.0).is_err());
    }

    #[test]
    fn floor_suppresses_rounding_noise_only() {
        let (e, _) = max_relative_error(&[1.0, 1e-9], &[1.0, 0.0]);
        assert!(e < 1e-5);
        let (e, i) = max_relative_error(&[1.0, 0.5], &[1.0, 0.4]);
        assert_eq!(i, 1);
        assert!((e - 0.2).abs() < 1e-12);
    }
}
