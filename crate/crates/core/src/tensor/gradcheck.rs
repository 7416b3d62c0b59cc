use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Element, Graph, Tensor, Var};
use crate::error::Result;

/// Fixed projection used to collapse a non-scalar output into a scalar.
fn projection<T: Element>(shape: super::Shape) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

fn projected<T: Element>(out: &Tensor<T>, proj: &Tensor<T>) -> f64 {
    out.data()
        .iter()
        .zip(proj.data())
        .map(|(&o, &w)| o.as_f64() * w.as_f64())
        .sum()
}

fn eval<T, F>(op: &F, inputs: &[Tensor<T>]) -> Result<Tensor<T>>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = op(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

/// Maximum relative disagreement between the tape's gradient and central
/// differences, over every coordinate of every input.
///
/// The output is reduced to a scalar with a fixed random projection, so
/// every output element contributes. Relative error per coordinate is
/// `|analytic - numeric| / max(1e-6, |analytic| + |numeric|)`. Meant for
/// small inputs (a few hundred elements in total).
pub fn grad_check<T, F>(op: F, inputs: &[Tensor<T>], epsilon: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_at(op, inputs, &coords, epsilon)
}

/// As [`grad_check`] but only over the listed `(input, element)` coordinates.
pub fn grad_check_at<T, F>(op: F, inputs: &[Tensor<T>], coords: &[(usize, usize)], epsilon: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = op(&mut g, &vars)?;
    let proj = projection::<T>(g.value(out).shape());
    g.backward_with(out, proj.data().to_vec())?;
    let analytic: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| g.grad(v)).collect();
    drop(g);

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for &(i, j) in coords {
        let x0 = inputs[i].data()[j];
        let plus = x0 + T::of(epsilon);
        let minus = x0 - T::of(epsilon);
        work[i].data_mut()[j] = plus;
        let fp = projected(&eval(&op, &work)?, &proj);
        work[i].data_mut()[j] = minus;
        let fm = projected(&eval(&op, &work)?, &proj);
        work[i].data_mut()[j] = x0;

        let numeric = (fp - fm) / (plus.as_f64() - minus.as_f64());
        let a = analytic[i].as_ref().map_or(0.0, |t| t.data()[j].as_f64());
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_op_is_exact() {
        let a = Tensor::<f64>::from_fn([1, 2, 3, 3], |[_, c, y, x]| (c * 9 + y * 3 + x) as f64 * 0.1);
        let b = a.map(|v| 1.0 - v);
        let err = grad_check(|g, v| g.add(v[0], v[1]), &[a, b], 1e-3).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn detects_missing_gradient() {
        // The output is rebuilt as a fresh leaf, so the tape sees no path
        // back to the input while central differences do.
        let x = Tensor::<f64>::new([1, 1, 1, 2], vec![0.3, -0.2]).unwrap();
        let err = grad_check(
            |g, v| {
                let t = g.value(v[0]).map(|s| 2.0 * s);
                Ok(g.leaf(t, true))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!((err - 1.0).abs() < 1e-9, "{err}");
    }
}
