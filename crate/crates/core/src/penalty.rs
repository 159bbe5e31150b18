//! Input-gradient penalties for scalar-valued networks.
//!
//! The penalty is trained through a first-order tape: each input gradient
//! component is replaced by a central difference of two recorded forward
//! passes, so the penalty stays differentiable in the network parameters.
//! [`analytic_input_grad_norms`] gives the exact values for reporting and
//! checks.

use diffmath::{Tape, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};

/// Central-difference step for input perturbations.
pub const FD_STEP: f64 = 1e-4;
/// Added under the square root so the norm stays differentiable at zero.
const NORM_FLOOR: f64 = 1e-12;

/// Pairwise interpolants `u·a + (1−u)·b`, `u ~ U(0,1)` per row.
pub fn interpolate<R: Rng + ?Sized>(a: &Tensor, b: &Tensor, rng: &mut R) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::Invalid(format!(
            "interpolating {}-wide and {}-wide inputs",
            a.cols(),
            b.cols()
        )));
    }
    let n = a.rows().min(b.rows());
    if n == 0 {
        return Err(Error::InsufficientData("gradient penalty needs non-empty batches".into()));
    }
    let c = a.cols();
    let mut data = Vec::with_capacity(n * c);
    for i in 0..n {
        let u: f64 = rng.gen();
        for (x, y) in a.row_slice(i).iter().zip(b.row_slice(i)) {
            data.push(u * x + (1.0 - u) * y);
        }
    }
    Ok(Tensor::matrix(n, c, data)?)
}

/// Records `mean_rows (‖∇ₓ f‖ − 1)²` (or `mean_rows ‖∇ₓ f‖²` when
/// `center_zero`) on `tape`. `f` maps an `m x d` input to an `m x 1` output
/// and is called once on all `2·d·n` perturbed rows.
pub fn fd_gradient_penalty(
    tape: &mut Tape,
    x: &Tensor,
    center_zero: bool,
    mut f: impl FnMut(&mut Tape, &Tensor) -> Result<Var>,
) -> Result<Var> {
    let (n, d) = x.dims2()?;
    if n == 0 || d == 0 {
        return Err(Error::InsufficientData("gradient penalty on an empty batch".into()));
    }
    let mut stacked = Vec::with_capacity(2 * d * n * d);
    for k in 0..d {
        for sign in [1.0, -1.0] {
            for i in 0..n {
                let row = x.row_slice(i);
                stacked.extend(row.iter().enumerate().map(|(j, &v)| {
                    if j == k {
                        v + sign * FD_STEP
                    } else {
                        v
                    }
                }));
            }
        }
    }
    let stacked = Tensor::matrix(2 * d * n, d, stacked)?;
    let out = f(tape, &stacked)?;
    if tape.value(out).shape() != [2 * d * n, 1] {
        return Err(Error::Invalid(format!(
            "penalized function returned {:?}, expected [{}, 1]",
            tape.value(out).shape(),
            2 * d * n
        )));
    }
    let mut sumsq: Option<Var> = None;
    for k in 0..d {
        let plus = tape.slice_rows(out, 2 * k * n, (2 * k + 1) * n)?;
        let minus = tape.slice_rows(out, (2 * k + 1) * n, (2 * k + 2) * n)?;
        let diff = tape.sub(plus, minus)?;
        let g = tape.scale(diff, 0.5 / FD_STEP)?;
        let sq = tape.square(g)?;
        sumsq = Some(match sumsq {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    let sumsq = sumsq.expect("d > 0");
    if center_zero {
        return Ok(tape.mean(sumsq)?);
    }
    let shifted = tape.add_scalar(sumsq, NORM_FLOOR)?;
    let norm = tape.sqrt(shifted)?;
    let dev = tape.add_scalar(norm, -1.0)?;
    let sq = tape.square(dev)?;
    Ok(tape.mean(sq)?)
}

/// Exact per-row `‖∇ₓ f(x)‖` by a reverse pass to the inputs. `f` must treat
/// rows independently.
pub fn analytic_input_grad_norms(
    x: &Tensor,
    mut f: impl FnMut(&mut Tape, Var) -> Result<Var>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone())?;
    let out = f(&mut tape, xv)?;
    let total = tape.sum(out)?;
    let grads = tape.backward(total)?;
    let g = grads.get_or_zeros(xv, x);
    Ok((0..x.rows())
        .map(|i| g.row_slice(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect())
}

/// Penalty value from exact gradient norms.
pub fn penalty_from_norms(norms: &[f64], center_zero: bool) -> f64 {
    let n = norms.len().max(1) as f64;
    if center_zero {
        norms.iter().map(|g| g * g).sum::<f64>() / n
    } else {
        norms.iter().map(|g| (g - 1.0).powi(2)).sum::<f64>() / n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear(tape: &mut Tape, x: Var, w: &[f64]) -> Result<Var> {
        let wv = tape.constant(Tensor::column(w))?;
        Ok(tape.matmul(x, wv)?)
    }

    #[test]
    fn unit_slope_linear_has_zero_penalty() {
        let x = Tensor::from_rows(&[[0.3, -1.0], [2.0, 0.5]]).unwrap();
        let w = [0.6, 0.8];
        let mut tape = Tape::new();
        let p = fd_gradient_penalty(&mut tape, &x, false, |t, xs| {
            let xv = t.constant(xs.clone())?;
            linear(t, xv, &w)
        })
        .unwrap();
        assert!(tape.value(p).item().unwrap().abs() < 1e-12);
        let norms = analytic_input_grad_norms(&x, |t, xv| linear(t, xv, &w)).unwrap();
        assert!(penalty_from_norms(&norms, false).abs() < 1e-15);
    }

    #[test]
    fn constant_function_penalty_is_one() {
        let x = Tensor::from_rows(&[[0.3, -1.0], [2.0, 0.5], [0.0, 0.0]]).unwrap();
        let mut tape = Tape::new();
        let p = fd_gradient_penalty(&mut tape, &x, false, |t, xs| {
            Ok(t.constant(Tensor::filled(xs.rows(), 1, 0.7))?)
        })
        .unwrap();
        assert!((tape.value(p).item().unwrap() - 1.0).abs() < 1e-5);
        assert_eq!(penalty_from_norms(&[0.0, 0.0], false), 1.0);
        assert_eq!(penalty_from_norms(&[0.0, 0.0], true), 0.0);
    }

    #[test]
    fn fd_matches_analytic_on_nonlinear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::matrix(6, 3, (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let v = Tensor::column(&[0.5, -0.3, 0.9, 0.2]);
        let f = |t: &mut Tape, xv: Var| -> Result<Var> {
            let wv = t.constant(w.clone())?;
            let vv = t.constant(v.clone())?;
            let h = t.matmul(xv, wv)?;
            let h = t.tanh(h)?;
            Ok(t.matmul(h, vv)?)
        };
        let norms = analytic_input_grad_norms(&x, f).unwrap();
        let mut tape = Tape::new();
        let p = fd_gradient_penalty(&mut tape, &x, false, |t, xs| {
            let xv = t.constant(xs.clone())?;
            f(t, xv)
        })
        .unwrap();
        let fd = tape.value(p).item().unwrap();
        assert!((fd - penalty_from_norms(&norms, false)).abs() < 1e-6);
    }

    #[test]
    fn interpolants_lie_between_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::filled(4, 2, 1.0);
        let b = Tensor::filled(3, 2, -1.0);
        let x = interpolate(&a, &b, &mut rng).unwrap();
        assert_eq!(x.rows(), 3);
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(interpolate(&Tensor::zeros(0, 2), &b, &mut rng).is_err());
    }
}
