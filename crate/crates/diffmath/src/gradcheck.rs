//! Central finite differences for checking reverse-mode gradients, and a
//! sweep over every tape primitive on random inputs.

use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::nn::{Activation, Mlp};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step used by the sweep.
pub const FD_H: f64 = 1e-6;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-3;

/// Central-difference gradient of `f` with respect to every entry of every
/// input tensor.
pub fn numeric_grad(mut f: impl FnMut(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = inputs[k].map(|_| 0.0);
        for j in 0..inputs[k].len() {
            let x = inputs[k].data()[j];
            work[k].data_mut()[j] = x + h;
            let fp = f(&work);
            work[k].data_mut()[j] = x - h;
            let fm = f(&work);
            work[k].data_mut()[j] = x;
            g.data_mut()[j] = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    out
}

/// Fourth-order central difference `(−f₂ + 8f₁ − 8f₋₁ + f₋₂) / 12h`, for
/// objectives that themselves contain finite differences and need a larger
/// step to stay above roundoff.
pub fn numeric_grad5(mut f: impl FnMut(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Tensor> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = inputs[k].map(|_| 0.0);
        for j in 0..inputs[k].len() {
            let x = inputs[k].data()[j];
            let mut at = |d: f64| {
                work[k].data_mut()[j] = x + d;
                f(&work)
            };
            let v = -at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h);
            work[k].data_mut()[j] = x;
            g.data_mut()[j] = v / (12.0 * h);
        }
        out.push(g);
    }
    out
}

/// Largest entrywise `|a − n| / max(|a|, |n|, floor)` over paired tensors.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lists differ in length");
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| a.data().iter().zip(n.data()))
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Worst relative error of one primitive over its random instances.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub instances: usize,
    pub worst: f64,
}

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;
type Gen = fn(&mut dyn FnMut(f64, f64) -> f64) -> Vec<Tensor>;

fn filled(r: usize, c: usize, mut f: impl FnMut() -> f64) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| f()).collect()).expect("shape")
}

fn dim(u: &mut dyn FnMut(f64, f64) -> f64, lo: usize, hi: usize) -> usize {
    u(lo as f64, hi as f64).floor() as usize
}

fn uni(u: &mut dyn FnMut(f64, f64) -> f64, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    filled(r, c, || u(lo, hi))
}

/// Entries with magnitude in [0.05, 2) and random sign, keeping kinks
/// outside the difference stencil.
fn signed(u: &mut dyn FnMut(f64, f64) -> f64, r: usize, c: usize) -> Tensor {
    filled(r, c, || {
        let m = u(0.05, 2.0);
        if u(0.0, 1.0) < 0.5 {
            m
        } else {
            -m
        }
    })
}

fn one(u: &mut dyn FnMut(f64, f64) -> f64, lo: f64, hi: f64) -> Vec<Tensor> {
    let (r, c) = (dim(u, 1, 5), dim(u, 1, 5));
    vec![uni(u, r, c, lo, hi)]
}

fn two(u: &mut dyn FnMut(f64, f64) -> f64) -> Vec<Tensor> {
    let (r, c) = (dim(u, 1, 5), dim(u, 1, 5));
    vec![uni(u, r, c, -2.0, 2.0), uni(u, r, c, -2.0, 2.0)]
}

fn cases() -> Vec<(&'static str, Gen, Build)> {
    vec![
        (
            "matmul",
            |u| {
                let (r, k, c) = (dim(u, 1, 5), dim(u, 1, 5), dim(u, 1, 5));
                vec![uni(u, r, k, -2.0, 2.0), uni(u, k, c, -2.0, 2.0)]
            },
            |t, v| t.matmul(v[0], v[1]),
        ),
        (
            "matmul_t",
            |u| {
                let (r, k, c) = (dim(u, 1, 5), dim(u, 1, 5), dim(u, 1, 5));
                vec![uni(u, r, k, -2.0, 2.0), uni(u, c, k, -2.0, 2.0)]
            },
            |t, v| t.matmul_t(v[0], v[1]),
        ),
        ("add", two, |t, v| t.add(v[0], v[1])),
        (
            "add_row",
            |u| {
                let (r, c) = (dim(u, 2, 5), dim(u, 1, 5));
                vec![uni(u, r, c, -2.0, 2.0), uni(u, 1, c, -2.0, 2.0)]
            },
            |t, v| t.add(v[0], v[1]),
        ),
        ("sub", two, |t, v| t.sub(v[0], v[1])),
        ("mul", two, |t, v| t.mul(v[0], v[1])),
        (
            "mul_col",
            |u| {
                let (r, c) = (dim(u, 1, 5), dim(u, 1, 5));
                vec![uni(u, r, c, -2.0, 2.0), uni(u, r, 1, -2.0, 2.0)]
            },
            |t, v| t.mul_col(v[0], v[1]),
        ),
        ("scale", |u| one(u, -2.0, 2.0), |t, v| t.scale(v[0], -1.7)),
        ("neg", |u| one(u, -2.0, 2.0), |t, v| t.neg(v[0])),
        ("div_scalar", |u| one(u, -2.0, 2.0), |t, v| t.div_scalar(v[0], 0.3)),
        ("add_scalar", |u| one(u, -2.0, 2.0), |t, v| t.add_scalar(v[0], 2.5)),
        ("tanh", |u| one(u, -3.0, 3.0), |t, v| t.tanh(v[0])),
        (
            "relu",
            |u| {
                let (r, c) = (dim(u, 1, 5), dim(u, 1, 5));
                vec![signed(u, r, c)]
            },
            |t, v| t.relu(v[0]),
        ),
        ("sigmoid", |u| one(u, -6.0, 6.0), |t, v| t.sigmoid(v[0])),
        ("softplus", |u| one(u, -6.0, 6.0), |t, v| t.softplus(v[0])),
        ("exp", |u| one(u, -3.0, 3.0), |t, v| t.exp(v[0])),
        ("log", |u| one(u, 0.1, 5.0), |t, v| t.log(v[0])),
        ("sqrt", |u| one(u, 0.1, 5.0), |t, v| t.sqrt(v[0])),
        ("square", |u| one(u, -2.0, 2.0), |t, v| t.square(v[0])),
        ("sum", |u| one(u, -2.0, 2.0), |t, v| t.sum(v[0])),
        ("mean", |u| one(u, -2.0, 2.0), |t, v| t.mean(v[0])),
        ("sum_cols", |u| one(u, -2.0, 2.0), |t, v| t.sum_cols(v[0])),
        ("log_sum_exp", |u| one(u, -4.0, 4.0), |t, v| t.log_sum_exp(v[0])),
        ("log_sum_exp_rows", |u| one(u, -4.0, 4.0), |t, v| t.log_sum_exp_rows(v[0], None)),
        (
            "log_sum_exp_rows_masked",
            |u| {
                let (r, c) = (dim(u, 1, 5), dim(u, 2, 6));
                vec![uni(u, r, c, -4.0, 4.0)]
            },
            |t, v| {
                let (r, c) = t.value(v[0]).dims2()?;
                let mask = (0..r * c).map(|k| k % c == 0 || (k / c + k) % 2 == 0).collect();
                t.log_sum_exp_rows(v[0], Some(Rc::new(mask)))
            },
        ),
        ("squared_norm", |u| one(u, -2.0, 2.0), |t, v| t.squared_norm(v[0])),
        ("dot", two, |t, v| t.dot(v[0], v[1])),
        ("row_dot", two, |t, v| t.row_dot(v[0], v[1])),
        (
            "sphere_normalize",
            |u| {
                let (r, c) = (dim(u, 1, 5), dim(u, 2, 6));
                vec![signed(u, r, c)]
            },
            |t, v| t.sphere_normalize(v[0]),
        ),
        (
            "concat_cols",
            |u| {
                let (r, c1, c2) = (dim(u, 1, 5), dim(u, 1, 4), dim(u, 1, 4));
                vec![uni(u, r, c1, -2.0, 2.0), uni(u, r, c2, -2.0, 2.0)]
            },
            |t, v| t.concat_cols(&[v[0], v[1]]),
        ),
        (
            "slice_rows",
            |u| {
                let c = dim(u, 1, 5);
                vec![uni(u, 4, c, -2.0, 2.0)]
            },
            |t, v| t.slice_rows(v[0], 1, 3),
        ),
        (
            "gather_rows",
            |u| {
                let c = dim(u, 1, 5);
                vec![uni(u, 4, c, -2.0, 2.0)]
            },
            |t, v| t.gather_rows(v[0], Rc::new(vec![3, 0, 3, 1])),
        ),
        (
            "minimum",
            |u| {
                let (r, c) = (dim(u, 1, 5), dim(u, 1, 5));
                let a = uni(u, r, c, -2.0, 2.0);
                let d = signed(u, r, c);
                let b = a.zip_map(&d, |x, y| x + y).expect("shape");
                vec![a, b]
            },
            |t, v| t.minimum(v[0], v[1]),
        ),
    ]
}

/// Value and analytic gradients of `⟨build(inputs), w⟩`.
fn contracted(build: Build, inputs: &[Tensor], w: Option<&Tensor>) -> Result<(f64, Vec<Tensor>, (usize, usize))> {
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let y = build(&mut tape, &vars)?;
    let shape = tape.value(y).dims2()?;
    let Some(w) = w else {
        return Ok((0.0, Vec::new(), shape));
    };
    let wv = tape.constant(w.clone())?;
    let s = tape.dot(y, wv)?;
    let g = tape.backward(s)?;
    let grads = vars.iter().zip(inputs).map(|(&v, t)| g.get_or_zeros(v, t)).collect();
    Ok((tape.value(s).item()?, grads, shape))
}

fn sweep<R: Rng + ?Sized>(name: &'static str, gen: Gen, build: Build, instances: usize, rng: &mut R) -> Result<CheckOutcome> {
    let mut u = |lo: f64, hi: f64| rng.gen_range(lo..hi);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inputs = gen(&mut u);
        let (_, _, (r, c)) = contracted(build, &inputs, None)?;
        let w = uni(&mut u, r, c, -1.0, 1.0);
        let (_, analytic, _) = contracted(build, &inputs, Some(&w))?;
        let numeric = numeric_grad(
            |x| contracted(build, x, Some(&w)).map_or(f64::NAN, |r| r.0),
            &inputs,
            FD_H,
        );
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    Ok(CheckOutcome { name, instances, worst })
}

/// Checks every primitive, plus a small tanh network, on `instances`
/// random inputs each.
pub fn check_primitives<R: Rng + ?Sized>(instances: usize, rng: &mut R) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for (name, gen, build) in cases() {
        out.push(sweep(name, gen, build, instances, rng)?);
    }
    out.push(check_mlp(instances, rng)?);
    Ok(out)
}

fn check_mlp<R: Rng + ?Sized>(instances: usize, rng: &mut R) -> Result<CheckOutcome> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let net = Mlp::new(&[3, 6, 6, 2], Activation::Tanh, Activation::Identity, rng);
        let x = filled(5, 3, || rng.gen_range(-1.0..1.0));
        let eval = |params: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
            let mut n = net.clone();
            n.params_mut().tensors_mut().clone_from_slice(params);
            let mut tape = Tape::new();
            let b = n.bind(&mut tape, true)?;
            let xv = tape.constant(x.clone())?;
            let y = n.forward(&mut tape, &b, xv)?;
            let y = tape.square(y)?;
            let s = tape.mean(y)?;
            let g = tape.backward(s)?;
            Ok((tape.value(s).item()?, n.params().collect_grads(&g, &b)))
        };
        let p = net.params().tensors().to_vec();
        let (_, analytic) = eval(&p)?;
        let numeric = numeric_grad(|q| eval(q).map_or(f64::NAN, |r| r.0), &p, FD_H);
        worst = worst.max(max_relative_error(&analytic, &numeric, REL_FLOOR));
    }
    Ok(CheckOutcome {
        name: "mlp",
        instances,
        worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_gradient() {
        let x = Tensor::row(&[1.0, -2.0]);
        let g = numeric_grad(|v| v[0].data().iter().map(|t| t * t * t).sum(), &[x], 1e-5);
        let exact = Tensor::row(&[3.0, 12.0]);
        assert!(max_relative_error(&[exact.clone()], &g, 1.0) < 1e-9);
        let g5 = numeric_grad5(|v| v[0].data().iter().map(|t| t * t * t).sum(), &[Tensor::row(&[1.0, -2.0])], 1e-2);
        assert!(max_relative_error(&[exact], &g5, 1.0) < 1e-9);
    }
}
