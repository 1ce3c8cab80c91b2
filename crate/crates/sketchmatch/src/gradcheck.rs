//! Central finite-difference verification of tape gradients.
//!
//! The checker evaluates a scalar function twice per coordinate at `x ± eps`
//! and compares the central difference against the tape's analytic gradient.
//! It only ever uses forward evaluations, so it stays independent of the
//! backward implementation it is judging.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relative error of an analytic/numeric gradient pair:
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// Checks the gradient of a scalar-valued function of one tensor.
///
/// Returns the maximum relative error over all coordinates of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let out = f(&mut tape, xv)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract(format!(
                "grad_check requires a scalar function, got output shape {:?}",
                tape.value(out).shape()
            )));
        }
        let grads = tape.backward(out)?;
        grads.get(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()])
    };

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.leaf(probe.clone());
        let out = f(&mut tape, xv)?;
        tape.value(out).item()
    };

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    Ok(worst)
}

/// Worst coordinate found while checking one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Report of a parameter-space gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passed(&self, threshold: f64) -> bool {
        self.max_rel_err < threshold
    }
}

/// Checks gradients of a scalar function with respect to every trainable
/// tensor in `params`.
///
/// Tensors larger than `max_coords_per_tensor` are checked on a seeded random
/// subset of coordinates; the full network check would otherwise need two
/// forward passes per weight.
pub fn grad_check_params<F>(
    f: F,
    params: &ParamSet,
    eps: f64,
    max_coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    grad_check_params_inner(f, params, eps, max_coords_per_tensor, seed, false)
}

/// Same as [`grad_check_params`] but with the analytic gradient deliberately
/// corrupted. A healthy checker must fail this; it exists as a negative
/// control for the `gradcheck` command.
pub fn grad_check_params_corrupted<F>(
    f: F,
    params: &ParamSet,
    eps: f64,
    max_coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    grad_check_params_inner(f, params, eps, max_coords_per_tensor, seed, true)
}

fn grad_check_params_inner<F>(
    f: F,
    params: &ParamSet,
    eps: f64,
    max_coords_per_tensor: usize,
    seed: u64,
    corrupt: bool,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut work = params.clone();
    work.clear_grads();

    // Analytic gradients for every trainable tensor in one backward sweep.
    {
        let mut tape = Tape::new();
        let out = f(&mut tape, &work)?;
        if tape.value(out).numel() != 1 {
            return Err(Error::Contract(
                "grad_check_params requires a scalar function".into(),
            ));
        }
        let grads = tape.backward(out)?;
        tape.apply_grads(&grads, &mut work)?;
    }

    let eval = |probe: &ParamSet| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, probe)?;
        tape.value(out).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_param = Vec::new();
    let mut max_err = 0.0f64;
    let names: Vec<String> = work.names().to_vec();
    for name in &names {
        if !work.get(name)?.requires_grad() {
            continue;
        }
        let numel = work.get(name)?.numel();
        let analytic: Vec<f64> = match work.get(name)?.grad() {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        };
        let coords: Vec<usize> = if numel <= max_coords_per_tensor {
            (0..numel).collect()
        } else {
            let mut all: Vec<usize> = (0..numel).collect();
            all.shuffle(&mut rng);
            all.truncate(max_coords_per_tensor);
            all.sort_unstable();
            all
        };

        let mut check = ParamCheck {
            name: name.clone(),
            coords_checked: coords.len(),
            worst_coord: 0,
            analytic: 0.0,
            numeric: 0.0,
            rel_err: 0.0,
        };
        for &i in &coords {
            let base = work.get(name)?.data()[i];
            let mut probe = work.clone();
            probe.get_mut(name)?.data_mut()[i] = base + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = base - eps;
            let minus = eval(&probe)?;
            let numeric = (plus - minus) / (2.0 * eps);
            let mut a = analytic[i];
            if corrupt {
                a += 1.0 + a.abs();
            }
            let e = rel_err(a, numeric);
            if e >= check.rel_err {
                check.rel_err = e;
                check.worst_coord = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        max_err = max_err.max(check.rel_err);
        per_param.push(check);
    }
    Ok(GradCheckReport { per_param, max_rel_err: max_err })
}

/// Result of checking one operation in the op-level suite.
#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Gradient-checks every differentiable tape operation on several random
/// shapes. Returns the worst relative error per op.
pub fn op_gradient_suite(seed: u64) -> Result<Vec<OpCheck>> {
    let eps = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: &[usize]| -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let mut out = Vec::new();
    let mut record = |name: &'static str, errs: Vec<f64>| {
        out.push(OpCheck {
            name,
            max_rel_err: errs.into_iter().fold(0.0, f64::max),
        });
    };

    // Element-wise ops on three shapes each.
    let shapes: [&[usize]; 3] = [&[3], &[2, 4], &[2, 1, 3, 3]];

    let mut errs = Vec::new();
    for s in shapes {
        let x = rand_t(s);
        let other = rand_t(s);
        errs.push(grad_check(
            |t, v| {
                let o = t.constant(other.clone());
                let sum = t.add(v, o)?;
                Ok(t.sum_all(sum))
            },
            &x,
            eps,
        )?);
    }
    record("add", errs);

    let mut errs = Vec::new();
    for s in shapes {
        let x = rand_t(s);
        let other = rand_t(s);
        errs.push(grad_check(
            |t, v| {
                let o = t.constant(other.clone());
                let d = t.sub(v, o)?;
                let sq = t.mul(d, d)?;
                Ok(t.sum_all(sq))
            },
            &x,
            eps,
        )?);
    }
    record("sub_mul", errs);

    let mut errs = Vec::new();
    for s in shapes {
        let x = rand_t(s);
        errs.push(grad_check(
            |t, v| {
                let y = t.scale(v, -1.7);
                let y = t.add_scalar(y, 0.3);
                Ok(t.mean_all(y))
            },
            &x,
            eps,
        )?);
    }
    record("scale_add_scalar_mean", errs);

    let mut errs = Vec::new();
    for s in shapes {
        // Keep values away from the |x| kink.
        let mut x = rand_t(s);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        errs.push(grad_check(
            |t, v| {
                let a = t.abs(v);
                Ok(t.sum_all(a))
            },
            &x,
            eps,
        )?);
    }
    record("abs", errs);

    let mut errs = Vec::new();
    for s in shapes {
        let x = rand_t(s);
        errs.push(grad_check(
            |t, v| {
                let y = t.sigmoid(v);
                Ok(t.sum_all(y))
            },
            &x,
            eps,
        )?);
    }
    record("sigmoid", errs);

    let mut errs = Vec::new();
    for s in shapes {
        let x = rand_t(s);
        errs.push(grad_check(
            |t, v| {
                let y = t.tanh_act(v);
                Ok(t.sum_all(y))
            },
            &x,
            eps,
        )?);
    }
    record("tanh", errs);

    let mut errs = Vec::new();
    for s in shapes {
        let mut x = rand_t(s);
        for v in x.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        errs.push(grad_check(
            |t, v| {
                let y = t.leaky_relu(v, 0.2);
                Ok(t.sum_all(y))
            },
            &x,
            eps,
        )?);
    }
    record("leaky_relu", errs);

    // linear: gradients for x, w and b on random 3x4 -> 4x2.
    let mut errs = Vec::new();
    {
        let x = rand_t(&[3, 4]);
        let w = rand_t(&[4, 2]);
        let b = rand_t(&[2]);
        errs.push(grad_check(
            |t, v| {
                let wv = t.constant(w.clone());
                let bv = t.constant(b.clone());
                let y = t.matmul(v, wv)?;
                let y = t.add_row_bias(y, bv)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &x,
            eps,
        )?);
        errs.push(grad_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let bv = t.constant(b.clone());
                let y = t.matmul(xv, v)?;
                let y = t.add_row_bias(y, bv)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &w,
            eps,
        )?);
        errs.push(grad_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let wv = t.constant(w.clone());
                let y = t.matmul(xv, wv)?;
                let y = t.add_row_bias(y, v)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &b,
            eps,
        )?);
    }
    record("linear", errs);

    // conv2d on three geometries, input and kernel gradients.
    let mut errs = Vec::new();
    for &(cin, cout, h, k, stride, pad) in
        &[(3usize, 4usize, 6usize, 3usize, 2usize, 1usize), (1, 1, 5, 2, 1, 0), (2, 3, 4, 3, 1, 1)]
    {
        let x = rand_t(&[2, cin, h, h]);
        let kt = rand_t(&[cout, cin, k, k]);
        errs.push(grad_check(
            |t, v| {
                let kv = t.constant(kt.clone());
                let y = t.conv2d(v, kv, stride, pad)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &x,
            eps,
        )?);
        errs.push(grad_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let y = t.conv2d(xv, v, stride, pad)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &kt,
            eps,
        )?);
    }
    record("conv2d", errs);

    // conv2d_transpose, same treatment.
    let mut errs = Vec::new();
    for &(cin, cout, h, k, stride, pad) in
        &[(4usize, 3usize, 3usize, 4usize, 2usize, 1usize), (1, 1, 4, 2, 2, 0), (3, 2, 4, 3, 1, 1)]
    {
        let x = rand_t(&[2, cin, h, h]);
        let kt = rand_t(&[cin, cout, k, k]);
        errs.push(grad_check(
            |t, v| {
                let kv = t.constant(kt.clone());
                let y = t.conv2d_transpose(v, kv, stride, pad)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &x,
            eps,
        )?);
        errs.push(grad_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let y = t.conv2d_transpose(xv, v, stride, pad)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &kt,
            eps,
        )?);
    }
    record("conv2d_transpose", errs);

    let mut errs = Vec::new();
    {
        let x = rand_t(&[2, 3, 2, 2]);
        let b = rand_t(&[3]);
        errs.push(grad_check(
            |t, v| {
                let bv = t.constant(b.clone());
                let y = t.add_channel_bias(v, bv)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &x,
            eps,
        )?);
        errs.push(grad_check(
            |t, v| {
                let xv = t.constant(x.clone());
                let y = t.add_channel_bias(xv, v)?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &b,
            eps,
        )?);
    }
    record("add_channel_bias", errs);

    let mut errs = Vec::new();
    for rows in [1usize, 2, 4] {
        let mut x = rand_t(&[rows, 5]);
        // Keep rows clearly away from zero norm.
        for v in x.data_mut() {
            *v += if *v >= 0.0 { 0.5 } else { -0.5 };
        }
        let probe = rand_t(&[rows, 5]);
        errs.push(grad_check(
            |t, v| {
                let y = t.l2_normalize_rows(v)?;
                let p = t.constant(probe.clone());
                let d = t.mul(y, p)?;
                Ok(t.sum_all(d))
            },
            &x,
            eps,
        )?);
    }
    record("l2_normalize_rows", errs);

    let mut errs = Vec::new();
    {
        let a = rand_t(&[2, 2, 3, 3]);
        let b = rand_t(&[2, 1, 3, 3]);
        errs.push(grad_check(
            |t, v| {
                let bv = t.constant(b.clone());
                let y = t.concat_channels(v, bv)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean_all(sq))
            },
            &a,
            eps,
        )?);
        errs.push(grad_check(
            |t, v| {
                let av = t.constant(a.clone());
                let y = t.concat_channels(av, v)?;
                let sq = t.mul(y, y)?;
                Ok(t.mean_all(sq))
            },
            &b,
            eps,
        )?);
    }
    record("concat_channels", errs);

    let mut errs = Vec::new();
    {
        let x = rand_t(&[2, 2, 2, 2]);
        errs.push(grad_check(
            |t, v| {
                let y = t.reshape(v, &[2, 8])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum_all(sq))
            },
            &x,
            eps,
        )?);
    }
    record("reshape", errs);

    // bce through a sigmoid, the configuration the discriminator uses.
    let mut errs = Vec::new();
    for s in shapes {
        let x = rand_t(s);
        let numel: usize = s.iter().product();
        let target =
            Tensor::from_vec(s, (0..numel).map(|i| (i % 2) as f64).collect()).unwrap();
        errs.push(grad_check(
            |t, v| {
                let p = t.sigmoid(v);
                t.bce_mean(p, &target)
            },
            &x,
            eps,
        )?);
    }
    record("bce_mean", errs);

    // Triplet through row normalization so probes stay on the unit sphere.
    let mut errs = Vec::new();
    for rows in [1usize, 3, 5] {
        let mut mk = |(): ()| {
            let mut t = rand_t(&[rows, 4]);
            for v in t.data_mut() {
                *v += if *v >= 0.0 { 0.5 } else { -0.5 };
            }
            t
        };
        let a = mk(());
        let p = mk(());
        let n = mk(());
        errs.push(grad_check(
            |t, v| {
                let an = t.l2_normalize_rows(v)?;
                let pv = t.constant(p.clone());
                let pn = t.l2_normalize_rows(pv)?;
                let nv = t.constant(n.clone());
                let nn = t.l2_normalize_rows(nv)?;
                t.triplet_margin(an, pn, nn, 0.5)
            },
            &a,
            eps,
        )?);
    }
    record("triplet_margin", errs);

    let mut errs = Vec::new();
    {
        let x = rand_t(&[3, 4]);
        let probe = rand_t(&[3, 4]);
        errs.push(grad_check(
            |t, v| {
                let y = t.softmax_rows(v)?;
                let p = t.constant(probe.clone());
                let d = t.mul(y, p)?;
                Ok(t.sum_all(d))
            },
            &x,
            eps,
        )?);
    }
    record("softmax_rows", errs);

    let mut errs = Vec::new();
    {
        let x = rand_t(&[4, 3]);
        let labels = [0usize, 2, 1, 1];
        errs.push(grad_check(
            |t, v| t.softmax_cross_entropy(v, &labels),
            &x,
            eps,
        )?);
    }
    record("softmax_cross_entropy", errs);

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_vec(&[4], vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let err = grad_check(|t, v| Ok(t.sum_all(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn sum_of_squares_matches_analytic() {
        // f = sum(x^2), grad = 2x = [2,4,6].
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum_all(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn non_scalar_function_is_rejected() {
        let x = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let res = grad_check(|t, v| Ok(t.scale(v, 2.0)), &x, 1e-5);
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn every_op_passes_at_1e4() {
        for check in op_gradient_suite(11).unwrap() {
            assert!(
                check.max_rel_err < 1e-4,
                "{} failed gradient check: {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn corrupted_gradients_are_detected() {
        let mut params = ParamSet::new();
        params
            .insert("w", Tensor::from_vec(&[3], vec![0.5, -0.25, 1.0]).unwrap())
            .unwrap();
        let f = |t: &mut Tape, p: &ParamSet| {
            let w = t.param(p, "w", true)?;
            let sq = t.mul(w, w)?;
            Ok(t.sum_all(sq))
        };
        let ok = grad_check_params(f, &params, 1e-5, 1000, 3).unwrap();
        assert!(ok.passed(1e-4));
        let bad = grad_check_params_corrupted(f, &params, 1e-5, 1000, 3).unwrap();
        assert!(!bad.passed(1e-4), "negative control must fail");
    }
}
