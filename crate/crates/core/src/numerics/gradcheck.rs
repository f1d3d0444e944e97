use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the tape's analytic gradient of `f` at `x` against central
/// differences, in 64-bit arithmetic.
///
/// Returns `max_i |analytic_i - central_i| / max(|analytic_i|, |central_i|, 1e-8)`.
/// `f` receives a fresh tape and the leaf holding `x`, and must return a
/// scalar node.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let eval = |point: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let leaf = tape.leaf(point);
        let out = f(&mut tape, leaf)?;
        let v = scalar_of(&tape, out)?;
        if !v.is_finite() {
            return Err(Error::Evaluation(format!("f(x) is not finite: {v}")));
        }
        Ok(v)
    };

    let mut tape = Tape::<f64>::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let f0 = scalar_of(&tape, out)?;
    if !f0.is_finite() {
        return Err(Error::Evaluation(format!("f(x) is not finite: {f0}")));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(leaf)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let central = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(central.abs()).max(1e-8);
        worst = worst.max((a - central).abs() / denom);
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape<f64>, v: Var) -> Result<f64> {
    let val = tape.value(v);
    if val.numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got shape {:?}",
            val.shape()
        )));
    }
    Ok(val.data()[0])
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// One finite-difference check per differentiable primitive, applied to a
/// random probe so every output coordinate contributes. Returns the worst
/// relative error per primitive.
pub fn primitive_gradient_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    type Build = fn(&mut Tape<f64>, Var, u64) -> Result<Var>;
    let cases: Vec<(&'static str, Vec<usize>, Build)> = vec![
        ("matmul", vec![3, 4], |t, x, s| {
            let w = t.constant(random(&[4, 2], s));
            t.matmul(x, w)
        }),
        ("matmul_rhs", vec![4, 2], |t, x, s| {
            let a = t.constant(random(&[3, 4], s));
            t.matmul(a, x)
        }),
        ("transpose", vec![3, 4], |t, x, _| t.transpose(x)),
        ("add", vec![2, 3], |t, x, s| {
            let b = t.constant(random(&[2, 3], s));
            t.add(x, b)
        }),
        ("sub", vec![2, 3], |t, x, s| {
            let b = t.constant(random(&[2, 3], s));
            t.sub(b, x)
        }),
        ("mul", vec![2, 3], |t, x, s| {
            let b = t.constant(random(&[2, 3], s));
            t.mul(x, b)
        }),
        ("add_broadcast_row", vec![1, 3], |t, x, s| {
            let a = t.constant(random(&[4, 3], s));
            t.add_broadcast(a, x)
        }),
        ("add_broadcast_col", vec![4, 1], |t, x, s| {
            let a = t.constant(random(&[4, 3], s));
            t.add_broadcast(a, x)
        }),
        ("scale", vec![2, 3], |t, x, _| Ok(t.scale(x, -1.7))),
        ("relu", vec![3, 5], |t, x, _| Ok(t.relu(x))),
        ("gelu", vec![3, 5], |t, x, _| Ok(t.gelu(x))),
        ("log_sigmoid", vec![3, 5], |t, x, _| {
            let s = t.scale(x, 3.0);
            Ok(t.log_sigmoid(s))
        }),
        ("softmax_rows", vec![3, 5], |t, x, _| t.softmax_rows(x)),
        ("masked_log_softmax_rows", vec![3, 3], |t, x, _| {
            let mask = (0..9).map(|i| i / 3 != i % 3).collect();
            t.masked_log_softmax_rows(x, Some(mask))
        }),
        ("layer_norm", vec![3, 6], |t, x, s| {
            let g = t.constant(random(&[1, 6], s));
            let b = t.constant(random(&[1, 6], s + 1));
            t.layer_norm(x, g, b)
        }),
        ("layer_norm_gamma", vec![1, 6], |t, x, s| {
            let a = t.constant(random(&[3, 6], s));
            let b = t.constant(random(&[1, 6], s + 1));
            t.layer_norm(a, x, b)
        }),
        ("conv1d_input", vec![2, 9], |t, x, s| {
            let w = t.constant(random(&[3, 2, 3], s));
            t.conv1d_causal_dilated(x, w, 2)
        }),
        ("conv1d_weight", vec![3, 2, 3], |t, x, s| {
            let a = t.constant(random(&[2, 9], s));
            t.conv1d_causal_dilated(a, x, 2)
        }),
        ("max_cols", vec![3, 6], |t, x, _| t.max_cols(x)),
        ("mean_rows", vec![4, 3], |t, x, _| t.mean_rows(x)),
        ("slice_cols", vec![3, 6], |t, x, _| t.slice_cols(x, 2, 3)),
        ("concat_cols", vec![3, 2], |t, x, s| {
            let b = t.constant(random(&[3, 4], s));
            t.concat_cols(&[b, x, x])
        }),
        ("concat_rows", vec![2, 3], |t, x, s| {
            let b = t.constant(random(&[1, 3], s));
            t.concat_rows(&[x, b, x])
        }),
        ("gather_rows", vec![4, 3], |t, x, _| {
            t.gather_rows(x, &[3, 0, 3, 1])
        }),
        ("reshape", vec![2, 6], |t, x, _| t.reshape(x, &[3, 4])),
        ("l2_normalize_rows", vec![3, 4], |t, x, _| {
            t.l2_normalize_rows(x)
        }),
    ];

    cases
        .into_iter()
        .map(|(name, shape, build)| {
            let x = random(
                &shape,
                seed.wrapping_mul(7919).wrapping_add(shape.len() as u64),
            );
            finite_diff_check(
                |t, xv| {
                    let y = build(t, xv, seed + 1)?;
                    let probe = t.constant(random(t.shape(y), seed + 99));
                    let p = t.mul(y, probe)?;
                    Ok(t.sum(p))
                },
                &x,
                1e-5,
            )
            .map(|err| (name, err))
        })
        .collect()
}
