//! Central finite differences, the oracle every backward rule is held to.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, Tensor, TensorError};

/// Compares the analytic gradient of `f` at `x` against central finite
/// differences, coordinate by coordinate. Returns the max over elements of
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    if !(eps > 0.0) {
        return Err(TensorError::InvalidValue {
            op: "finite_difference_check",
            detail: format!("eps = {} must be positive", eps),
        });
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFiniteInput {
            op: "finite_difference_check",
        });
    }
    let leaf = x.as_param_leaf();
    let loss = f(&leaf)?;
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
    }
    let analytic = loss.backward()?.get_or_zero(&leaf);
    let base = x.data();
    let mut max_rel = 0.0f64;
    for i in 0..base.len() {
        let eval = |delta: f64| -> Result<f64> {
            let mut probe = base.to_vec();
            probe[i] += delta;
            let out = f(&Tensor::param(probe, x.shape())?)?;
            let v = out.scalar();
            if !v.is_finite() {
                return Err(TensorError::NonFiniteInput {
                    op: "finite_difference_check",
                });
            }
            Ok(v)
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}

fn rand_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Tensor::from_vec(data, shape).expect("shape/data consistent")
}

/// Loss head used by the sweep: a fixed random weighting keeps every output
/// coordinate influential so no gradient vanishes by construction.
fn weighted(out: Tensor, w: &Tensor) -> Result<Tensor> {
    Ok(out.mul(w)?.sum_all())
}

/// Runs the gradient check for every differentiable primitive on seeded
/// random inputs. Returns (primitive label, max relative error) pairs.
/// Gradient scaling and detach are intentional non-identities and have their
/// own contract tests instead.
pub fn primitive_grad_errors(seed: u64, eps: f64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |label: &'static str,
                     x: &Tensor,
                     f: &dyn Fn(&Tensor) -> Result<Tensor>|
     -> Result<()> {
        out.push((label, finite_difference_check(f, x, eps)?));
        Ok(())
    };

    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[4, 2]);
        let w = rand_tensor(&mut rng, &[3, 2]);
        check("matmul (lhs)", &a, &|x| weighted(x.matmul(&b)?, &w))?;
        check("matmul (rhs)", &b, &|x| weighted(a.matmul(x)?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        check("add", &a, &|x| weighted(x.add(&b)?, &w))?;
        check("mul", &a, &|x| weighted(x.mul(&b)?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let row = rand_tensor(&mut rng, &[4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        check("add_row (input)", &a, &|x| weighted(x.add_row(&row)?, &w))?;
        check("add_row (row)", &row, &|x| weighted(a.add_row(x)?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        check("scale", &a, &|x| weighted(x.scale(1.7), &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 5]);
        let w = rand_tensor(&mut rng, &[3, 5]);
        check("softmax", &a, &|x| weighted(x.softmax(), &w))?;
        check("log_softmax", &a, &|x| weighted(x.log_softmax(), &w))?;
    }
    {
        let x0 = rand_tensor(&mut rng, &[3, 8]);
        let gamma = rand_tensor(&mut rng, &[8]);
        let beta = rand_tensor(&mut rng, &[8]);
        let w = rand_tensor(&mut rng, &[3, 8]);
        check("layer_norm (input)", &x0, &|x| {
            weighted(x.layer_norm(&gamma, &beta, 1e-5)?, &w)
        })?;
        check("layer_norm (gamma)", &gamma, &|x| {
            weighted(x0.layer_norm(x, &beta, 1e-5)?, &w)
        })?;
        check("layer_norm (beta)", &beta, &|x| {
            weighted(x0.layer_norm(&gamma, x, 1e-5)?, &w)
        })?;
    }
    {
        let x0 = rand_tensor(&mut rng, &[7, 3]);
        let k = rand_tensor(&mut rng, &[3, 3]);
        let w = rand_tensor(&mut rng, &[7, 3]);
        check("conv1d_depthwise (input)", &x0, &|x| {
            weighted(x.conv1d_depthwise(&k)?, &w)
        })?;
        check("conv1d_depthwise (kernel)", &k, &|x| {
            weighted(x0.conv1d_depthwise(x)?, &w)
        })?;
    }
    {
        let x0 = rand_tensor(&mut rng, &[2, 5, 4]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let w = rand_tensor(&mut rng, &[3, 3, 2]);
        check("conv2d (input)", &x0, &|x| weighted(x.conv2d(&k, 2, 1)?, &w))?;
        check("conv2d (kernel)", &k, &|x| weighted(x0.conv2d(x, 2, 1)?, &w))?;
    }
    {
        let table = rand_tensor(&mut rng, &[5, 3]);
        let ids = [0usize, 2, 2, 4];
        let w = rand_tensor(&mut rng, &[4, 3]);
        check("embedding", &table, &|x| weighted(x.embedding(&ids)?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 2]);
        let w = rand_tensor(&mut rng, &[2, 5]);
        check("concat_last (lhs)", &a, &|x| weighted(x.concat_last(&b)?, &w))?;
        check("concat_last (rhs)", &b, &|x| weighted(a.concat_last(x)?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 5]);
        let w = rand_tensor(&mut rng, &[3, 3]);
        check("slice_last", &a, &|x| weighted(x.slice_last(1, 3)?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let w = rand_tensor(&mut rng, &[4, 2, 3]);
        check("permute", &a, &|x| weighted(x.permute(&[2, 0, 1])?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        check("transpose", &a, &|x| weighted(x.t()?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[2, 6]);
        check("reshape", &a, &|x| weighted(x.reshape(&[2, 6])?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[2, 4]);
        let mask = Tensor::from_vec(
            vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
            &[2, 4],
        )?;
        let w = rand_tensor(&mut rng, &[2, 4]);
        // Composed with softmax, its natural consumer: the raw fill value is
        // too large for a well-conditioned finite difference on its own.
        check("masked_fill", &a, &|x| {
            weighted(x.masked_fill(&mask)?.softmax(), &w)
        })?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[3, 4]);
        check("swish", &a, &|x| weighted(x.swish(), &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 6]);
        let w = rand_tensor(&mut rng, &[3, 3]);
        check("glu", &a, &|x| weighted(x.glu()?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        let keep = 1.0 / 0.7;
        let mask_vals: Vec<f64> = (0..12)
            .map(|_| if rng.gen::<f64>() < 0.3 { 0.0 } else { keep })
            .collect();
        let mask = Tensor::from_vec(mask_vals, &[3, 4])?;
        let w = rand_tensor(&mut rng, &[3, 4]);
        check("dropout", &a, &|x| weighted(x.dropout_with_mask(&mask)?, &w))?;
    }
    {
        let a = rand_tensor(&mut rng, &[3, 4]);
        check("sum", &a, &|x| Ok(x.sum_all()))?;
        check("mean", &a, &|x| Ok(x.mean_all()))?;
    }
    Ok(out)
}
