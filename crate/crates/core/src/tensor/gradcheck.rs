//! Central-difference gradient checking.

use super::{Graph, Tensor, TensorError, Var};
use crate::scalar::Scalar;

/// Compares reverse-mode gradients of `f` with central differences for every
/// element of every input, returning the largest
/// `|analytic − numeric| / max(1, |numeric|)`.
///
/// `f` receives a fresh graph and one leaf per input and must return a
/// single-element root. It is called `1 + 2·Σnumel` times.
pub fn grad_check_many<T, E, F>(mut f: F, inputs: &[Tensor<T>], eps: T) -> Result<T, E>
where
    T: Scalar,
    E: From<TensorError>,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Vec<T>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); t.numel()])
        })
        .collect();

    let mut eval = |perturbed: &[Tensor<T>]| -> Result<T, E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.value(root).item())
    };

    let two = T::one() + T::one();
    let mut worst = T::zero();
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for ei in 0..input.numel() {
            let orig = input.data()[ei];
            work[ti].data_mut()[ei] = orig + eps;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = orig - eps;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (two * eps);
            let err = (analytic[ti][ei] - numeric).abs() / numeric.abs().max(T::one());
            if err > worst || err.is_nan() {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<T, E, F>(mut f: F, x: &Tensor<T>, eps: T) -> Result<T, E>
where
    T: Scalar,
    E: From<TensorError>,
    F: FnMut(&mut Graph<T>, Var) -> Result<Var, E>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), eps)
}

/// Gradient check of every graph op on fixed random inputs. Each op's output
/// is reduced to a scalar by a weighted sum with fixed random weights so no
/// output element is left unchecked. Returns `(op, max relative error)`.
pub fn op_suite(seed: u64, eps: f64) -> Vec<(&'static str, f64)> {
    use super::{BinaryFn, LossKind, ReduceFn, UnaryFn};
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |shape: &[usize], lo: f64, hi: f64| -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("suite shape")
    };
    // Values kept away from the relu kink and from l1 ties.
    let away = |t: Tensor<f64>| {
        let data = t
            .data()
            .iter()
            .map(|&v| if v.abs() < 0.1 { v + 0.3 } else { v })
            .collect();
        Tensor::new(t.shape().to_vec(), data).expect("suite shape")
    };
    let weights = rand(&[1, 64], -1.0, 1.0);
    let project = move |g: &mut Graph<f64>, out: Var| -> Result<Var, TensorError> {
        let n = g.value(out).numel();
        let shape = g.value(out).shape().to_vec();
        let w = Tensor::new(shape, weights.data()[..n].to_vec())?;
        let w = g.constant(w);
        let p = g.mul(out, w)?;
        Ok(g.sum(p))
    };

    let m23 = rand(&[2, 3], -2.0, 2.0);
    let m23b = rand(&[2, 3], -2.0, 2.0);
    let m34 = rand(&[3, 4], -2.0, 2.0);
    let c2 = rand(&[2, 1], -2.0, 2.0);
    let r3 = rand(&[1, 3], -2.0, 2.0);
    let s1 = rand(&[1, 1], -2.0, 2.0);
    let logits = rand(&[4, 3], -3.0, 3.0);
    let pred = rand(&[2, 3], -2.0, 2.0);
    let target = away(rand(&[2, 3], -2.0, 2.0));

    let mut out = Vec::new();
    let mut run =
        |name: &'static str,
         inputs: Vec<Tensor<f64>>,
         f: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>| {
            let err = grad_check_many(
                |g, v| {
                    let y = f(g, v)?;
                    project(g, y)
                },
                &inputs,
                eps,
            )
            .expect("suite op");
            out.push((name, err));
        };

    run("tanh", vec![m23.clone()], &|g, v| {
        Ok(g.unary(v[0], UnaryFn::Tanh))
    });
    run("sigmoid", vec![m23.clone()], &|g, v| {
        Ok(g.unary(v[0], UnaryFn::Sigmoid))
    });
    run("relu", vec![away(m23.clone())], &|g, v| {
        Ok(g.unary(v[0], UnaryFn::Relu))
    });
    run("neg", vec![m23.clone()], &|g, v| {
        Ok(g.unary(v[0], UnaryFn::Neg))
    });
    for (name, f) in [
        ("add", BinaryFn::Add),
        ("sub", BinaryFn::Sub),
        ("mul", BinaryFn::Mul),
    ] {
        run(name, vec![m23.clone(), m23b.clone()], &move |g, v| {
            g.binary(v[0], v[1], f)
        });
    }
    run(
        "mul (column broadcast)",
        vec![m23.clone(), c2.clone()],
        &|g, v| g.mul(v[0], v[1]),
    );
    run(
        "add (row broadcast)",
        vec![m23.clone(), r3.clone()],
        &|g, v| g.add(v[0], v[1]),
    );
    run(
        "sub (scalar broadcast)",
        vec![m23.clone(), s1.clone()],
        &|g, v| g.sub(v[0], v[1]),
    );
    run("matmul", vec![m23.clone(), m34.clone()], &|g, v| {
        g.matmul(v[0], v[1])
    });
    run("transpose", vec![m23.clone()], &|g, v| g.transpose(v[0]));
    run("softmax axis 0", vec![m23.clone()], &|g, v| {
        g.softmax(v[0], 0)
    });
    run("softmax axis 1", vec![m23.clone()], &|g, v| {
        g.softmax(v[0], 1)
    });
    run("concat axis 0", vec![m23.clone(), r3.clone()], &|g, v| {
        g.concat(&[v[0], v[1]], 0)
    });
    run("concat axis 1", vec![m23.clone(), c2.clone()], &|g, v| {
        g.concat(&[v[0], v[1]], 1)
    });
    run("reduce sum axis 1", vec![m23.clone()], &|g, v| {
        g.reduce(v[0], ReduceFn::Sum, Some(1))
    });
    run("reduce mean axis 0", vec![m23.clone()], &|g, v| {
        g.reduce(v[0], ReduceFn::Mean, Some(0))
    });
    run("reduce mean all", vec![m23.clone()], &|g, v| {
        g.reduce(v[0], ReduceFn::Mean, None)
    });
    run("element", vec![m23.clone()], &|g, v| g.element(v[0], 4));
    run("rows", vec![m34.clone()], &|g, v| g.rows(v[0], 1, 2));
    run("cross_entropy", vec![logits.clone()], &|g, v| {
        g.cross_entropy(v[0], &[0, 2, 1, 2])
    });
    run("l1", vec![pred.clone()], &move |g, v| {
        let t = g.constant(target.clone());
        g.loss(v[0], t, LossKind::L1)
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let results = op_suite(0, 1e-5);
        assert!(results.len() >= 20);
        for (name, err) in results {
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn linear_function_is_exact() {
        // Dyadic inputs and step keep every perturbation exactly representable.
        let x = Tensor::<f64>::column(vec![0.375, -1.25, 2.0]);
        let eps = (2.0f64).powi(-16);
        let err = grad_check(|g, v| Ok::<_, TensorError>(g.sum(v)), &x, eps).unwrap();
        assert_eq!(err, 0.0);

        let x = Tensor::<f64>::column(vec![0.3, -1.2, 2.0]);
        let err = grad_check(|g, v| Ok::<_, TensorError>(g.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10);
    }

    #[test]
    fn tanh_sum_is_tight() {
        let x = Tensor::<f64>::column(vec![0.3, -1.2, 1.7, -0.05]);
        let err = grad_check(
            |g, v| {
                let t = g.tanh(v);
                Ok::<_, TensorError>(g.sum(t))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at a kink: central differences see slope 1/2, backward sees 0.
        let x = Tensor::<f64>::column(vec![0.0]);
        let err = grad_check(
            |g, v| {
                let r = g.relu(v);
                Ok::<_, TensorError>(g.sum(r))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!((err - 0.5).abs() < 1e-9);
    }
}
