//! Shared test utilities: finite-difference gradient oracle and tolerances.
//!
//! Each integration-test binary compiles this module independently and uses
//! a different subset of it, so unused-item lints are expected noise here.
#![allow(dead_code)]

use caprmil::Tensor;

/// Central finite-difference gradient of `f` at `x` with step `h`.
///
/// `f` must be a pure function of the buffer (rebuild any graph inside).
pub fn finite_diff<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Largest magnitude across a set of gradient buffers (the normalization
/// scale for relative-error checks), floored so all-zero gradients compare
/// at absolute scale.
pub fn grad_scale<'a>(buffers: impl IntoIterator<Item = &'a [f64]>) -> f64 {
    buffers
        .into_iter()
        .flatten()
        .fold(0.0f64, |m, &v| m.max(v.abs()))
        .max(1e-8)
}

/// Largest componentwise deviation between two gradient buffers.
pub fn max_abs_diff(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
}

/// Deviation between two gradient buffers relative to the largest magnitude
/// present in either. For multi-parameter models, prefer normalizing by the
/// scale of the whole gradient vector (see `grad_scale`): the loss carries
/// one floating-point noise floor, so measuring a small parameter's gradient
/// against only its own scale turns that shared noise into spurious error.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_abs_diff(analytic, numeric) / grad_scale([analytic, numeric])
}

/// The finite-difference contract used across the suite: 64-bit elements,
/// step 1e-6, relative error below 1e-6.
pub const FD_STEP: f64 = 1e-6;
pub const FD_TOL: f64 = 1e-6;

/// Leaf tensor filled from a closure (test convenience).
pub fn leaf_from(data: &[f64], shape: &[usize]) -> Tensor<f64> {
    Tensor::leaf(data.to_vec(), shape).expect("test leaf")
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} (|diff| = {} > {tol})",
        (a - b).abs()
    );
}

use caprmil::model::ModelState;
use caprmil::{cross_entropy, forward, init_model, CaprmilConfig, Rng};

/// End-to-end gradient check: analytic gradients of every model parameter
/// (and the input) against central finite differences on the cross-entropy
/// loss of one forward pass. Returns the worst relative error, normalized
/// by the largest gradient component across the whole parameter vector.
pub fn model_grad_check(config: &CaprmilConfig, n_patches: usize, seed: u64) -> f64 {
    let state: ModelState<f64> = init_model(config, seed).expect("init");
    let mut rng = Rng::stream(seed, 0xBA6);
    let x_data: Vec<f64> = (0..n_patches * config.d_in).map(|_| rng.normal()).collect();
    let label = (seed % config.n_classes as u64) as usize;

    let eval = |state: &ModelState<f64>, x_data: &[f64]| -> f64 {
        let x = caprmil::Tensor::constant(x_data.to_vec(), &[n_patches, config.d_in])
            .expect("bag tensor");
        let (logits, _) = forward(state, &x, &mut Rng::new(0), false, false).expect("forward");
        cross_entropy(&logits, &[label]).expect("loss").item()
    };

    // Analytic gradients, input included.
    let x = caprmil::Tensor::leaf(x_data.clone(), &[n_patches, config.d_in]).expect("bag leaf");
    let (logits, _) = forward(&state, &x, &mut Rng::new(0), false, false).expect("forward");
    cross_entropy(&logits, &[label])
        .expect("loss")
        .backward()
        .expect("backward");
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    state.for_each_param(|name, t| {
        analytic.push((
            name.to_string(),
            t.grad().unwrap_or_else(|| vec![0.0; t.len()]),
        ));
    });
    analytic.push((
        "input".to_string(),
        x.grad().unwrap_or_else(|| vec![0.0; x.len()]),
    ));

    // Numeric gradients: probe one parameter tensor at a time by swapping a
    // perturbed copy into a cloned state.
    let mut numeric: Vec<(String, Vec<f64>)> = Vec::new();
    for (name, _) in &analytic {
        if name == "input" {
            numeric.push((
                name.clone(),
                finite_diff(&x_data, FD_STEP, |probe| eval(&state, probe)),
            ));
            continue;
        }
        let mut base = Vec::new();
        state.for_each_param(|n, t| {
            if n == name {
                base = t.data().to_vec();
            }
        });
        let grad = finite_diff(&base, FD_STEP, |probe| {
            let mut probed = state.clone();
            probed.for_each_param_mut(|n, t| {
                if n == name {
                    *t = caprmil::Tensor::constant(probe.to_vec(), t.shape()).expect("probe");
                }
            });
            eval(&probed, &x_data)
        });
        numeric.push((name.clone(), grad));
    }

    let scale = grad_scale(
        analytic
            .iter()
            .chain(&numeric)
            .map(|(_, v)| v.as_slice()),
    );
    let mut worst = 0.0f64;
    for ((name, a), (_, n)) in analytic.iter().zip(&numeric) {
        let err = max_abs_diff(a, n) / scale;
        assert!(err.is_finite(), "non-finite error on {name}");
        worst = worst.max(err);
    }
    worst
}
