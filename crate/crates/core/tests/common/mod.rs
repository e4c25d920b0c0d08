//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nvdp_core::diff::{grad_check, GradCheckReport, Matrix, ParamId};
use nvdp_core::model::{AnyModel, ConditionalModel};
use nvdp_core::noise::NoiseSource;
use nvdp_core::tasks::{Task, TaskMeta};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;

/// A 1-D task over smooth values: context on even indices, targets drawn from the rest.
pub fn small_task(context: usize, target: usize) -> Task {
    let n = 2 * context + target;
    let xs = Matrix::from_shape_fn((n, 1), |(i, _)| -1.5 + 3.0 * i as f64 / (n - 1) as f64);
    let ys = xs.mapv(|x| (1.3 * x).sin() + 0.2 * x);
    Task::new(xs, ys, TaskMeta::None)
        .with_split(
            (0..context).map(|i| 2 * i).collect(),
            (0..n).filter(|i| i % 2 == 1 || *i >= 2 * context).take(target).collect(),
        )
        .expect("valid split")
}

/// Central-difference check of the full negative ELBO with frozen noise,
/// over every entry of every parameter (or a sample of `per_param` entries).
///
/// Parameters are first jittered so zero-initialized biases do not sit
/// exactly on a ReLU kink.
pub fn elbo_grad_check(model: &mut AnyModel, task: &Task, per_param: usize, step: f64) -> GradCheckReport {
    let mut jitter = ChaCha8Rng::seed_from_u64(23);
    for id in model.params().ids().collect::<Vec<_>>() {
        model
            .params_mut()
            .get_mut(id)
            .mapv_inplace(|v| v + 0.05 * jitter.sample::<f64, _>(StandardNormal));
    }
    let mut store = model.params().clone();
    let ids: Vec<ParamId> = store.ids().collect();
    let mut noise = NoiseSource::frozen(17);
    {
        let g = nvdp_core::diff::Graph::new();
        model.objective(&g, task, 1, &mut noise).expect("recording pass");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    grad_check(&mut store, &ids, step, per_param, &mut rng, |g, s| {
        *model.params_mut() = s.clone();
        noise.rewind();
        let terms = model.objective(g, task, 1, &mut noise)?;
        Ok(terms.nll + terms.kl)
    })
    .expect("grad check runs")
}

/// Below this gradient magnitude, central differences at step 1e-5 are
/// dominated by rounding of the loss and relative error stops being meaningful.
pub const RESOLVABLE_GRAD: f64 = 1e-6;

/// Relative agreement on resolvable entries and absolute agreement everywhere.
pub fn assert_gradients_agree(report: &GradCheckReport, label: &str) {
    let rel = report.max_rel_error_where(RESOLVABLE_GRAD);
    let abs = report.max_abs_error();
    assert!(rel < 1e-4 && abs < 1e-9, "{label}: rel {rel:e} abs {abs:e} worst {:?}", report.worst);
}

