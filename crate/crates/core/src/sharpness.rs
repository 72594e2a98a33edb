//! Curvature diagnostics over a trained model: dominant Hessian eigenvalue,
//! Hutchinson trace, a projected-ascent probe of the worst loss increase in a
//! weight-space ball, and the per-step α quantity that classifies an update
//! as understep / on-target / overshoot.
//!
//! Everything here is read-only over the parameters it is given: the working
//! copy lives inside [`FlatProblem`] and the caller's set is never touched.

use crate::error::{Error, Result};
use crate::graph::{forward_backward, hvp, Graph, Mode};
use crate::optim::{IterObservation, TrainObserver};
use crate::params::ParamSet;
use crate::stats::{sample_variance, welch_t_test, Alternative, WelchTest};
use crate::tensor::{Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const HVP_DELTA: f64 = 1e-4;
pub const DEFAULT_POWER_ITERS: usize = 100;
pub const DEFAULT_POWER_TOL: f64 = 1e-4;

/// A loss surface restricted to the flattened trainable parameters, upcast to
/// f64. Batch-norm layers run with their stored running statistics so the
/// landscape is a deterministic function of the weights alone.
pub struct FlatProblem<'a> {
    graph: &'a Graph,
    params: ParamSet<f64>,
    x: Tensor<f64>,
    y: Tensor<f64>,
}

impl<'a> FlatProblem<'a> {
    pub fn new<S: Scalar>(
        graph: &'a Graph,
        params: &ParamSet<S>,
        x: &Tensor<S>,
        y: &Tensor<S>,
    ) -> Self {
        FlatProblem {
            graph,
            params: params.cast::<f64>(),
            x: x.cast::<f64>(),
            y: y.cast::<f64>(),
        }
    }

    pub fn dim(&self) -> usize {
        self.params.n_trainable_scalars()
    }

    pub fn origin(&self) -> Vec<f64> {
        self.params.flatten_trainable()
    }

    pub fn loss_at(&mut self, w: &[f64]) -> Result<f64> {
        self.params.set_trainable_from_flat(w)?;
        let fwd = self
            .graph
            .forward(&self.params, &self.x, Some(&self.y), Mode::Eval)?;
        Ok(fwd.loss.expect("labels were supplied"))
    }

    pub fn grad_at(&mut self, w: &[f64]) -> Result<Vec<f64>> {
        self.params.set_trainable_from_flat(w)?;
        let (_, grads) =
            forward_backward(self.graph, &self.params, &self.x, &self.y, Mode::Eval)?;
        Ok(flat_trainable(&self.params, &grads))
    }
}

/// Flattens the tensors that correspond to trainable entries, in entry order,
/// matching the layout of `ParamSet::flatten_trainable`.
pub fn flat_trainable<S: Scalar>(params: &ParamSet<S>, ts: &[Tensor<S>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.n_trainable_scalars());
    for (entry, t) in params.entries().iter().zip(ts) {
        if entry.trainable {
            out.extend(t.data().iter().map(|v| v.to_f64()));
        }
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rademacher(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect()
}

/// Power iteration for the dominant-magnitude eigenvalue of a symmetric
/// operator. The start vector is seeded Rademacher; the estimate before the
/// loop seeds the convergence test, so an exact fixpoint (identity operator)
/// finishes after a single refinement.
pub fn power_iteration<F>(
    mut apply: F,
    dim: usize,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<(f64, usize)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if dim == 0 || max_iters == 0 {
        return Err(Error::InvalidSpec(
            "power iteration needs dim >= 1 and max_iters >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = rademacher(&mut rng, dim);
    let norm = l2(&v);
    for x in v.iter_mut() {
        *x /= norm;
    }
    let mut hv = apply(&v)?;
    let mut rayleigh = dot(&v, &hv);
    for iter in 1..=max_iters {
        let norm = l2(&hv);
        if norm == 0.0 {
            return Ok((0.0, iter));
        }
        for (vi, hvi) in v.iter_mut().zip(&hv) {
            *vi = hvi / norm;
        }
        hv = apply(&v)?;
        let next = dot(&v, &hv);
        if (next - rayleigh).abs() < tol * next.abs().max(1e-300) {
            return Ok((next, iter));
        }
        rayleigh = next;
    }
    Ok((rayleigh, max_iters))
}

/// Hutchinson trace estimator: mean of vᵀAv over seeded Rademacher probes,
/// with the standard error of that mean.
pub fn hutchinson_trace<F>(
    mut apply: F,
    dim: usize,
    probes: usize,
    seed: u64,
) -> Result<(f64, f64)>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if probes < 2 {
        return Err(Error::InvalidSpec("trace estimation needs probes >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(probes);
    for _ in 0..probes {
        let v = rademacher(&mut rng, dim);
        let av = apply(&v)?;
        samples.push(dot(&v, &av));
    }
    let est = samples.iter().sum::<f64>() / probes as f64;
    let stderr = (sample_variance(&samples) / probes as f64).sqrt();
    Ok((est, stderr))
}

pub fn hessian_top_eigenvalue<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    max_iters: usize,
    tol: f64,
    seed: u64,
) -> Result<(f64, usize)> {
    let mut prob = FlatProblem::new(graph, params, x, y);
    let w0 = prob.origin();
    power_iteration(
        |v| hvp(|w| prob.grad_at(w), &w0, v, HVP_DELTA),
        w0.len(),
        max_iters,
        tol,
        seed,
    )
}

pub fn hessian_trace<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    probes: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut prob = FlatProblem::new(graph, params, x, y);
    let w0 = prob.origin();
    hutchinson_trace(
        |v| hvp(|w| prob.grad_at(w), &w0, v, HVP_DELTA),
        w0.len(),
        probes,
        seed,
    )
}

/// Projected gradient ascent in weight space: the largest observed increase
/// of the loss within the L2 ball of radius `rho`. The single-step ascent
/// point (the one a sharpness-aware update would probe) is always among the
/// evaluated candidates, so the result dominates it.
pub fn worst_case_sharpness<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    rho: f64,
    steps: usize,
    seed: u64,
) -> Result<f64> {
    if rho <= 0.0 || steps == 0 {
        return Err(Error::InvalidSpec(
            "worst-case probe needs rho > 0 and steps >= 1".into(),
        ));
    }
    let mut prob = FlatProblem::new(graph, params, x, y);
    let w0 = prob.origin();
    let dim = w0.len();
    let base = prob.loss_at(&w0)?;
    let step_size = rho / 10.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0f64;

    let candidate = |prob: &mut FlatProblem, eps: &[f64], best: &mut f64| -> Result<()> {
        let mut w = w0.clone();
        for (wi, ei) in w.iter_mut().zip(eps) {
            *wi += ei;
        }
        let gap = prob.loss_at(&w)? - base;
        if gap > *best {
            *best = gap;
        }
        Ok(())
    };

    let g0 = prob.grad_at(&w0)?;
    let g0n = l2(&g0);
    if g0n > 0.0 {
        let sam_eps: Vec<f64> = g0.iter().map(|g| g * rho / g0n).collect();
        candidate(&mut prob, &sam_eps, &mut best)?;
    }

    let mut eps = vec![0.0f64; dim];
    let mut w = w0.clone();
    for _ in 0..steps {
        let g = prob.grad_at(&w)?;
        let gn = l2(&g);
        if gn > 0.0 {
            for (ei, gi) in eps.iter_mut().zip(&g) {
                *ei += step_size * gi / gn;
            }
        } else {
            let kick = rademacher(&mut rng, dim);
            let kn = l2(&kick);
            for (ei, ki) in eps.iter_mut().zip(&kick) {
                *ei += step_size * ki / kn;
            }
        }
        let en = l2(&eps);
        if en > rho {
            for ei in eps.iter_mut() {
                *ei *= rho / en;
            }
        }
        for ((wi, w0i), ei) in w.iter_mut().zip(&w0).zip(&eps) {
            *wi = w0i + ei;
        }
        candidate(&mut prob, &eps, &mut best)?;
    }
    Ok(best)
}

/// Quality of one optimizer step from the loss and directional slope at its
/// start and end. A parabola f(t) = at² + bt + c is least-squares fitted to
/// the four observations {f(0), f'(0), f(1), f'(1)} and the returned value is
/// the fitted f'(1) / |f'(0)|: 0 when the step lands on the parabola minimum,
/// +1 at the mirror-image overshoot, −1 when the slope never changed.
pub fn alpha_quantity(f0: f64, s0: f64, f1: f64, s1: f64) -> Result<f64> {
    if s0 >= 0.0 {
        return Err(Error::NotDescent { slope: s0 });
    }
    // Normal equations of the 4x3 system; the fitted coefficients reduce to
    // closed form (system determinant 10).
    let a = (s1 - s0) / 2.0;
    let b = (2.0 * f1 - 2.0 * f0 + 9.0 * s0 - s1) / 10.0;
    if b == 0.0 {
        return Err(Error::NotDescent { slope: 0.0 });
    }
    Ok((2.0 * a + b) / b.abs())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub f0: f64,
    pub s0: f64,
    pub f1: f64,
    pub s1: f64,
    pub alpha: f64,
}

/// Training observer that samples every `every`-th iteration of each epoch
/// and records the α quantity for it. The end-of-step loss and slope cost one
/// extra pass on the same batch; that pass is diagnostic and deliberately
/// kept out of the optimizer's cost counters.
pub struct AlphaObserver {
    pub every: usize,
    pub records: Vec<AlphaRecord>,
    pub skipped_non_descent: usize,
}

impl AlphaObserver {
    pub fn new(every: usize) -> Self {
        AlphaObserver {
            every: every.max(1),
            records: Vec::new(),
            skipped_non_descent: 0,
        }
    }
}

impl<S: Scalar> TrainObserver<S> for AlphaObserver {
    fn wants_iteration(&self, _epoch: usize, iter: usize) -> bool {
        iter % self.every == 0
    }

    fn on_iteration(&mut self, obs: &IterObservation<'_, S>) -> Result<()> {
        let w0 = obs.params_before.flatten_trainable();
        let w1 = obs.params_after.flatten_trainable();
        let delta: Vec<f64> = w1.iter().zip(&w0).map(|(a, b)| a - b).collect();
        if l2(&delta) == 0.0 {
            self.skipped_non_descent += 1;
            return Ok(());
        }
        // Slopes are taken in the step parametrization w(t) = w₀ + tΔ, t ∈
        // [0,1], so a quadratic loss restricted to the segment satisfies the
        // fitted model exactly.
        let g0 = flat_trainable(obs.params_before, obs.grads_before);
        let s0 = dot(&g0, &delta);
        let f0 = obs.loss_before;
        let (f1, grads1) =
            forward_backward(obs.graph, obs.params_after, obs.x, obs.y, Mode::Train)?;
        let g1 = flat_trainable(obs.params_after, &grads1);
        let s1 = dot(&g1, &delta);
        match alpha_quantity(f0, s0, f1, s1) {
            Ok(alpha) => self.records.push(AlphaRecord {
                epoch: obs.epoch,
                iteration: obs.iter,
                f0,
                s0,
                f1,
                s1,
                alpha,
            }),
            Err(Error::NotDescent { .. }) => self.skipped_non_descent += 1,
            Err(e) => return Err(e),
        }
        Ok(())
    }
}

/// Groups α records into the epochs immediately before and from the decay
/// epoch on, and tests mean(before) > mean(after) one-sided.
pub fn alpha_campaign(
    records: &[AlphaRecord],
    decay_epoch: usize,
    window_before: usize,
    window_after: usize,
) -> Result<(Vec<f64>, Vec<f64>, WelchTest)> {
    let lo = decay_epoch.saturating_sub(window_before);
    let before: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch >= lo && r.epoch < decay_epoch)
        .map(|r| r.alpha)
        .collect();
    let after: Vec<f64> = records
        .iter()
        .filter(|r| r.epoch >= decay_epoch && r.epoch < decay_epoch + window_after)
        .map(|r| r.alpha)
        .collect();
    if before.len() < 2 {
        return Err(Error::GroupTooSmall("before".into()));
    }
    if after.len() < 2 {
        return Err(Error::GroupTooSmall("after".into()));
    }
    let test = welch_t_test(&before, &after, Alternative::Greater)?;
    Ok((before, after, test))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SharpnessRecord {
    pub epoch: usize,
    pub top_eigenvalue: f64,
    pub trace_estimate: f64,
    pub trace_stderr: f64,
    pub worst_case_gap: f64,
    pub n_examples: usize,
    pub probes: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharpnessOptions {
    pub power_iters: usize,
    pub power_tol: f64,
    pub probes: usize,
    pub worst_rho: f64,
    pub worst_steps: usize,
}

impl Default for SharpnessOptions {
    fn default() -> Self {
        SharpnessOptions {
            power_iters: DEFAULT_POWER_ITERS,
            power_tol: DEFAULT_POWER_TOL,
            probes: 8,
            worst_rho: 0.05,
            worst_steps: 20,
        }
    }
}

/// All three curvature measurements on one parameter snapshot.
pub fn measure_sharpness<S: Scalar>(
    graph: &Graph,
    params: &ParamSet<S>,
    x: &Tensor<S>,
    y: &Tensor<S>,
    opts: &SharpnessOptions,
    seed: u64,
    epoch: usize,
) -> Result<SharpnessRecord> {
    let (lambda, _) =
        hessian_top_eigenvalue(graph, params, x, y, opts.power_iters, opts.power_tol, seed)?;
    let (trace, trace_se) = hessian_trace(graph, params, x, y, opts.probes, seed ^ 0x9e37)?;
    let gap = worst_case_sharpness(
        graph,
        params,
        x,
        y,
        opts.worst_rho,
        opts.worst_steps,
        seed ^ 0x7f4a,
    )?;
    Ok(SharpnessRecord {
        epoch,
        top_eigenvalue: lambda,
        trace_estimate: trace,
        trace_stderr: trace_se,
        worst_case_gap: gap,
        n_examples: x.shape()[0],
        probes: opts.probes,
    })
}

pub fn sharpness_csv(records: &[SharpnessRecord]) -> String {
    let mut out = String::from("epoch,lambda_max,trace,trace_se,worst_gap\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.top_eigenvalue, r.trace_estimate, r.trace_stderr, r.worst_case_gap
        ));
    }
    out
}

pub fn sharpness_jsonl(records: &[SharpnessRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("plain struct"));
        out.push('\n');
    }
    out
}

pub fn alpha_csv(records: &[AlphaRecord]) -> String {
    let mut out = String::from("epoch,iteration,f0,s0,f1,s1,alpha\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.iteration, r.f0, r.s0, r.f1, r.s1, r.alpha
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{optimizer_preset, train, OptimizerSpec, Rule, Schedule, TrainConfig};
    use crate::zoo::{build_model, ArchSpec};

    fn diag_op(d: Vec<f64>) -> impl FnMut(&[f64]) -> Result<Vec<f64>> {
        move |v: &[f64]| Ok(v.iter().zip(&d).map(|(vi, di)| vi * di).collect())
    }

    #[test]
    fn identity_operator_converges_in_one_iteration() {
        let (lambda, iters) = power_iteration(diag_op(vec![1.0; 8]), 8, 100, 1e-4, 7).unwrap();
        assert!((lambda - 1.0).abs() < 1e-12);
        assert_eq!(iters, 1);
    }

    #[test]
    fn diagonal_operator_dominant_eigenvalue() {
        let (lambda, _) = power_iteration(diag_op(vec![2.0, 4.0]), 2, 100, 1e-6, 3).unwrap();
        assert!((lambda - 4.0).abs() < 1e-3, "lambda = {lambda}");
        let (lambda, _) = power_iteration(diag_op(vec![1.0, -5.0, 2.0]), 3, 200, 1e-8, 3).unwrap();
        assert!((lambda + 5.0).abs() < 1e-3, "lambda = {lambda}");
    }

    fn quadratic_problem(scales: &[f64]) -> (Graph, ParamSet<f64>, Tensor<f64>, Tensor<f64>) {
        // mean squared error of x·W against zero targets with one-hot rows
        // scaled so the Hessian is diag(2·s²ᵢ / n)·n ... choose rows so the
        // Hessian of the mean loss is exactly diag(scales).
        let k = scales.len();
        let mut graph = Graph::new();
        let w = graph.param(0);
        let input = graph.input;
        let z = graph.matmul(input, w);
        graph.set_logits(z);
        graph.loss_mse(z);
        let mut params = ParamSet::new("quad");
        params.push("w", Tensor::zeros(&[k, 1]), true).unwrap();
        let mut rows = Vec::new();
        for (i, s) in scales.iter().enumerate() {
            let mut row = vec![0.0; k];
            // the loss is (1/k)Σ ½(aᵢwᵢ)², so ∂²/∂wᵢ² = aᵢ²/k = scales[i]
            row[i] = (s * k as f64).sqrt();
            rows.push(row);
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let x = Tensor::stack(&[k], &refs).unwrap();
        let y = Tensor::zeros(&[k, 1]);
        (graph, params, x, y)
    }

    #[test]
    fn fd_hessian_power_iteration_matches_analytic() {
        let (graph, params, x, y) = quadratic_problem(&[2.0, 4.0]);
        let (lambda, _) =
            hessian_top_eigenvalue(&graph, &params, &x, &y, 100, 1e-6, 11).unwrap();
        assert!((lambda - 4.0).abs() < 1e-3, "lambda = {lambda}");
    }

    #[test]
    fn exact_trace_on_diagonal_quadratic() {
        let (est, se) = hutchinson_trace(diag_op(vec![2.0, 4.0]), 2, 1000, 5).unwrap();
        assert_eq!(est, 6.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn zero_operator_trace_is_zero() {
        let (est, se) = hutchinson_trace(diag_op(vec![0.0, 0.0, 0.0]), 3, 16, 5).unwrap();
        assert_eq!(est, 0.0);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn trace_estimator_is_unbiased_on_coupled_quadratic() {
        // A = [[1,1],[1,1]]: probes take values 0 or 4, mean 2.
        let apply = |v: &[f64]| -> Result<Vec<f64>> {
            let s = v[0] + v[1];
            Ok(vec![s, s])
        };
        let mut rep_means = Vec::new();
        for rep in 0..50u64 {
            let (est, _) = hutchinson_trace(apply, 2, 64, 1000 + rep).unwrap();
            rep_means.push(est);
        }
        let grand = rep_means.iter().sum::<f64>() / 50.0;
        let sem = (sample_variance(&rep_means) / 50.0).sqrt();
        assert!((grand - 2.0).abs() <= sem, "grand {grand}, sem {sem}");
    }

    #[test]
    fn fd_trace_on_quadratic_graph() {
        let (graph, params, x, y) = quadratic_problem(&[2.0, 4.0]);
        let (est, se) = hessian_trace(&graph, &params, &x, &y, 64, 13).unwrap();
        assert!((est - 6.0).abs() < 1e-6, "est {est}");
        assert!(se < 1e-6);
    }

    #[test]
    fn worst_case_gap_reaches_quadratic_boundary() {
        let (graph, params, x, y) = quadratic_problem(&[4.0]);
        // L(w) = 2w² at w = 0: max over |ε| ≤ 0.5 is 2·0.25 = 0.5.
        let gap = worst_case_sharpness(&graph, &params, &x, &y, 0.5, 20, 9).unwrap();
        assert!((gap - 0.5).abs() < 1e-12, "gap = {gap}");
    }

    #[test]
    fn worst_case_gap_monotone_in_radius_and_steps() {
        let (graph, params, x, y) = quadratic_problem(&[2.0, 4.0, 1.0]);
        let gaps: Vec<f64> = [0.1, 0.2, 0.4]
            .iter()
            .map(|&rho| worst_case_sharpness(&graph, &params, &x, &y, rho, 20, 9).unwrap())
            .collect();
        assert!(gaps[0] <= gaps[1] && gaps[1] <= gaps[2], "{gaps:?}");
        assert!(gaps[0] > 0.0);

        let spec = ArchSpec::Mlp { in_shape: vec![4], hidden: vec![6], classes: 3 };
        let (graph, params) = build_model::<f64>(&spec, 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| (0..4).map(|_| rng.random::<f64>()).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let x = Tensor::stack(&[4], &refs).unwrap();
        let yv: Vec<f64> = (0..12).map(|i| (i % 3) as f64).collect();
        let y = Tensor::from_vec(yv);
        let g1 = worst_case_sharpness(&graph, &params, &x, &y, 0.3, 1, 9).unwrap();
        let g20 = worst_case_sharpness(&graph, &params, &x, &y, 0.3, 20, 9).unwrap();
        assert!(g20 >= g1, "g20 {g20} < g1 {g1}");
    }

    #[test]
    fn alpha_anchor_cases() {
        assert!((alpha_quantity(1.0, -2.0, 0.0, 0.0).unwrap()).abs() < 1e-12);
        assert!((alpha_quantity(0.25, -1.0, 0.25, 1.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((alpha_quantity(1.0, -1.0, 0.0, -1.0).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn alpha_rejects_non_descent_starts() {
        assert!(matches!(
            alpha_quantity(1.0, 0.0, 0.5, -0.5),
            Err(Error::NotDescent { .. })
        ));
        assert!(matches!(
            alpha_quantity(1.0, 0.7, 0.5, -0.5),
            Err(Error::NotDescent { .. })
        ));
    }

    #[test]
    fn alpha_ignores_constant_loss_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..200 {
            let f0 = rng.random::<f64>() * 4.0 - 2.0;
            let s0 = -(rng.random::<f64>() + 1e-3);
            let f1 = rng.random::<f64>() * 4.0 - 2.0;
            let s1 = rng.random::<f64>() * 4.0 - 2.0;
            let a = alpha_quantity(f0, s0, f1, s1);
            let c = rng.random::<f64>() * 100.0 - 50.0;
            let b = alpha_quantity(f0 + c, s0, f1 + c, s1);
            match (a, b) {
                (Ok(a), Ok(b)) => assert!((a - b).abs() < 1e-9, "{a} vs {b}"),
                (Err(_), Err(_)) => {}
                other => panic!("shift changed outcome: {other:?}"),
            }
        }
    }

    fn synth_records(values: &[(usize, f64)]) -> Vec<AlphaRecord> {
        values
            .iter()
            .enumerate()
            .map(|(i, &(epoch, alpha))| AlphaRecord {
                epoch,
                iteration: i,
                f0: 0.0,
                s0: -1.0,
                f1: 0.0,
                s1: 0.0,
                alpha,
            })
            .collect()
    }

    #[test]
    fn campaign_groups_and_tests_means() {
        let recs = synth_records(&[
            (3, 1.1),
            (3, 1.2),
            (4, 1.3),
            (4, 1.4),
            (5, 0.9),
            (5, 1.0),
            (6, 1.1),
            (6, 1.2),
        ]);
        let (before, after, test) = alpha_campaign(&recs, 5, 2, 2).unwrap();
        assert_eq!(before, vec![1.1, 1.2, 1.3, 1.4]);
        assert_eq!(after, vec![0.9, 1.0, 1.1, 1.2]);
        assert!((test.p - 0.035_493_827_160_493_784).abs() < 1e-12);

        let (_, _, same) = alpha_campaign(
            &synth_records(&[(4, 0.3), (4, 0.7), (5, 0.3), (5, 0.7)]),
            5,
            1,
            1,
        )
        .unwrap();
        assert_eq!(same.t, 0.0);
        assert_eq!(same.p, 0.5);

        let shifted = synth_records(&[(4, 0.1), (4, 0.2), (5, 10.1), (5, 10.2)]);
        let (_, _, up) = alpha_campaign(&shifted, 5, 1, 1).unwrap();
        assert!(up.p > 0.99, "p = {}", up.p);

        assert!(matches!(
            alpha_campaign(&synth_records(&[(4, 0.1), (5, 1.0), (5, 1.1)]), 5, 1, 1),
            Err(Error::GroupTooSmall(_))
        ));
    }

    #[test]
    fn observer_samples_every_fourth_iteration() {
        let spec = ArchSpec::Mlp { in_shape: vec![2], hidden: vec![8], classes: 2 };
        let (graph, mut params) = build_model::<f64>(&spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 96;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = (i % 2) as f64;
            rows.push(vec![
                rng.random::<f64>() + 3.0 * c,
                rng.random::<f64>() - 3.0 * c,
            ]);
            labels.push(c);
        }
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let x = Tensor::stack(&[2], &refs).unwrap();
        let y = Tensor::from_vec(labels);
        let opt = OptimizerSpec {
            rule: Rule::Sgd,
            schedule: Schedule { lr0: 0.05, decays: vec![] },
            ..optimizer_preset("sgd").unwrap()
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 5,
            checkpoint_every: 0,
            refresh_fraction: 1.0,
        };
        let mut obs = AlphaObserver::new(4);
        train(&graph, &mut params, &x, &y, None, &opt, &cfg, &mut obs).unwrap();
        // 12 batches per epoch, sampled at 0,4,8 → 3 per epoch, 2 epochs
        assert_eq!(obs.records.len() + obs.skipped_non_descent, 6);
        assert!(obs.records.len() >= 4, "too many skips: {}", obs.skipped_non_descent);
        for r in &obs.records {
            assert_eq!(r.iteration % 4, 0);
            assert!(r.alpha.is_finite());
            assert!(r.s0 < 0.0);
        }
    }

    #[test]
    fn csv_layouts_are_stable() {
        let recs = vec![SharpnessRecord {
            epoch: 2,
            top_eigenvalue: 1.5,
            trace_estimate: 3.25,
            trace_stderr: 0.5,
            worst_case_gap: 0.125,
            n_examples: 64,
            probes: 8,
        }];
        assert_eq!(
            sharpness_csv(&recs),
            "epoch,lambda_max,trace,trace_se,worst_gap\n2,1.5,3.25,0.5,0.125\n"
        );
        let line = sharpness_jsonl(&recs);
        assert!(line.starts_with("{\"epoch\":2,"));
        let alpha = vec![AlphaRecord {
            epoch: 0,
            iteration: 4,
            f0: 1.0,
            s0: -2.0,
            f1: 0.0,
            s1: 0.0,
            alpha: 0.0,
        }];
        assert_eq!(
            alpha_csv(&alpha),
            "epoch,iteration,f0,s0,f1,s1,alpha\n0,4,1,-2,0,0,0\n"
        );
    }
}
