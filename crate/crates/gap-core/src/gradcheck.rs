//! Finite-difference gradient verification.
//!
//! The oracle is central differencing of a freshly rebuilt forward pass; it
//! never touches the backward implementation it checks. Used by the unit
//! suites, the acceptance suite, and the `gradcheck` CLI subcommand.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{self, ModelConfig, ModelInput};
use crate::tensor::{Graph, ParamStore, TensorId};

pub const FD_STEP: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero gradients compare
/// sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error seen over a batch of checks.
#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub checks: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl CheckReport {
    pub fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.checks += 1;
        if err > self.max_rel_err {
            self.max_rel_err = err;
            self.worst = what();
        }
    }

    pub fn merge(&mut self, other: &CheckReport) {
        self.checks += other.checks;
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
    }
}

/// Checks one op's backward pass against central differences.
///
/// `build` must map input leaves to a scalar loss deterministically; it is
/// re-run for every probe with a fixed graph seed, so dropout masks and the
/// like stay frozen across evaluations.
fn fd_check<F>(
    report: &mut CheckReport,
    name: &str,
    shapes: &[&[usize]],
    inputs: &[Vec<f64>],
    build: F,
) -> Result<()>
where
    F: Fn(&mut Graph<f64>, &[TensorId]) -> Result<TensorId>,
{
    let eval = |inputs: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::new(7, true);
        let ids: Vec<TensorId> = shapes
            .iter()
            .zip(inputs)
            .map(|(s, v)| g.leaf(s, v.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &ids)?;
        Ok(g.values(loss)[0])
    };

    // Analytic gradients.
    let mut g = Graph::<f64>::new(7, true);
    let ids: Vec<TensorId> = shapes
        .iter()
        .zip(inputs)
        .map(|(s, v)| g.leaf(s, v.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let grads: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.values(id).len()]))
        .collect();

    for (t, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[t][e] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[t][e] -= FD_STEP;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * FD_STEP);
            let err = rel_err(grads[t][e], fd);
            report.record(err, || {
                format!("{name} input {t} entry {e}: analytic {} vs fd {fd}", grads[t][e])
            });
        }
    }
    Ok(())
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Runs finite-difference checks over every differentiable operation.
pub fn check_ops(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = CheckReport::default();

    // Random projection to a scalar keeps every output entry in the loss.
    let proj = |g: &mut Graph<f64>, out: TensorId, w: &[f64]| -> Result<TensorId> {
        let shape = g.shape(out).to_vec();
        let wid = g.leaf(&shape, w.to_vec())?;
        let prod = g.mul(out, wid)?;
        g.sum_all(prod)
    };

    {
        let (m, k, n) = (4, 3, 5);
        let a = random_vec(&mut rng, m * k);
        let b = random_vec(&mut rng, k * n);
        let w = random_vec(&mut rng, m * n);
        fd_check(&mut report, "matmul", &[&[m, k], &[k, n]], &[a, b], |g, ids| {
            let out = g.matmul(ids[0], ids[1])?;
            proj(g, out, &w)
        })?;
    }
    {
        let x = random_vec(&mut rng, 5);
        let w = random_vec(&mut rng, 5);
        fd_check(&mut report, "softmax_lastdim", &[&[5]], &[x], |g, ids| {
            let out = g.softmax_lastdim(ids[0])?;
            proj(g, out, &w)
        })?;
    }
    {
        // 2 input channels, 6x6 spatial, 3 output channels, 3x3 kernels.
        let input = random_vec(&mut rng, 2 * 6 * 6).iter().map(|v| v.abs()).collect::<Vec<_>>();
        let kernels = random_vec(&mut rng, 3 * 2 * 3 * 3);
        let bias = random_vec(&mut rng, 3);
        let w = random_vec(&mut rng, 3 * 4 * 4);
        fd_check(
            &mut report,
            "conv2d_valid",
            &[&[2, 6, 6], &[3, 2, 3, 3], &[3]],
            &[input, kernels, bias],
            |g, ids| {
                let out = g.conv2d_valid(ids[0], ids[1], ids[2])?;
                proj(g, out, &w)
            },
        )?;
    }
    {
        let x = random_vec(&mut rng, 12);
        let y = random_vec(&mut rng, 12);
        let w = random_vec(&mut rng, 12);
        fd_check(&mut report, "add", &[&[3, 4], &[3, 4]], &[x.clone(), y.clone()], |g, ids| {
            let out = g.add(ids[0], ids[1])?;
            proj(g, out, &w)
        })?;
        fd_check(&mut report, "mul", &[&[3, 4], &[3, 4]], &[x.clone(), y], |g, ids| {
            let out = g.mul(ids[0], ids[1])?;
            proj(g, out, &w)
        })?;
        fd_check(&mut report, "relu", &[&[3, 4]], &[x.clone()], |g, ids| {
            let out = g.relu(ids[0])?;
            proj(g, out, &w)
        })?;
        fd_check(&mut report, "scale", &[&[3, 4]], &[x.clone()], |g, ids| {
            let out = g.scale(ids[0], -1.7)?;
            proj(g, out, &w)
        })?;
        fd_check(&mut report, "dropout", &[&[3, 4]], &[x], |g, ids| {
            let out = g.dropout(ids[0], 0.4)?;
            proj(g, out, &w)
        })?;
    }
    {
        let x = random_vec(&mut rng, 12);
        let b = random_vec(&mut rng, 4);
        let w = random_vec(&mut rng, 12);
        fd_check(
            &mut report,
            "add_bias",
            &[&[3, 4], &[4]],
            &[x.clone(), b.clone()],
            |g, ids| {
                let out = g.add_bias(ids[0], ids[1])?;
                proj(g, out, &w)
            },
        )?;
        fd_check(&mut report, "mul_bias", &[&[3, 4], &[4]], &[x, b], |g, ids| {
            let out = g.mul_bias(ids[0], ids[1])?;
            proj(g, out, &w)
        })?;
    }
    {
        let x = random_vec(&mut rng, 12);
        let w4 = random_vec(&mut rng, 4);
        let w3 = random_vec(&mut rng, 3);
        fd_check(&mut report, "mean_over_rows", &[&[3, 4]], &[x.clone()], |g, ids| {
            let out = g.mean_axis(ids[0], 0)?;
            proj(g, out, &w4)
        })?;
        fd_check(&mut report, "mean_over_cols", &[&[3, 4]], &[x.clone()], |g, ids| {
            let out = g.mean_axis(ids[0], 1)?;
            proj(g, out, &w3)
        })?;
        fd_check(&mut report, "layer_norm", &[&[3, 4]], &[x.clone()], |g, ids| {
            let out = g.layer_norm(ids[0], 1e-5)?;
            proj(g, out, &random_projection(ids[0], 12))
        })?;
        fd_check(&mut report, "tcn", &[&[3, 4]], &[x.clone()], |g, ids| {
            let out = g.tcn(ids[0], 1e-5)?;
            proj(g, out, &random_projection(ids[0], 12))
        })?;
        fd_check(&mut report, "transpose", &[&[3, 4]], &[x], |g, ids| {
            let out = g.transpose(ids[0])?;
            proj(g, out, &random_projection(ids[0], 12))
        })?;
    }
    {
        let x = random_vec(&mut rng, 6);
        let y = random_vec(&mut rng, 9);
        let w = random_vec(&mut rng, 15);
        fd_check(&mut report, "concat_cols", &[&[3, 2], &[3, 3]], &[x, y], |g, ids| {
            let out = g.concat(&[ids[0], ids[1]], 1)?;
            proj(g, out, &w)
        })?;
    }
    {
        for label in [0.0, 1.0] {
            let z = random_vec(&mut rng, 1);
            fd_check(&mut report, "bce_with_logits", &[&[1]], &[z], |g, ids| {
                g.bce_with_logits(ids[0], label)
            })?;
        }
    }
    Ok(report)
}

/// Deterministic pseudo-random projection weights keyed by node id, so
/// rebuilt graphs in `fd_check` closures reuse identical weights.
fn random_projection(id: TensorId, n: usize) -> Vec<f64> {
    let _ = id;
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e3779b9);
    (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
}

/// Full-model gradient check: every probe perturbs one parameter entry of
/// the stored model and re-runs the forward pass, comparing against the
/// analytic gradient from one backward sweep. Returns the worst relative
/// error over `probes` randomly sampled (parameter, entry) pairs.
pub fn check_model(
    cfg: &ModelConfig,
    store: &mut ParamStore<f64>,
    input: &ModelInput,
    label: f64,
    probes: usize,
    seed: u64,
) -> Result<CheckReport> {
    let mut report = CheckReport::default();
    let forward = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new(3, true);
        let binding = store.bind(&mut g);
        let logit = model::forward_logit(&mut g, &binding, cfg, input)?;
        let loss = g.bce_with_logits(logit, label)?;
        Ok(g.values(loss)[0])
    };

    // Analytic gradients once.
    let mut g = Graph::<f64>::new(3, true);
    let binding = store.bind(&mut g);
    let logit = model::forward_logit(&mut g, &binding, cfg, input)?;
    let loss = g.bce_with_logits(logit, label)?;
    g.backward(loss)?;
    let mut grads = crate::tensor::GradMap::new();
    binding.accumulate_grads(&g, store, &mut grads);
    drop(g);

    let names: Vec<String> = grads.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..probes {
        let name = &names[rng.random_range(0..names.len())];
        let len = grads[name].len();
        let entry = rng.random_range(0..len);
        let original = store.get(name).unwrap().values().to_vec();

        let mut plus = original.clone();
        plus[entry] += FD_STEP;
        store.set_values(name, plus)?;
        let f_plus = forward(store)?;

        let mut minus = original.clone();
        minus[entry] -= FD_STEP;
        store.set_values(name, minus)?;
        let f_minus = forward(store)?;

        store.set_values(name, original)?;
        let fd = (f_plus - f_minus) / (2.0 * FD_STEP);
        let analytic = grads[name][entry];
        let err = rel_err(analytic, fd);
        report.record(err, || format!("{name}[{entry}]: analytic {analytic} vs fd {fd}"));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_ops_match_finite_differences() {
        // 20 seeds, tolerance 1e-4 at 64-bit.
        for seed in 0..20 {
            let report = check_ops(seed).unwrap();
            assert!(
                report.max_rel_err < 1e-4,
                "seed {seed}: {} over {} checks ({})",
                report.max_rel_err,
                report.checks,
                report.worst
            );
        }
    }
}
