//! Central finite-difference checks of every differentiable operation,
//! evaluated in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{concat_last_axis, Axis, Tape, Tensor, Var};
use crate::error::Result;
use crate::losses::{total_loss, triplet_loss};
use crate::model::{SANet, SANetConfig};
use crate::stn::{affine_grid, grid_sample};

/// Finite-difference step.
pub const STEP: f64 = 1e-4;
/// Pass threshold on `|analytic − numeric| / max(1, |numeric|)`.
pub const TOLERANCE: f64 = 1e-4;
/// Random instances per operation.
pub const INSTANCES: usize = 5;

/// Builds a scalar from leaf variables recorded on a fresh tape.
pub trait ScalarFn: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {}
impl<F> ScalarFn for F where F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>> {}

#[derive(Clone, Debug, Default, Serialize)]
pub struct CheckResult {
    pub max_rel_err: f64,
    pub probes: usize,
    /// Probes where the function was visibly non-smooth within the step.
    pub kinks: usize,
    /// `(input, coordinate, analytic, numeric)` of the largest error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

fn eval<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    Ok(f(&tape, &vars)?.value().item())
}

/// Compares analytic gradients of `f` against central differences.
///
/// At most `max_probes` coordinates per input are probed (all of them when
/// the input is smaller). A probe counts as a kink, and is excluded from
/// the error, when the estimates at `h` and `h/2` disagree: either the
/// central differences (a kink away from the probe point) or the scaled
/// second differences (a kink close to it).
pub fn check<F: ScalarFn>(f: F, inputs: &[Tensor<f64>], max_probes: usize, rng: &mut impl Rng) -> Result<CheckResult> {
    let (analytic, f0) = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let f0 = out.value().item();
        let grads = tape.backward(out)?;
        let g: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect();
        (g, f0)
    };

    let mut result = CheckResult::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = if n <= max_probes {
            (0..n).collect()
        } else {
            rand::seq::index::sample(rng, n, max_probes).into_vec()
        };
        for i in coords {
            let orig = input.data()[i];
            // (central difference, second difference × h)
            let mut diffs = |h: f64| -> Result<(f64, f64)> {
                work[which].data_mut()[i] = orig + h;
                let plus = eval(&f, &work)?;
                work[which].data_mut()[i] = orig - h;
                let minus = eval(&f, &work)?;
                work[which].data_mut()[i] = orig;
                Ok(((plus - minus) / (2.0 * h), (plus - 2.0 * f0 + minus) / h))
            };
            let (numeric, curv) = diffs(STEP)?;
            let (refined, curv_half) = diffs(STEP / 2.0)?;
            let scale = numeric.abs().max(1.0);
            if (numeric - refined).abs() / scale > TOLERANCE || (curv - 2.0 * curv_half).abs() / scale > 0.5 * TOLERANCE
            {
                result.kinks += 1;
                continue;
            }
            let a = analytic[which].data()[i];
            let rel = (a - numeric).abs() / scale;
            if rel >= result.max_rel_err {
                result.max_rel_err = rel;
                result.worst = Some((which, i, a, numeric));
            }
            result.probes += 1;
        }
    }
    Ok(result)
}

fn randn(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Fixed random weights that turn a tensor output into a scalar, so every
/// output element reaches the loss with a distinct sensitivity.
fn project<'t>(tape: &'t Tape<f64>, out: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(randn(&mut rng, &out.shape(), 1.0));
    Ok(out.mul(&w)?.sum())
}

#[derive(Clone, Debug, Serialize)]
pub struct OpReport {
    pub op: String,
    pub instances: usize,
    pub probes: usize,
    pub kinks: usize,
    pub max_rel_err: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.instances >= INSTANCES && self.probes > 0 && self.max_rel_err < TOLERANCE
    }
}

fn run_op<F, G>(name: &str, seed: u64, max_probes: usize, make_inputs: G, f: F) -> Result<OpReport>
where
    F: ScalarFn,
    G: Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OpReport {
        op: name.to_string(),
        instances: 0,
        probes: 0,
        kinks: 0,
        max_rel_err: 0.0,
    };
    for _ in 0..INSTANCES {
        let inputs = make_inputs(&mut rng);
        let r = check(&f, &inputs, max_probes, &mut rng)?;
        report.instances += 1;
        report.probes += r.probes;
        report.kinks += r.kinks;
        report.max_rel_err = report.max_rel_err.max(r.max_rel_err);
    }
    Ok(report)
}

/// Small model used by the whole-network check.
pub fn tiny_model_config() -> SANetConfig {
    SANetConfig {
        input_size: 16,
        in_channels: 3,
        trunk_channels: vec![4, 6, 8],
        branch_channels: 6,
        embed_dim_global: 4,
        embed_dim_part: 3,
        parts_per_branch: 2,
        num_classes: 3,
        stn_enabled: true,
    }
}

/// Runs every operation's check; one report per operation.
pub fn run_suite(seed: u64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    let s = |k: u64| seed.wrapping_mul(1000).wrapping_add(k);

    reports.push(run_op("matmul", s(1), 64, |r| vec![randn(r, &[4, 5], 1.0), randn(r, &[5, 3], 1.0)], |t, v| {
        project(t, v[0].matmul(&v[1])?, 11)
    })?);
    reports.push(run_op("linear", s(2), 64, |r| vec![randn(r, &[3, 4], 1.0), randn(r, &[4, 2], 1.0), randn(r, &[2], 1.0)], |t, v| {
        project(t, v[0].linear(&v[1], &v[2])?, 12)
    })?);
    reports.push(run_op(
        "conv2d",
        s(3),
        48,
        |r| vec![randn(r, &[2, 2, 5, 5], 1.0), randn(r, &[3, 2, 3, 3], 0.5), randn(r, &[3], 0.5)],
        |t, v| project(t, v[0].conv2d(&v[1], &v[2], 1, 1)?, 13),
    )?);
    reports.push(run_op(
        "conv2d_strided",
        s(4),
        48,
        |r| vec![randn(r, &[2, 2, 6, 6], 1.0), randn(r, &[3, 2, 3, 3], 0.5), randn(r, &[3], 0.5)],
        |t, v| project(t, v[0].conv2d(&v[1], &v[2], 2, 1)?, 14),
    )?);
    reports.push(run_op("relu", s(5), 64, |r| vec![randn(r, &[3, 7], 1.0)], |t, v| project(t, v[0].relu(), 15))?);
    reports.push(run_op("global_avg_pool", s(6), 64, |r| vec![randn(r, &[2, 3, 4, 4], 1.0)], |t, v| {
        project(t, v[0].global_avg_pool()?, 16)
    })?);
    reports.push(run_op("concat_last_axis", s(7), 64, |r| vec![randn(r, &[3, 2], 1.0), randn(r, &[3, 4], 1.0)], |t, v| {
        project(t, concat_last_axis(&[v[0], v[1]])?, 17)
    })?);
    reports.push(run_op("slice_spatial", s(8), 64, |r| vec![randn(r, &[2, 2, 4, 6], 1.0)], |t, v| {
        let top = v[0].slice_spatial(Axis::Height, false)?;
        let right = v[0].slice_spatial(Axis::Width, true)?;
        Ok(project(t, top, 18)?.add(&project(t, right, 19)?)?)
    })?);
    reports.push(run_op("spatial_strip", s(16), 64, |r| vec![randn(r, &[2, 2, 8, 4], 1.0)], |t, v| {
        let mut acc = project(t, v[0].spatial_strip(Axis::Height, 0, 4)?, 24)?;
        for k in 1..4 {
            acc = acc.add(&project(t, v[0].spatial_strip(Axis::Height, k, 4)?, 24 + k as u64)?)?;
        }
        Ok(acc.add(&project(t, v[0].spatial_strip(Axis::Width, 1, 2)?, 28)?)?)
    })?);
    reports.push(run_op("center_spatial", s(17), 64, |r| vec![randn(r, &[2, 3, 4, 5], 1.0)], |t, v| {
        project(t, v[0].center_spatial()?, 29)
    })?);
    reports.push(run_op("softmax_cross_entropy", s(9), 64, |r| vec![randn(r, &[4, 6], 2.0)], |_, v| {
        v[0].softmax_cross_entropy(&[0, 5, 2, 2])
    })?);
    reports.push(run_op("pairwise_distance", s(10), 64, |r| vec![randn(r, &[5, 3], 1.0)], |t, v| {
        project(t, v[0].pairwise_distance()?, 20)
    })?);
    reports.push(run_op("triplet_loss", s(11), 64, |r| vec![randn(r, &[8, 4], 1.0)], |_, v| {
        triplet_loss(&v[0], &[0, 0, 1, 1, 2, 2, 3, 3], 0.3)
    })?);
    reports.push(run_op("affine_grid", s(12), 64, |r| vec![randn(r, &[2, 6], 1.0)], |t, v| {
        project(t, affine_grid(&v[0], 3, 4)?, 21)
    })?);
    reports.push(run_op(
        "bilinear_sample",
        s(13),
        64,
        |r| {
            // Grid points strictly inside the source and off the pixel lattice.
            let grid = Tensor::from_fn(vec![2, 3, 3, 2], |_| r.gen_range(-0.9..0.9));
            vec![randn(r, &[2, 2, 5, 5], 1.0), grid]
        },
        |t, v| project(t, grid_sample(&v[0], &v[1])?, 22),
    )?);
    reports.push(run_op(
        "stn_forward",
        s(14),
        48,
        |r| {
            let mut theta = randn(r, &[2, 6], 0.15);
            for row in theta.data_mut().chunks_exact_mut(6) {
                row[0] += 1.0;
                row[4] += 1.0;
            }
            vec![randn(r, &[2, 3, 6, 6], 1.0), theta]
        },
        |t, v| {
            let grid = affine_grid(&v[1], 6, 6)?;
            project(t, grid_sample(&v[0], &grid)?, 23)
        },
    )?);
    reports.push(full_model_report(s(15))?);
    Ok(reports)
}

/// Whole network: total objective with respect to a random subset of the
/// weights, including the localisation network with non-identity output.
fn full_model_report(seed: u64) -> Result<OpReport> {
    let mut report = OpReport {
        op: "full_model".into(),
        instances: 0,
        probes: 0,
        kinks: 0,
        max_rel_err: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for inst in 0..INSTANCES {
        let cfg = tiny_model_config();
        let model: SANet<f64> = SANet::<f32>::new(cfg.clone(), seed + inst as u64)?.cast();
        // Move the localisation output off identity so its path is exercised.
        let mut model = model;
        let fc2 = model.params.get_mut("stn.loc.fc2.weight").expect("localisation weight");
        let shape = fc2.value.shape().to_vec();
        fc2.value = randn(&mut rng, &shape, 0.05);
        let images = Tensor::from_fn(vec![4, 3, cfg.input_size, cfg.input_size], |_| rng.gen_range(0.0..1.0));
        let labels = [0usize, 0, 1, 1];
        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        let mut picked: Vec<String> = ["stn.loc.conv1.weight", "trunk.conv0.weight"].map(String::from).to_vec();
        for i in rand::seq::index::sample(&mut rng, names.len(), 6) {
            if !picked.contains(&names[i]) {
                picked.push(names[i].clone());
            }
        }
        let inputs: Vec<Tensor<f64>> = picked.iter().map(|n| model.params.get(n).unwrap().value.clone()).collect();
        let r = check(
            |tape: &'_ Tape<f64>, vars: &[Var<'_, f64>]| {
                for (name, v) in picked.iter().zip(vars) {
                    tape.bind(name, *v)?;
                }
                let x = tape.constant(images.clone());
                let out = model.forward(tape, &x)?;
                Ok(total_loss(&out, &labels, 0.3)?.total)
            },
            &inputs,
            24,
            &mut rng,
        )?;
        report.probes += r.probes;
        report.kinks += r.kinks;
        report.max_rel_err = report.max_rel_err.max(r.max_rel_err);
        report.instances += 1;
    }
    Ok(report)
}
