//! Central finite-difference verification of the reverse pass.
//!
//! The oracle only calls `forward`; it never touches the backward code.

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Activation, DenseNet, TinyNetError};

/// Initial step. Richardson extrapolation keeps truncation negligible and
/// a wide step keeps rounding small; the step shrinks whenever a probe
/// flips a ReLU unit.
pub const FD_EPSILON: f64 = 1e-2;
const MIN_STEP: f64 = 1e-9;

/// Gradients below this magnitude are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compensated (Neumaier) sum.
fn neumaier_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for x in xs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    sum + comp
}

/// `L(plus) - L(minus)` for `L = sum_{rows, k} c_k * y_k`, differenced
/// output by output so the large common part of `L` cancels exactly.
fn loss_difference(plus: &Array2<f64>, minus: &Array2<f64>, c: &[f64]) -> f64 {
    neumaier_sum(
        plus.rows()
            .into_iter()
            .zip(minus.rows())
            .flat_map(|(p, m)| {
                p.iter()
                    .zip(m.iter())
                    .zip(c)
                    .map(|((a, b), w)| w * (a - b))
                    .collect::<Vec<_>>()
            }),
    )
}

/// Outputs at a probe point plus the on/off state of every ReLU unit.
struct Probe {
    y: Array2<f64>,
    pattern: Vec<bool>,
}

fn probe(net: &DenseNet, x: ArrayView2<f64>) -> Result<Probe, TinyNetError> {
    let cache = net.forward_batch(x)?;
    let pattern = net
        .layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| l.activation == Activation::Relu)
        .flat_map(|(l, _)| cache.layer_output(l).iter().map(|&v| v > 0.0).collect::<Vec<_>>())
        .collect();
    Ok(Probe {
        y: cache.output().clone(),
        pattern,
    })
}

/// Central differences at `h`, `h/2`, `h/4` combined by Richardson
/// extrapolation (truncation `O(h^6)`). `None` if any probe left the
/// linear piece of a ReLU that holds at `theta`.
fn extrapolate(
    eval: &mut impl FnMut(f64) -> Result<Probe, TinyNetError>,
    c: &[f64],
    h: f64,
    base: &[bool],
    strict: bool,
) -> Result<Option<f64>, TinyNetError> {
    let mut d = [0.0; 3];
    for (k, step) in [h, h / 2.0, h / 4.0].into_iter().enumerate() {
        let plus = eval(step)?;
        let minus = eval(-step)?;
        if strict && (plus.pattern != base || minus.pattern != base) {
            return Ok(None);
        }
        d[k] = loss_difference(&plus.y, &minus.y, c) / (2.0 * step);
    }
    let r1 = (4.0 * d[1] - d[0]) / 3.0;
    let r2 = (4.0 * d[2] - d[1]) / 3.0;
    Ok(Some((16.0 * r2 - r1) / 15.0))
}

/// Derivative of the weighted loss along one coordinate; `eval(h)` probes
/// the network with that coordinate shifted by `h`.
fn richardson(
    mut eval: impl FnMut(f64) -> Result<Probe, TinyNetError>,
    c: &[f64],
    eps: f64,
) -> Result<f64, TinyNetError> {
    let base = eval(0.0)?.pattern;
    let mut h = eps;
    while h >= MIN_STEP {
        if let Some(d) = extrapolate(&mut eval, c, h, &base, true)? {
            return Ok(d);
        }
        h /= 10.0;
    }
    // Sitting exactly on a kink: report the symmetric difference.
    Ok(extrapolate(&mut eval, c, MIN_STEP, &base, false)?.expect("non-strict"))
}

/// Finite-difference gradient of the weighted loss for every parameter,
/// flattened layer by layer (weights row-major, then biases).
pub fn numerical_param_grads(
    net: &DenseNet,
    x: ArrayView2<f64>,
    c: &[f64],
    eps: f64,
) -> Result<Vec<f64>, TinyNetError> {
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(net.param_count());
    for k in 0..net.layers().len() {
        let (rows, cols) = net.layers()[k].weights.dim();
        for idx in 0..rows * cols {
            let (r, col) = (idx / cols, idx % cols);
            let orig = net.layers()[k].weights[[r, col]];
            out.push(richardson(
                |h| {
                    probe.layers_mut()[k].weights[[r, col]] = orig + h;
                    let y = self::probe(&probe, x);
                    probe.layers_mut()[k].weights[[r, col]] = orig;
                    y
                },
                c,
                eps,
            )?);
        }
        for j in 0..net.layers()[k].biases.len() {
            let orig = net.layers()[k].biases[j];
            out.push(richardson(
                |h| {
                    probe.layers_mut()[k].biases[j] = orig + h;
                    let y = self::probe(&probe, x);
                    probe.layers_mut()[k].biases[j] = orig;
                    y
                },
                c,
                eps,
            )?);
        }
    }
    Ok(out)
}

/// Finite-difference gradient with respect to the inputs.
pub fn numerical_input_grads(
    net: &DenseNet,
    x: ArrayView2<f64>,
    c: &[f64],
    eps: f64,
) -> Result<Array2<f64>, TinyNetError> {
    let mut xp = x.to_owned();
    let mut out = Array2::zeros(x.raw_dim());
    for r in 0..x.nrows() {
        for col in 0..x.ncols() {
            let orig = x[[r, col]];
            out[[r, col]] = richardson(
                |h| {
                    xp[[r, col]] = orig + h;
                    let y = probe(net, xp.view());
                    xp[[r, col]] = orig;
                    y
                },
                c,
                eps,
            )?;
        }
    }
    Ok(out)
}

/// Max relative error of `backward_batch` against the oracle, over
/// parameter and input gradients.
pub fn check_net(net: &DenseNet, x: ArrayView2<f64>, c: &[f64]) -> Result<f64, TinyNetError> {
    let cache = net.forward_batch(x)?;
    let dy = Array2::from_shape_fn((x.nrows(), c.len()), |(_, k)| c[k]);
    let (grads, dx) = net.backward_batch(&cache, dy.view())?;
    let numeric = numerical_param_grads(net, x, c, FD_EPSILON)?;
    let numeric_dx = numerical_input_grads(net, x, c, FD_EPSILON)?;
    let worst_param = grads
        .iter_flat()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, *n))
        .fold(0.0, f64::max);
    let worst_input = dx
        .iter()
        .zip(numeric_dx.iter())
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max);
    Ok(worst_param.max(worst_input))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub cases: usize,
    pub tanh_cases: usize,
    pub max_rel_err: f64,
    pub max_rel_err_tanh: f64,
}

impl GradCheckReport {
    pub const MIXED_LIMIT: f64 = 1e-4;
    pub const TANH_LIMIT: f64 = 1e-6;

    pub fn passed(&self) -> bool {
        self.max_rel_err < Self::MIXED_LIMIT && self.max_rel_err_tanh < Self::TANH_LIMIT
    }
}

/// Random architecture with 1 to 3 layers of at most 64 units.
pub fn random_net(rng: &mut impl Rng, tanh_only: bool) -> Result<DenseNet, TinyNetError> {
    let n_layers = rng.random_range(1..=3);
    let mut sizes = vec![rng.random_range(1..=64)];
    for _ in 0..n_layers {
        sizes.push(rng.random_range(1..=64));
    }
    let acts: Vec<Activation> = (0..n_layers)
        .map(|_| {
            if tanh_only {
                Activation::Tanh
            } else {
                [Activation::Tanh, Activation::Relu, Activation::Linear][rng.random_range(0..3)]
            }
        })
        .collect();
    let mut net = DenseNet::init(&sizes, &acts, rng.random())?;
    // Nonzero biases so every code path carries signal.
    for l in net.layers_mut() {
        l.biases.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    }
    Ok(net)
}

/// Checks `cases` random networks; every other case is tanh-only.
pub fn run_suite(cases: usize, seed: u64) -> Result<GradCheckReport, TinyNetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        cases,
        tanh_cases: 0,
        max_rel_err: 0.0,
        max_rel_err_tanh: 0.0,
    };
    for case in 0..cases {
        let tanh_only = case % 2 == 0;
        let net = random_net(&mut rng, tanh_only)?;
        let rows = rng.random_range(1..=3);
        let x = Array2::from_shape_fn((rows, net.input_dim()), |_| rng.random_range(-1.0..1.0));
        let c: Vec<f64> = (0..net.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = check_net(&net, x.view(), &c)?;
        report.max_rel_err = report.max_rel_err.max(err);
        if tanh_only {
            report.tanh_cases += 1;
            report.max_rel_err_tanh = report.max_rel_err_tanh.max(err);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_layer_tanh_net_matches_finite_differences() {
        let net = DenseNet::init(
            &[5, 16, 16, 3],
            &[Activation::Tanh, Activation::Tanh, Activation::Tanh],
            17,
        )
        .unwrap();
        let x = Array2::from_shape_fn((2, 5), |(r, c)| 0.3 * r as f64 - 0.2 * c as f64 + 0.1);
        let err = check_net(&net, x.view(), &[0.7, -0.4, 0.9]).unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn small_suite_passes() {
        let r = run_suite(10, 3).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}
