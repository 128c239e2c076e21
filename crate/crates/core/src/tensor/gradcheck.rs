//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Mode, Result, Tensor, Var};

/// Worst mismatch found by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

const PROJECTION_SEED: u64 = 0x6a09_e667_f3bc_c908;

fn projection(len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED ^ len as u64);
    (0..len)
        .map(|_| {
            let mag = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

fn evaluate<F>(op: &F, mode: Mode, inputs: &[Tensor]) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    // Non-scalar outputs are reduced with fixed random weights; a plain sum
    // would hide errors in ops whose outputs sum to a constant (batch norm).
    let loss = if g.value(out).is_scalar() {
        out
    } else {
        let coef = projection(g.value(out).numel());
        g.dot(out, &coef)?
    };
    Ok((g, vars, loss))
}

/// Compares the tape's gradient against central differences for every element
/// of every input.
pub fn grad_check<F>(mode: Mode, op: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, loss) = evaluate(&op, mode, inputs)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .get(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for idx in 0..input.numel() {
            let orig = input.data()[idx];
            probe[which].data_mut()[idx] = orig + eps;
            let (gp, _, lp) = evaluate(&op, mode, &probe)?;
            let plus = gp.value(lp).item();
            probe[which].data_mut()[idx] = orig - eps;
            let (gm, _, lm) = evaluate(&op, mode, &probe)?;
            let minus = gm.value(lm).item();
            probe[which].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[which][idx], numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (which, idx);
            }
        }
    }
    Ok(report)
}

/// Result of checking one op over many random draws.
#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub threshold: f64,
    pub seeds: usize,
    /// Worst relative error over every seed.
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
    }
}

const EPS: f64 = 1e-3;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values with magnitude in `[0.1, 1)` and random sign, so no element sits
/// within `EPS` of a relu kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values spaced far more than `EPS` apart, in random order.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 1.0).collect();
    v.shuffle(rng);
    Tensor::new(shape.to_vec(), v).expect("shape matches")
}

type Case = (
    &'static str,
    f64,
    Mode,
    Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
    Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>,
);

fn cases() -> Vec<Case> {
    let bn_stats = |g: &mut Graph, v: &[Var]| {
        let (m, s) = (vec![0.0; 3], vec![1.0; 3]);
        g.batch_norm(
            v[0],
            v[1],
            v[2],
            super::RunningStats {
                mean: &m,
                var: &s,
                momentum: 0.1,
                epsilon: 1e-5,
                layer: None,
            },
        )
    };
    vec![
        (
            "conv2d",
            1e-4,
            Mode::Train,
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 1, 1)),
            Box::new(|r| {
                vec![
                    uniform(r, &[1, 2, 8, 8], -1.0, 1.0),
                    uniform(r, &[3, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                ]
            }),
        ),
        (
            "conv2d_stride2",
            1e-4,
            Mode::Train,
            Box::new(|g, v| g.conv2d(v[0], v[1], v[2], 2, 3)),
            Box::new(|r| {
                vec![
                    uniform(r, &[2, 2, 9, 9], -1.0, 1.0),
                    uniform(r, &[2, 2, 7, 7], -1.0, 1.0),
                    uniform(r, &[2], -1.0, 1.0),
                ]
            }),
        ),
        (
            "batch_norm",
            1e-3,
            Mode::Train,
            Box::new(bn_stats),
            Box::new(|r| {
                vec![
                    uniform(r, &[2, 3, 4, 4], -2.0, 2.0),
                    uniform(r, &[3], 0.5, 1.5),
                    uniform(r, &[3], -0.5, 0.5),
                ]
            }),
        ),
        (
            "batch_norm_eval",
            1e-4,
            Mode::Eval,
            Box::new(bn_stats),
            Box::new(|r| {
                vec![
                    uniform(r, &[2, 3, 4, 4], -2.0, 2.0),
                    uniform(r, &[3], 0.5, 1.5),
                    uniform(r, &[3], -0.5, 0.5),
                ]
            }),
        ),
        (
            "relu",
            1e-6,
            Mode::Train,
            Box::new(|g, v| Ok(g.relu(v[0]))),
            Box::new(|r| vec![away_from_zero(r, &[2, 3, 4])]),
        ),
        (
            "sigmoid",
            1e-4,
            Mode::Train,
            Box::new(|g, v| Ok(g.sigmoid(v[0]))),
            Box::new(|r| vec![uniform(r, &[2, 6], -4.0, 4.0)]),
        ),
        (
            "max_pool",
            1e-4,
            Mode::Train,
            Box::new(|g, v| g.max_pool(v[0], 2, 2)),
            Box::new(|r| vec![distinct(r, &[1, 2, 6, 6])]),
        ),
        (
            "global_avg_pool",
            1e-5,
            Mode::Train,
            Box::new(|g, v| g.global_avg_pool(v[0])),
            Box::new(|r| vec![uniform(r, &[2, 3, 5, 5], -1.0, 1.0)]),
        ),
        (
            "linear",
            1e-4,
            Mode::Train,
            Box::new(|g, v| g.linear(v[0], v[1], v[2])),
            Box::new(|r| {
                vec![
                    uniform(r, &[3, 5], -1.0, 1.0),
                    uniform(r, &[4, 5], -1.0, 1.0),
                    uniform(r, &[4], -1.0, 1.0),
                ]
            }),
        ),
        (
            "weighted_bce",
            1e-4,
            Mode::Train,
            Box::new(|g, v| {
                let t = Tensor::new(vec![2, 4], vec![1., 0., 0., 1., 1., 1., 0., 0.]).expect("2x4");
                g.weighted_bce(v[0], &t, &[0.5, 1.0, 1.5, 2.0])
            }),
            Box::new(|r| vec![uniform(r, &[2, 4], -3.0, 3.0)]),
        ),
        (
            "add_concat",
            1e-4,
            Mode::Train,
            Box::new(|g, v| {
                let s = g.add(v[0], v[1])?;
                g.concat(&[s, v[2]])
            }),
            Box::new(|r| {
                vec![
                    uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2, 2, 3, 3], -1.0, 1.0),
                    uniform(r, &[2, 1, 3, 3], -1.0, 1.0),
                ]
            }),
        ),
        (
            "chained_linear",
            1e-4,
            Mode::Train,
            Box::new(|g, v| {
                let h = g.linear(v[0], v[1], v[2])?;
                g.linear(h, v[3], v[4])
            }),
            Box::new(|r| {
                vec![
                    uniform(r, &[2, 4], -1.0, 1.0),
                    uniform(r, &[5, 4], -1.0, 1.0),
                    uniform(r, &[5], -1.0, 1.0),
                    uniform(r, &[3, 5], -1.0, 1.0),
                    uniform(r, &[3], -1.0, 1.0),
                ]
            }),
        ),
    ]
}

/// Checks every differentiable op on `seeds` random draws each.
pub fn op_suite(seeds: usize) -> Result<Vec<OpCheck>> {
    let mut out = Vec::new();
    for (op, threshold, mode, f, make) in cases() {
        let mut worst: f64 = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
            let report = grad_check(mode, &f, &make(&mut rng), EPS)?;
            worst = worst.max(report.max_rel_error);
        }
        out.push(OpCheck {
            op,
            threshold,
            seeds,
            max_rel_error: worst,
        });
    }
    Ok(out)
}
