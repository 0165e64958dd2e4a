//! Central finite-difference gradient checking.
//!
//! Every differentiable op in this crate is validated against `(f(x+h) -
//! f(x-h)) / 2h` with `h = 1e-5` in f64. Relative errors use a unit floor in
//! the denominator so near-zero gradients are compared absolutely.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub h: f64,
    /// Inputs at or below this element count are swept exhaustively.
    pub exhaustive_limit: usize,
    /// Coordinates sampled per larger input.
    pub sampled_coords: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            exhaustive_limit: 64,
            sampled_coords: 8,
            seed: 0x9e3779b9,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub input: usize,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    /// Coordinate, analytic and numeric value at the worst coordinate.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() <= self.tol
    }
}

/// Relative error with a unit floor in the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Checks reverse-mode gradients of a scalar objective against central finite
/// differences. `f` must rebuild the computation from the given leaves; it is
/// invoked once for the analytic pass and twice per checked coordinate.
pub fn grad_check<F>(
    f: &F,
    inputs: &[Tensor<f64>],
    tol: f64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var + ?Sized,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect();
    let out = f(&mut tape, &vars);
    if tape.value(out).numel() != 1 {
        return Err(Error::NonScalarObjective {
            shape: tape.value(out).shape().to_vec(),
        });
    }
    let grads = tape.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            grads
                .wrt(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let objective = |points: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = points
            .iter()
            .map(|t| tape.leaf(t.clone(), false))
            .collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let numel = input.numel();
        let coords: Vec<usize> = if numel <= cfg.exhaustive_limit {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, cfg.sampled_coords.min(numel)).into_vec()
        };
        let mut worst = (0usize, 0.0, 0.0);
        let mut max_err = 0.0f64;
        for &c in &coords {
            let orig = work[i].data()[c];
            work[i].data_mut()[c] = orig + cfg.h;
            let fp = objective(&work);
            work[i].data_mut()[c] = orig - cfg.h;
            let fm = objective(&work);
            work[i].data_mut()[c] = orig;
            let fd = (fp - fm) / (2.0 * cfg.h);
            let ad = analytic[i].data()[c];
            let err = rel_err(ad, fd);
            if err > max_err {
                max_err = err;
                worst = (c, ad, fd);
            }
        }
        reports.push(InputReport {
            input: i,
            coords_checked: coords.len(),
            max_rel_err: max_err,
            worst,
        });
    }
    Ok(GradCheckReport {
        inputs: reports,
        tol,
    })
}

/// Deterministic uniform tensor in `[-1, 1)` for test fixtures.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(shape, data)
}

/// Finite-difference reports for every differentiable primitive, evaluated on
/// small random shapes. Shared by the unit tests and the acceptance suite.
pub fn primitive_grad_suite(tol: f64) -> Vec<(String, GradCheckReport)> {
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out: Vec<(String, GradCheckReport)> = Vec::new();

    // Applies a fixed random cotangent so backward closures are exercised
    // with a non-uniform upstream gradient.
    fn weighted<E: Elem>(tape: &mut Tape<E>, y: Var, seed: u64) -> Var {
        let shape = tape.value(y).shape().to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel: usize = shape.iter().product();
        let w = Tensor::from_vec(
            &shape,
            (0..numel)
                .map(|_| E::from_f64(rng.gen_range(-1.0..1.0)))
                .collect(),
        );
        let wv = tape.constant(w);
        let prod = tape.mul(y, wv);
        tape.sum_all(prod)
    }

    let mut check = |name: &str,
                     inputs: Vec<Tensor<f64>>,
                     f: Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>| {
        let report = grad_check(&*f, &inputs, tol, &cfg).expect("suite objective is scalar");
        out.push((name.to_string(), report));
    };

    check(
        "add",
        vec![random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.add(v[0], v[1]);
            weighted(t, y, 1)
        }),
    );
    check(
        "sub",
        vec![random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.sub(v[0], v[1]);
            weighted(t, y, 2)
        }),
    );
    check(
        "mul",
        vec![random_tensor(&mut rng, &[2, 5]), random_tensor(&mut rng, &[2, 5])],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[1]);
            weighted(t, y, 3)
        }),
    );
    check(
        "scale_add_scalar_neg",
        vec![random_tensor(&mut rng, &[7])],
        Box::new(|t, v| {
            let y = t.scale(v[0], -1.7);
            let y = t.add_scalar(y, 0.3);
            let y = t.neg(y);
            weighted(t, y, 4)
        }),
    );
    check(
        "matmul",
        vec![random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[4, 2])],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1]);
            weighted(t, y, 5)
        }),
    );
    check(
        "matmul_nt",
        vec![random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[5, 4])],
        Box::new(|t, v| {
            let y = t.matmul_nt(v[0], v[1]);
            weighted(t, y, 6)
        }),
    );
    check(
        "bmm",
        vec![random_tensor(&mut rng, &[2, 3, 4]), random_tensor(&mut rng, &[2, 4, 2])],
        Box::new(|t, v| {
            let y = t.bmm(v[0], v[1]);
            weighted(t, y, 7)
        }),
    );
    check(
        "bmm_nt",
        vec![random_tensor(&mut rng, &[2, 3, 4]), random_tensor(&mut rng, &[2, 5, 4])],
        Box::new(|t, v| {
            let y = t.bmm_nt(v[0], v[1]);
            weighted(t, y, 8)
        }),
    );
    check(
        "add_bias",
        vec![random_tensor(&mut rng, &[3, 4]), random_tensor(&mut rng, &[4])],
        Box::new(|t, v| {
            let y = t.add_bias(v[0], v[1]);
            weighted(t, y, 9)
        }),
    );
    check(
        "add_broadcast0",
        vec![random_tensor(&mut rng, &[3, 2, 4]), random_tensor(&mut rng, &[2, 4])],
        Box::new(|t, v| {
            let y = t.add_broadcast0(v[0], v[1]);
            weighted(t, y, 10)
        }),
    );
    check(
        "tile0",
        vec![random_tensor(&mut rng, &[2, 3])],
        Box::new(|t, v| {
            let y = t.tile0(v[0], 4);
            weighted(t, y, 11)
        }),
    );
    check(
        "concat0",
        vec![random_tensor(&mut rng, &[2, 3]), random_tensor(&mut rng, &[4, 3])],
        Box::new(|t, v| {
            let y = t.concat0(&[v[0], v[1]]);
            weighted(t, y, 12)
        }),
    );
    check(
        "concat1",
        vec![random_tensor(&mut rng, &[2, 3, 4]), random_tensor(&mut rng, &[2, 1, 4])],
        Box::new(|t, v| {
            let y = t.concat1(&[v[0], v[1]]);
            weighted(t, y, 13)
        }),
    );
    check(
        "concat_last",
        vec![random_tensor(&mut rng, &[3, 2]), random_tensor(&mut rng, &[3, 5])],
        Box::new(|t, v| {
            let y = t.concat_last(&[v[0], v[1]]);
            weighted(t, y, 14)
        }),
    );
    check(
        "slice_last",
        vec![random_tensor(&mut rng, &[3, 6])],
        Box::new(|t, v| {
            let y = t.slice_last(v[0], 1, 3);
            weighted(t, y, 15)
        }),
    );
    check(
        "slice0",
        vec![random_tensor(&mut rng, &[5, 3])],
        Box::new(|t, v| {
            let y = t.slice0(v[0], 1, 2);
            weighted(t, y, 16)
        }),
    );
    check(
        "gather0_with_repeats",
        vec![random_tensor(&mut rng, &[4, 3])],
        Box::new(|t, v| {
            let y = t.gather0(v[0], vec![0, 2, 2, 3, 0]);
            weighted(t, y, 17)
        }),
    );
    check(
        "select2",
        vec![random_tensor(&mut rng, &[3, 4])],
        Box::new(|t, v| {
            let y = t.select2(v[0], 2, 1);
            weighted(t, y, 18)
        }),
    );
    check(
        "reshape",
        vec![random_tensor(&mut rng, &[2, 6])],
        Box::new(|t, v| {
            let y = t.reshape(v[0], &[3, 4]);
            weighted(t, y, 19)
        }),
    );
    check(
        "softmax_last",
        vec![random_tensor(&mut rng, &[3, 5])],
        Box::new(|t, v| {
            let y = t.softmax_last(v[0]);
            weighted(t, y, 20)
        }),
    );
    check(
        "log_softmax_last",
        vec![random_tensor(&mut rng, &[3, 5])],
        Box::new(|t, v| {
            let y = t.log_softmax_last(v[0]);
            weighted(t, y, 21)
        }),
    );
    check(
        "layer_norm",
        vec![
            random_tensor(&mut rng, &[3, 6]),
            random_tensor(&mut rng, &[6]),
            random_tensor(&mut rng, &[6]),
        ],
        Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            weighted(t, y, 22)
        }),
    );
    check(
        "gelu",
        vec![random_tensor(&mut rng, &[4, 3])],
        Box::new(|t, v| {
            let y = t.gelu(v[0]);
            weighted(t, y, 23)
        }),
    );
    check(
        "sigmoid",
        vec![random_tensor(&mut rng, &[4, 3])],
        Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            weighted(t, y, 24)
        }),
    );
    check(
        "tanh",
        vec![random_tensor(&mut rng, &[4, 3])],
        Box::new(|t, v| {
            let y = t.tanh(v[0]);
            weighted(t, y, 25)
        }),
    );
    check(
        "logsumexp",
        vec![
            random_tensor(&mut rng, &[1]),
            random_tensor(&mut rng, &[1]),
            random_tensor(&mut rng, &[1]),
        ],
        Box::new(|t, v| {
            let y = t.logsumexp(&[v[0], v[1], v[2]]);
            weighted(t, y, 26)
        }),
    );
    check(
        "maxpool0_k2",
        vec![random_tensor(&mut rng, &[6, 3])],
        Box::new(|t, v| {
            let y = t.maxpool0_k2(v[0]);
            weighted(t, y, 27)
        }),
    );
    check(
        "sum_all",
        vec![random_tensor(&mut rng, &[3, 3])],
        Box::new(|t, v| t.sum_all(v[0])),
    );

    out
}
