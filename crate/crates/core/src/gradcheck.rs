//! Central finite-difference verification of analytic gradients.
//!
//! The output of the function under test is projected onto fixed random
//! weights to get a scalar, so every output element contributes to the
//! checked gradient. Coordinates of each input and parameter tensor are
//! sampled (all of them when the tensor is small) and perturbed by `±h`.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::nn::{Graph, Mode, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates checked per tensor; tensors at most this large are checked exhaustively.
    pub coords_per_tensor: usize,
    /// Magnitude floor of the relative-error denominator, relative to the
    /// projected output magnitude (at least `floor` in absolute terms).
    pub floor: f64,
    /// Coordinates whose error exceeds this are re-probed with steps `10h`, `h/10`
    /// and `h/100`; the best agreement is kept. A kink of a piecewise-linear
    /// activation inside `[x-h, x+h]` corrupts one step size, whereas a wrong
    /// analytic gradient disagrees at every step.
    pub reprobe_above: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_tensor: 48,
            floor: 1e-6,
            reprobe_above: 1e-6,
            seed: 0x5eed,
        }
    }
}

/// Worst discrepancy observed for one tensor.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub evaluations: usize,
}

impl GradCheckReport {
    fn push(&mut self, t: TensorCheck) {
        self.max_rel_err = self.max_rel_err.max(t.max_rel_err);
        self.tensors.push(t);
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks gradients of `forward` w.r.t. every input and every trainable
/// parameter in `store`. The forward runs in training mode.
pub fn check_module<F>(
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    forward: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut inputs: Vec<Tensor<f64>> = inputs.to_vec();

    // analytic pass
    let (projection, input_grads, param_grads) = {
        let mut g = Graph::new(store, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.tape.leaf(t.clone())).collect();
        let out = forward(&mut g, &vars)?;
        let shape = g.tape.shape(out);
        let projection = Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
        let root = g.tape.dot(out, projection.clone())?;
        let grads = g.tape.backward(root);
        let input_grads: Vec<Tensor<f64>> = vars
            .iter()
            .zip(&inputs)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let param_grads = g.param_grads(&grads);
        (projection, input_grads, param_grads)
    };

    let eval = |store: &mut ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store, Mode::Train);
        let vars: Vec<Var> = inputs.iter().map(|t| g.tape.constant(t.clone())).collect();
        let out = forward(&mut g, &vars)?;
        let root = g.tape.dot(out, projection.clone())?;
        Ok(g.tape.value(root).data()[0])
    };

    let mut report = GradCheckReport::default();
    let floor = opts.floor * eval(store, &inputs)?.abs().max(1.0);
    for i in 0..inputs.len() {
        let coords = pick(&mut rng, inputs[i].len(), opts.coords_per_tensor);
        let mut tc = TensorCheck {
            name: alloc::format!("input{i}"),
            checked: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for j in coords {
            let orig = inputs[i].data()[j];
            let analytic = input_grads[i].data()[j];
            let (abs, rel) = probe(opts, floor, analytic, &mut report.evaluations, |x| {
                inputs[i].data_mut()[j] = x;
                let f = eval(store, &inputs);
                inputs[i].data_mut()[j] = orig;
                f
            }, orig)?;
            tc.max_abs_err = tc.max_abs_err.max(abs);
            tc.max_rel_err = tc.max_rel_err.max(rel);
        }
        report.push(tc);
    }

    for (id, grad) in param_grads {
        let coords = pick(&mut rng, grad.len(), opts.coords_per_tensor);
        let mut tc = TensorCheck {
            name: store.name(id).into(),
            checked: coords.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for j in coords {
            let orig = store.value(id).data()[j];
            let analytic = grad.data()[j];
            let (abs, rel) = probe(opts, floor, analytic, &mut report.evaluations, |x| {
                store.value_mut(id).data_mut()[j] = x;
                let f = eval(store, &inputs);
                store.value_mut(id).data_mut()[j] = orig;
                f
            }, orig)?;
            tc.max_abs_err = tc.max_abs_err.max(abs);
            tc.max_rel_err = tc.max_rel_err.max(rel);
        }
        report.push(tc);
    }
    Ok(report)
}

/// Central difference of `f` around `x0`, returning `(abs, rel)` error
/// against `analytic`.
fn probe<F>(
    opts: &GradCheckOptions,
    floor: f64,
    analytic: f64,
    evaluations: &mut usize,
    mut f: F,
    x0: f64,
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let mut best = (f64::INFINITY, f64::INFINITY);
    for (k, h) in [opts.step, opts.step * 10.0, opts.step / 10.0, opts.step / 100.0].into_iter().enumerate() {
        if k > 0 && best.1 <= opts.reprobe_above {
            break;
        }
        let fp = f(x0 + h)?;
        let fm = f(x0 - h)?;
        *evaluations += 2;
        let numeric = (fp - fm) / (2.0 * h);
        let rel = relative_error(analytic, numeric, floor);
        if rel < best.1 {
            best = ((analytic - numeric).abs(), rel);
        }
    }
    Ok(best)
}

/// [`check_module`] for parameter-free tape expressions.
pub fn check_tape_gradients<F>(
    inputs: &[Tensor<f64>],
    build: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    check_module(&mut store, inputs, |g, v| build(&mut g.tape, v), opts)
}

fn pick(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, k).into_vec();
        v.sort_unstable();
        v
    }
}
