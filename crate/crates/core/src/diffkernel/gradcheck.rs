use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Array, KernelError, Tape, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Cap on coordinates probed per input; `None` probes all of them.
    pub max_coords: Option<usize>,
    /// Drives coordinate sampling when `max_coords` applies.
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst `(input, coordinate)`.
    pub worst: Option<(usize, usize)>,
    pub per_input: Vec<f64>,
    pub coords_checked: usize,
}

/// Max over coordinates of `|analytic - fd| / max(1, |fd|)` for a scalar
/// function of one array.
pub fn check_gradients<F>(f: F, point: &Array, h: f64) -> Result<f64, KernelError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, KernelError>,
{
    let opts = GradCheckOptions {
        h,
        ..Default::default()
    };
    let report = check_gradients_multi(|t, v| f(t, v[0]), std::slice::from_ref(point), &opts)?;
    Ok(report.max_rel_error)
}

/// Central-difference audit of a scalar function of several arrays.
///
/// Stop-gradient nodes are frozen at their values from the unperturbed
/// evaluation, so the oracle differentiates exactly the function whose
/// detached branches are constants.
pub fn check_gradients_multi<F>(
    f: F,
    points: &[Array],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport, KernelError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, KernelError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let frozen = tape.stop_gradient_values();
    let analytic: Vec<Array> = vars
        .iter()
        .zip(points)
        .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
        .collect();
    drop(tape);

    let eval = |perturbed: &[Array]| -> Result<f64, KernelError> {
        let mut t = Tape::with_frozen(frozen.clone());
        let vs: Vec<Var> = perturbed.iter().map(|p| t.param(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_input: vec![0.0; points.len()],
        coords_checked: 0,
    };
    let mut work: Vec<Array> = points.to_vec();
    for (input, point) in points.iter().enumerate() {
        let coords = pick_coords(&analytic[input], opts.max_coords, &mut rng);
        for k in coords {
            let x0 = point.data()[k];
            work[input].data_mut()[k] = x0 + opts.h;
            let fp = eval(&work)?;
            work[input].data_mut()[k] = x0 - opts.h;
            let fm = eval(&work)?;
            work[input].data_mut()[k] = x0;
            let fd = (fp - fm) / (2.0 * opts.h);
            let err = (analytic[input].data()[k] - fd).abs() / fd.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.per_input[input] {
                report.per_input[input] = err;
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((input, k));
                }
            }
        }
    }
    Ok(report)
}

/// Half the budget goes to coordinates with nonzero analytic gradient (so
/// sparse adjoints such as hash tables are actually exercised), the rest is
/// uniform.
fn pick_coords(grad: &Array, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = grad.len();
    let Some(max) = max.filter(|&m| m < n) else {
        return (0..n).collect();
    };
    let nonzero: Vec<usize> = (0..n).filter(|&i| grad.data()[i] != 0.0).collect();
    let take_nz = (max / 2).min(nonzero.len());
    let mut coords: Vec<usize> = sample(rng, nonzero.len(), take_nz)
        .into_iter()
        .map(|i| nonzero[i])
        .collect();
    coords.extend(sample(rng, n, max - take_nz));
    coords.sort_unstable();
    coords.dedup();
    coords
}
