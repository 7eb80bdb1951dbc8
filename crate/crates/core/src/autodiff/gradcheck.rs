use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing reverse-mode gradients to central finite differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat index)` of the coordinate with the largest error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when the function itself failed to evaluate.
    pub failure: Option<String>,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so coordinates whose true
    /// gradient is zero compare on an absolute scale.
    pub abs_floor: f64,
    /// Combine steps `h` and `h/2` by Richardson extrapolation, which
    /// cancels the `h²` term and allows a larger, less roundoff-prone step.
    pub richardson: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-5,
            abs_floor: 1e-10,
            richardson: false,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Checks every coordinate of a single-input scalar function.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, step: f64, tolerance: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = (0..point.numel()).map(|i| (0, i)).collect();
    let opts = GradCheckOptions {
        step,
        tolerance,
        ..Default::default()
    };
    grad_check_multi(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(point),
        &coords,
        opts,
    )
}

/// Checks the listed `(input, index)` coordinates of a multi-input function.
pub fn grad_check_multi<F>(
    f: F,
    points: &[Tensor<f64>],
    coords: &[(usize, usize)],
    opts: GradCheckOptions,
) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance: opts.tolerance,
        passed: false,
        failure: None,
    };
    match run_check(&f, points, coords, opts, &mut report) {
        Ok(()) => report.passed = report.max_rel_error <= opts.tolerance,
        Err(e) => report.failure = Some(e.to_string()),
    }
    report
}

fn evaluate<F>(f: &F, points: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.item(out))
}

fn run_check<F>(
    f: &F,
    points: &[Tensor<f64>],
    coords: &[(usize, usize)],
    opts: GradCheckOptions,
    report: &mut GradCheckReport,
) -> Result<()>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = points
        .iter()
        .map(|p| g.leaf(p.clone().with_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut work: Vec<Tensor<f64>> = points.to_vec();
    for &(input, idx) in coords {
        let analytic = grads.get(vars[input]).map_or(0.0, |gr| gr[idx]);
        let mut central = |h: f64| -> Result<f64> {
            let x0 = work[input].data()[idx];
            work[input].data_mut()[idx] = x0 + h;
            let up = evaluate(f, &work)?;
            work[input].data_mut()[idx] = x0 - h;
            let down = evaluate(f, &work)?;
            work[input].data_mut()[idx] = x0;
            Ok((up - down) / (2.0 * h))
        };
        let numeric = if opts.richardson {
            let coarse = central(opts.step)?;
            (4.0 * central(opts.step / 2.0)? - coarse) / 3.0
        } else {
            central(opts.step)?
        };
        let err = relative_error(analytic, numeric, opts.abs_floor);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = Some((input, idx));
        }
    }
    Ok(())
}
