use super::{Method, SolverConfig, SolverTrace, VectorField};
use crate::diffcore::Tensor;
use crate::{Error, Result};

/// One explicit step of size `h` from `(t, x)`.
pub fn fixed_step(
    method: Method,
    field: &dyn VectorField,
    t: f64,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    match method {
        Method::Euler => {
            let k1 = field.eval(x, t)?;
            x.axpy(h, &k1)
        }
        Method::Midpoint => {
            let k1 = field.eval(x, t)?;
            let xm = x.axpy(0.5 * h, &k1)?;
            let k2 = field.eval(&xm, t + 0.5 * h)?;
            x.axpy(h, &k2)
        }
        Method::Rk4 => {
            let k1 = field.eval(x, t)?;
            let k2 = field.eval(&x.axpy(0.5 * h, &k1)?, t + 0.5 * h)?;
            let k3 = field.eval(&x.axpy(0.5 * h, &k2)?, t + 0.5 * h)?;
            let k4 = field.eval(&x.axpy(h, &k3)?, t + h)?;
            let mut out = x.clone();
            let d = out.data_mut();
            for i in 0..d.len() {
                d[i] += h / 6.0
                    * (k1.data()[i] + 2.0 * k2.data()[i] + 2.0 * k3.data()[i] + k4.data()[i]);
            }
            Ok(out)
        }
        Method::Dopri5 => Err(Error::invalid("dopri5 is adaptive; use integrate_dopri5")),
    }
}

/// Grid `t0, t0+h, ..., t1` with the final step shortened when `h` does not
/// divide the span.
pub(crate) fn time_grid(t0: f64, t1: f64, h: f64) -> Vec<f64> {
    let n = (((t1 - t0) / h) - 1e-9).ceil().max(1.0) as usize;
    let mut g: Vec<f64> = (0..n).map(|i| t0 + i as f64 * h).collect();
    g.push(t1);
    g
}

/// Standard explicit stepping with Euler, midpoint or RK4.
pub fn integrate_fixed(
    field: &dyn VectorField,
    x0: &Tensor,
    config: &SolverConfig,
) -> Result<(Tensor, SolverTrace)> {
    config.validate()?;
    let per_step = config
        .method
        .evals_per_step()
        .ok_or_else(|| Error::invalid("integrate_fixed needs a fixed-step method"))?;
    let (t0, t1) = config.t_span;
    let grid = time_grid(t0, t1, config.step_size);
    let mut trace = SolverTrace::default();
    let mut x = x0.clone();
    trace.push(t0, &x, config.record_states);
    for w in grid.windows(2) {
        let (t, tn) = (w[0], w[1]);
        if trace.nfe + per_step > config.max_evals {
            return Err(Error::Solver {
                t,
                reason: format!("max_evals {} exceeded", config.max_evals),
                trace: Box::new(trace),
            });
        }
        x = fixed_step(config.method, field, t, &x, tn - t)?;
        trace.nfe += per_step;
        if !x.all_finite() {
            return Err(Error::Solver {
                t: tn,
                reason: "non-finite state".to_string(),
                trace: Box::new(trace),
            });
        }
        trace.push(tn, &x, config.record_states);
    }
    Ok((x, trace))
}
