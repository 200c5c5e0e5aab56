use super::{SolverConfig, SolverTrace, VectorField};
use crate::diffcore::Tensor;
use crate::{Error, Result};

const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
/// 5th-order minus embedded 4th-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

const SAFETY: f64 = 0.9;
const BETA: f64 = 0.04;
const MIN_SCALE: f64 = 0.2;
const MAX_SCALE: f64 = 5.0;

fn combo(x: &Tensor, h: f64, coeffs: &[f64], ks: &[Tensor]) -> Tensor {
    let mut out = x.clone();
    let d = out.data_mut();
    for (c, k) in coeffs.iter().zip(ks) {
        if *c == 0.0 {
            continue;
        }
        for (o, v) in d.iter_mut().zip(k.data()) {
            *o += h * c * v;
        }
    }
    out
}

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.map(|a| a * a).sum::<f64>() / n.max(1) as f64).sqrt()
}

/// Continuous extension over one accepted step.
struct Dense {
    t0: f64,
    h: f64,
    r: [Vec<f64>; 5],
    shape: Vec<usize>,
}

impl Dense {
    fn new(t0: f64, h: f64, y0: &Tensor, y1: &Tensor, k: &[Tensor]) -> Dense {
        let n = y0.len();
        let mut r = [
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
            vec![0.0; n],
        ];
        for i in 0..n {
            let y0i = y0.data()[i];
            let dy = y1.data()[i] - y0i;
            let bspl = h * k[0].data()[i] - dy;
            r[0][i] = y0i;
            r[1][i] = dy;
            r[2][i] = bspl;
            r[3][i] = dy - h * k[6].data()[i] - bspl;
            r[4][i] = h * (0..7).map(|j| D[j] * k[j].data()[i]).sum::<f64>();
        }
        Dense {
            t0,
            h,
            r,
            shape: y0.shape().to_vec(),
        }
    }

    fn at(&self, t: f64) -> Tensor {
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        let data = (0..self.r[0].len())
            .map(|i| {
                let r = |j: usize| self.r[j][i];
                r(0) + th * (r(1) + th1 * (r(2) + th * (r(3) + th1 * r(4))))
            })
            .collect();
        Tensor::new(self.shape.clone(), data).expect("dense output shape")
    }
}

/// Adaptive Dormand–Prince 5(4) with PI step control.
pub fn integrate_dopri5(
    field: &dyn VectorField,
    x0: &Tensor,
    config: &SolverConfig,
) -> Result<(Tensor, SolverTrace)> {
    let (x, trace, _) = run(field, x0, config, &[])?;
    Ok((x, trace))
}

/// As [`integrate_dopri5`], also returning the interpolated state at each
/// query time (sorted, inside the span).
pub fn integrate_dopri5_dense(
    field: &dyn VectorField,
    x0: &Tensor,
    config: &SolverConfig,
    query: &[f64],
) -> Result<(Tensor, SolverTrace, Vec<Tensor>)> {
    let (t0, t1) = config.t_span;
    if query.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::invalid("dense output times must be sorted"));
    }
    if query.iter().any(|&q| q < t0 || q > t1) {
        return Err(Error::invalid(format!(
            "dense output times must lie in {:?}",
            config.t_span
        )));
    }
    run(field, x0, config, query)
}

fn run(
    field: &dyn VectorField,
    x0: &Tensor,
    config: &SolverConfig,
    query: &[f64],
) -> Result<(Tensor, SolverTrace, Vec<Tensor>)> {
    config.validate()?;
    let (t0, t1) = config.t_span;
    let n = x0.len();
    let (atol, rtol) = (config.atol, config.rtol);
    let mut trace = SolverTrace::default();
    let mut dense_out = Vec::with_capacity(query.len());
    let mut qi = 0;
    while qi < query.len() && query[qi] <= t0 {
        dense_out.push(x0.clone());
        qi += 1;
    }

    macro_rules! fail {
        ($t:expr, $reason:expr) => {
            return Err(Error::Solver {
                t: $t,
                reason: $reason,
                trace: Box::new(trace),
            })
        };
    }
    macro_rules! eval {
        ($x:expr, $t:expr) => {{
            if trace.nfe >= config.max_evals {
                fail!($t, format!("max_evals {} exceeded", config.max_evals));
            }
            trace.nfe += 1;
            let k = field.eval($x, $t)?;
            if !k.all_finite() {
                fail!($t, "non-finite derivative".to_string());
            }
            k
        }};
    }

    let mut x = x0.clone();
    let mut t = t0;
    trace.push(t, &x, config.record_states);
    let mut k1 = eval!(&x, t);

    // initial step size heuristic
    let sc: Vec<f64> = x.data().iter().map(|v| atol + rtol * v.abs()).collect();
    let d0 = rms(x.data().iter().zip(&sc).map(|(v, s)| v / s), n);
    let d1 = rms(k1.data().iter().zip(&sc).map(|(v, s)| v / s), n);
    let h0 = if d0 < 1e-5 || d1 < 1e-5 {
        1e-6
    } else {
        0.01 * d0 / d1
    };
    let h0 = h0.min(t1 - t0);
    let x1 = x.axpy(h0, &k1)?;
    let f1 = eval!(&x1, t + h0);
    let d2 = rms(
        f1.data()
            .iter()
            .zip(k1.data())
            .zip(&sc)
            .map(|((a, b), s)| (a - b) / s),
        n,
    ) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    let mut h = (100.0 * h0).min(h1).min(t1 - t0);

    let mut fac_old = 1e-4_f64;
    let mut last_rejected = false;
    while t < t1 {
        if t + h >= t1 || t + 1.0001 * h >= t1 {
            h = t1 - t;
        }
        if h <= 1e-14 * t.abs().max(1.0) {
            fail!(t, format!("step size underflow (h = {h:e})"));
        }
        let mut ks = Vec::with_capacity(7);
        ks.push(k1.clone());
        for (s, a) in [&A2[..], &A3, &A4, &A5, &A6].iter().enumerate() {
            let xs = combo(&x, h, a, &ks);
            let k = eval!(&xs, t + C[s + 1] * h);
            ks.push(k);
        }
        let x5 = combo(&x, h, &B, &ks);
        let k7 = eval!(&x5, t + h);
        ks.push(k7);

        let err = rms(
            (0..n).map(|i| {
                let e: f64 = h * (0..7).map(|j| E[j] * ks[j].data()[i]).sum::<f64>();
                let s = atol + rtol * x.data()[i].abs().max(x5.data()[i].abs());
                e / s
            }),
            n,
        );
        if !err.is_finite() {
            fail!(t, "non-finite error estimate".to_string());
        }
        let expo = 0.2 - 0.75 * BETA;
        if err <= 1.0 {
            let mut scale = if err == 0.0 {
                MAX_SCALE
            } else {
                (SAFETY * err.powf(-expo) * fac_old.powf(BETA)).clamp(MIN_SCALE, MAX_SCALE)
            };
            if last_rejected {
                scale = scale.min(1.0);
            }
            let t_new = if h == t1 - t { t1 } else { t + h };
            if qi < query.len() && query[qi] <= t_new {
                let dense = Dense::new(t, h, &x, &x5, &ks);
                while qi < query.len() && query[qi] <= t_new {
                    dense_out.push(if query[qi] == t_new {
                        x5.clone()
                    } else {
                        dense.at(query[qi])
                    });
                    qi += 1;
                }
            }
            fac_old = err.max(1e-4);
            last_rejected = false;
            t = t_new;
            x = x5;
            k1 = ks.pop().expect("seven stages");
            trace.push(t, &x, config.record_states);
            h *= scale;
        } else {
            trace.rejected += 1;
            last_rejected = true;
            h *= (SAFETY * err.powf(-expo)).clamp(MIN_SCALE, 1.0);
        }
    }
    Ok((x, trace, dense_out))
}
