//! Reference checks for the tape: central finite differences and a naive
//! convolution. These only evaluate forward values, so they stay independent
//! of the backward rules they are used to validate.

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compares backward gradients of `f` against central differences with step
/// `h`. Every input is recorded as a parameter. The relative error of each
/// entry is `|a - n| / max(|a|, |n|, 1e-2)` and must not exceed `rel_tol`.
///
/// Returns the worst relative error seen, or the first offending entry.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, rel_tol: f64, f: F) -> Result<f64, GradMismatch>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t)).collect();
        let out = f(&mut tape, &vars).expect("forward evaluation");
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&mut tape, &vars).expect("forward evaluation");
    tape.backward(out).expect("scalar output");

    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (input, var) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[input].len()]);
        for index in 0..inputs[input].len() {
            let orig = inputs[input].data()[index];
            probe[input].data_mut()[index] = orig + h;
            let plus = eval(&probe);
            probe[input].data_mut()[index] = orig - h;
            let minus = eval(&probe);
            probe[input].data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[index];
            let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-2);
            if !(rel_error <= rel_tol) {
                return Err(GradMismatch {
                    input,
                    index,
                    analytic: a,
                    numeric,
                    rel_error,
                });
            }
            worst = worst.max(rel_error);
        }
    }
    Ok(worst)
}

/// Direct six-loop cross-correlation, used as the oracle for `Tape::conv2d`.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    for b in 0..n {
        for co in 0..cout {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for i in 0..kh {
                            for j in 0..kw {
                                let ih = (oh * stride + i) as isize - pad as isize;
                                let iw = (ow * stride + j) as isize - pad as isize;
                                if ih < 0 || iw < 0 || ih as usize >= h || iw as usize >= wd {
                                    continue;
                                }
                                acc += x.at(&[b, ci, ih as usize, iw as usize]) * w.at(&[co, ci, i, j]);
                            }
                        }
                    }
                    out.set(&[b, co, oh, ow], acc);
                }
            }
        }
    }
    out
}
