//! Single-layer GRU cell with cached forward and analytic backward step.
//!
//! ```text
//! z_t = σ(W_z [h_{t-1}, x_t] + b_z)
//! r_t = σ(W_r [h_{t-1}, x_t] + b_r)
//! c_t = tanh(W_h [r_t ⊙ h_{t-1}, x_t] + b_h)
//! h_t = (1 − z_t) ⊙ h_{t-1} + z_t ⊙ c_t
//! ```

use crate::error::{Error, Result};
use crate::math::{sigmoid, Matrix};
use crate::rng::Rng;

/// Gate weights of one GRU layer. Every gate matrix maps the concatenation
/// `[h, x]` (hidden first) to `hidden` outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GruParams {
    pub w_z: Matrix,
    pub b_z: Matrix,
    pub w_r: Matrix,
    pub b_r: Matrix,
    pub w_h: Matrix,
    pub b_h: Matrix,
}

impl GruParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = Matrix::zeros(hidden, hidden + input);
        let b = Matrix::zeros(hidden, 1);
        Self {
            w_z: w.clone(),
            b_z: b.clone(),
            w_r: w.clone(),
            b_r: b.clone(),
            w_h: w,
            b_h: b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_z.rows()
    }

    pub fn input(&self) -> usize {
        self.w_z.cols() - self.w_z.rows()
    }

    pub(crate) fn init(hidden: usize, input: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(hidden, input);
        let bound = 1.0 / ((hidden + input) as f64).sqrt();
        for m in [
            &mut p.w_z, &mut p.b_z, &mut p.w_r, &mut p.b_r, &mut p.w_h, &mut p.b_h,
        ] {
            m.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = rng.uniform_range(-bound, bound));
        }
        p
    }

    pub(crate) fn tensors(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("w_z", &self.w_z),
            ("b_z", &self.b_z),
            ("w_r", &self.w_r),
            ("b_r", &self.b_r),
            ("w_h", &self.w_h),
            ("b_h", &self.b_h),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 6] {
        [
            ("w_z", &mut self.w_z),
            ("b_z", &mut self.b_z),
            ("w_r", &mut self.w_r),
            ("b_r", &mut self.b_r),
            ("w_h", &mut self.w_h),
            ("b_h", &mut self.b_h),
        ]
    }
}

/// Activations of one step, kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GruStep {
    /// `[h_{t-1}, x_t]`
    pub concat: Vec<f64>,
    /// `[r_t ⊙ h_{t-1}, x_t]`
    pub reset_concat: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
}

impl GruStep {
    pub fn h_prev(&self) -> &[f64] {
        &self.concat[..self.h.len()]
    }
}

/// One GRU step, returning the new state only.
pub fn gru_cell_forward(x: &[f64], h_prev: &[f64], gates: &GruParams) -> Result<Vec<f64>> {
    if h_prev.len() != gates.hidden() || x.len() != gates.input() {
        return Err(Error::Shape(format!(
            "gru cell expects state {} and input {}, got {} and {}",
            gates.hidden(),
            gates.input(),
            h_prev.len(),
            x.len()
        )));
    }
    Ok(gru_step(x, h_prev, gates).h)
}

pub(crate) fn gru_step(x: &[f64], h_prev: &[f64], g: &GruParams) -> GruStep {
    let hd = h_prev.len();
    let mut concat = Vec::with_capacity(hd + x.len());
    concat.extend_from_slice(h_prev);
    concat.extend_from_slice(x);

    let mut z = g.b_z.as_slice().to_vec();
    g.w_z.matvec_acc(&concat, &mut z);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut r = g.b_r.as_slice().to_vec();
    g.w_r.matvec_acc(&concat, &mut r);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));

    let mut reset_concat = concat.clone();
    for i in 0..hd {
        reset_concat[i] *= r[i];
    }
    let mut c = g.b_h.as_slice().to_vec();
    g.w_h.matvec_acc(&reset_concat, &mut c);
    c.iter_mut().for_each(|v| *v = v.tanh());

    let h = (0..hd)
        .map(|i| (1.0 - z[i]) * h_prev[i] + z[i] * c[i])
        .collect();
    GruStep {
        concat,
        reset_concat,
        z,
        r,
        c,
        h,
    }
}

/// Backward through one step. Accumulates weight gradients into `grads` and
/// returns `(∂L/∂h_{t-1}, ∂L/∂x_t)`.
pub(crate) fn gru_step_backward(
    g: &GruParams,
    step: &GruStep,
    dh: &[f64],
    grads: &mut GruParams,
) -> (Vec<f64>, Vec<f64>) {
    let hd = dh.len();
    let h_prev = step.h_prev();
    let mut dh_prev = vec![0.0; hd];
    let mut da_c = vec![0.0; hd];
    let mut da_z = vec![0.0; hd];
    for i in 0..hd {
        let z = step.z[i];
        let c = step.c[i];
        dh_prev[i] = dh[i] * (1.0 - z);
        da_c[i] = dh[i] * z * (1.0 - c * c);
        da_z[i] = dh[i] * (c - h_prev[i]) * z * (1.0 - z);
    }

    grads.w_h.add_outer(&da_c, &step.reset_concat);
    add_into(grads.b_h.as_mut_slice(), &da_c);
    let mut dv = vec![0.0; step.reset_concat.len()];
    g.w_h.t_matvec_acc(&da_c, &mut dv);

    let mut da_r = vec![0.0; hd];
    for i in 0..hd {
        let r = step.r[i];
        da_r[i] = dv[i] * h_prev[i] * r * (1.0 - r);
        dh_prev[i] += dv[i] * r;
    }

    grads.w_z.add_outer(&da_z, &step.concat);
    add_into(grads.b_z.as_mut_slice(), &da_z);
    grads.w_r.add_outer(&da_r, &step.concat);
    add_into(grads.b_r.as_mut_slice(), &da_r);

    let mut du = vec![0.0; step.concat.len()];
    g.w_z.t_matvec_acc(&da_z, &mut du);
    g.w_r.t_matvec_acc(&da_r, &mut du);

    for i in 0..hd {
        dh_prev[i] += du[i];
    }
    let dx = du[hd..]
        .iter()
        .zip(&dv[hd..])
        .map(|(a, b)| a + b)
        .collect();
    (dh_prev, dx)
}

#[inline]
pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_weights() {
        let g = GruParams::zeros(2, 3);
        let h = gru_cell_forward(&[0.3, -1.0, 2.0], &[1.0, 1.0], &g).unwrap();
        assert_eq!(h, vec![0.5, 0.5]);
        let h = gru_cell_forward(&[0.3, -1.0, 2.0], &[0.0, 0.0], &g).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let g = GruParams::zeros(2, 3);
        assert!(gru_cell_forward(&[0.0; 2], &[0.0; 2], &g).is_err());
        assert!(gru_cell_forward(&[0.0; 3], &[0.0; 3], &g).is_err());
    }

    #[test]
    fn matches_scalar_reevaluation() {
        let mut rng = Rng::new(17);
        let (hd, inp) = (3, 2);
        let g = GruParams::init(hd, inp, &mut rng);
        let x = [0.7, -1.3];
        let h_prev = [0.2, -0.5, 0.9];
        let h = gru_cell_forward(&x, &h_prev, &g).unwrap();

        // scalar-by-scalar evaluation of the four gate equations
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut z = [0.0; 3];
        let mut r = [0.0; 3];
        for i in 0..hd {
            let mut az = g.b_z.get(i, 0);
            let mut ar = g.b_r.get(i, 0);
            for j in 0..hd {
                az += g.w_z.get(i, j) * h_prev[j];
                ar += g.w_r.get(i, j) * h_prev[j];
            }
            for j in 0..inp {
                az += g.w_z.get(i, hd + j) * x[j];
                ar += g.w_r.get(i, hd + j) * x[j];
            }
            z[i] = s(az);
            r[i] = s(ar);
        }
        for i in 0..hd {
            let mut ac = g.b_h.get(i, 0);
            for j in 0..hd {
                ac += g.w_h.get(i, j) * r[j] * h_prev[j];
            }
            for j in 0..inp {
                ac += g.w_h.get(i, hd + j) * x[j];
            }
            let c = ac.tanh();
            let expect = (1.0 - z[i]) * h_prev[i] + z[i] * c;
            assert!((h[i] - expect).abs() < 1e-14);
        }
    }
}
