//! Multi-head scaled dot-product self-attention over encoder states with
//! mean pooling across time.

use crate::error::{Error, Result};
use crate::math::{softmax_in_place, Matrix};
use crate::rng::Rng;

/// Projections of one head, each `d_h × d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl AttentionHead {
    pub fn zeros(hidden: usize, head_dim: usize) -> Self {
        Self {
            w_q: Matrix::zeros(hidden, head_dim),
            w_k: Matrix::zeros(hidden, head_dim),
            w_v: Matrix::zeros(hidden, head_dim),
        }
    }

    pub(crate) fn init(hidden: usize, head_dim: usize, rng: &mut Rng) -> Self {
        let mut h = Self::zeros(hidden, head_dim);
        let bound = 1.0 / (hidden as f64).sqrt();
        for m in [&mut h.w_q, &mut h.w_k, &mut h.w_v] {
            m.as_mut_slice()
                .iter_mut()
                .for_each(|x| *x = rng.uniform_range(-bound, bound));
        }
        h
    }

    pub fn head_dim(&self) -> usize {
        self.w_q.cols()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-softmax weights, `T × T`; row = query day, column = key day.
    pub weights: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionTrace {
    pub heads: Vec<HeadTrace>,
    /// Time-mean of the concatenated head outputs, length `M·d_k`.
    pub pooled: Vec<f64>,
}

/// Attend over `states` (`T × d_h`) and mean-pool the concatenated outputs.
pub fn attend(states: &Matrix, heads: &[AttentionHead]) -> Result<AttentionTrace> {
    let t_len = states.rows();
    if t_len == 0 {
        return Err(Error::Empty("attention over zero time steps"));
    }
    let mut traces = Vec::with_capacity(heads.len());
    let mut pooled = Vec::new();
    for (m, head) in heads.iter().enumerate() {
        if head.w_q.rows() != states.cols()
            || head.w_k.shape() != head.w_q.shape()
            || head.w_v.shape() != head.w_q.shape()
        {
            return Err(Error::Shape(format!(
                "attention head {m} projections do not match state width {}",
                states.cols()
            )));
        }
        let dk = head.head_dim();
        let q = states.matmul(&head.w_q)?;
        let k = states.matmul(&head.w_k)?;
        let v = states.matmul(&head.w_v)?;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut weights = q.matmul(&k.transpose())?;
        for i in 0..t_len {
            let row = weights.row_mut(i);
            row.iter_mut().for_each(|s| *s *= scale);
            if row.iter().any(|s| !s.is_finite()) {
                return Err(Error::NonFinite(format!("attention scores, head {m}, row {i}")));
            }
            softmax_in_place(row);
        }
        let out = weights.matmul(&v)?;
        let mut mean = vec![0.0; dk];
        for i in 0..t_len {
            for (acc, x) in mean.iter_mut().zip(out.row(i)) {
                *acc += x;
            }
        }
        mean.iter_mut().for_each(|x| *x /= t_len as f64);
        pooled.extend_from_slice(&mean);
        traces.push(HeadTrace { q, k, v, weights });
    }
    Ok(AttentionTrace {
        heads: traces,
        pooled,
    })
}

/// Backward of [`attend`]: given `∂L/∂pooled`, accumulate projection
/// gradients into `grads` and return `∂L/∂states`.
pub(crate) fn attend_backward(
    states: &Matrix,
    heads: &[AttentionHead],
    trace: &AttentionTrace,
    d_pooled: &[f64],
    grads: &mut [AttentionHead],
) -> Matrix {
    let t_len = states.rows();
    let mut d_states = Matrix::zeros(t_len, states.cols());
    let mut offset = 0;
    for ((head, ht), g) in heads.iter().zip(&trace.heads).zip(grads.iter_mut()) {
        let dk = head.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        // every output row receives the same upstream gradient
        let d_row: Vec<f64> = d_pooled[offset..offset + dk]
            .iter()
            .map(|x| x / t_len as f64)
            .collect();
        offset += dk;

        let a = &ht.weights;
        // dA[i,j] = d_row · v_j ; dV[j] = (Σ_i A[i,j]) d_row
        let dv_row: Vec<f64> = (0..t_len).map(|j| crate::math::dot(&d_row, ht.v.row(j))).collect();
        let mut dv = Matrix::zeros(t_len, dk);
        for j in 0..t_len {
            let col_mass: f64 = (0..t_len).map(|i| a.get(i, j)).sum();
            for (x, &d) in dv.row_mut(j).iter_mut().zip(&d_row) {
                *x = col_mass * d;
            }
        }
        // softmax backward, then fold in the 1/√d_k scale
        let mut ds = Matrix::zeros(t_len, t_len);
        for i in 0..t_len {
            let ar = a.row(i);
            let inner: f64 = ar.iter().zip(&dv_row).map(|(p, d)| p * d).sum();
            for (j, s) in ds.row_mut(i).iter_mut().enumerate() {
                *s = ar[j] * (dv_row[j] - inner) * scale;
            }
        }
        let dq = ds.matmul(&ht.k).expect("shapes fixed by trace");
        let dk_m = ds.transpose().matmul(&ht.q).expect("shapes fixed by trace");

        let st = states.transpose();
        accumulate(&mut g.w_q, &st.matmul(&dq).expect("shapes fixed by trace"));
        accumulate(&mut g.w_k, &st.matmul(&dk_m).expect("shapes fixed by trace"));
        accumulate(&mut g.w_v, &st.matmul(&dv).expect("shapes fixed by trace"));

        for (d, w) in [(&dq, &head.w_q), (&dk_m, &head.w_k), (&dv, &head.w_v)] {
            let contrib = d.matmul(&w.transpose()).expect("shapes fixed by trace");
            accumulate(&mut d_states, &contrib);
        }
    }
    d_states
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += s;
    }
}
