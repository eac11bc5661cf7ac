//! Adaptive-moment optimizer with bias correction, applied in place.

/// Hyperparameters shared across all parameters.
#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Adam {
    pub fn with_lr(lr: f32) -> Self {
        Adam {
            lr,
            ..Adam::default()
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step_count: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step_count: 0,
        }
    }

    pub fn step(&mut self, h: &Adam, value: &mut [f32], grad: &[f32]) {
        assert_eq!(value.len(), grad.len());
        assert_eq!(value.len(), self.m.len());
        self.step_count += 1;
        let bc1 = 1.0 - (h.beta1 as f64).powi(self.step_count as i32);
        let bc2 = 1.0 - (h.beta2 as f64).powi(self.step_count as i32);
        adam_update(h, value, grad, &mut self.m, &mut self.v, bc1 as f32, bc2 as f32);
    }
}

/// Moments for an embedding table updated one row at a time. Rows not touched
/// by a step keep their moments and values bit-identical, and bias correction
/// counts per-row updates.
#[derive(Debug, Clone)]
pub struct RowAdamState {
    pub dim: usize,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub row_steps: Vec<u64>,
}

impl RowAdamState {
    pub fn new(rows: usize, dim: usize) -> Self {
        RowAdamState {
            dim,
            m: vec![0.0; rows * dim],
            v: vec![0.0; rows * dim],
            row_steps: vec![0; rows],
        }
    }

    pub fn rows(&self) -> usize {
        self.row_steps.len()
    }

    pub fn append_row(&mut self) {
        self.m.extend(std::iter::repeat_n(0.0, self.dim));
        self.v.extend(std::iter::repeat_n(0.0, self.dim));
        self.row_steps.push(0);
    }

    pub fn step_row(&mut self, h: &Adam, row: usize, value_row: &mut [f32], grad_row: &[f32]) {
        assert_eq!(value_row.len(), self.dim);
        assert_eq!(grad_row.len(), self.dim);
        self.row_steps[row] += 1;
        let t = self.row_steps[row];
        let bc1 = 1.0 - (h.beta1 as f64).powi(t as i32);
        let bc2 = 1.0 - (h.beta2 as f64).powi(t as i32);
        let lo = row * self.dim;
        adam_update(
            h,
            value_row,
            grad_row,
            &mut self.m[lo..lo + self.dim],
            &mut self.v[lo..lo + self.dim],
            bc1 as f32,
            bc2 as f32,
        );
    }
}

fn adam_update(h: &Adam, value: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], bc1: f32, bc2: f32) {
    for i in 0..value.len() {
        let g = grad[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descends_on_quadratic() {
        // f(w) = w^2, grad = 2w, from w = 1
        let h = Adam::with_lr(0.1);
        let mut st = AdamState::new(1);
        let mut w = [1.0f32];
        let g = [2.0 * w[0]];
        st.step(&h, &mut w, &g);
        assert!(w[0] < 1.0);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let h = Adam::default();
        let mut st = AdamState::new(3);
        let mut w = [0.3f32, -0.7, 1.1];
        let before = w;
        st.step(&h, &mut w, &[0.0, 0.0, 0.0]);
        assert_eq!(w, before);
    }

    #[test]
    fn converges_on_2d_quadratic_in_500_steps() {
        // f(w) = 0.5*(w0^2 + 4*w1^2)
        let h = Adam::with_lr(0.05);
        let mut st = AdamState::new(2);
        let mut w = [1.0f32, -0.7];
        for _ in 0..500 {
            let g = [w[0], 4.0 * w[1]];
            st.step(&h, &mut w, &g);
        }
        assert!(w[0].abs() < 1e-2 && w[1].abs() < 1e-2, "w = {w:?}");
    }

    #[test]
    fn row_state_only_touches_stepped_row() {
        let h = Adam::with_lr(0.01);
        let mut st = RowAdamState::new(3, 2);
        let mut table = vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0];
        let before = table.clone();
        st.step_row(&h, 1, &mut table[2..4], &[0.5, -0.5]);
        assert_eq!(&table[0..2], &before[0..2]);
        assert_eq!(&table[4..6], &before[4..6]);
        assert_ne!(&table[2..4], &before[2..4]);
        assert_eq!(st.row_steps, vec![0, 1, 0]);

        st.append_row();
        assert_eq!(st.rows(), 4);
        assert_eq!(st.row_steps, vec![0, 1, 0, 0]);
    }
}
