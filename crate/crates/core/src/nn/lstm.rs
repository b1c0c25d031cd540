//! A single-direction LSTM layer with backpropagation through time.
//!
//! Gate pre-activations are stacked as `[input, forget, cell, output]`,
//! each block `hidden_dim` wide:
//!
//! ```text
//! z = W x_t + U h_{t-1} + b
//! i = sigmoid(z_i)   f = sigmoid(z_f)   g = tanh(z_g)   o = sigmoid(z_o)
//! c_t = f * c_{t-1} + i * g
//! h_t = o * tanh(c_t)
//! ```

use rand::Rng;

use super::tensor::{add_assign, Tensor2};

#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    input_dim: usize,
    hidden_dim: usize,
    /// `4H x input_dim`
    pub w: Tensor2,
    /// `4H x H`
    pub u: Tensor2,
    /// `4H`
    pub b: Vec<f64>,
}

impl LstmCellParams {
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim,
            w: Tensor2::zeros(4 * hidden_dim, input_dim),
            u: Tensor2::zeros(4 * hidden_dim, hidden_dim),
            b: vec![0.0; 4 * hidden_dim],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases except the forget gate
    /// which starts at 1.
    pub fn init<R: Rng>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        let mut b = vec![0.0; 4 * hidden_dim];
        b[hidden_dim..2 * hidden_dim].fill(1.0);
        Self {
            input_dim,
            hidden_dim,
            w: Tensor2::uniform(4 * hidden_dim, input_dim, 1.0 / (input_dim as f64).sqrt(), rng),
            u: Tensor2::uniform(4 * hidden_dim, hidden_dim, 1.0 / (hidden_dim as f64).sqrt(), rng),
            b,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim, self.hidden_dim)
    }

    pub fn add(&mut self, other: &Self) {
        add_assign(self.w.data_mut(), other.w.data());
        add_assign(self.u.data_mut(), other.u.data());
        add_assign(&mut self.b, &other.b);
    }

    pub fn scale(&mut self, s: f64) {
        for v in self
            .w
            .data_mut()
            .iter_mut()
            .chain(self.u.data_mut().iter_mut())
            .chain(self.b.iter_mut())
        {
            *v *= s;
        }
    }

    pub(crate) fn slices(&self) -> [&[f64]; 3] {
        [self.w.data(), self.u.data(), &self.b]
    }

    pub(crate) fn slices_mut(&mut self) -> [&mut [f64]; 3] {
        [self.w.data_mut(), self.u.data_mut(), &mut self.b]
    }

    /// Runs the layer over `inputs` in the given order from a zero state.
    pub fn forward(&self, inputs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<StepCache>) {
        let h_dim = self.hidden_dim;
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut caches = Vec::with_capacity(inputs.len());
        for x in inputs {
            let mut z = self.b.clone();
            self.w.matvec_acc(x, &mut z);
            self.u.matvec_acc(&h, &mut z);
            let (zi, rest) = z.split_at(h_dim);
            let (zf, rest) = rest.split_at(h_dim);
            let (zg, zo) = rest.split_at(h_dim);
            let i: Vec<f64> = zi.iter().map(|&v| sigmoid(v)).collect();
            let f: Vec<f64> = zf.iter().map(|&v| sigmoid(v)).collect();
            let g: Vec<f64> = zg.iter().map(|&v| v.tanh()).collect();
            let o: Vec<f64> = zo.iter().map(|&v| sigmoid(v)).collect();
            let c_new: Vec<f64> = (0..h_dim).map(|k| f[k] * c[k] + i[k] * g[k]).collect();
            let tanh_c: Vec<f64> = c_new.iter().map(|v| v.tanh()).collect();
            let h_new: Vec<f64> = (0..h_dim).map(|k| o[k] * tanh_c[k]).collect();
            caches.push(StepCache {
                x: x.clone(),
                h_prev: std::mem::replace(&mut h, h_new.clone()),
                c_prev: std::mem::replace(&mut c, c_new),
                i,
                f,
                g,
                o,
                tanh_c,
            });
            outputs.push(h_new);
        }
        (outputs, caches)
    }

    /// Backpropagates `d_outputs` (loss gradient w.r.t. each step's `h`)
    /// through the sequence, accumulating parameter gradients into `grads`
    /// and returning the gradient w.r.t. each input.
    pub fn backward(
        &self,
        caches: &[StepCache],
        d_outputs: &[Vec<f64>],
        grads: &mut LstmCellParams,
    ) -> Vec<Vec<f64>> {
        let h_dim = self.hidden_dim;
        let mut dh_next = vec![0.0; h_dim];
        let mut dc_next = vec![0.0; h_dim];
        let mut d_inputs = vec![Vec::new(); caches.len()];
        let mut dz = vec![0.0; 4 * h_dim];
        for t in (0..caches.len()).rev() {
            let s = &caches[t];
            for k in 0..h_dim {
                let dh = d_outputs[t][k] + dh_next[k];
                let do_ = dh * s.tanh_c[k];
                let dc = dh * s.o[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]) + dc_next[k];
                let di = dc * s.g[k];
                let dg = dc * s.i[k];
                let df = dc * s.c_prev[k];
                dc_next[k] = dc * s.f[k];
                dz[k] = di * s.i[k] * (1.0 - s.i[k]);
                dz[h_dim + k] = df * s.f[k] * (1.0 - s.f[k]);
                dz[2 * h_dim + k] = dg * (1.0 - s.g[k] * s.g[k]);
                dz[3 * h_dim + k] = do_ * s.o[k] * (1.0 - s.o[k]);
            }
            grads.w.outer_acc(&dz, &s.x);
            grads.u.outer_acc(&dz, &s.h_prev);
            add_assign(&mut grads.b, &dz);
            let mut dx = vec![0.0; self.input_dim];
            self.w.matvec_t_acc(&dz, &mut dx);
            d_inputs[t] = dx;
            dh_next.fill(0.0);
            self.u.matvec_t_acc(&dz, &mut dh_next);
        }
        d_inputs
    }
}

/// Activations of one timestep, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    // Loss = sum_t <r_t, h_t> for fixed random r_t, so dL/dh_t = r_t.
    fn loss(cell: &LstmCellParams, xs: &[Vec<f64>], r: &[Vec<f64>]) -> f64 {
        let (hs, _) = cell.forward(xs);
        hs.iter()
            .zip(r)
            .map(|(h, r)| h.iter().zip(r).map(|(a, b)| a * b).sum::<f64>())
            .sum()
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let cell = LstmCellParams::init(3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(&cell.b[..4], &[0.0; 4]);
        assert_eq!(&cell.b[4..8], &[1.0; 4]);
        assert_eq!(&cell.b[8..], &[0.0; 8]);
    }

    #[test]
    fn cell_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut cell = LstmCellParams::init(3, 4, &mut rng);
        cell.b.iter_mut().for_each(|b| *b += rng.gen_range(-0.5..0.5));
        let xs = inputs(&mut rng, 6, 3);
        let r = inputs(&mut rng, 6, 4);

        let (_, caches) = cell.forward(&xs);
        let mut grads = cell.zeros_like();
        let d_in = cell.backward(&caches, &r, &mut grads);

        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for p in 0..3 {
            for j in 0..cell.slices()[p].len() {
                let mut plus = cell.clone();
                plus.slices_mut()[p][j] += h;
                let mut minus = cell.clone();
                minus.slices_mut()[p][j] -= h;
                let numeric = (loss(&plus, &xs, &r) - loss(&minus, &xs, &r)) / (2.0 * h);
                let analytic = grads.slices()[p][j];
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-7);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");

        for t in 0..xs.len() {
            for j in 0..3 {
                let mut plus = xs.clone();
                plus[t][j] += h;
                let mut minus = xs.clone();
                minus[t][j] -= h;
                let numeric = (loss(&cell, &plus, &r) - loss(&cell, &minus, &r)) / (2.0 * h);
                assert!((numeric - d_in[t][j]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }
}
