use super::{expect_last_dim, Initializer};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Range of the uniform initialisation of recurrent weights.
pub const LSTM_INIT_BOUND: f64 = 0.08;

/// One direction of one LSTM layer. Gate blocks inside the `4h` rows are
/// ordered input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmCell {
    pub fn register<T: Real>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        init: &mut Initializer,
    ) -> Result<Self> {
        let w_ih = store.add(format!("{prefix}.w_ih"), init.uniform(&[4 * hidden, input], LSTM_INIT_BOUND))?;
        let w_hh = store.add(format!("{prefix}.w_hh"), init.uniform(&[4 * hidden, hidden], LSTM_INIT_BOUND))?;
        let bias = store.add(format!("{prefix}.bias"), Tensor::zeros([4 * hidden]))?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    /// One timestep: `x_t[B×in]`, `h_prev[B×h]`, `c_prev[B×h]` → `(h_t, c_t)`.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        x_t: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        expect_last_dim(g, x_t, self.input, "lstm_step input")?;
        let w_ih = g.param(store, self.w_ih);
        let bias = g.param(store, self.bias);
        let gx = g.linear(x_t, w_ih, Some(bias))?;
        self.step_from_input_gates(g, store, gx, h_prev, c_prev)
    }

    /// Timestep given the precomputed input contribution `x_t·W_ihᵀ + b`.
    fn step_from_input_gates<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        gx: Var,
        h_prev: Var,
        c_prev: Var,
    ) -> Result<(Var, Var)> {
        let h = self.hidden;
        expect_last_dim(g, h_prev, h, "lstm_step hidden")?;
        if g.shape(c_prev) != g.shape(h_prev) {
            return Err(Error::Shape {
                op: "lstm_step cell",
                lhs: g.shape(c_prev).to_vec(),
                rhs: g.shape(h_prev).to_vec(),
            });
        }
        let w_hh = g.param(store, self.w_hh);
        let gh = g.linear(h_prev, w_hh, None)?;
        let gates = g.add(gx, gh)?;
        let axis = g.shape(gates).len() - 1;
        let i = g.slice(gates, axis, 0, h)?;
        let f = g.slice(gates, axis, h, h)?;
        let c_hat = g.slice(gates, axis, 2 * h, h)?;
        let o = g.slice(gates, axis, 3 * h, h)?;
        let i = g.sigmoid(i)?;
        let f = g.sigmoid(f)?;
        let c_hat = g.tanh(c_hat)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, c_prev)?;
        let write = g.mul(i, c_hat)?;
        let c_t = g.add(keep, write)?;
        let c_act = g.tanh(c_t)?;
        let h_t = g.mul(o, c_act)?;
        Ok((h_t, c_t))
    }
}

/// Stacked, optionally bidirectional LSTM. Layer `ℓ > 0` consumes the
/// `h·(1+b)` features produced by layer `ℓ-1`.
#[derive(Clone, Debug)]
pub struct LstmParams {
    /// `layers[ℓ][0]` runs forward in time, `layers[ℓ][1]` (if any) backward.
    pub layers: Vec<Vec<LstmCell>>,
    pub input: usize,
    pub hidden: usize,
    pub bidirectional: bool,
}

impl LstmParams {
    pub fn register<T: Real>(
        store: &mut ParameterStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        num_layers: usize,
        bidirectional: bool,
        init: &mut Initializer,
    ) -> Result<Self> {
        let dirs: &[&str] = if bidirectional { &["fwd", "bwd"] } else { &["fwd"] };
        let out = hidden * dirs.len();
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let layer_in = if l == 0 { input } else { out };
            let cells = dirs
                .iter()
                .map(|dir| LstmCell::register(store, &format!("{prefix}.l{l}.{dir}"), layer_in, hidden, init))
                .collect::<Result<Vec<_>>>()?;
            layers.push(cells);
        }
        Ok(Self {
            layers,
            input,
            hidden,
            bidirectional,
        })
    }

    /// Output feature size `h·(1+b)`.
    pub fn output_dim(&self) -> usize {
        self.hidden * if self.bidirectional { 2 } else { 1 }
    }

    /// Runs the stack over `eeg[B×T×f]`. `padded[b·T + t]` is true exactly on
    /// padded timesteps; those steps carry the previous state through and
    /// produce zero output rows.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        eeg: Var,
        padded: &[bool],
    ) -> Result<Var> {
        let shape = g.shape(eeg).to_vec();
        if shape.len() != 3 {
            return Err(Error::Shape {
                op: "bilstm",
                lhs: shape,
                rhs: vec![self.input],
            });
        }
        let (b, t) = (shape[0], shape[1]);
        if t == 0 {
            return Err(Error::contract("bilstm over an empty sequence"));
        }
        if padded.len() != b * t {
            return Err(Error::Shape {
                op: "bilstm mask",
                lhs: vec![b, t],
                rhs: vec![padded.len()],
            });
        }
        expect_last_dim(g, eeg, self.input, "bilstm input")?;
        let keep_rows: Vec<bool> = padded.iter().map(|&p| !p).collect();

        let mut x = eeg;
        for cells in &self.layers {
            let mut dir_outputs = Vec::with_capacity(cells.len());
            for (d, cell) in cells.iter().enumerate() {
                dir_outputs.push(self.run_direction(g, store, cell, x, padded, b, t, d == 1)?);
            }
            x = if dir_outputs.len() == 1 {
                dir_outputs[0]
            } else {
                g.concat(&dir_outputs, 2)?
            };
        }
        g.mask_rows(x, &keep_rows)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_direction<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        cell: &LstmCell,
        x: Var,
        padded: &[bool],
        b: usize,
        t: usize,
        reverse: bool,
    ) -> Result<Var> {
        let h = cell.hidden;
        let w_ih = g.param(store, cell.w_ih);
        let bias = g.param(store, cell.bias);
        // Input contributions for every timestep in one product.
        let gx_all = g.linear(x, w_ih, Some(bias))?;

        let mut h_t = g.constant(Tensor::zeros([b, h]));
        let mut c_t = g.constant(Tensor::zeros([b, h]));
        let mut outputs = vec![None; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for step in order {
            let gx = g.slice(gx_all, 1, step, 1)?;
            let gx = g.reshape(gx, &[b, 4 * h])?;
            let (h_new, c_new) = cell.step_from_input_gates(g, store, gx, h_t, c_t)?;
            let live: Vec<bool> = (0..b).map(|row| !padded[row * t + step]).collect();
            h_t = g.blend(h_new, h_t, &live)?;
            c_t = g.blend(c_new, c_t, &live)?;
            outputs[step] = Some(g.reshape(h_t, &[b, 1, h])?);
        }
        let outputs: Vec<Var> = outputs.into_iter().map(|o| o.expect("every step visited")).collect();
        g.concat(&outputs, 1)
    }
}
