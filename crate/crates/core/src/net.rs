//! Shared network building blocks: dense layers, small ReLU MLPs,
//! Gaussian parameter heads, and the recurrent pooling cell, each
//! registered against a [`ParamStore`] and applied on a [`Tape`].

use rand::Rng;

use crate::dist::VAR_FLOOR;
use crate::nd::{CellNodes, NodeId, NumArray, ParamStore, Tape, UnaryKind};
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseSlots {
    pub w: usize,
    pub b: usize,
    pub n_in: usize,
    pub n_out: usize,
}

/// Biases start at a small positive constant rather than zero: histories
/// and pooled states are exactly zero early in every sequence, and a zero
/// bias would park ReLU pre-activations exactly on the kink, where
/// subgradients and finite differences legitimately disagree.
const BIAS_INIT: f64 = 0.01;

pub(crate) fn register_dense<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    n_in: usize,
    n_out: usize,
    rng: &mut R,
) -> DenseSlots {
    let w = store
        .add(
            &format!("{name}.w"),
            crate::nd::glorot_uniform(n_in, n_out, rng),
        )
        .expect("unique layer names");
    let mut bias = NumArray::zeros(&[n_out]);
    bias.fill(BIAS_INIT);
    let b = store
        .add(&format!("{name}.b"), bias)
        .expect("unique layer names");
    DenseSlots { w, b, n_in, n_out }
}

impl DenseSlots {
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.affine(x, w, b)
    }

    pub fn weights<'s>(&self, store: &'s ParamStore) -> &'s [f64] {
        store.value(self.w).data()
    }

    pub fn bias<'s>(&self, store: &'s ParamStore) -> &'s [f64] {
        store.value(self.b).data()
    }
}

/// Stack of dense layers with ReLU after every layer.
#[derive(Debug, Clone)]
pub(crate) struct MlpSlots {
    pub layers: Vec<DenseSlots>,
}

pub(crate) fn register_mlp<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    n_in: usize,
    hidden: &[usize],
    rng: &mut R,
) -> MlpSlots {
    let mut layers = Vec::with_capacity(hidden.len());
    let mut prev = n_in;
    for (i, &h) in hidden.iter().enumerate() {
        layers.push(register_dense(store, &format!("{name}.l{i}"), prev, h, rng));
        prev = h;
    }
    MlpSlots { layers }
}

impl MlpSlots {
    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, mut x: NodeId) -> Result<NodeId> {
        for layer in &self.layers {
            x = layer.apply(tape, store, x)?;
            x = tape.relu(x);
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("mlp has layers").n_out
    }
}

/// Trunk MLP plus mean and log-variance heads; variance is
/// exp(log-variance) floored at [`VAR_FLOOR`].
#[derive(Debug, Clone)]
pub(crate) struct GaussianHeadSlots {
    pub trunk: MlpSlots,
    pub mean: DenseSlots,
    pub logvar: DenseSlots,
}

pub(crate) fn register_gaussian_head<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    n_in: usize,
    hidden: &[usize],
    out: usize,
    rng: &mut R,
) -> GaussianHeadSlots {
    let trunk = register_mlp(store, &format!("{name}.trunk"), n_in, hidden, rng);
    let mean = register_dense(store, &format!("{name}.mean"), trunk.out_dim(), out, rng);
    let logvar = register_dense(store, &format!("{name}.logvar"), trunk.out_dim(), out, rng);
    GaussianHeadSlots {
        trunk,
        mean,
        logvar,
    }
}

impl GaussianHeadSlots {
    /// Returns (mean, variance) nodes.
    pub fn apply(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let h = self.trunk.apply(tape, store, x)?;
        let mean = self.mean.apply(tape, store, h)?;
        let logvar = self.logvar.apply(tape, store, h)?;
        let var = tape.unary(UnaryKind::Exp, logvar);
        let var = tape.clamp_min(var, VAR_FLOOR);
        Ok((mean, var))
    }
}

/// Parameter slots for one recurrent pooling cell.
#[derive(Debug, Clone)]
pub(crate) struct CellSlots {
    pub input: DenseSlots,
    pub forget: DenseSlots,
    pub output: DenseSlots,
    pub cand: DenseSlots,
}

pub(crate) fn register_cell<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    n_in: usize,
    hidden: usize,
    rng: &mut R,
) -> CellSlots {
    let n = n_in + hidden;
    CellSlots {
        input: register_dense(store, &format!("{name}.input"), n, hidden, rng),
        forget: register_dense(store, &format!("{name}.forget"), n, hidden, rng),
        output: register_dense(store, &format!("{name}.output"), n, hidden, rng),
        cand: register_dense(store, &format!("{name}.cand"), n, hidden, rng),
    }
}

impl CellSlots {
    pub fn nodes(&self, tape: &mut Tape, store: &ParamStore) -> CellNodes {
        CellNodes {
            w_input: tape.param(store, self.input.w),
            b_input: tape.param(store, self.input.b),
            w_forget: tape.param(store, self.forget.w),
            b_forget: tape.param(store, self.forget.b),
            w_output: tape.param(store, self.output.w),
            b_output: tape.param(store, self.output.b),
            w_cand: tape.param(store, self.cand.w),
            b_cand: tape.param(store, self.cand.b),
        }
    }
}
