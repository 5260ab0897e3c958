//! Small MLPs over row tensors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::params::{ParamRef, ParamStore};
use crate::rng::Stream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub weight: ParamRef,
    pub bias: ParamRef,
    pub act: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Per-layer weights, biases, and activation tags.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<MlpLayer>,
}

impl MlpParams {
    /// Chain of linear layers; all hidden activations ReLU, last `last_act`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        last_act: Activation,
        stream: &mut Stream,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(CoreError::Config { detail: format!("mlp {name} needs >= 2 dims") });
        }
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (din, dout) = (dims[l], dims[l + 1]);
            let weight =
                store.register_uniform(format!("{name}.w{l}"), &[din, dout], din, stream);
            let bias = store.register_zeros(format!("{name}.b{l}"), &[dout]);
            let act = if l + 2 == dims.len() { last_act } else { Activation::Relu };
            layers.push(MlpLayer { weight, bias, act, in_dim: din, out_dim: dout });
        }
        Ok(MlpParams { layers })
    }

    /// Fusion MLP initialized to the exact averaging map.
    ///
    /// Input is 2C concatenated channels; the 4C ReLU hidden layer carries the
    /// positive and negative parts separately (W1 = [I; -I] blocks) so that
    /// W2 = 0.5·[I | -I] reconstructs 0.5·(a + b) exactly for all inputs.
    pub fn averaging_fuse(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let din = 2 * c;
        let hidden = 4 * c;
        let mut w1 = Tensor::zeros(&[din, hidden]);
        for i in 0..din {
            w1.data[i * hidden + i] = 1.0; // positive part
            w1.data[i * hidden + din + i] = -1.0; // negative part
        }
        let mut w2 = Tensor::zeros(&[hidden, c]);
        for i in 0..din {
            let out = i % c; // both input halves average into the same channel
            w2.data[i * c + out] = 0.5;
            w2.data[(din + i) * c + out] = -0.5;
        }
        let l0w = store.register(format!("{name}.w0"), w1);
        let l0b = store.register_zeros(format!("{name}.b0"), &[hidden]);
        let l1w = store.register(format!("{name}.w1"), w2);
        let l1b = store.register_zeros(format!("{name}.b1"), &[c]);
        MlpParams {
            layers: alloc::vec![
                MlpLayer {
                    weight: l0w,
                    bias: l0b,
                    act: Activation::Relu,
                    in_dim: din,
                    out_dim: hidden
                },
                MlpLayer {
                    weight: l1w,
                    bias: l1b,
                    act: Activation::Identity,
                    in_dim: hidden,
                    out_dim: c
                },
            ],
        }
    }

    /// Forward over [R, in] rows.
    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            if tape.value(h).shape.len() != 2 || tape.value(h).shape[1] != layer.in_dim {
                return Err(CoreError::ShapeMismatch {
                    op: "mlp_forward",
                    detail: format!(
                        "input {:?} vs layer in_dim {}",
                        tape.value(h).shape,
                        layer.in_dim
                    ),
                });
            }
            h = tape.matmul(h, layer.weight.var(vars))?;
            h = tape.add_row_bias(h, layer.bias.var(vars))?;
            if layer.act == Activation::Relu {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn param_names(&self, store: &ParamStore) -> Vec<String> {
        self.layers
            .iter()
            .flat_map(|l| {
                [String::from(store.name(l.weight)), String::from(store.name(l.bias))]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamId;

    #[test]
    fn dims_chain_and_init_bounds() {
        let mut store = ParamStore::new();
        let mut s = Stream::new(1, StreamId::Params);
        let mlp =
            MlpParams::new(&mut store, "test", &[4, 8, 2], Activation::Identity, &mut s).unwrap();
        assert_eq!(mlp.layers.len(), 2);
        assert_eq!(mlp.layers[0].out_dim, mlp.layers[1].in_dim);
        let w0 = store.tensor(mlp.layers[0].weight);
        let bound = 0.5; // 1/sqrt(4)
        assert!(w0.data.iter().all(|v| v.abs() <= bound));
        assert!(store.tensor(mlp.layers[0].bias).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn averaging_init_is_exact_for_signed_inputs() {
        let mut store = ParamStore::new();
        let c = 3;
        let fuse = MlpParams::averaging_fuse(&mut store, "fuse", c);
        let mut tape = Tape::new();
        let vars = store.leaves(&mut tape);
        let a = [1.0, -2.0, 0.5];
        let b = [-0.25, 4.0, -1.5];
        let mut row = Vec::new();
        row.extend_from_slice(&a);
        row.extend_from_slice(&b);
        let x = tape.leaf(Tensor::new(&[1, 2 * c], row).unwrap());
        let y = fuse.forward(&mut tape, &vars, x).unwrap();
        for i in 0..c {
            let want = 0.5 * (a[i] + b[i]);
            assert!(
                (tape.value(y).data[i] - want).abs() < 1e-15,
                "channel {i}: {} vs {want}",
                tape.value(y).data[i]
            );
        }
    }

    #[test]
    fn mlp_gradients_pass_finite_differences() {
        let mut store = ParamStore::new();
        let mut s = Stream::new(5, StreamId::Params);
        let mlp =
            MlpParams::new(&mut store, "g", &[3, 6, 2], Activation::Identity, &mut s).unwrap();
        // Random input; ReLU preactivations are generically away from zero.
        let mut si = Stream::new(6, StreamId::Instances);
        let x = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut si);
        let mut tensors = store.tensors();
        tensors.push(x);
        let rep = crate::gradcheck::grad_check(
            &move |t: &mut Tape, vs: &[Var]| {
                let x = vs[vs.len() - 1];
                let y = mlp.forward(t, &vs[..vs.len() - 1], x)?;
                Ok(t.sum_all(y))
            },
            &tensors,
            1e-6,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "err {}", rep.max_rel_error);
    }
}
