use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add_xavier(&format!("{name}.w"), &[inputs, outputs], inputs, outputs, rng)?;
        let bias = store.add_constant(&format!("{name}.b"), &[outputs], 0.0)?;
        Ok(Self { weight, bias, inputs, outputs })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("convolution kernel must be odd, got {kernel}")));
        }
        let k2 = kernel * kernel;
        let weight = store.add_xavier(
            &format!("{name}.w"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * k2,
            out_channels * k2,
            rng,
        )?;
        let bias = store.add_constant(&format!("{name}.b"), &[out_channels], 0.0)?;
        Ok(Self { weight, bias, kernel })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(store, self.weight)?;
        let b = g.param(store, self.bias)?;
        g.conv2d(x, w, b)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        let gain = store.add_constant(&format!("{name}.g"), &[width], 1.0)?;
        let bias = store.add_constant(&format!("{name}.b"), &[width], 0.0)?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let n = g.layer_norm(x, LAYER_NORM_EPS)?;
        let gain = g.param(store, self.gain)?;
        let bias = g.param(store, self.bias)?;
        let s = g.mul_row(n, gain)?;
        g.add_bias(s, bias)
    }
}

/// Scaled dot-product multi-head attention with learned Q/K/V/output
/// projections. No positional encoding: permuting the tokens permutes the output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub query: Dense,
    pub key: Dense,
    pub value: Dense,
    pub output: Dense,
    pub heads: usize,
    pub width: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {width} is not divisible by {heads} heads")));
        }
        Ok(Self {
            query: Dense::new(store, &format!("{name}.q"), width, width, rng)?,
            key: Dense::new(store, &format!("{name}.k"), width, width, rng)?,
            value: Dense::new(store, &format!("{name}.v"), width, width, rng)?,
            output: Dense::new(store, &format!("{name}.o"), width, width, rng)?,
            heads,
            width,
        })
    }

    /// Self-attention when `queries == keys == values`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        keys: NodeId,
        values: NodeId,
    ) -> Result<NodeId> {
        let q = self.query.forward(g, store, queries)?;
        let k = self.key.forward(g, store, keys)?;
        let v = self.value.forward(g, store, values)?;
        let hd = self.width / self.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * hd, (h + 1) * hd);
            let qh = g.slice_cols(q, a, b)?;
            let kh = g.slice_cols(k, a, b)?;
            let vh = g.slice_cols(v, a, b)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let attn = g.softmax_rows(scores)?;
            outs.push(g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        self.output.forward(g, store, cat)
    }
}

/// Pre-norm transformer encoder block: `x + MHA(LN x)`, then `x + FF(LN x)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attention: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
}

impl EncoderBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{name}.ln1"), width)?,
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.ln2"), width)?,
            ff1: Dense::new(store, &format!("{name}.ff1"), width, 2 * width, rng)?,
            ff2: Dense::new(store, &format!("{name}.ff2"), 2 * width, width, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let n1 = self.norm1.forward(g, store, x)?;
        let a = self.attention.forward(g, store, n1, n1, n1)?;
        let x = g.add(x, a)?;
        let n2 = self.norm2.forward(g, store, x)?;
        let h = self.ff1.forward(g, store, n2)?;
        let h = g.relu(h)?;
        let h = self.ff2.forward(g, store, h)?;
        g.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;
    use crate::rng::stream;

    #[test]
    fn identity_graph() {
        let mut g = Graph::new();
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = g.input(t.clone()).unwrap();
        assert_eq!(g.value(x), &t);
    }

    #[test]
    fn zero_weight_dense_returns_bias() {
        let mut store = ParamStore::new(0);
        let d = Dense::new(&mut store, "d", 3, 2, &mut stream(0)).unwrap();
        store.value_mut(d.weight).data_mut().iter_mut().for_each(|v| *v = 0.0);
        store.value_mut(d.bias).data_mut().copy_from_slice(&[0.5, -1.5]);
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -4.0, 5.0, 6.0]).unwrap()).unwrap();
        let y = d.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn two_layer_net_matches_hand_computation() {
        let mut store = ParamStore::new(0);
        let mut rng = stream(5);
        let l1 = Dense::new(&mut store, "l1", 2, 3, &mut rng).unwrap();
        let l2 = Dense::new(&mut store, "l2", 3, 1, &mut rng).unwrap();
        store.value_mut(l1.bias).data_mut().copy_from_slice(&[0.1, -0.2, 0.3]);
        store.value_mut(l2.bias).data_mut().copy_from_slice(&[0.05]);
        let input = [0.7, -1.3];
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 2, input.to_vec()).unwrap()).unwrap();
        let h = l1.forward(&mut g, &store, x).unwrap();
        let h = g.tanh(h).unwrap();
        let y = l2.forward(&mut g, &store, h).unwrap();

        let w1 = store.value(l1.weight).data();
        let b1 = store.value(l1.bias).data();
        let w2 = store.value(l2.weight).data();
        let mut expected = store.value(l2.bias).data()[0];
        for j in 0..3 {
            let pre = input[0] * w1[j] + input[1] * w1[3 + j] + b1[j];
            expected += pre.tanh() * w2[j];
        }
        assert!((g.value(y).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut store = ParamStore::new(0);
        assert!(matches!(
            MultiHeadAttention::new(&mut store, "a", 6, 4, &mut stream(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut store = ParamStore::new(0);
        let mut rng = stream(9);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::matrix(1, 4, vec![0.3, -0.1, 0.8, 0.2]).unwrap()).unwrap();
        let y = mha.forward(&mut g, &store, x, x, x).unwrap();
        let v = mha.value.forward(&mut g, &store, x).unwrap();
        let expected = mha.output.forward(&mut g, &store, v).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(expected).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut store = ParamStore::new(0);
        let mut rng = stream(10);
        let block = EncoderBlock::new(&mut store, "b", 4, 2, &mut rng).unwrap();
        let rows = [[0.1, 0.2, -0.3, 0.4], [1.0, -1.0, 0.5, 0.0], [-0.7, 0.3, 0.9, -0.2]];
        let run = |order: [usize; 3]| {
            let mut g = Graph::new();
            let data = order.iter().flat_map(|&i| rows[i]).collect();
            let x = g.input(Tensor::matrix(3, 4, data).unwrap()).unwrap();
            let y = block.forward(&mut g, &store, x).unwrap();
            g.value(y).data().to_vec()
        };
        let a = run([0, 1, 2]);
        let b = run([2, 0, 1]);
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            for c in 0..4 {
                assert!((b[dst * 4 + c] - a[src * 4 + c]).abs() < 1e-12);
            }
        }
    }
}
