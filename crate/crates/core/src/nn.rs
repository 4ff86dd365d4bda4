//! Layers shared by the tokenizer, the channel coder and the receiver.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::rng::normal;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// N(0, 1/fan_in).
    Scaled,
    /// N(0, std²).
    Normal(f64),
    Zeros,
    /// Ones on the leading diagonal, zero elsewhere.
    Identity,
}

pub fn init_tensor<R: Rng + ?Sized>(rows: usize, cols: usize, init: Init, rng: &mut R) -> Tensor {
    let data = match init {
        Init::Scaled => {
            let std = (1.0 / rows as f64).sqrt();
            (0..rows * cols).map(|_| std * normal(rng)).collect()
        }
        Init::Normal(std) => (0..rows * cols).map(|_| std * normal(rng)).collect(),
        Init::Zeros => vec![0.0; rows * cols],
        Init::Identity => {
            let mut d = vec![0.0; rows * cols];
            for i in 0..rows.min(cols) {
                d[i * cols + i] = 1.0;
            }
            d
        }
    };
    Tensor::matrix(rows, cols, data).expect("init shape")
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            init_tensor(in_dim, out_dim, init, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Binding, x: Var) -> Result<Var> {
        let y = g.matmul(x, p[self.weight])?;
        let rows = g.shape(y)[0];
        let b = g.tile_rows(p[self.bias], rows)?;
        g.add(y, b)
    }
}

/// Affine stack with GELU between layers (none after the last).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; the last layer uses `last_init`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        last_init: Init,
        rng: &mut R,
    ) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n { last_init } else { Init::Scaled };
                Linear::new(
                    store,
                    &format!("{name}.{i}"),
                    dims[i],
                    dims[i + 1],
                    init,
                    rng,
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Binding, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, p, x)?;
            if i + 1 < n {
                x = g.gelu(x);
            }
        }
        Ok(x)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}

/// Layer normalization followed by a learned per-feature gain and shift.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::row(vec![1.0; dim]));
        let shift = store.add(format!("{name}.shift"), Tensor::zeros(vec![1, dim]));
        Self {
            gain,
            shift,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, p: &Binding, x: Var) -> Result<Var> {
        let rows = g.shape(x)[0];
        let y = g.layer_norm(x, self.eps)?;
        let gain = g.tile_rows(p[self.gain], rows)?;
        let shift = g.tile_rows(p[self.shift], rows)?;
        let y = g.mul(y, gain)?;
        g.add(y, shift)
    }
}

/// Mean squared error over all elements.
pub fn mse(g: &mut Graph<'_>, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

/// Running mean `m_k = m_{k-1} + (x_k - m_{k-1}) / k`; exact when all
/// terms are equal. A list of one repeated variable returns that variable.
pub fn running_mean(g: &mut Graph<'_>, terms: &[Var]) -> Result<Var> {
    let mut m = terms[0];
    if terms.iter().all(|&t| t == m) {
        return Ok(m);
    }
    for (k, &t) in terms.iter().enumerate().skip(1) {
        let d = g.sub(t, m)?;
        let d = g.scale(d, 1.0 / (k + 1) as f64);
        m = g.add(m, d)?;
    }
    Ok(m)
}
