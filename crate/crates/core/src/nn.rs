//! Layers composed from graph primitives, and the parameter layouts they
//! expect. Every layer reads its weights by name prefix, e.g. a linear layer
//! called `enc.q` uses `enc.q.w` (`[d_in, d_out]`) and `enc.q.b` (`[d_out]`).

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamSet};
use crate::real::Real;
use crate::tensor::Tensor;

/// Creates parameters with a shared random source and weight init.
pub struct ParamBuilder<'r, T, R> {
    pub set: ParamSet<T>,
    rng: &'r mut R,
    weight: Init,
}

impl<'r, T: Real, R: Rng> ParamBuilder<'r, T, R> {
    pub fn new(rng: &'r mut R, weight: Init) -> Self {
        ParamBuilder { set: ParamSet::new(), rng, weight }
    }

    pub fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let t = self.weight.sample(shape, self.rng);
        self.set.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<()> {
        self.set.insert(name, Tensor::filled(shape, T::lit(value)))
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.tensor(&format!("{name}.w"), &[d_in, d_out])?;
        self.tensor(&format!("{name}.b"), &[d_out])
    }

    /// Linear map without a bias term.
    pub fn projection(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<()> {
        self.tensor(&format!("{name}.w"), &[d_in, d_out])
    }

    pub fn gru(&mut self, name: &str, d_in: usize, d_h: usize) -> Result<()> {
        self.tensor(&format!("{name}.w_ih"), &[d_in, 3 * d_h])?;
        self.tensor(&format!("{name}.w_hh"), &[d_h, 3 * d_h])?;
        self.tensor(&format!("{name}.b_ih"), &[3 * d_h])?;
        self.tensor(&format!("{name}.b_hh"), &[3 * d_h])
    }

    pub fn layer_norm(&mut self, name: &str, d: usize) -> Result<()> {
        self.constant(&format!("{name}.gain"), &[d], 1.0)?;
        self.constant(&format!("{name}.bias"), &[d], 0.0)
    }

    pub fn transformer(&mut self, name: &str, d: usize, d_ff: usize) -> Result<()> {
        for p in ["q", "k", "v"] {
            self.linear(&format!("{name}.{p}"), d, d)?;
        }
        self.linear(&format!("{name}.ffn1"), d, d_ff)?;
        self.linear(&format!("{name}.ffn2"), d_ff, d)?;
        self.layer_norm(&format!("{name}.ln"), d)
    }

    pub fn conv_stack(&mut self, name: &str, geom: &ConvStackGeom) -> Result<()> {
        let mut cin = geom.in_channels;
        for (i, &cout) in geom.channels.iter().enumerate() {
            self.tensor(&format!("{name}.conv{i}.w"), &[3, 3, cin, cout])?;
            self.tensor(&format!("{name}.conv{i}.b"), &[cout])?;
            cin = cout;
        }
        self.linear(&format!("{name}.flat"), cin, cin)
    }
}

/// `x W + b` over the last axis of `x`.
pub fn linear<T: Real>(g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    let b = g.param(&format!("{name}.b"))?;
    check_in(g, x, w, name)?;
    let y = g.matmul(x, w)?;
    g.add_row_vec(y, b)
}

/// `x W`, no bias.
pub fn projection<T: Real>(g: &mut Graph<'_, T>, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&format!("{name}.w"))?;
    check_in(g, x, w, name)?;
    g.matmul(x, w)
}

fn check_in<T: Real>(g: &Graph<'_, T>, x: Var, w: Var, name: &str) -> Result<()> {
    let d_in = g.shape(w)[0];
    if g.shape(x).last() != Some(&d_in) {
        return Err(Error::shape("linear", format!("`{name}` expects width {d_in}, input is {:?}", g.shape(x))));
    }
    Ok(())
}

/// One gated recurrent unit step.
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
pub fn gru_cell<T: Real>(g: &mut Graph<'_, T>, x: Var, h: Var, name: &str) -> Result<Var> {
    let w_ih = g.param(&format!("{name}.w_ih"))?;
    let w_hh = g.param(&format!("{name}.w_hh"))?;
    let b_ih = g.param(&format!("{name}.b_ih"))?;
    let b_hh = g.param(&format!("{name}.b_hh"))?;
    let d_h = g.shape(w_hh)[0];
    if g.shape(h) != [d_h] || g.shape(x).len() != 1 || g.shape(x)[0] != g.shape(w_ih)[0] {
        return Err(Error::shape(
            "gru_cell",
            format!("`{name}` input {:?} state {:?}, weights {:?}", g.shape(x), g.shape(h), g.shape(w_ih)),
        ));
    }
    let gi = g.matmul(x, w_ih)?;
    let gi = g.add_row_vec(gi, b_ih)?;
    let gh = g.matmul(h, w_hh)?;
    let gh = g.add_row_vec(gh, b_hh)?;
    let (ir, iz, inn) = (g.slice_last(gi, 0, d_h)?, g.slice_last(gi, d_h, d_h)?, g.slice_last(gi, 2 * d_h, d_h)?);
    let (hr, hz, hn) = (g.slice_last(gh, 0, d_h)?, g.slice_last(gh, d_h, d_h)?, g.slice_last(gh, 2 * d_h, d_h)?);
    let r = g.add(ir, hr)?;
    let r = g.sigmoid(r);
    let z = g.add(iz, hz)?;
    let z = g.sigmoid(z);
    let rn = g.mul(r, hn)?;
    let n = g.add(inn, rn)?;
    let n = g.tanh(n);
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}

/// Runs a GRU over the rows of `xs[T, d_in]`, skipping rows whose mask
/// entry is false. Returns per-row states (zero rows at skipped steps) and
/// the state after the last processed row.
pub fn gru_chain<T: Real>(g: &mut Graph<'_, T>, xs: Var, mask: &[bool], h0: Var, name: &str) -> Result<(Var, Var)> {
    let rows = g.shape(xs)[0];
    if mask.len() != rows {
        return Err(Error::shape("gru_chain", format!("mask {} vs {rows} steps", mask.len())));
    }
    let d_h = g.shape(h0)[0];
    let zero = g.constant(Tensor::zeros(&[d_h]));
    let mut h = h0;
    let mut states = Vec::with_capacity(rows);
    for (t, &m) in mask.iter().enumerate() {
        if m {
            let x = g.select_row(xs, t)?;
            h = gru_cell(g, x, h, name)?;
            states.push(h);
        } else {
            states.push(zero);
        }
    }
    let seq = g.stack_rows(&states)?;
    Ok((seq, h))
}

/// Output of one self-attention block.
pub struct BlockOutput {
    pub hidden: Var,
    /// Attention weights per head, each `[T, T]`.
    pub attention: Vec<Var>,
}

/// Self-attention block: multi-head attention over unmasked keys, residual
/// connection with dropout, a ReLU feed-forward layer with a second residual,
/// and layer normalisation. Rows at masked positions are zeroed.
pub fn transformer_block<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    mask: &[bool],
    name: &str,
    n_head: usize,
    dropout: f64,
) -> Result<BlockOutput> {
    let (t, d) = match g.shape(x) {
        [t, d] => (*t, *d),
        s => return Err(Error::shape("transformer_block", format!("input {s:?} is not [T, d]"))),
    };
    if n_head == 0 || d % n_head != 0 {
        return Err(Error::config(format!("hidden width {d} is not divisible by {n_head} heads")));
    }
    if mask.len() != t {
        return Err(Error::shape("transformer_block", format!("mask {} vs {t} positions", mask.len())));
    }
    let q = linear(g, x, &format!("{name}.q"))?;
    let k = linear(g, x, &format!("{name}.k"))?;
    let v = linear(g, x, &format!("{name}.v"))?;
    let dh = d / n_head;
    let mut heads = Vec::with_capacity(n_head);
    let mut attention = Vec::with_capacity(n_head);
    for h in 0..n_head {
        let qh = g.slice_last(q, h * dh, dh)?;
        let kh = g.slice_last(k, h * dh, dh)?;
        let vh = g.slice_last(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let a = g.masked_softmax_rows(scores, mask)?;
        heads.push(g.matmul(a, vh)?);
        attention.push(a);
    }
    let beta = if n_head == 1 { heads[0] } else { g.concat(&heads)? };
    let res = g.add(x, beta)?;
    let res = g.dropout(res, dropout);
    let f = linear(g, res, &format!("{name}.ffn1"))?;
    let f = g.relu(f);
    let f = linear(g, f, &format!("{name}.ffn2"))?;
    let pre = g.add(f, res)?;
    let gain = g.param(&format!("{name}.ln.gain"))?;
    let bias = g.param(&format!("{name}.ln.bias"))?;
    let normed = g.layer_norm(pre, gain, bias, T::lit(1e-6))?;
    let hidden = g.mask_rows(normed, mask)?;
    Ok(BlockOutput { hidden, attention })
}

/// Sinusoidal position table `[len, d]`.
pub fn sinusoidal_positions<T: Real>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data).expect("position table shape")
}

/// Layout of the strided convolution pyramid that stands in for a
/// pre-trained image backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStackGeom {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of each 3x3 stride-2 stage; the last one is `d`.
    pub channels: Vec<usize>,
    /// Side of the final spatial grid.
    pub grid: usize,
}

impl ConvStackGeom {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.grid == 0 {
            return Err(Error::config("conv stack needs at least one stage and a positive grid"));
        }
        let side = self.final_side()?;
        if side % self.grid != 0 {
            return Err(Error::config(format!(
                "conv stack ends at {side}x{side}, not divisible into a {g}x{g} grid",
                g = self.grid
            )));
        }
        Ok(())
    }

    fn final_side(&self) -> Result<usize> {
        let mut side = self.image_size;
        for _ in &self.channels {
            if side == 0 {
                return Err(Error::config("image too small for the conv stack"));
            }
            side = (side + 2 - 3) / 2 + 1;
        }
        Ok(side)
    }

    pub fn d(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }
}

/// Image encoder output: the `grid x grid` feature map flattened to
/// `[grid*grid, d]` (row-major units) and the pooled vector `[d]`.
pub struct ConvOutput {
    pub map: Var,
    pub flat: Var,
}

pub fn conv_stack<T: Real>(g: &mut Graph<'_, T>, image: Var, name: &str, geom: &ConvStackGeom) -> Result<ConvOutput> {
    let s = g.shape(image).to_vec();
    if s != [geom.image_size, geom.image_size, geom.in_channels] {
        return Err(Error::shape(
            "conv_stack",
            format!("image {s:?}, expected [{0}, {0}, {1}]", geom.image_size, geom.in_channels),
        ));
    }
    let mut x = image;
    for i in 0..geom.channels.len() {
        let w = g.param(&format!("{name}.conv{i}.w"))?;
        let b = g.param(&format!("{name}.conv{i}.b"))?;
        x = g.conv2d(x, w, b, 2, 1)?;
        x = g.relu(x);
    }
    let side = g.shape(x)[0];
    let pooled = if side == geom.grid { x } else { g.avg_pool(x, side / geom.grid)? };
    let d = geom.d();
    let map = g.reshape(pooled, &[geom.grid * geom.grid, d])?;
    let mean = g.mean_rows(map, None)?;
    let flat = linear(g, mean, &format!("{name}.flat"))?;
    Ok(ConvOutput { map, flat })
}
