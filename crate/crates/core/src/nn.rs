//! Parameterized building blocks shared by the pathways, the adapter and the
//! decoder. Parameters live in a [`ParamStore`] under dotted prefixes; each
//! block has an `init_*` function that creates them and a forward function
//! that binds them into a [`Graph`].

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, ParamStore, Real, Tensor, Var};

pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    prefix: &str,
    din: usize,
    dout: usize,
    gain: f64,
) {
    let std = gain / (din as f64).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::randn(&[din, dout], std, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]));
}

pub fn zero_linear(store: &mut ParamStore<f32>, prefix: &str, din: usize, dout: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[din, dout]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]));
}

pub fn init_layer_norm(store: &mut ParamStore<f32>, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]));
}

pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    prefix: &str,
    k: usize,
    cin: usize,
    cout: usize,
    gain: f64,
) {
    let std = gain / ((k * k * cin) as f64).sqrt();
    store.insert(
        format!("{prefix}.w"),
        Tensor::randn(&[k, k, cin, cout], std, rng),
    );
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub fn zero_conv(store: &mut ParamStore<f32>, prefix: &str, k: usize, cin: usize, cout: usize) {
    store.insert(format!("{prefix}.w"), Tensor::zeros(&[k, k, cin, cout]));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout]));
}

pub fn linear<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let b = g.param(p, &format!("{prefix}.b"))?;
    g.linear(x, w, b)
}

pub fn layer_norm<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let gamma = g.param(p, &format!("{prefix}.g"))?;
    let beta = g.param(p, &format!("{prefix}.b"))?;
    g.layer_norm(x, gamma, beta)
}

pub fn conv<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Result<Var> {
    let w = g.param(p, &format!("{prefix}.w"))?;
    let b = g.param(p, &format!("{prefix}.b"))?;
    let y = g.conv2d(x, w, stride, pad)?;
    g.add_row(y, b)
}

/// Pre-norm transformer block parameters.
pub fn init_transformer_block<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    prefix: &str,
    d: usize,
    mlp_ratio: usize,
    depth: usize,
) {
    let res_gain = 1.0 / (2.0 * depth as f64).sqrt();
    init_layer_norm(store, &format!("{prefix}.ln1"), d);
    for name in ["q", "k", "v"] {
        init_linear(store, rng, &format!("{prefix}.attn.{name}"), d, d, 1.0);
    }
    init_linear(store, rng, &format!("{prefix}.attn.o"), d, d, res_gain);
    init_layer_norm(store, &format!("{prefix}.ln2"), d);
    init_linear(
        store,
        rng,
        &format!("{prefix}.mlp.fc1"),
        d,
        d * mlp_ratio,
        1.0,
    );
    init_linear(
        store,
        rng,
        &format!("{prefix}.mlp.fc2"),
        d * mlp_ratio,
        d,
        res_gain,
    );
}

/// `x + attn(ln1(x))`, then `x + mlp(ln2(x))` on an `[n, d]` sequence.
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    p: &ParamStore<T>,
    prefix: &str,
    x: Var,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let h = layer_norm(g, p, &format!("{prefix}.ln1"), x)?;
    let q = linear(g, p, &format!("{prefix}.attn.q"), h)?;
    let k = linear(g, p, &format!("{prefix}.attn.k"), h)?;
    let v = linear(g, p, &format!("{prefix}.attn.v"), h)?;
    let a = g.attention(q, k, v, heads, causal)?;
    let o = linear(g, p, &format!("{prefix}.attn.o"), a)?;
    let x = g.add(x, o)?;
    let h = layer_norm(g, p, &format!("{prefix}.ln2"), x)?;
    let m = linear(g, p, &format!("{prefix}.mlp.fc1"), h)?;
    let m = g.gelu(m)?;
    let m = linear(g, p, &format!("{prefix}.mlp.fc2"), m)?;
    g.add(x, m)
}

/// Two-layer GELU MLP parameters; `zero_out` zero-initializes the second layer.
pub fn init_mlp<R: Rng + ?Sized>(
    store: &mut ParamStore<f32>,
    rng: &mut R,
    prefix: &str,
    din: usize,
    hidden: usize,
    dout: usize,
    zero_out: bool,
) {
    init_linear(store, rng, &format!("{prefix}.fc1"), din, hidden, 1.0);
    if zero_out {
        zero_linear(store, &format!("{prefix}.fc2"), hidden, dout);
    } else {
        init_linear(store, rng, &format!("{prefix}.fc2"), hidden, dout, 1.0);
    }
}

pub fn mlp<T: Real>(g: &mut Graph<T>, p: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, p, &format!("{prefix}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, p, &format!("{prefix}.fc2"), h)
}
