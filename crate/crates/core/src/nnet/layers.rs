use super::tape::{Bound, Gradients, Tape, Var};
use super::{Float, NnError};
use crate::rng::Rng;

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<F> {
    params: Vec<Param<F>>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    /// Uniform in `+-sqrt(6 / fan_in)`.
    Kaiming,
    Zero,
    One,
}

impl<F: Float> ParamSet<F> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub(crate) fn add(&mut self, name: String, shape: Vec<usize>, init: Init, rng: &mut Rng) -> usize {
        let n: usize = shape.iter().product();
        let value = match init {
            Init::Zero => vec![F::zero(); n],
            Init::One => vec![F::one(); n],
            Init::Kaiming => {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| F::of(rng.uniform(-bound, bound))).collect()
            }
        };
        self.params.push(Param {
            name,
            shape,
            value,
            grad: vec![F::zero(); n],
        });
        self.params.len() - 1
    }

    pub(crate) fn reinit(&mut self, idx: usize, init: Init, rng: &mut Rng) {
        let p = &self.params[idx];
        let mut scratch = ParamSet::new();
        scratch.add(p.name.clone(), p.shape.clone(), init, rng);
        self.params[idx].value = scratch.params.remove(0).value;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.params.iter_mut()
    }

    pub fn get(&self, i: usize) -> &Param<F> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Param<F> {
        &mut self.params[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Put every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<F>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|p| tape.leaf(p.shape.clone(), p.value.clone()))
                .collect(),
        }
    }

    /// Add the gradients of a backward pass into each parameter's buffer.
    pub fn accumulate(&mut self, grads: &Gradients<F>, bound: &Bound) {
        for (p, &v) in self.params.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.wrt(v) {
                for (a, &b) in p.grad.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = F::zero());
        }
    }

    pub fn cast<G: Float>(&self) -> ParamSet<G> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| G::of(v.as_f64())).collect(),
                    grad: p.grad.iter().map(|v| G::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Square convolution with reflect padding; a 1x1 kernel is a per-pixel
/// linear layer.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: usize,
    pub bias: usize,
    pub stride: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new<F: Float>(
        ps: &mut ParamSet<F>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), vec![cout, cin, k, k], init, rng);
        let bias = ps.add(format!("{name}.bias"), vec![cout], Init::Zero, rng);
        Self {
            weight,
            bias,
            stride,
        }
    }

    pub fn forward<F: Float>(&self, t: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, NnError> {
        t.conv2d(x, p.vars[self.weight], Some(p.vars[self.bias]), self.stride)
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: usize,
    pub beta: usize,
}

impl Norm {
    pub(crate) fn new<F: Float>(ps: &mut ParamSet<F>, rng: &mut Rng, name: &str, c: usize) -> Self {
        Self {
            gamma: ps.add(format!("{name}.gamma"), vec![c], Init::One, rng),
            beta: ps.add(format!("{name}.beta"), vec![c], Init::Zero, rng),
        }
    }

    pub fn forward<F: Float>(&self, t: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, NnError> {
        t.norm(x, p.vars[self.gamma], p.vars[self.beta])
    }
}

/// Pre-norm window attention and a pointwise MLP, each wrapped in a
/// residual connection.
#[derive(Clone, Debug)]
pub struct DehazeBlock {
    pub norm1: Norm,
    pub q: Conv2d,
    pub k: Conv2d,
    pub v: Conv2d,
    pub proj: Conv2d,
    pub norm2: Norm,
    pub mlp_in: Conv2d,
    pub mlp_out: Conv2d,
    pub window: usize,
    pub heads: usize,
}

impl DehazeBlock {
    pub(crate) fn new<F: Float>(
        ps: &mut ParamSet<F>,
        rng: &mut Rng,
        name: &str,
        c: usize,
        window: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        let lin = |ps: &mut ParamSet<F>, rng: &mut Rng, n: &str, cin, cout| {
            Conv2d::new(ps, rng, &format!("{name}.{n}"), cin, cout, 1, 1, Init::Kaiming)
        };
        Self {
            norm1: Norm::new(ps, rng, &format!("{name}.norm1"), c),
            q: lin(ps, rng, "q", c, c),
            k: lin(ps, rng, "k", c, c),
            v: lin(ps, rng, "v", c, c),
            proj: lin(ps, rng, "proj", c, c),
            norm2: Norm::new(ps, rng, &format!("{name}.norm2"), c),
            mlp_in: lin(ps, rng, "mlp_in", c, c * mlp_ratio),
            mlp_out: lin(ps, rng, "mlp_out", c * mlp_ratio, c),
            window,
            heads,
        }
    }

    pub fn forward<F: Float>(&self, t: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var, NnError> {
        let (h, w) = (t.shape(x)[1], t.shape(x)[2]);
        let pad = |n: usize| (self.window - n % self.window) % self.window;
        let normed = self.norm1.forward(t, p, x)?;
        let padded = t.pad_reflect(normed, 0, pad(h), 0, pad(w))?;
        let q = self.q.forward(t, p, padded)?;
        let k = self.k.forward(t, p, padded)?;
        let v = self.v.forward(t, p, padded)?;
        let mut a = t.window_attention(q, k, v, self.window, self.heads)?;
        if pad(h) + pad(w) > 0 {
            a = t.crop(a, 0, 0, w, h)?;
        }
        let a = self.proj.forward(t, p, a)?;
        let x = t.add(x, a)?;

        let normed = self.norm2.forward(t, p, x)?;
        let m = self.mlp_in.forward(t, p, normed)?;
        let m = t.gelu(m);
        let m = self.mlp_out.forward(t, p, m)?;
        t.add(x, m)
    }
}

/// Gated skip fusion: `w1 * proj(f1) + w2 * f2 + f2`, with per-channel
/// weights from a softmax over two logits produced by a squeeze MLP on the
/// pooled sum `gap(proj(f1) + f2)`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub proj: Conv2d,
    pub squeeze: Conv2d,
    pub expand: Conv2d,
    pub channels: usize,
}

impl Fusion {
    pub(crate) fn new<F: Float>(
        ps: &mut ParamSet<F>,
        rng: &mut Rng,
        name: &str,
        skip_channels: usize,
        channels: usize,
    ) -> Self {
        let hidden = (channels / 2).max(1);
        Self {
            proj: Conv2d::new(ps, rng, &format!("{name}.proj"), skip_channels, channels, 1, 1, Init::Kaiming),
            squeeze: Conv2d::new(ps, rng, &format!("{name}.squeeze"), channels, hidden, 1, 1, Init::Kaiming),
            expand: Conv2d::new(ps, rng, &format!("{name}.expand"), hidden, 2 * channels, 1, 1, Init::Kaiming),
            channels,
        }
    }

    /// Returns the fused map and the `(2c, 1, 1)` weight vector `[w1; w2]`.
    pub fn forward_with_weights<F: Float>(
        &self,
        t: &mut Tape<F>,
        p: &Bound,
        f1: Var,
        f2: Var,
    ) -> Result<(Var, Var), NnError> {
        let f1p = self.proj.forward(t, p, f1)?;
        let sum = t.add(f1p, f2)?;
        let pooled = t.gap(sum)?;
        let z = self.squeeze.forward(t, p, pooled)?;
        let z = t.gelu(z);
        let logits = self.expand.forward(t, p, z)?;
        let weights = t.pair_softmax(logits)?;
        let w1 = t.channels(weights, 0, self.channels)?;
        let w2 = t.channels(weights, self.channels, self.channels)?;
        let a = t.channel_scale(f1p, w1)?;
        let b = t.channel_scale(f2, w2)?;
        let mixed = t.add(a, b)?;
        Ok((t.add(mixed, f2)?, weights))
    }

    pub fn forward<F: Float>(&self, t: &mut Tape<F>, p: &Bound, f1: Var, f2: Var) -> Result<Var, NnError> {
        self.forward_with_weights(t, p, f1, f2).map(|(x, _)| x)
    }
}
