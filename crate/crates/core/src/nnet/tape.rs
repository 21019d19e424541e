use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::ops::{self, AttnGeom, ConvGeom};
use super::{shape_err, Float, NnError};

pub type Shape = Vec<usize>;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: usize,
}

/// Deliberate backward-rule corruption, used as a negative control for the
/// gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scale the GELU derivative by 1.5.
    GeluGrad,
}

enum Op<F> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Scale(usize, F),
    Gather {
        src: usize,
        index: Arc<[u32]>,
    },
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    Norm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    Gelu(usize),
    Attn {
        q: usize,
        k: usize,
        v: usize,
        geom: AttnGeom,
        probs: Vec<F>,
    },
    Gap(usize),
    PairSoftmax(usize),
    ChannelScale {
        x: usize,
        s: usize,
    },
    Blur {
        x: usize,
        taps: Vec<F>,
    },
    Sum(usize),
    Dot {
        x: usize,
        weights: Vec<F>,
    },
    MeanAbs(usize),
    MeanSquare(usize),
    SumSquare(usize),
}

struct Node<F> {
    shape: Shape,
    value: Vec<F>,
    op: Op<F>,
}

/// Records executed operations and their saved forward values; `backward`
/// replays them in reverse, accumulating gradients.
pub struct Tape<F> {
    id: u64,
    nodes: Vec<Node<F>>,
    fault: Option<Fault>,
}

/// Per-node gradients from one backward pass.
pub struct Gradients<F> {
    tape: u64,
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }
}

/// Parameter handles bound onto one tape, in parameter-set order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn chw(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Some((c, h, w)),
        _ => None,
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<F>, op: Op<F>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from another tape");
        v.idx
    }

    pub fn owns(&self, v: Var) -> bool {
        v.tape == self.id && v.idx < self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[self.idx(v)].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v)].shape
    }

    pub fn scalar(&self, v: Var) -> F {
        self.value(v)[0]
    }

    /// Softmax probabilities saved by a window-attention node,
    /// laid out `[window][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[self.idx(v)].op {
            Op::Attn { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn leaf(&mut self, shape: Shape, value: Vec<F>) -> Var {
        assert_eq!(numel(&shape), value.len(), "leaf data does not match shape");
        self.push(shape, value, Op::Leaf)
    }

    /// A fresh leaf holding `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let i = self.idx(v);
        let (shape, value) = (self.nodes[i].shape.clone(), self.nodes[i].value.clone());
        self.leaf(shape, value)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<(usize, usize), NnError> {
        if a.tape != self.id || b.tape != self.id {
            return Err(NnError::CrossTape);
        }
        let (ia, ib) = (a.idx, b.idx);
        if self.nodes[ia].shape != self.nodes[ib].shape {
            return Err(shape_err(
                name,
                format!("{:?} vs {:?}", self.nodes[ia].shape, self.nodes[ib].shape),
            ));
        }
        Ok((ia, ib))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ia, ib) = self.binary(a, b, "add")?;
        let value = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ia, ib) = self.binary(a, b, "sub")?;
        let value = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(self.nodes[ia].shape.clone(), value, Op::Sub(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let ia = self.idx(a);
        let value = self.nodes[ia].value.iter().map(|&x| x * c).collect();
        self.push(self.nodes[ia].shape.clone(), value, Op::Scale(ia, c))
    }

    /// `out[i] = src[index[i]]`; backward scatter-adds. Crops, padding,
    /// channel slicing and nearest upsampling are all gathers.
    pub fn gather(&mut self, src: Var, index: Arc<[u32]>, shape: Shape) -> Result<Var, NnError> {
        let is = self.idx(src);
        let n = self.nodes[is].value.len();
        if numel(&shape) != index.len() {
            return Err(shape_err("gather", "index length does not match output shape"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i as usize >= n) {
            return Err(shape_err("gather", format!("index {bad} out of range {n}")));
        }
        let src_v = &self.nodes[is].value;
        let value = index.iter().map(|&i| src_v[i as usize]).collect();
        Ok(self.push(shape, value, Op::Gather { src: is, index }))
    }

    /// Crop a `(c, h, w)` map to the rectangle at `(x, y)` of size `w x h`.
    pub fn crop(&mut self, src: Var, x: usize, y: usize, w: usize, h: usize) -> Result<Var, NnError> {
        let (c, sh, sw) = chw(self.shape(src)).ok_or_else(|| shape_err("crop", "expected (c,h,w)"))?;
        if w == 0 || h == 0 || x + w > sw || y + h > sh {
            return Err(shape_err("crop", format!("({x},{y},{w},{h}) outside {sw}x{sh}")));
        }
        let mut idx = Vec::with_capacity(c * w * h);
        for ch in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    idx.push(((ch * sh + y + yy) * sw + x + xx) as u32);
                }
            }
        }
        self.gather(src, idx.into(), vec![c, h, w])
    }

    /// Reflect-pad a `(c, h, w)` map.
    pub fn pad_reflect(
        &mut self,
        src: Var,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Result<Var, NnError> {
        let (c, h, w) = chw(self.shape(src)).ok_or_else(|| shape_err("pad", "expected (c,h,w)"))?;
        if top + bottom + left + right == 0 {
            return Ok(src);
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let mut idx = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let sy = ops::reflect_index(y as isize - top as isize, h);
                for x in 0..ow {
                    let sx = ops::reflect_index(x as isize - left as isize, w);
                    idx.push(((ch * h + sy) * w + sx) as u32);
                }
            }
        }
        self.gather(src, idx.into(), vec![c, oh, ow])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, src: Var) -> Result<Var, NnError> {
        let (c, h, w) = chw(self.shape(src)).ok_or_else(|| shape_err("upsample", "expected (c,h,w)"))?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut idx = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    idx.push(((ch * h + y / 2) * w + x / 2) as u32);
                }
            }
        }
        self.gather(src, idx.into(), vec![c, oh, ow])
    }

    /// Channels `from..from+count` of a `(c, h, w)` map.
    pub fn channels(&mut self, src: Var, from: usize, count: usize) -> Result<Var, NnError> {
        let (c, h, w) = chw(self.shape(src)).ok_or_else(|| shape_err("channels", "expected (c,h,w)"))?;
        if from + count > c || count == 0 {
            return Err(shape_err("channels", format!("{from}+{count} > {c}")));
        }
        let idx: Vec<u32> = (from * h * w..(from + count) * h * w).map(|i| i as u32).collect();
        self.gather(src, idx.into(), vec![count, h, w])
    }

    /// Valid cross-correlation. `w` is `(cout, cin, k, k)`, `b` is `(cout)`.
    pub fn conv_valid(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, NnError> {
        let (ix, iw) = (self.idx(x), self.idx(w));
        let (cin, h, wd) = chw(&self.nodes[ix].shape).ok_or_else(|| shape_err("conv2d", "input must be (c,h,w)"))?;
        let (cout, wcin, k) = match self.nodes[iw].shape[..] {
            [co, ci, k1, k2] if k1 == k2 => (co, ci, k1),
            _ => return Err(shape_err("conv2d", "weight must be (cout,cin,k,k)")),
        };
        if wcin != cin {
            return Err(shape_err("conv2d", format!("input has {cin} channels, weight expects {wcin}")));
        }
        if !(stride == 1 || stride == 2) || k > h || k > wd {
            return Err(shape_err("conv2d", format!("stride {stride}, kernel {k} on {h}x{wd}")));
        }
        let ib = match b {
            Some(b) => {
                let ib = self.idx(b);
                if self.nodes[ib].value.len() != cout {
                    return Err(shape_err("conv2d", "bias length != cout"));
                }
                Some(ib)
            }
            None => None,
        };
        let geom = ConvGeom {
            cin,
            h,
            w: wd,
            cout,
            k,
            stride,
        };
        let value = ops::conv_forward(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            ib.map(|i| self.nodes[i].value.as_slice()),
            geom,
        );
        let shape = vec![cout, geom.out_h(), geom.out_w()];
        Ok(self.push(shape, value, Op::Conv { x: ix, w: iw, b: ib, geom }))
    }

    /// Convolution with reflect padding of `k / 2` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, NnError> {
        let k = *self.shape(w).get(2).ok_or_else(|| shape_err("conv2d", "weight must be 4-d"))?;
        let p = k / 2;
        let padded = self.pad_reflect(x, p, p, p, p)?;
        self.conv_valid(padded, w, b, stride)
    }

    /// Per-channel mean/variance normalization with learned scale and shift.
    pub fn norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NnError> {
        let (ix, ig, ib) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let (c, h, w) = chw(&self.nodes[ix].shape).ok_or_else(|| shape_err("norm", "expected (c,h,w)"))?;
        if self.nodes[ig].value.len() != c || self.nodes[ib].value.len() != c {
            return Err(shape_err("norm", "scale/shift length != channels"));
        }
        let (value, xhat, inv_std) = ops::norm_forward(
            &self.nodes[ix].value,
            c,
            h * w,
            &self.nodes[ig].value,
            &self.nodes[ib].value,
        );
        Ok(self.push(
            vec![c, h, w],
            value,
            Op::Norm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let ix = self.idx(x);
        let value = self.nodes[ix].value.iter().map(|&v| ops::gelu(v)).collect();
        self.push(self.nodes[ix].shape.clone(), value, Op::Gelu(ix))
    }

    /// Attention within non-overlapping `window x window` tiles. `q`, `k`, `v`
    /// are `(c, h, w)` with `h` and `w` multiples of the window.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        window: usize,
        heads: usize,
    ) -> Result<Var, NnError> {
        let (iq, ik, iv) = (self.idx(q), self.idx(k), self.idx(v));
        let shape = self.nodes[iq].shape.clone();
        if self.nodes[ik].shape != shape || self.nodes[iv].shape != shape {
            return Err(shape_err("window_attention", "q, k, v shapes differ"));
        }
        let (c, h, w) = chw(&shape).ok_or_else(|| shape_err("window_attention", "expected (c,h,w)"))?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(shape_err("window_attention", format!("{h}x{w} not tiled by {window}")));
        }
        if heads == 0 || c % heads != 0 {
            return Err(shape_err("window_attention", format!("{c} channels, {heads} heads")));
        }
        let geom = AttnGeom {
            c,
            h,
            w,
            window,
            heads,
        };
        let (value, probs) = ops::attn_forward(
            &self.nodes[iq].value,
            &self.nodes[ik].value,
            &self.nodes[iv].value,
            geom,
        );
        Ok(self.push(
            shape,
            value,
            Op::Attn {
                q: iq,
                k: ik,
                v: iv,
                geom,
                probs,
            },
        ))
    }

    /// Global average pool `(c, h, w) -> (c, 1, 1)`.
    pub fn gap(&mut self, x: Var) -> Result<Var, NnError> {
        let ix = self.idx(x);
        let (c, h, w) = chw(&self.nodes[ix].shape).ok_or_else(|| shape_err("gap", "expected (c,h,w)"))?;
        let n = F::of((h * w) as f64);
        let value = self.nodes[ix]
            .value
            .chunks_exact(h * w)
            .map(|p| p.iter().copied().sum::<F>() / n)
            .collect();
        Ok(self.push(vec![c, 1, 1], value, Op::Gap(ix)))
    }

    /// Softmax over pairs `(x[i], x[i + c])` of a `(2c, 1, 1)` vector.
    pub fn pair_softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let ix = self.idx(x);
        let len = self.nodes[ix].value.len();
        if !len.is_multiple_of(2) {
            return Err(shape_err("pair_softmax", "odd length"));
        }
        let c = len / 2;
        let xs = &self.nodes[ix].value;
        let mut value = vec![F::zero(); len];
        for i in 0..c {
            let m = xs[i].max(xs[i + c]);
            let (a, b) = ((xs[i] - m).exp(), (xs[i + c] - m).exp());
            value[i] = a / (a + b);
            value[i + c] = b / (a + b);
        }
        Ok(self.push(vec![len, 1, 1], value, Op::PairSoftmax(ix)))
    }

    /// `x[c, :, :] * s[c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var, NnError> {
        let (ix, is) = (self.idx(x), self.idx(s));
        let (c, h, w) = chw(&self.nodes[ix].shape).ok_or_else(|| shape_err("channel_scale", "expected (c,h,w)"))?;
        if self.nodes[is].value.len() != c {
            return Err(shape_err("channel_scale", "scale length != channels"));
        }
        let sv = &self.nodes[is].value;
        let value = self.nodes[ix]
            .value
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / (h * w)])
            .collect();
        Ok(self.push(vec![c, h, w], value, Op::ChannelScale { x: ix, s: is }))
    }

    /// Separable blur with the given odd-length taps and reflect borders.
    pub fn blur(&mut self, x: Var, taps: &[f64]) -> Result<Var, NnError> {
        let ix = self.idx(x);
        let (c, h, w) = chw(&self.nodes[ix].shape).ok_or_else(|| shape_err("blur", "expected (c,h,w)"))?;
        if taps.len().is_multiple_of(2) || taps.len() > h.min(w) {
            return Err(shape_err("blur", format!("{} taps on {h}x{w}", taps.len())));
        }
        let taps: Vec<F> = taps.iter().map(|&t| F::of(t)).collect();
        let value = ops::blur_forward(&self.nodes[ix].value, c, h, w, &taps);
        Ok(self.push(vec![c, h, w], value, Op::Blur { x: ix, taps }))
    }

    fn reduce(&mut self, x: Var, f: impl Fn(&[F]) -> F, op: impl Fn(usize) -> Op<F>) -> Var {
        let ix = self.idx(x);
        let v = f(&self.nodes[ix].value);
        self.push(vec![1, 1, 1], vec![v], op(ix))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, |v| v.iter().copied().sum(), Op::Sum)
    }

    /// `sum_i weights[i] * x[i]` against constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Vec<F>) -> Result<Var, NnError> {
        let ix = self.idx(x);
        if weights.len() != self.nodes[ix].value.len() {
            return Err(shape_err(
                "dot_const",
                format!("{} weights for {:?}", weights.len(), self.nodes[ix].shape),
            ));
        }
        let v = self.nodes[ix].value.iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(vec![1, 1, 1], vec![v], Op::Dot { x: ix, weights }))
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        self.reduce(
            x,
            |v| v.iter().map(|a| a.abs()).sum::<F>() / F::of(v.len() as f64),
            Op::MeanAbs,
        )
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        self.reduce(
            x,
            |v| v.iter().map(|&a| a * a).sum::<F>() / F::of(v.len() as f64),
            Op::MeanSquare,
        )
    }

    pub fn sum_square(&mut self, x: Var) -> Var {
        self.reduce(x, |v| v.iter().map(|&a| a * a).sum::<F>(), Op::SumSquare)
    }

    /// Reverse pass from a scalar node. Gradients of every node that the
    /// loss depends on are returned; nothing is stored on the tape, so two
    /// calls produce two independent (identical) results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>, NnError> {
        if loss.tape != self.id {
            return Err(NnError::CrossTape);
        }
        let li = loss.idx;
        if self.nodes[li].value.len() != 1 {
            return Err(NnError::NotScalar(self.nodes[li].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![F::one()]);

        fn acc<F: Float>(grads: &mut [Option<Vec<F>>], i: usize, len: usize) -> &mut [F] {
            grads[i].get_or_insert_with(|| vec![F::zero(); len])
        }

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let len_of = |j: usize| self.nodes[j].value.len();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    for (d, &gv) in acc(&mut grads, *a, len_of(*a)).iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, &gv) in acc(&mut grads, *b, len_of(*b)).iter_mut().zip(&g) {
                        *d += gv;
                    }
                }
                Op::Sub(a, b) => {
                    for (d, &gv) in acc(&mut grads, *a, len_of(*a)).iter_mut().zip(&g) {
                        *d += gv;
                    }
                    for (d, &gv) in acc(&mut grads, *b, len_of(*b)).iter_mut().zip(&g) {
                        *d -= gv;
                    }
                }
                Op::Scale(a, c) => {
                    for (d, &gv) in acc(&mut grads, *a, len_of(*a)).iter_mut().zip(&g) {
                        *d += gv * *c;
                    }
                }
                Op::Gather { src, index } => {
                    let d = acc(&mut grads, *src, len_of(*src));
                    for (&j, &gv) in index.iter().zip(&g) {
                        d[j as usize] += gv;
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    let mut dx = grads[*x].take().unwrap_or_else(|| vec![F::zero(); len_of(*x)]);
                    let mut dw = grads[*w].take().unwrap_or_else(|| vec![F::zero(); len_of(*w)]);
                    let mut db = b.map(|bi| grads[bi].take().unwrap_or_else(|| vec![F::zero(); len_of(bi)]));
                    ops::conv_backward(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        *geom,
                        &g,
                        &mut dx,
                        &mut dw,
                        db.as_deref_mut(),
                    );
                    grads[*x] = Some(dx);
                    grads[*w] = Some(dw);
                    if let (Some(bi), Some(db)) = (b, db) {
                        grads[*bi] = Some(db);
                    }
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let (c, h, w) = chw(&node.shape).expect("norm shape");
                    let mut dx = grads[*x].take().unwrap_or_else(|| vec![F::zero(); len_of(*x)]);
                    let mut dg = grads[*gamma].take().unwrap_or_else(|| vec![F::zero(); c]);
                    let mut dbt = grads[*beta].take().unwrap_or_else(|| vec![F::zero(); c]);
                    ops::norm_backward(
                        xhat,
                        inv_std,
                        &self.nodes[*gamma].value,
                        c,
                        h * w,
                        &g,
                        &mut dx,
                        &mut dg,
                        &mut dbt,
                    );
                    grads[*x] = Some(dx);
                    grads[*gamma] = Some(dg);
                    grads[*beta] = Some(dbt);
                }
                Op::Gelu(a) => {
                    let fault = if self.fault == Some(Fault::GeluGrad) {
                        F::of(1.5)
                    } else {
                        F::one()
                    };
                    let xs = &self.nodes[*a].value;
                    let d = acc(&mut grads, *a, xs.len());
                    for ((dv, &xv), &gv) in d.iter_mut().zip(xs).zip(&g) {
                        *dv += gv * ops::gelu_grad(xv) * fault;
                    }
                }
                Op::Attn {
                    q,
                    k,
                    v,
                    geom,
                    probs,
                } => {
                    let n = node.value.len();
                    let mut dq = grads[*q].take().unwrap_or_else(|| vec![F::zero(); n]);
                    let mut dk = grads[*k].take().unwrap_or_else(|| vec![F::zero(); n]);
                    let mut dv = grads[*v].take().unwrap_or_else(|| vec![F::zero(); n]);
                    ops::attn_backward(
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        probs,
                        *geom,
                        &g,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    grads[*q] = Some(dq);
                    grads[*k] = Some(dk);
                    grads[*v] = Some(dv);
                }
                Op::Gap(a) => {
                    let len = len_of(*a);
                    let plane = len / g.len();
                    let inv = F::one() / F::of(plane as f64);
                    let d = acc(&mut grads, *a, len);
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv += g[i / plane] * inv;
                    }
                }
                Op::PairSoftmax(a) => {
                    let c = g.len() / 2;
                    let p = &node.value;
                    let d = acc(&mut grads, *a, 2 * c);
                    for i in 0..c {
                        let dot = p[i] * g[i] + p[i + c] * g[i + c];
                        d[i] += p[i] * (g[i] - dot);
                        d[i + c] += p[i + c] * (g[i + c] - dot);
                    }
                }
                Op::ChannelScale { x, s } => {
                    let plane = node.value.len() / len_of(*s);
                    let (xv, sv) = (&self.nodes[*x].value, &self.nodes[*s].value);
                    let dx = acc(&mut grads, *x, xv.len());
                    for (i, dv) in dx.iter_mut().enumerate() {
                        *dv += g[i] * sv[i / plane];
                    }
                    let ds = acc(&mut grads, *s, sv.len());
                    for (i, &gv) in g.iter().enumerate() {
                        ds[i / plane] += gv * xv[i];
                    }
                }
                Op::Blur { x, taps } => {
                    let (c, h, w) = chw(&node.shape).expect("blur shape");
                    let dx = acc(&mut grads, *x, len_of(*x));
                    ops::blur_adjoint(&g, c, h, w, taps, dx);
                }
                Op::Sum(a) => {
                    for dv in acc(&mut grads, *a, len_of(*a)).iter_mut() {
                        *dv += g[0];
                    }
                }
                Op::Dot { x, weights } => {
                    for (dv, &w) in acc(&mut grads, *x, weights.len()).iter_mut().zip(weights) {
                        *dv += g[0] * w;
                    }
                }
                Op::MeanAbs(a) => {
                    let xs = &self.nodes[*a].value;
                    let scale = g[0] / F::of(xs.len() as f64);
                    let d = acc(&mut grads, *a, xs.len());
                    for (dv, &xv) in d.iter_mut().zip(xs) {
                        if xv > F::zero() {
                            *dv += scale;
                        } else if xv < F::zero() {
                            *dv -= scale;
                        }
                    }
                }
                Op::MeanSquare(a) | Op::SumSquare(a) => {
                    let xs = &self.nodes[*a].value;
                    let two = F::of(2.0) * g[0];
                    let scale = if matches!(node.op, Op::MeanSquare(_)) {
                        two / F::of(xs.len() as f64)
                    } else {
                        two
                    };
                    let d = acc(&mut grads, *a, xs.len());
                    for (dv, &xv) in d.iter_mut().zip(xs) {
                        *dv += scale * xv;
                    }
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference gradient of `f` at `x0` for every coordinate.
    fn numeric_grad(x0: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        let mut x = x0.to_vec();
        (0..x0.len())
            .map(|i| {
                x[i] = x0[i] + eps;
                let up = f(&x);
                x[i] = x0[i] - eps;
                let down = f(&x);
                x[i] = x0[i];
                (up - down) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "coord {i}: analytic {x} numeric {y}");
        }
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut r = crate::rng::Rng::new(seed);
        (0..n).map(|_| r.uniform(-1.0, 1.0)).collect()
    }

    #[test]
    fn one_by_one_conv_is_channel_mix() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t.leaf(vec![1, 2, 1, 1], vec![0.5, -1.0]);
        let y = t.conv2d(x, w, None, 1).unwrap();
        assert_eq!(t.value(y), &[0.5 - 3.0, 1.0 - 4.0]);
    }

    #[test]
    fn identity_kernel_conv_is_identity() {
        let mut t = Tape::<f64>::new();
        let data = pseudo(3 * 5 * 5, 1);
        let x = t.leaf(vec![3, 5, 5], data.clone());
        let mut wv = vec![0.0; 3 * 3 * 9];
        for c in 0..3 {
            wv[(c * 3 + c) * 9 + 4] = 1.0;
        }
        let w = t.leaf(vec![3, 3, 3, 3], wv);
        let y = t.conv2d(x, w, None, 1).unwrap();
        assert_eq!(t.value(y), data.as_slice());
    }

    #[test]
    fn conv_shape_errors() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![2, 4, 4], vec![0.0; 32]);
        let w = t.leaf(vec![1, 3, 3, 3], vec![0.0; 27]);
        assert!(matches!(t.conv2d(x, w, None, 1), Err(NnError::Shape { .. })));
        let w2 = t.leaf(vec![1, 2, 3, 3], vec![0.0; 18]);
        assert!(t.conv2d(x, w2, None, 3).is_err());
    }

    fn conv_loss(xv: &[f64], wv: &[f64], bv: &[f64], stride: usize, r: &[f64]) -> f64 {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![3, 5, 5], xv.to_vec());
        let w = t.leaf(vec![2, 3, 3, 3], wv.to_vec());
        let b = t.leaf(vec![2], bv.to_vec());
        let y = t.conv2d(x, w, Some(b), stride).unwrap();
        t.value(y).iter().zip(r).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for stride in [1, 2] {
            let (xv, wv, bv) = (pseudo(75, 2), pseudo(54, 3), pseudo(2, 4));
            let mut t = Tape::<f64>::new();
            let x = t.leaf(vec![3, 5, 5], xv.clone());
            let w = t.leaf(vec![2, 3, 3, 3], wv.clone());
            let b = t.leaf(vec![2], bv.clone());
            let y = t.conv2d(x, w, Some(b), stride).unwrap();
            let n = t.value(y).len();
            let r = pseudo(n, 5);
            let shape = t.shape(y).to_vec();
            let rv = t.leaf(shape, r.clone());
            let loss = weighted_sum(&mut t, y, rv);
            let grads = t.backward(loss).unwrap();
            let gx = numeric_grad(&xv, |p| conv_loss(p, &wv, &bv, stride, &r));
            let gw = numeric_grad(&wv, |p| conv_loss(&xv, p, &bv, stride, &r));
            let gb = numeric_grad(&bv, |p| conv_loss(&xv, &wv, p, stride, &r));
            assert_close(grads.wrt(x).unwrap(), &gx, 1e-5);
            assert_close(grads.wrt(w).unwrap(), &gw, 1e-5);
            assert_close(grads.wrt(b).unwrap(), &gb, 1e-5);
        }
    }

    fn attn_loss(qv: &[f64], kv: &[f64], vv: &[f64], r: &[f64]) -> f64 {
        let mut t = Tape::<f64>::new();
        let q = t.leaf(vec![4, 4, 4], qv.to_vec());
        let k = t.leaf(vec![4, 4, 4], kv.to_vec());
        let v = t.leaf(vec![4, 4, 4], vv.to_vec());
        let o = t.window_attention(q, k, v, 4, 2).unwrap();
        t.value(o).iter().zip(r).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let (qv, kv, vv, r) = (pseudo(64, 10), pseudo(64, 11), pseudo(64, 12), pseudo(64, 13));
        let mut t = Tape::<f64>::new();
        let q = t.leaf(vec![4, 4, 4], qv.clone());
        let k = t.leaf(vec![4, 4, 4], kv.clone());
        let v = t.leaf(vec![4, 4, 4], vv.clone());
        let o = t.window_attention(q, k, v, 4, 2).unwrap();
        let rw = t.leaf(vec![4, 4, 4], r.clone());
        let sum_or = weighted_sum(&mut t, o, rw);
        let grads = t.backward(sum_or).unwrap();
        assert_close(grads.wrt(q).unwrap(), &numeric_grad(&qv, |p| attn_loss(p, &kv, &vv, &r)), 1e-4);
        assert_close(grads.wrt(k).unwrap(), &numeric_grad(&kv, |p| attn_loss(&qv, p, &vv, &r)), 1e-4);
        assert_close(grads.wrt(v).unwrap(), &numeric_grad(&vv, |p| attn_loss(&qv, &kv, p, &r)), 1e-4);
    }

    /// sum(a * b) built from tape primitives: ((a+b)^2 - a^2 - b^2) / 2.
    fn weighted_sum(t: &mut Tape<f64>, a: Var, b: Var) -> Var {
        let ab = t.add(a, b).unwrap();
        let s1 = t.sum_square(ab);
        let s2 = t.sum_square(a);
        let s3 = t.sum_square(b);
        let d = t.sub(s1, s2).unwrap();
        let d = t.sub(d, s3).unwrap();
        t.scale(d, 0.5)
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut t = Tape::<f64>::new();
        let q = t.leaf(vec![4, 8, 4], pseudo(128, 20));
        let k = t.leaf(vec![4, 8, 4], pseudo(128, 21));
        let v = t.leaf(vec![4, 8, 4], pseudo(128, 22));
        let o = t.window_attention(q, k, v, 4, 1).unwrap();
        let probs = t.attention_probs(o).unwrap();
        assert_eq!(probs.len(), 2 * 16 * 16);
        for row in probs.chunks_exact(16) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn identical_tokens_attend_uniformly() {
        let mut t = Tape::<f64>::new();
        // every token in the window carries the same 2-vector
        let q = t.leaf(vec![2, 4, 4], [vec![0.3; 16], vec![-0.7; 16]].concat());
        let v = t.leaf(vec![2, 4, 4], [vec![1.5; 16], vec![0.25; 16]].concat());
        let o = t.window_attention(q, q, v, 4, 1).unwrap();
        for &p in t.attention_probs(o).unwrap() {
            assert!((p - 1.0 / 16.0).abs() < 1e-12);
        }
        assert_eq!(t.value(o), t.value(v));
    }

    #[test]
    fn norm_gelu_softmax_scale_gradients() {
        let xv = pseudo(2 * 3 * 3, 30);
        let gv = pseudo(2, 31);
        let bv = pseudo(2, 32);
        let lv = pseudo(4, 33);
        let r = pseudo(18, 34);
        let f = |xv: &[f64], gv: &[f64], bv: &[f64], lv: &[f64]| -> (Tape<f64>, [Var; 5]) {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(vec![2, 3, 3], xv.to_vec());
            let g = t.leaf(vec![2], gv.to_vec());
            let b = t.leaf(vec![2], bv.to_vec());
            let l = t.leaf(vec![4, 1, 1], lv.to_vec());
            let n = t.norm(x, g, b).unwrap();
            let a = t.gelu(n);
            let p = t.pair_softmax(l).unwrap();
            let w = t.channels(p, 0, 2).unwrap();
            let s = t.channel_scale(a, w).unwrap();
            let rr = t.leaf(vec![2, 3, 3], r.clone());
            let loss = weighted_sum(&mut t, s, rr);
            let pooled = t.gap(s).unwrap();
            let pooled_sq = t.sum_square(pooled);
            let loss = t.add(loss, pooled_sq).unwrap();
            (t, [x, g, b, l, loss])
        };
        let (t, [x, g, b, l, loss]) = f(&xv, &gv, &bv, &lv);
        let grads = t.backward(loss).unwrap();
        let eval = |xv: &[f64], gv: &[f64], bv: &[f64], lv: &[f64]| {
            let (t, v) = f(xv, gv, bv, lv);
            t.scalar(v[4])
        };
        assert_close(grads.wrt(x).unwrap(), &numeric_grad(&xv, |p| eval(p, &gv, &bv, &lv)), 1e-5);
        assert_close(grads.wrt(g).unwrap(), &numeric_grad(&gv, |p| eval(&xv, p, &bv, &lv)), 1e-5);
        assert_close(grads.wrt(b).unwrap(), &numeric_grad(&bv, |p| eval(&xv, &gv, p, &lv)), 1e-5);
        assert_close(grads.wrt(l).unwrap(), &numeric_grad(&lv, |p| eval(&xv, &gv, &bv, p)), 1e-5);
    }

    #[test]
    fn gather_ops_gradients() {
        let xv = pseudo(2 * 3 * 5, 40);
        let f = |xv: &[f64]| -> (Tape<f64>, Var, Var) {
            let mut t = Tape::<f64>::new();
            let x = t.leaf(vec![2, 3, 5], xv.to_vec());
            let p = t.pad_reflect(x, 1, 2, 3, 0).unwrap();
            let u = t.upsample2(p).unwrap();
            let c = t.crop(u, 1, 2, 6, 5).unwrap();
            let b = t.blur(c, &ops::gaussian_kernel(2, 1.0)).unwrap();
            let d = t.sub(b, c).unwrap();
            let loss = t.mean_square(d);
            let e = t.mean_abs(c);
            let loss = t.add(loss, e).unwrap();
            (t, x, loss)
        };
        let (t, x, loss) = f(&xv);
        let grads = t.backward(loss).unwrap();
        let num = numeric_grad(&xv, |p| {
            let (t, _, l) = f(p);
            t.scalar(l)
        });
        assert_close(grads.wrt(x).unwrap(), &num, 1e-5);
    }

    #[test]
    fn backward_requires_scalar_and_same_tape() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![2, 1, 1], vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(NnError::NotScalar(_))));
        let mut other = Tape::<f64>::new();
        let y = other.leaf(vec![2, 1, 1], vec![1.0, 2.0]);
        assert!(matches!(t.add(x, y), Err(NnError::CrossTape)));
        let s = other.sum(y);
        assert!(matches!(t.backward(s), Err(NnError::CrossTape)));
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(vec![1, 1, 2], vec![1.0, -2.0]);
        let d = t.detach(x);
        let s = t.add(x, d).unwrap();
        let l = t.sum_square(s);
        let g = t.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[4.0, -8.0]);
    }
}
