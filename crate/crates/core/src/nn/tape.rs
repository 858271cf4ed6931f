use super::ops::{conv_backward, conv_forward, convt_backward, convt_forward, ConvGeom};
use super::{Scalar, Tensor};

/// Named trainable tensors with matching gradient accumulators.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    pub names: Vec<String>,
    pub values: Vec<Tensor<T>>,
    pub grads: Vec<Vec<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.grads.push(vec![T::zero(); value.len()]);
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<T> {
        self.values.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn flatten_grads(&self) -> Vec<T> {
        self.grads.iter().flat_map(|g| g.iter().copied()).collect()
    }

    /// Inverse of [`flatten`](Self::flatten); returns `false` on a length mismatch.
    pub fn load_flat(&mut self, flat: &[T]) -> bool {
        if flat.len() != self.num_scalars() {
            return false;
        }
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        true
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(|g| vec![U::zero(); g.len()]).collect(),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(usize),
    Conv { x: Var, w: Var, b: Var, geom: ConvGeom },
    ConvT { x: Var, w: Var, b: Var, cout: usize },
    Relu(Var),
    Add(Var, Var),
    Mixup { up: Var, skip: Var, theta: Var },
    Concat(Vec<Var>),
    Channels { x: Var, idx: Vec<usize> },
    Scale(Var, T),
    Crop { x: Var },
    L1 { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Records a forward pass for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Takes the value out of the tape (leaves an empty tensor behind).
    pub fn take(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(vec![0]))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        self.push(store.values[id].clone(), Op::Param(id))
    }

    /// Convolution with square kernel inferred from `w: cout×cin×k×k`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = &self.value(w).shape;
        assert_eq!(ws[1], cin, "conv input channels");
        let geom = ConvGeom {
            cin,
            cout: ws[0],
            k: ws[2],
            stride,
            pad,
            h,
            w: wd,
        };
        let (ho, wo) = geom.out_hw();
        let out = conv_forward(&self.value(x).data, n, &self.value(w).data, &self.value(b).data, &geom);
        self.push(Tensor::new(vec![n, geom.cout, ho, wo], out).expect("conv shape"), Op::Conv { x, w, b, geom })
    }

    /// 2×2 stride-2 transposed convolution, `w: cin×cout×2×2`.
    pub fn conv_t(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = &self.value(w).shape;
        assert_eq!(ws[0], cin, "conv_t input channels");
        let cout = ws[1];
        let out = convt_forward(&self.value(x).data, n, cin, h, wd, &self.value(w).data, &self.value(b).data, cout);
        self.push(Tensor::new(vec![n, cout, 2 * h, 2 * wd], out).expect("conv_t shape"), Op::ConvT { x, w, b, cout })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(T::zero()));
        self.push(v, Op::Relu(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape, self.value(b).shape, "add shapes");
        let mut v = self.value(a).clone();
        for (o, &r) in v.data.iter_mut().zip(&self.value(b).data) {
            *o += r;
        }
        self.push(v, Op::Add(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    /// `σ(θ)·up + (1 − σ(θ))·skip` with a scalar learnable `θ`.
    pub fn mixup(&mut self, up: Var, skip: Var, theta: Var) -> Var {
        assert_eq!(self.value(up).shape, self.value(skip).shape, "mixup shapes");
        let s = sigmoid(self.value(theta).data[0]);
        let mut v = self.value(up).clone();
        for (o, &k) in v.data.iter_mut().zip(&self.value(skip).data) {
            *o = s * *o + (T::one() - s) * k;
        }
        self.push(v, Op::Mixup { up, skip, theta })
    }

    /// Channel concatenation of NCHW tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let mut ctot = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4();
            assert!(pn == n && ph == h && pw == w, "concat shapes");
            ctot += pc;
        }
        let mut out = Tensor::zeros(vec![n, ctot, h, w]);
        let plane = h * w;
        for s in 0..n {
            let mut c0 = 0;
            for &p in parts {
                let pc = self.value(p).shape[1];
                let src = &self.value(p).data[s * pc * plane..(s + 1) * pc * plane];
                let dst = (s * ctot + c0) * plane;
                out.data[dst..dst + pc * plane].copy_from_slice(src);
                c0 += pc;
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    /// Picks channels `idx` (in that order) of an NCHW tensor.
    pub fn channels(&mut self, x: Var, idx: &[usize]) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let mut out = Tensor::zeros(vec![n, idx.len(), h, w]);
        for s in 0..n {
            for (k, &ci) in idx.iter().enumerate() {
                assert!(ci < c, "channel {ci} out of range");
                let src = (s * c + ci) * plane;
                let dst = (s * idx.len() + k) * plane;
                out.data[dst..dst + plane].copy_from_slice(&self.value(x).data[src..src + plane]);
            }
        }
        self.push(out, Op::Channels { x, idx: idx.to_vec() })
    }

    /// Top-left spatial crop.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let v = self.value(x).crop(h, w);
        self.push(v, Op::Crop { x })
    }

    /// Mean absolute difference, a scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "l1 shapes");
        let n = T::from_f64(va.len() as f64);
        let s: T = va.data.iter().zip(&vb.data).map(|(&x, &y)| (x - y).abs()).sum();
        self.push(Tensor::new(vec![1], vec![s / n]).expect("scalar"), Op::L1 { a, b })
    }

    /// Back-propagates from the scalar `loss`, accumulating parameter
    /// gradients into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
            grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (d, s) in store.grads[*id].iter_mut().zip(&g) {
                        *d += *s;
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    let xv = self.value(*x);
                    let n = xv.shape[0];
                    let mut dw = vec![T::zero(); self.value(*w).len()];
                    let mut db = vec![T::zero(); geom.cout];
                    let needs_dx = !matches!(self.nodes[x.0].op, Op::Leaf);
                    let mut dx = needs_dx.then(|| vec![T::zero(); xv.len()]);
                    conv_backward(&xv.data, n, &self.value(*w).data, geom, &g, &mut dw, &mut db, dx.as_deref_mut());
                    add_into(acc(&mut grads, *w, dw.len()), &dw);
                    add_into(acc(&mut grads, *b, db.len()), &db);
                    if let Some(dx) = dx {
                        add_into(acc(&mut grads, *x, dx.len()), &dx);
                    }
                }
                Op::ConvT { x, w, b, cout } => {
                    let xv = self.value(*x);
                    let (n, cin, h, wd) = xv.dims4();
                    let mut dw = vec![T::zero(); self.value(*w).len()];
                    let mut db = vec![T::zero(); *cout];
                    let needs_dx = !matches!(self.nodes[x.0].op, Op::Leaf);
                    let mut dx = needs_dx.then(|| vec![T::zero(); xv.len()]);
                    convt_backward(&xv.data, n, cin, h, wd, &self.value(*w).data, *cout, &g, &mut dw, &mut db, dx.as_deref_mut());
                    add_into(acc(&mut grads, *w, dw.len()), &dw);
                    add_into(acc(&mut grads, *b, db.len()), &db);
                    if let Some(dx) = dx {
                        add_into(acc(&mut grads, *x, dx.len()), &dx);
                    }
                }
                Op::Relu(x) => {
                    let out = &node.value.data;
                    let len = out.len();
                    let d = acc(&mut grads, *x, len);
                    for ((d, &o), &gv) in d.iter_mut().zip(out).zip(&g) {
                        if o > T::zero() {
                            *d += gv;
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut grads, *a, g.len()), &g);
                    add_into(acc(&mut grads, *b, g.len()), &g);
                }
                Op::Scale(x, s) => {
                    let d = acc(&mut grads, *x, g.len());
                    for (d, &gv) in d.iter_mut().zip(&g) {
                        *d += gv * *s;
                    }
                }
                Op::Mixup { up, skip, theta } => {
                    let s = sigmoid(self.value(*theta).data[0]);
                    let (uv, kv) = (&self.value(*up).data, &self.value(*skip).data);
                    let mut dtheta = T::zero();
                    for ((&gv, &u), &k) in g.iter().zip(uv).zip(kv) {
                        dtheta += gv * (u - k);
                    }
                    dtheta = dtheta * s * (T::one() - s);
                    {
                        let d = acc(&mut grads, *up, g.len());
                        for (d, &gv) in d.iter_mut().zip(&g) {
                            *d += gv * s;
                        }
                    }
                    {
                        let d = acc(&mut grads, *skip, g.len());
                        for (d, &gv) in d.iter_mut().zip(&g) {
                            *d += gv * (T::one() - s);
                        }
                    }
                    acc(&mut grads, *theta, 1)[0] += dtheta;
                }
                Op::Concat(parts) => {
                    let (n, ctot, h, w) = node.value.dims4();
                    let plane = h * w;
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = self.value(p).shape[1];
                        let len = self.value(p).len();
                        let d = acc(&mut grads, p, len);
                        for s in 0..n {
                            let src = (s * ctot + c0) * plane;
                            for (dv, &gv) in d[s * pc * plane..(s + 1) * pc * plane].iter_mut().zip(&g[src..src + pc * plane]) {
                                *dv += gv;
                            }
                        }
                        c0 += pc;
                    }
                }
                Op::Channels { x, idx } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let plane = h * w;
                    let len = self.value(*x).len();
                    let d = acc(&mut grads, *x, len);
                    for s in 0..n {
                        for (k, &ci) in idx.iter().enumerate() {
                            let src = (s * idx.len() + k) * plane;
                            let dst = (s * c + ci) * plane;
                            add_into(&mut d[dst..dst + plane], &g[src..src + plane]);
                        }
                    }
                }
                Op::Crop { x } => {
                    let (_, _, hs, ws) = self.value(*x).dims4();
                    let (n, c, h, w) = node.value.dims4();
                    let len = self.value(*x).len();
                    let d = acc(&mut grads, *x, len);
                    for nc in 0..n * c {
                        for y in 0..h {
                            for xx in 0..w {
                                d[(nc * hs + y) * ws + xx] += g[(nc * h + y) * w + xx];
                            }
                        }
                    }
                }
                Op::L1 { a, b } => {
                    let (va, vb) = (&self.value(*a).data, &self.value(*b).data);
                    let scale = g[0] / T::from_f64(va.len() as f64);
                    let signs: Vec<T> = va
                        .iter()
                        .zip(vb)
                        .map(|(&x, &y)| {
                            let d = x - y;
                            if d > T::zero() {
                                scale
                            } else if d < T::zero() {
                                -scale
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    add_into(acc(&mut grads, *a, signs.len()), &signs);
                    let d = acc(&mut grads, *b, signs.len());
                    for (d, &s) in d.iter_mut().zip(&signs) {
                        *d -= s;
                    }
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
