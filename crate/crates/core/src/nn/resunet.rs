use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar, Tape, Tensor, Var};

/// Shape of a two-level residual U-Net.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResUNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel widths of the two encoder levels; the bottleneck uses the second.
    pub widths: [usize; 2],
}

#[derive(Clone, Copy, Debug)]
struct ConvIds {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct ResBlock {
    a: ConvIds,
    b: ConvIds,
}

/// Parameter handles of one network inside a shared [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ResUNet {
    pub spec: ResUNetSpec,
    in_conv: ConvIds,
    enc1: ResBlock,
    down1: ConvIds,
    enc2: ResBlock,
    down2: ConvIds,
    mid: ResBlock,
    up2: ConvIds,
    mix2: usize,
    dec2: ResBlock,
    up1: ConvIds,
    mix1: usize,
    dec1: ResBlock,
    out_conv: ConvIds,
}

struct Builder<'a, T: Scalar, R: Rng> {
    store: &'a mut ParamStore<T>,
    prefix: &'a str,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng> Builder<'_, T, R> {
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, zero: bool) -> ConvIds {
        let std = (2.0 / (cin * k * k) as f64).sqrt();
        let n = cout * cin * k * k;
        let data = (0..n)
            .map(|_| if zero { T::zero() } else { T::from_f64(std * self.rng.sample::<f64, _>(StandardNormal)) })
            .collect();
        let w = self.store.add(format!("{}.{name}.w", self.prefix), Tensor::new(vec![cout, cin, k, k], data).unwrap());
        let b = self.store.add(format!("{}.{name}.b", self.prefix), Tensor::zeros(vec![cout]));
        ConvIds { w, b }
    }

    fn conv_t(&mut self, name: &str, cin: usize, cout: usize) -> ConvIds {
        let std = (2.0 / cin as f64).sqrt();
        let data = (0..cin * cout * 4).map(|_| T::from_f64(std * self.rng.sample::<f64, _>(StandardNormal))).collect();
        let w = self.store.add(format!("{}.{name}.w", self.prefix), Tensor::new(vec![cin, cout, 2, 2], data).unwrap());
        let b = self.store.add(format!("{}.{name}.b", self.prefix), Tensor::zeros(vec![cout]));
        ConvIds { w, b }
    }

    fn block(&mut self, name: &str, c: usize) -> ResBlock {
        ResBlock {
            a: self.conv(&format!("{name}.a"), c, c, 3, false),
            b: self.conv(&format!("{name}.b"), c, c, 3, false),
        }
    }

    fn theta(&mut self, name: &str) -> usize {
        self.store.add(format!("{}.{name}.theta", self.prefix), Tensor::zeros(vec![1]))
    }
}

impl ResUNet {
    /// Registers a freshly initialised network in `store`. Convolutions get He
    /// initialisation, the output convolution starts at zero and every mixup
    /// weight starts at 0 (an even blend).
    pub fn new<T: Scalar, R: Rng>(spec: ResUNetSpec, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) -> Self {
        let [c1, c2] = spec.widths;
        let mut b = Builder { store, prefix, rng };
        Self {
            spec,
            in_conv: b.conv("in", c1, spec.in_channels, 3, false),
            enc1: b.block("enc1", c1),
            down1: b.conv("down1", c2, c1, 2, false),
            enc2: b.block("enc2", c2),
            down2: b.conv("down2", c2, c2, 2, false),
            mid: b.block("mid", c2),
            up2: b.conv_t("up2", c2, c2),
            mix2: b.theta("mix2"),
            dec2: b.block("dec2", c2),
            up1: b.conv_t("up1", c2, c1),
            mix1: b.theta("mix1"),
            dec1: b.block("dec1", c1),
            out_conv: b.conv("out", spec.out_channels, c1, 3, true),
        }
    }

    fn conv<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, ids: ConvIds, x: Var, stride: usize, pad: usize) -> Var {
        let w = tape.param(store, ids.w);
        let b = tape.param(store, ids.b);
        tape.conv(x, w, b, stride, pad)
    }

    fn block<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, blk: ResBlock, x: Var) -> Var {
        let h = Self::conv(tape, store, blk.a, x, 1, 1);
        let h = tape.relu(h);
        let h = Self::conv(tape, store, blk.b, h, 1, 1);
        let s = tape.add(h, x);
        tape.relu(s)
    }

    fn up<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, ids: ConvIds, theta: usize, x: Var, skip: Var) -> Var {
        let w = tape.param(store, ids.w);
        let b = tape.param(store, ids.b);
        let u = tape.conv_t(x, w, b);
        let t = tape.param(store, theta);
        tape.mixup(u, skip, t)
    }

    /// Runs the network on an NCHW input of any spatial size. The input is
    /// reflect-padded to a multiple of 4 and the output cropped back.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Var {
        let (_, c, h, w) = tape.value(x).dims4();
        assert_eq!(c, self.spec.in_channels, "network input channels");
        let padded = tape.value(x).reflect_pad_to_multiple(4);
        let needs_crop = padded.shape[2] != h || padded.shape[3] != w;
        let x0 = if needs_crop { tape.input(padded) } else { x };

        let h0 = Self::conv(tape, store, self.in_conv, x0, 1, 1);
        let h0 = tape.relu(h0);
        let s1 = Self::block(tape, store, self.enc1, h0);
        let d1 = Self::conv(tape, store, self.down1, s1, 2, 0);
        let d1 = tape.relu(d1);
        let s2 = Self::block(tape, store, self.enc2, d1);
        let d2 = Self::conv(tape, store, self.down2, s2, 2, 0);
        let d2 = tape.relu(d2);
        let m = Self::block(tape, store, self.mid, d2);
        let u2 = Self::up(tape, store, self.up2, self.mix2, m, s2);
        let u2 = Self::block(tape, store, self.dec2, u2);
        let u1 = Self::up(tape, store, self.up1, self.mix1, u2, s1);
        let u1 = Self::block(tape, store, self.dec1, u1);
        let out = Self::conv(tape, store, self.out_conv, u1, 1, 1);
        if needs_crop {
            tape.crop(out, h, w)
        } else {
            out
        }
    }

    /// Inference without keeping the graph around.
    pub fn apply<T: Scalar>(&self, store: &ParamStore<T>, x: Tensor<T>) -> Tensor<T> {
        let mut tape = Tape::new();
        let v = tape.input(x);
        let out = self.forward(&mut tape, store, v);
        tape.take(out)
    }
}
