//! Network building blocks on top of the autograd tape: a named parameter
//! store, SD-style blocks (residual block, single-head attention, time
//! AdamW and EMA shadows.

use crate::autograd::{PadMode, Tape, Value};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::{BTreeMap, BTreeSet, HashMap};

/// Named parameters with deterministic iteration order.
#[derive(Clone, Debug, Default)]
pub struct VarStore {
    entries: BTreeMap<String, Tensor>,
}

impl VarStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        assert!(
            self.entries.insert(name.to_string(), t).is_none(),
            "duplicate parameter {}",
            name
        );
    }

    pub fn get(&self, name: &str) -> &Tensor {
        self.entries.get(name).unwrap_or_else(|| panic!("missing parameter {}", name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        self.entries.get_mut(name).unwrap_or_else(|| panic!("missing parameter {}", name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn param_count_matching(&self, predicate: impl Fn(&str) -> bool) -> usize {
        self.entries.iter().filter(|(k, _)| predicate(k)).map(|(_, v)| v.numel()).sum()
    }
}

/// One forward pass: a tape bound to a parameter store. Parameters become
/// tape leaves on first use; frozen names do not receive gradients.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a VarStore,
    bound: HashMap<String, Value>,
    frozen: Option<&'a BTreeSet<String>>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a VarStore) -> Self {
        Self { tape: Tape::new(), store, bound: HashMap::new(), frozen: None }
    }

    /// Like [`Ctx::new`], but parameters whose names appear in `frozen`
    /// are treated as constants.
    pub fn with_frozen(store: &'a VarStore, frozen: &'a BTreeSet<String>) -> Self {
        Self { tape: Tape::new(), store, bound: HashMap::new(), frozen: Some(frozen) }
    }

    pub fn param(&mut self, name: &str) -> Value {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let trainable = self.frozen.map_or(true, |f| !f.contains(name));
        let v = self.tape.leaf(self.store.get(name).clone(), trainable);
        self.bound.insert(name.to_string(), v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Value {
        self.tape.leaf(t, false)
    }

    /// Run the reverse pass and collect parameter gradients by name.
    /// Parameters that never influenced the loss report zero gradients.
    pub fn grads_by_name(&mut self, loss: Value) -> BTreeMap<String, Tensor> {
        let grads = self.tape.backward(loss);
        let mut out = BTreeMap::new();
        for (name, &v) in &self.bound {
            let g = match grads.get(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.store.get(name).shape()),
            };
            out.insert(name.clone(), g);
        }
        out
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    He,
    Linear,
    Zero,
}

fn init_tensor<R: Rng>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::He => Tensor::randn_std(shape, (2.0 / fan_in as f64).sqrt(), rng),
        Init::Linear => Tensor::randn_std(shape, (1.0 / fan_in as f64).sqrt(), rng),
        Init::Zero => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        vs: &mut VarStore,
        rng: &mut R,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let w = format!("{}.w", prefix);
        let b = format!("{}.b", prefix);
        vs.insert(&w, init_tensor(&[cout, cin, k, k], cin * k * k, init, rng));
        vs.insert(&b, Tensor::zeros(&[cout]));
        Self { w, b, stride, pad }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Value, pad_mode: PadMode) -> Value {
        let w = cx.param(&self.w);
        let b = cx.param(&self.b);
        let y = cx.tape.conv2d(x, w, self.stride, self.pad, pad_mode);
        cx.tape.bias_add_chan(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: String,
    pub beta: String,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(vs: &mut VarStore, prefix: &str, channels: usize) -> Self {
        let groups = if channels % 8 == 0 { 8 } else { channels };
        let gamma = format!("{}.g", prefix);
        let beta = format!("{}.b", prefix);
        vs.insert(&gamma, Tensor::full(&[channels], 1.0));
        vs.insert(&beta, Tensor::zeros(&[channels]));
        Self { gamma, beta, groups }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Value) -> Value {
        let g = cx.param(&self.gamma);
        let b = cx.param(&self.beta);
        cx.tape.group_norm(x, g, b, self.groups, 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: String,
    pub b: String,
}

impl Linear {
    pub fn new<R: Rng>(
        vs: &mut VarStore,
        rng: &mut R,
        prefix: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Self {
        let w = format!("{}.w", prefix);
        let b = format!("{}.b", prefix);
        vs.insert(&w, init_tensor(&[din, dout], din, init, rng));
        vs.insert(&b, Tensor::zeros(&[dout]));
        Self { w, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Value) -> Value {
        let w = cx.param(&self.w);
        let b = cx.param(&self.b);
        let y = cx.tape.matmul(x, w);
        cx.tape.bias_add_row(y, b)
    }
}

/// GN -> SiLU -> conv -> (+ time embedding) -> GN -> SiLU -> conv, with a
/// 1x1 shortcut when channel counts change. The second conv is
/// zero-initialized.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new<R: Rng>(
        vs: &mut VarStore,
        rng: &mut R,
        prefix: &str,
        cin: usize,
        cout: usize,
        temb_dim: usize,
    ) -> Self {
        Self {
            norm1: GroupNorm::new(vs, &format!("{}.norm1", prefix), cin),
            conv1: Conv2d::new(vs, rng, &format!("{}.conv1", prefix), cin, cout, 3, 1, 1, Init::He),
            temb_proj: Linear::new(vs, rng, &format!("{}.temb", prefix), temb_dim, cout, Init::Linear),
            norm2: GroupNorm::new(vs, &format!("{}.norm2", prefix), cout),
            conv2: Conv2d::new(vs, rng, &format!("{}.conv2", prefix), cout, cout, 3, 1, 1, Init::Zero),
            shortcut: (cin != cout).then(|| {
                Conv2d::new(vs, rng, &format!("{}.skip", prefix), cin, cout, 1, 1, 0, Init::Linear)
            }),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Value, temb: Value, pad_mode: PadMode) -> Value {
        let h = self.norm1.forward(cx, x);
        let h = cx.tape.silu(h);
        let h = self.conv1.forward(cx, h, pad_mode);
        let e = cx.tape.silu(temb);
        let e = self.temb_proj.forward(cx, e);
        let h = cx.tape.add_per_sample_chan(h, e);
        let h = self.norm2.forward(cx, h);
        let h = cx.tape.silu(h);
        let h = self.conv2.forward(cx, h, pad_mode);
        let sc = match &self.shortcut {
            Some(conv) => conv.forward(cx, x, pad_mode),
            None => x,
        };
        cx.tape.add(sc, h)
    }
}

/// Single-head self-attention over the spatial grid; zero-initialized output
/// projection makes it an identity at init.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
    channels: usize,
}

impl AttnBlock {
    pub fn new<R: Rng>(vs: &mut VarStore, rng: &mut R, prefix: &str, channels: usize) -> Self {
        Self {
            norm: GroupNorm::new(vs, &format!("{}.norm", prefix), channels),
            q: Conv2d::new(vs, rng, &format!("{}.q", prefix), channels, channels, 1, 1, 0, Init::Linear),
            k: Conv2d::new(vs, rng, &format!("{}.k", prefix), channels, channels, 1, 1, 0, Init::Linear),
            v: Conv2d::new(vs, rng, &format!("{}.v", prefix), channels, channels, 1, 1, 0, Init::Linear),
            proj: Conv2d::new(vs, rng, &format!("{}.proj", prefix), channels, channels, 1, 1, 0, Init::Zero),
            channels,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Value, pad_mode: PadMode) -> Value {
        let shape = cx.tape.value(x).shape().to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        debug_assert_eq!(c, self.channels);
        let hn = self.norm.forward(cx, x);
        let q = self.q.forward(cx, hn, pad_mode);
        let k = self.k.forward(cx, hn, pad_mode);
        let v = self.v.forward(cx, hn, pad_mode);
        let q = cx.tape.reshape(q, &[n, c, h * w]);
        let k = cx.tape.reshape(k, &[n, c, h * w]);
        let v = cx.tape.reshape(v, &[n, c, h * w]);
        // scores[p, p'] = <q_p, k_p'> / sqrt(c)
        let qt = cx.tape.transpose12(q);
        let scores = cx.tape.bmm(qt, k);
        let scores = cx.tape.scale(scores, 1.0 / (c as f64).sqrt());
        let attn = cx.tape.softmax_last(scores);
        let attn_t = cx.tape.transpose12(attn);
        let out = cx.tape.bmm(v, attn_t);
        let out = cx.tape.reshape(out, &[n, c, h, w]);
        let out = self.proj.forward(cx, out, pad_mode);
        cx.tape.add(x, out)
    }
}

/// Two-layer MLP applied to the sinusoidal timestep features.
#[derive(Clone, Debug)]
pub struct TimeEmbed {
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbed {
    pub fn new<R: Rng>(vs: &mut VarStore, rng: &mut R, prefix: &str, sin_dim: usize, dim: usize) -> Self {
        Self {
            lin1: Linear::new(vs, rng, &format!("{}.lin1", prefix), sin_dim, dim, Init::Linear),
            lin2: Linear::new(vs, rng, &format!("{}.lin2", prefix), dim, dim, Init::Linear),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, sincos: Value) -> Value {
        let h = self.lin1.forward(cx, sincos);
        let h = cx.tape.silu(h);
        self.lin2.forward(cx, h)
    }
}

/// `[N, dim]` sinusoidal features of scalar inputs; first half sines,
/// second half cosines, geometric frequency ladder (base 10000).
pub fn sinusoidal_embedding(values: &[f64], dim: usize) -> Tensor {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even, got {}", dim);
    let half = dim / 2;
    let mut out = Tensor::zeros(&[values.len(), dim]);
    for (i, &t) in values.iter().enumerate() {
        for j in 0..half {
            let freq = libm::exp(-libm::log(10000.0) * j as f64 / half as f64);
            out.data_mut()[i * dim + j] = libm::sin(t * freq);
            out.data_mut()[i * dim + half + j] = libm::cos(t * freq);
        }
    }
    out
}

/// AdamW with decoupled weight decay; moments keyed by parameter name.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every gradient entry. Parameters without a gradient
    /// entry are untouched; this is how frozen groups stay frozen.
    pub fn step(&mut self, vs: &mut VarStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = vs.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.shape()));
            let (b1, b2, lr, wd, eps) = (self.beta1, self.beta2, self.lr, self.weight_decay, self.eps);
            for i in 0..p.numel() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let pv = p.data()[i];
                p.data_mut()[i] = pv - lr * (mhat / (vhat.sqrt() + eps) + wd * pv);
            }
        }
    }
}

/// Exponential moving average of a set of parameters, initialized to the
/// raw weights.
#[derive(Clone, Debug)]
pub struct Ema {
    pub decay: f64,
    shadow: BTreeMap<String, Tensor>,
}

impl Ema {
    pub fn new(vs: &VarStore, decay: f64, filter: impl Fn(&str) -> bool) -> Self {
        let shadow = vs
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Self { decay, shadow }
    }

    pub fn update(&mut self, vs: &VarStore) {
        for (name, s) in self.shadow.iter_mut() {
            let p = vs.get(name);
            for i in 0..s.numel() {
                s.data_mut()[i] = self.decay * s.data()[i] + (1.0 - self.decay) * p.data()[i];
            }
        }
    }

    /// Store with EMA weights substituted for the tracked names.
    pub fn apply_to(&self, vs: &VarStore) -> VarStore {
        let mut out = vs.clone();
        for (name, s) in &self.shadow {
            *out.get_mut(name) = s.clone();
        }
        out
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn resblock_runs_and_matches_shapes() {
        let mut vs = VarStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let rb = ResBlock::new(&mut vs, &mut rng, "rb", 4, 8, 16);
        let mut cx = Ctx::new(&vs);
        let x = cx.input(Tensor::randn(&[2, 4, 6, 6], &mut rng));
        let temb = cx.input(Tensor::randn(&[2, 16], &mut rng));
        let y = rb.forward(&mut cx, x, temb, PadMode::Zeros);
        assert_eq!(cx.tape.value(y).shape(), &[2, 8, 6, 6]);
    }

    #[test]
    fn attention_is_residual_identity_at_init() {
        let mut vs = VarStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let attn = AttnBlock::new(&mut vs, &mut rng, "attn", 8);
        let mut cx = Ctx::new(&vs);
        let x0 = Tensor::randn(&[1, 8, 4, 4], &mut rng);
        let x = cx.input(x0.clone());
        let y = attn.forward(&mut cx, x, PadMode::Zeros);
        assert!(cx.tape.value(y).sub(&x0).max_abs() < 1e-12);
    }

    #[test]
    fn sinusoid_at_zero_is_zero_one_pattern() {
        let e = sinusoidal_embedding(&[0.0], 8);
        for j in 0..4 {
            assert_eq!(e.data()[j], 0.0);
            assert_eq!(e.data()[4 + j], 1.0);
        }
    }

    #[test]
    fn adamw_descends_quadratic_and_ema_tracks() {
        let mut vs = VarStore::new();
        vs.insert("p", Tensor::new(&[2], vec![3.0, -2.0]));
        let mut opt = AdamW::new(0.05, 0.0);
        let mut ema = Ema::new(&vs, 0.9, |_| true);
        for _ in 0..400 {
            let p = vs.get("p").clone();
            let grads: BTreeMap<String, Tensor> =
                [("p".to_string(), p.scale(2.0))].into_iter().collect();
            opt.step(&mut vs, &grads);
            ema.update(&vs);
        }
        assert!(vs.get("p").max_abs() < 1e-2);
        assert!(ema.shadow()["p"].max_abs() < 0.05);
    }

    #[test]
    fn frozen_params_get_no_grads() {
        let mut vs = VarStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lin = Linear::new(&mut vs, &mut rng, "lin", 3, 2, Init::Linear);
        let frozen: BTreeSet<String> = ["lin.w".to_string()].into_iter().collect();
        let mut cx = Ctx::with_frozen(&vs, &frozen);
        let x = cx.input(Tensor::randn(&[4, 3], &mut rng));
        let y = lin.forward(&mut cx, x);
        let y2 = cx.tape.mul(y, y);
        let loss = cx.tape.mean_all(y2);
        let grads = cx.grads_by_name(loss);
        // Frozen weight reports a zero gradient; bias gets a real one.
        assert_eq!(grads["lin.w"].max_abs(), 0.0);
        assert!(grads["lin.b"].max_abs() > 0.0);
    }
}
