//! Layers and composite blocks: conv, batch norm, residual block, CAFIM
//! fusion and the decoder block.
//!
//! Layers hold only their geometry and a parameter-name prefix. Parameter
//! values live in a [`ParamStore`] and are bound to graph leaves by a
//! [`ForwardCtx`] on first use, so a store can be shared by concurrent
//! read-only forward passes.

use indexmap::IndexMap;
use rand::Rng;

use crate::rng::Pcg32;
use crate::tensor::{BnBatchStats, Graph, Real, Result, Tensor, TensorError, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Named trainable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T: Real = f32> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Usage(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.buffers.insert(name.into(), value);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::Usage(format!("missing parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::Usage(format!("missing parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| TensorError::Usage(format!("missing buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| TensorError::Usage(format!("missing buffer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Fold training-mode batch statistics into the running averages.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BnBatchStats)]) -> Result<()> {
        for (name, stats) in updates {
            let rm = self.buffer_mut(&format!("{name}.running_mean"))?;
            for (r, &m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = T::from_f64((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * m);
            }
            let rv = self.buffer_mut(&format!("{name}.running_var"))?;
            for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
                *r = T::from_f64((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * v);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm, dropout active.
    Train,
    /// Running statistics, dropout off.
    Eval,
    /// Running statistics, dropout active (MC-dropout sampling).
    McDropout,
}

impl Mode {
    pub fn uses_batch_stats(self) -> bool {
        self == Mode::Train
    }

    pub fn dropout_active(self) -> bool {
        matches!(self, Mode::Train | Mode::McDropout)
    }
}

/// Record of one convolution executed during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTrace {
    pub name: String,
    pub input: Vec<usize>,
    pub output: Vec<usize>,
    pub k: usize,
}

/// State threaded through a forward pass.
pub struct ForwardCtx<'a, T: Real> {
    pub graph: &'a mut Graph<T>,
    store: &'a ParamStore<T>,
    mode: Mode,
    pub rng: &'a mut Pcg32,
    vars: IndexMap<String, Var>,
    bn_updates: Vec<(String, BnBatchStats)>,
    conv_trace: Vec<ConvTrace>,
}

/// Everything a forward pass learned besides its outputs.
#[derive(Debug, Clone, Default)]
pub struct ForwardRecord {
    /// Graph leaf bound to each parameter that was used.
    pub param_vars: IndexMap<String, Var>,
    pub bn_updates: Vec<(String, BnBatchStats)>,
    pub conv_trace: Vec<ConvTrace>,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    pub fn new(
        graph: &'a mut Graph<T>,
        store: &'a ParamStore<T>,
        mode: Mode,
        rng: &'a mut Pcg32,
    ) -> Self {
        Self {
            graph,
            store,
            mode,
            rng,
            vars: IndexMap::new(),
            bn_updates: Vec::new(),
            conv_trace: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Use `var` in place of the stored parameter `name`.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let v = self.graph.param(self.store.param(name)?.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn finish(self) -> ForwardRecord {
        ForwardRecord {
            param_vars: self.vars,
            bn_updates: self.bn_updates,
            conv_trace: self.conv_trace,
        }
    }
}

/// Parameter and FLOP accounting row for one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
}

impl LayerCost {
    fn elementwise(name: impl Into<String>, kind: &'static str, flops: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            params: 0,
            flops: flops as u64,
        }
    }
}

/// `k^2 * C_in * C_out + C_out`.
pub fn conv_param_count(k: usize, c_in: usize, c_out: usize) -> u64 {
    (k * k * c_in * c_out + c_out) as u64
}

/// `2 * k^2 * C_in * C_out * H' * W'`: one multiply-accumulate is two FLOPs.
pub fn conv_flop_count(k: usize, c_in: usize, c_out: usize, h_out: usize, w_out: usize) -> u64 {
    2 * (k * k * c_in * c_out) as u64 * (h_out * w_out) as u64
}

/// Square convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Stride 1 with `(k - 1) / 2` zero padding, preserving spatial dims.
    pub fn same(name: impl Into<String>, c_in: usize, c_out: usize, k: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
            k,
            stride: 1,
            padding: (k - 1) / 2,
        }
    }

    pub fn strided(name: impl Into<String>, c_in: usize, c_out: usize, k: usize, stride: usize) -> Self {
        Self {
            stride,
            ..Self::same(name, c_in, c_out, k)
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// Kaiming-uniform (fan-in, ReLU gain) weights, zero bias.
    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Pcg32) -> Result<()> {
        let fan_in = (self.c_in * self.k * self.k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = self.c_out * self.c_in * self.k * self.k;
        let w: Vec<T> = (0..n)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        store.insert_param(
            self.weight_name(),
            Tensor::new(vec![self.c_out, self.c_in, self.k, self.k], w)?,
        )?;
        store.insert_param(self.bias_name(), Tensor::zeros(&[self.c_out]))
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(&self.weight_name())?;
        let b = ctx.param(&self.bias_name())?;
        let input = ctx.graph.shape(x).to_vec();
        let y = ctx.graph.conv2d(x, w, Some(b), self.stride, self.padding)?;
        ctx.conv_trace.push(ConvTrace {
            name: self.name.clone(),
            input,
            output: ctx.graph.shape(y).to_vec(),
            k: self.k,
        });
        Ok(y)
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            crate::tensor::conv2d_output_size(h, self.k, self.stride, self.padding)?,
            crate::tensor::conv2d_output_size(w, self.k, self.stride, self.padding)?,
        ))
    }

    pub fn costs(&self, h: usize, w: usize, out: &mut Vec<LayerCost>) -> Result<(usize, usize)> {
        let (ho, wo) = self.output_size(h, w)?;
        out.push(LayerCost {
            name: self.name.clone(),
            kind: "conv",
            params: conv_param_count(self.k, self.c_in, self.c_out),
            flops: conv_flop_count(self.k, self.c_in, self.c_out, ho, wo),
        });
        Ok((ho, wo))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self {
            name: name.into(),
            channels,
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let c = self.channels;
        store.insert_param(format!("{}.gamma", self.name), Tensor::full(&[c], T::one()))?;
        store.insert_param(format!("{}.beta", self.name), Tensor::zeros(&[c]))?;
        store.insert_buffer(format!("{}.running_mean", self.name), Tensor::zeros(&[c]));
        store.insert_buffer(format!("{}.running_var", self.name), Tensor::full(&[c], T::one()));
        Ok(())
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(&format!("{}.gamma", self.name))?;
        let beta = ctx.param(&format!("{}.beta", self.name))?;
        if ctx.mode.uses_batch_stats() {
            let (y, stats) = ctx.graph.batch_norm_train(x, gamma, beta, BN_EPS)?;
            ctx.bn_updates.push((self.name.clone(), stats));
            Ok(y)
        } else {
            let store = ctx.store;
            let rm = store.buffer(&format!("{}.running_mean", self.name))?;
            let rv = store.buffer(&format!("{}.running_var", self.name))?;
            ctx.graph.batch_norm_eval(x, gamma, beta, rm.data(), rv.data(), BN_EPS)
        }
    }

    pub fn costs(&self, h: usize, w: usize, out: &mut Vec<LayerCost>) {
        out.push(LayerCost {
            name: self.name.clone(),
            kind: "batchnorm",
            params: 2 * self.channels as u64,
            flops: 2 * (self.channels * h * w) as u64,
        });
    }
}

/// conv -> batch norm -> ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm,
}

impl ConvBnRelu {
    pub fn new(conv: Conv2d) -> Self {
        let bn = BatchNorm::new(format!("{}_bn", conv.name), conv.c_out);
        Self { conv, bn }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Pcg32) -> Result<()> {
        self.conv.init(store, rng)?;
        self.bn.init(store)
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        ctx.graph.relu(y)
    }

    pub fn costs(&self, h: usize, w: usize, out: &mut Vec<LayerCost>) -> Result<(usize, usize)> {
        let (ho, wo) = self.conv.costs(h, w, out)?;
        self.bn.costs(ho, wo, out);
        out.push(LayerCost::elementwise(
            format!("{}_relu", self.conv.name),
            "relu",
            self.conv.c_out * ho * wo,
        ));
        Ok((ho, wo))
    }
}

/// Post-activation residual block:
/// `relu(bn2(conv2(relu(bn1(conv1(x))))) + shortcut(x))`.
///
/// The shortcut is the identity when channel counts agree and a 1x1
/// conv + batch norm otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub name: String,
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
    pub shortcut: Option<(Conv2d, BatchNorm)>,
}

impl ResidualBlock {
    /// Both convolutions use kernel `k`.
    pub fn new(name: &str, c_in: usize, c_out: usize, k: usize) -> Self {
        Self::with_kernels(name, c_in, c_out, k, k)
    }

    /// First convolution uses `k1`, second `k2`.
    pub fn with_kernels(name: &str, c_in: usize, c_out: usize, k1: usize, k2: usize) -> Self {
        let shortcut = (c_in != c_out).then(|| {
            (
                Conv2d::same(format!("{name}.shortcut"), c_in, c_out, 1),
                BatchNorm::new(format!("{name}.shortcut_bn"), c_out),
            )
        });
        Self {
            name: name.to_string(),
            conv1: Conv2d::same(format!("{name}.conv1"), c_in, c_out, k1),
            bn1: BatchNorm::new(format!("{name}.bn1"), c_out),
            conv2: Conv2d::same(format!("{name}.conv2"), c_out, c_out, k2),
            bn2: BatchNorm::new(format!("{name}.bn2"), c_out),
            shortcut,
        }
    }

    pub fn c_out(&self) -> usize {
        self.conv2.c_out
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Pcg32) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.bn1.init(store)?;
        self.conv2.init(store, rng)?;
        self.bn2.init(store)?;
        if let Some((conv, bn)) = &self.shortcut {
            conv.init(store, rng)?;
            bn.init(store)?;
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.graph.relu(h)?;
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.graph.add(h, skip)?;
        ctx.graph.relu(sum)
    }

    pub fn costs(&self, h: usize, w: usize, out: &mut Vec<LayerCost>) -> Result<(usize, usize)> {
        let c = self.c_out();
        let (ho, wo) = self.conv1.costs(h, w, out)?;
        self.bn1.costs(ho, wo, out);
        out.push(LayerCost::elementwise(format!("{}.relu1", self.name), "relu", c * ho * wo));
        self.conv2.costs(ho, wo, out)?;
        self.bn2.costs(ho, wo, out);
        if let Some((conv, bn)) = &self.shortcut {
            conv.costs(h, w, out)?;
            bn.costs(ho, wo, out);
        }
        out.push(LayerCost::elementwise(format!("{}.add", self.name), "add", c * ho * wo));
        out.push(LayerCost::elementwise(format!("{}.relu2", self.name), "relu", c * ho * wo));
        Ok((ho, wo))
    }
}

/// Output of a CAFIM fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CafimOutput {
    /// `[alpha * fuel ; (1 - alpha) * weather]`, `2C` channels.
    pub fused: Var,
    /// Single-channel gate in `(0, 1)`.
    pub alpha: Var,
}

/// Cross-attentive fusion of fuel and weather features.
///
/// ```text
/// alpha = sigmoid(att2(relu(att1([proj_fuel(F_fuel) ; proj_weather(F_weather)]))))
/// fused = [alpha * F_fuel ; (1 - alpha) * F_weather]
/// ```
///
/// The projections are 1x1 convolutions `C -> C`, `att1` is 3x3 `2C -> C`
/// and `att2` is 3x3 `C -> 1`. The gate is one map broadcast over channels,
/// and the same `alpha` handle feeds both halves of the fused tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Cafim {
    pub name: String,
    pub channels: usize,
    pub proj_fuel: Conv2d,
    pub proj_weather: Conv2d,
    pub att1: Conv2d,
    pub att2: Conv2d,
}

impl Cafim {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_string(),
            channels,
            proj_fuel: Conv2d::same(format!("{name}.proj_fuel"), channels, channels, 1),
            proj_weather: Conv2d::same(format!("{name}.proj_weather"), channels, channels, 1),
            att1: Conv2d::same(format!("{name}.att1"), 2 * channels, channels, 3),
            att2: Conv2d::same(format!("{name}.att2"), channels, 1, 3),
        }
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Pcg32) -> Result<()> {
        self.proj_fuel.init(store, rng)?;
        self.proj_weather.init(store, rng)?;
        self.att1.init(store, rng)?;
        self.att2.init(store, rng)
    }

    pub fn forward<T: Real>(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        fuel: Var,
        weather: Var,
    ) -> Result<CafimOutput> {
        if ctx.graph.shape(fuel) != ctx.graph.shape(weather) {
            return Err(TensorError::ShapeMismatch {
                op: "cafim",
                expected: ctx.graph.shape(fuel).to_vec(),
                got: ctx.graph.shape(weather).to_vec(),
            });
        }
        let pf = self.proj_fuel.forward(ctx, fuel)?;
        let pw = self.proj_weather.forward(ctx, weather)?;
        let cat = ctx.graph.concat_channels(pf, pw)?;
        let a = self.att1.forward(ctx, cat)?;
        let a = ctx.graph.relu(a)?;
        let a = self.att2.forward(ctx, a)?;
        let alpha = ctx.graph.sigmoid(a)?;
        let beta = ctx.graph.one_minus(alpha)?;
        let gated_fuel = ctx.graph.mul_channel_broadcast(fuel, alpha)?;
        let gated_weather = ctx.graph.mul_channel_broadcast(weather, beta)?;
        let fused = ctx.graph.concat_channels(gated_fuel, gated_weather)?;
        Ok(CafimOutput { fused, alpha })
    }

    pub fn costs(&self, h: usize, w: usize, out: &mut Vec<LayerCost>) -> Result<(usize, usize)> {
        let c = self.channels;
        self.proj_fuel.costs(h, w, out)?;
        self.proj_weather.costs(h, w, out)?;
        self.att1.costs(h, w, out)?;
        out.push(LayerCost::elementwise(format!("{}.att_relu", self.name), "relu", c * h * w));
        self.att2.costs(h, w, out)?;
        out.push(LayerCost::elementwise(format!("{}.sigmoid", self.name), "sigmoid", h * w));
        out.push(LayerCost::elementwise(format!("{}.complement", self.name), "sub", h * w));
        out.push(LayerCost::elementwise(format!("{}.gate", self.name), "mul", 2 * c * h * w));
        Ok((h, w))
    }
}

/// Bilinear 2x upsample, concatenate the skip, then two 3x3 conv-BN-ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub name: String,
    pub c_in: usize,
    pub c_skip: usize,
    pub conv1: ConvBnRelu,
    pub conv2: ConvBnRelu,
}

impl DecoderBlock {
    pub fn new(name: &str, c_in: usize, c_skip: usize, c_out: usize) -> Self {
        Self {
            name: name.to_string(),
            c_in,
            c_skip,
            conv1: ConvBnRelu::new(Conv2d::same(format!("{name}.conv1"), c_in + c_skip, c_out, 3)),
            conv2: ConvBnRelu::new(Conv2d::same(format!("{name}.conv2"), c_out, c_out, 3)),
        }
    }

    pub fn c_out(&self) -> usize {
        self.conv2.conv.c_out
    }

    pub fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Pcg32) -> Result<()> {
        self.conv1.init(store, rng)?;
        self.conv2.init(store, rng)
    }

    pub fn forward<T: Real>(&self, ctx: &mut ForwardCtx<'_, T>, x: Var, skip: Var) -> Result<Var> {
        let up = ctx.graph.upsample2x(x)?;
        let (su, ss) = (ctx.graph.shape(up), ctx.graph.shape(skip));
        if su.len() != ss.len() || su[su.len() - 2..] != ss[ss.len() - 2..] {
            return Err(TensorError::Dimension {
                op: "decoder_block",
                detail: format!("upsampled {su:?} does not match skip {ss:?}"),
            });
        }
        let cat = ctx.graph.concat_channels(up, skip)?;
        let y = self.conv1.forward(ctx, cat)?;
        self.conv2.forward(ctx, y)
    }

    /// `h, w` is the resolution of the incoming (pre-upsample) tensor.
    pub fn costs(&self, h: usize, w: usize, out: &mut Vec<LayerCost>) -> Result<(usize, usize)> {
        let (h2, w2) = (2 * h, 2 * w);
        out.push(LayerCost::elementwise(
            format!("{}.upsample", self.name),
            "upsample",
            8 * self.c_in * h2 * w2,
        ));
        self.conv1.costs(h2, w2, out)?;
        self.conv2.costs(h2, w2, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_tensor(shape: &[usize], rng: &mut Pcg32) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn residual_shape_law() {
        let block = ResidualBlock::new("rb", 3, 5, 3);
        let mut store = ParamStore::<f32>::new();
        let mut rng = Pcg32::new(1);
        block.init(&mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 6, 7], 0.5));
        let mut ctx = ForwardCtx::new(&mut g, &store, Mode::Train, &mut rng);
        let y = block.forward(&mut ctx, x).unwrap();
        assert_eq!(ctx.graph.shape(y), &[2, 5, 6, 7]);
    }

    #[test]
    fn residual_with_zero_convs_is_relu_of_shortcut() {
        let block = ResidualBlock::new("rb", 2, 2, 3);
        let mut store = ParamStore::<f64>::new();
        let mut rng = Pcg32::new(2);
        block.init(&mut store, &mut rng).unwrap();
        for name in ["rb.conv1.weight", "rb.conv2.weight"] {
            store.param_mut(name).unwrap().data_mut().fill(0.0);
        }
        let x = random_tensor(&[1, 2, 5, 5], &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = ForwardCtx::new(&mut g, &store, Mode::Train, &mut rng);
        let y = block.forward(&mut ctx, xv).unwrap();
        let expected: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(g.value(y).data(), &expected[..]);
    }

    #[test]
    fn cafim_alpha_is_single_channel_and_bounded() {
        let cafim = Cafim::new("f", 4);
        let mut store = ParamStore::<f32>::new();
        let mut rng = Pcg32::new(3);
        cafim.init(&mut store, &mut rng).unwrap();
        let fuel = random_tensor(&[1, 4, 6, 6], &mut rng).cast::<f32>();
        let weather = random_tensor(&[1, 4, 6, 6], &mut rng).cast::<f32>();
        let mut g = Graph::new();
        let (fv, wv) = (g.constant(fuel), g.constant(weather));
        let mut ctx = ForwardCtx::new(&mut g, &store, Mode::Train, &mut rng);
        let out = cafim.forward(&mut ctx, fv, wv).unwrap();
        assert_eq!(g.shape(out.alpha), &[1, 1, 6, 6]);
        assert_eq!(g.shape(out.fused), &[1, 8, 6, 6]);
        assert!(g.value(out.alpha).data().iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn cafim_rejects_mismatched_branches() {
        let cafim = Cafim::new("f", 4);
        let mut store = ParamStore::<f32>::new();
        let mut rng = Pcg32::new(3);
        cafim.init(&mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let fv = g.constant(Tensor::zeros(&[1, 4, 6, 6]));
        let wv = g.constant(Tensor::zeros(&[1, 4, 6, 4]));
        let mut ctx = ForwardCtx::new(&mut g, &store, Mode::Train, &mut rng);
        assert!(cafim.forward(&mut ctx, fv, wv).is_err());
    }

    #[test]
    fn decoder_shape_law_and_mismatch() {
        let dec = DecoderBlock::new("d", 6, 3, 4);
        let mut store = ParamStore::<f32>::new();
        let mut rng = Pcg32::new(4);
        dec.init(&mut store, &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 6, 8, 8], 0.1));
        let skip = g.constant(Tensor::full(&[1, 3, 16, 16], 0.2));
        let bad = g.constant(Tensor::full(&[1, 3, 12, 12], 0.2));
        let mut ctx = ForwardCtx::new(&mut g, &store, Mode::Train, &mut rng);
        let y = dec.forward(&mut ctx, x, skip).unwrap();
        assert_eq!(ctx.graph.shape(y), &[1, 4, 16, 16]);
        assert!(dec.forward(&mut ctx, x, bad).is_err());
    }

    #[test]
    fn bn_updates_follow_momentum() {
        let bn = BatchNorm::new("bn", 1);
        let mut store = ParamStore::<f64>::new();
        bn.init(&mut store).unwrap();
        let stats = BnBatchStats {
            mean: vec![2.0],
            var_unbiased: vec![3.0],
        };
        store.apply_bn_updates(&[("bn".into(), stats)]).unwrap();
        assert!((store.buffer("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
        assert!((store.buffer("bn.running_var").unwrap().data()[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn layer_accounting() {
        let mut rows = Vec::new();
        Conv2d::same("c", 12, 32, 3).costs(64, 64, &mut rows).unwrap();
        assert_eq!(rows[0].params, 3_488);
        assert_eq!(rows[0].flops, 28_311_552);
        rows.clear();
        Conv2d::same("h", 64, 1, 1).costs(64, 64, &mut rows).unwrap();
        assert_eq!(rows[0].params, 65);
    }
}
