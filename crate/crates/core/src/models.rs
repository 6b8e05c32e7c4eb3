//! The three segmentation architectures, their forward passes and
//! parameter / FLOP accounting.

use std::fmt;
use std::str::FromStr;

use crate::nn::{
    Cafim, Conv2d, ConvBnRelu, DecoderBlock, ForwardCtx, ForwardRecord, LayerCost, Mode,
    ParamStore, ResidualBlock,
};
use crate::rng::Pcg32;
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    FireSenseNet,
    BaselineCnn,
    /// FireSenseNet with each CAFIM replaced by channel concatenation.
    FireSenseNetConcat,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [
        Architecture::FireSenseNet,
        Architecture::BaselineCnn,
        Architecture::FireSenseNetConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::FireSenseNet => "firesensenet",
            Architecture::BaselineCnn => "baseline",
            Architecture::FireSenseNetConcat => "firesensenet-concat",
        }
    }

    pub fn has_cafim(self) -> bool {
        self == Architecture::FireSenseNet
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "firesensenet" => Ok(Architecture::FireSenseNet),
            "baseline" | "baselinecnn" | "baseline-cnn" => Ok(Architecture::BaselineCnn),
            "firesensenet-concat" | "firesensenetconcat" | "concat" => {
                Ok(Architecture::FireSenseNetConcat)
            }
            other => Err(TensorError::Config {
                op: "architecture",
                detail: format!("unknown architecture {other:?}"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub width_mult: f64,
    pub dropout_p: f64,
    pub fuel_channels: usize,
    pub weather_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::FireSenseNet,
            width_mult: 1.0,
            dropout_p: 0.3,
            fuel_channels: 4,
            weather_channels: 8,
        }
    }
}

impl ModelConfig {
    pub fn new(arch: Architecture) -> Self {
        Self {
            arch,
            ..Self::default()
        }
    }

    pub fn with_width(mut self, width_mult: f64) -> Self {
        self.width_mult = width_mult;
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn in_channels(&self) -> usize {
        self.fuel_channels + self.weather_channels
    }

    /// `base * width_mult`, which must be a positive integer.
    pub fn width(&self, base: usize) -> Result<usize> {
        let scaled = base as f64 * self.width_mult;
        let rounded = scaled.round();
        if !(self.width_mult > 0.0) || (scaled - rounded).abs() > 1e-9 || rounded < 1.0 {
            return Err(TensorError::Config {
                op: "model_config",
                detail: format!(
                    "width multiplier {} gives non-integer width {scaled} for base {base}",
                    self.width_mult
                ),
            });
        }
        Ok(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(TensorError::Config {
                op: "model_config",
                detail: format!("dropout_p must be in [0, 1), got {}", self.dropout_p),
            });
        }
        if self.fuel_channels == 0 || self.weather_channels == 0 {
            return Err(TensorError::Config {
                op: "model_config",
                detail: "both branches need at least one input channel".into(),
            });
        }
        for base in [16, 32, 64, 128, 256] {
            self.width(base)?;
        }
        Ok(())
    }
}

/// Dual-branch encoder, optional CAFIM fusion, residual bottleneck and
/// three-stage decoder.
#[derive(Debug, Clone, PartialEq)]
struct DualBranchNet {
    fuel: Vec<ResidualBlock>,
    weather: Vec<ResidualBlock>,
    fusion: Vec<Option<Cafim>>,
    down: ConvBnRelu,
    bottleneck: ResidualBlock,
    decoders: Vec<DecoderBlock>,
    head: Conv2d,
}

impl DualBranchNet {
    fn new(cfg: &ModelConfig) -> Result<Self> {
        let widths = [cfg.width(16)?, cfg.width(32)?, cfg.width(64)?];
        let mut fuel = Vec::new();
        let mut weather = Vec::new();
        let mut fusion = Vec::new();
        let (mut cf, mut cw) = (cfg.fuel_channels, cfg.weather_channels);
        for (s, &c) in widths.iter().enumerate() {
            fuel.push(ResidualBlock::new(&format!("fuel{s}"), cf, c, 3));
            weather.push(ResidualBlock::with_kernels(&format!("weather{s}"), cw, c, 5, 3));
            fusion.push(cfg.arch.has_cafim().then(|| Cafim::new(&format!("cafim{s}"), c)));
            cf = c;
            cw = c;
        }
        let fused: Vec<usize> = widths.iter().map(|c| 2 * c).collect();
        let c_b = cfg.width(256)?;
        let dec = [cfg.width(128)?, cfg.width(64)?, cfg.width(32)?];
        let decoders = vec![
            DecoderBlock::new("dec0", c_b, fused[2], dec[0]),
            DecoderBlock::new("dec1", dec[0], fused[1], dec[1]),
            DecoderBlock::new("dec2", dec[1], fused[0], dec[2]),
        ];
        Ok(Self {
            fuel,
            weather,
            fusion,
            down: ConvBnRelu::new(Conv2d::strided("down", fused[2], c_b, 3, 2)),
            bottleneck: ResidualBlock::new("bottleneck", c_b, c_b, 3),
            decoders,
            head: Conv2d::same("head", dec[2], 1, 1),
        })
    }

    fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Pcg32) -> Result<()> {
        for s in 0..3 {
            self.fuel[s].init(store, rng)?;
            self.weather[s].init(store, rng)?;
            if let Some(c) = &self.fusion[s] {
                c.init(store, rng)?;
            }
        }
        self.down.init(store, rng)?;
        self.bottleneck.init(store, rng)?;
        for d in &self.decoders {
            d.init(store, rng)?;
        }
        self.head.init(store, rng)
    }

    fn forward<T: Real>(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        x: Var,
        cfg: &ModelConfig,
    ) -> Result<NetOutputs> {
        let mut f = ctx.graph.slice_channels(x, 0, cfg.fuel_channels)?;
        let mut w = ctx.graph.slice_channels(x, cfg.fuel_channels, cfg.weather_channels)?;
        let mut out = NetOutputs::default();
        for s in 0..3 {
            if s > 0 {
                f = ctx.graph.maxpool2x2(f)?;
                w = ctx.graph.maxpool2x2(w)?;
            }
            f = self.fuel[s].forward(ctx, f)?;
            w = self.weather[s].forward(ctx, w)?;
            out.branch_features.push((f, w));
            let fused = match &self.fusion[s] {
                Some(cafim) => {
                    let o = cafim.forward(ctx, f, w)?;
                    out.alphas.push(o.alpha);
                    o.fused
                }
                None => ctx.graph.concat_channels(f, w)?,
            };
            out.fused.push(fused);
        }
        let b = self.down.forward(ctx, out.fused[2])?;
        let mut d = self.bottleneck.forward(ctx, b)?;
        for (dec, &skip) in self.decoders.iter().zip(out.fused.iter().rev()) {
            d = dec.forward(ctx, d, skip)?;
        }
        out.logits = Some(head(ctx, d, &self.head, cfg.dropout_p)?);
        Ok(out)
    }

    fn costs(&self, h: usize, w: usize, cfg: &ModelConfig, rows: &mut Vec<LayerCost>) -> Result<()> {
        let (mut hh, mut ww) = (h, w);
        for s in 0..3 {
            if s > 0 {
                let c_prev = self.fuel[s - 1].c_out();
                rows.push(pool_row(&format!("pool{s}.fuel"), c_prev, hh, ww));
                rows.push(pool_row(&format!("pool{s}.weather"), c_prev, hh, ww));
                hh /= 2;
                ww /= 2;
            }
            self.fuel[s].costs(hh, ww, rows)?;
            self.weather[s].costs(hh, ww, rows)?;
            if let Some(c) = &self.fusion[s] {
                c.costs(hh, ww, rows)?;
            }
        }
        let (bh, bw) = self.down.costs(hh, ww, rows)?;
        self.bottleneck.costs(bh, bw, rows)?;
        let (mut dh, mut dw) = (bh, bw);
        for dec in &self.decoders {
            (dh, dw) = dec.costs(dh, dw, rows)?;
        }
        head_costs(&self.head, dh, dw, cfg.dropout_p, rows)
    }
}

/// Single-stream encoder-decoder with skip concatenation.
#[derive(Debug, Clone, PartialEq)]
struct BaselineNet {
    encoder: Vec<(ConvBnRelu, ConvBnRelu)>,
    bottleneck: (ConvBnRelu, ConvBnRelu),
    decoders: Vec<DecoderBlock>,
    head: Conv2d,
}

impl BaselineNet {
    fn new(cfg: &ModelConfig) -> Result<Self> {
        let widths = [cfg.width(32)?, cfg.width(64)?, cfg.width(128)?];
        let c_b = cfg.width(256)?;
        let mut encoder = Vec::new();
        let mut c_in = cfg.in_channels();
        for (s, &c) in widths.iter().enumerate() {
            encoder.push((
                ConvBnRelu::new(Conv2d::same(format!("enc{s}.conv1"), c_in, c, 3)),
                ConvBnRelu::new(Conv2d::same(format!("enc{s}.conv2"), c, c, 3)),
            ));
            c_in = c;
        }
        let bottleneck = (
            ConvBnRelu::new(Conv2d::same("bottleneck.conv1", widths[2], c_b, 3)),
            ConvBnRelu::new(Conv2d::same("bottleneck.conv2", c_b, c_b, 3)),
        );
        let decoders = vec![
            DecoderBlock::new("dec0", c_b, widths[2], widths[2]),
            DecoderBlock::new("dec1", widths[2], widths[1], widths[1]),
            DecoderBlock::new("dec2", widths[1], widths[0], widths[0]),
        ];
        Ok(Self {
            encoder,
            bottleneck,
            decoders,
            head: Conv2d::same("head", widths[0], 1, 1),
        })
    }

    fn init<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut Pcg32) -> Result<()> {
        for (a, b) in &self.encoder {
            a.init(store, rng)?;
            b.init(store, rng)?;
        }
        self.bottleneck.0.init(store, rng)?;
        self.bottleneck.1.init(store, rng)?;
        for d in &self.decoders {
            d.init(store, rng)?;
        }
        self.head.init(store, rng)
    }

    fn forward<T: Real>(
        &self,
        ctx: &mut ForwardCtx<'_, T>,
        x: Var,
        cfg: &ModelConfig,
    ) -> Result<NetOutputs> {
        let mut skips = Vec::new();
        let mut h = x;
        for (s, (a, b)) in self.encoder.iter().enumerate() {
            if s > 0 {
                h = ctx.graph.maxpool2x2(h)?;
            }
            h = a.forward(ctx, h)?;
            h = b.forward(ctx, h)?;
            skips.push(h);
        }
        h = ctx.graph.maxpool2x2(h)?;
        h = self.bottleneck.0.forward(ctx, h)?;
        h = self.bottleneck.1.forward(ctx, h)?;
        for (dec, &skip) in self.decoders.iter().zip(skips.iter().rev()) {
            h = dec.forward(ctx, h, skip)?;
        }
        Ok(NetOutputs {
            logits: Some(head(ctx, h, &self.head, cfg.dropout_p)?),
            fused: skips,
            ..NetOutputs::default()
        })
    }

    fn costs(&self, h: usize, w: usize, cfg: &ModelConfig, rows: &mut Vec<LayerCost>) -> Result<()> {
        let (mut hh, mut ww) = (h, w);
        for (s, (a, b)) in self.encoder.iter().enumerate() {
            if s > 0 {
                rows.push(pool_row(&format!("pool{s}"), a.conv.c_in, hh, ww));
                hh /= 2;
                ww /= 2;
            }
            a.costs(hh, ww, rows)?;
            b.costs(hh, ww, rows)?;
        }
        rows.push(pool_row("pool3", self.bottleneck.0.conv.c_in, hh, ww));
        hh /= 2;
        ww /= 2;
        self.bottleneck.0.costs(hh, ww, rows)?;
        self.bottleneck.1.costs(hh, ww, rows)?;
        for dec in &self.decoders {
            (hh, ww) = dec.costs(hh, ww, rows)?;
        }
        head_costs(&self.head, hh, ww, cfg.dropout_p, rows)
    }
}

fn head<T: Real>(ctx: &mut ForwardCtx<'_, T>, x: Var, conv: &Conv2d, p: f64) -> Result<Var> {
    let active = ctx.mode().dropout_active();
    let d = ctx.graph.dropout(x, p, &mut *ctx.rng, active)?;
    conv.forward(ctx, d)
}

fn pool_row(name: &str, c: usize, h: usize, w: usize) -> LayerCost {
    LayerCost {
        name: name.to_string(),
        kind: "maxpool",
        params: 0,
        flops: (c * h * w) as u64,
    }
}

fn head_costs(conv: &Conv2d, h: usize, w: usize, p: f64, rows: &mut Vec<LayerCost>) -> Result<()> {
    if p > 0.0 {
        rows.push(LayerCost {
            name: "dropout".into(),
            kind: "dropout",
            params: 0,
            flops: (conv.c_in * h * w) as u64,
        });
    }
    conv.costs(h, w, rows)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
enum Network {
    Dual(DualBranchNet),
    Baseline(BaselineNet),
}

#[derive(Debug, Default)]
struct NetOutputs {
    logits: Option<Var>,
    alphas: Vec<Var>,
    fused: Vec<Var>,
    branch_features: Vec<(Var, Var)>,
}

/// Handles into the graph produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Pre-sigmoid logits, `[N, 1, H, W]` (or `[1, H, W]` for CHW input).
    pub logits: Var,
    /// CAFIM gates at full, half and quarter resolution. Empty without CAFIM.
    pub alphas: Vec<Var>,
    /// Skip tensors per scale: CAFIM/concat outputs, or encoder stages for
    /// the baseline.
    pub fused: Vec<Var>,
    /// Pre-fusion `(fuel, weather)` features per scale (dual-branch only).
    pub branch_features: Vec<(Var, Var)>,
    pub record: ForwardRecord,
}

/// A built network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInstance<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    net: Network,
}

/// Per-layer accounting plus totals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostTable {
    pub rows: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl CostTable {
    fn from_rows(rows: Vec<LayerCost>) -> Self {
        let total_params = rows.iter().map(|r| r.params).sum();
        let total_flops = rows.iter().map(|r| r.flops).sum();
        Self {
            rows,
            total_params,
            total_flops,
        }
    }
}

fn network(cfg: &ModelConfig) -> Result<Network> {
    cfg.validate()?;
    Ok(match cfg.arch {
        Architecture::BaselineCnn => Network::Baseline(BaselineNet::new(cfg)?),
        _ => Network::Dual(DualBranchNet::new(cfg)?),
    })
}

impl<T: Real> ModelInstance<T> {
    /// Build and initialize. The same `(config, seed)` gives bitwise
    /// identical parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        let net = network(&config)?;
        let mut store = ParamStore::new();
        let mut rng = Pcg32::new(seed);
        match &net {
            Network::Dual(n) => n.init(&mut store, &mut rng)?,
            Network::Baseline(n) => n.init(&mut store, &mut rng)?,
        }
        Ok(Self { config, store, net })
    }

    /// Rebuild the layer graph for `config` around existing parameters.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let net = network(&config)?;
        let reference = Self::build(config, 0)?;
        for (name, t) in reference.store.params() {
            let got = store.param(name)?;
            if got.shape() != t.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "from_store",
                    expected: t.shape().to_vec(),
                    got: got.shape().to_vec(),
                });
            }
        }
        if store.param_count() != reference.store.param_count() {
            return Err(TensorError::Config {
                op: "from_store",
                detail: "parameter set does not match the architecture".into(),
            });
        }
        Ok(Self { config, store, net })
    }

    pub fn cast<U: Real>(&self) -> ModelInstance<U> {
        ModelInstance {
            config: self.config,
            store: self.store.cast(),
            net: self.net.clone(),
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match shape {
            [c, h, w] | [_, c, h, w] => (*c, *h, *w),
            _ => {
                return Err(TensorError::Dimension {
                    op: "model_forward",
                    detail: format!("expected CHW or NCHW input, got {shape:?}"),
                })
            }
        };
        if c != self.config.in_channels() {
            return Err(TensorError::Dimension {
                op: "model_forward",
                detail: format!("expected {} input channels, got {c}", self.config.in_channels()),
            });
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(TensorError::Dimension {
                op: "model_forward",
                detail: format!("spatial dims must be positive multiples of 8, got {h}x{w}"),
            });
        }
        Ok(())
    }

    /// Forward pass inside an existing context (lets callers bind parameter
    /// overrides before running).
    pub fn forward_in(&self, ctx: &mut ForwardCtx<'_, T>, x: Var) -> Result<(Var, Vec<Var>, Vec<Var>, Vec<(Var, Var)>)> {
        self.check_input(ctx.graph.shape(x))?;
        let out = match &self.net {
            Network::Dual(n) => n.forward(ctx, x, &self.config)?,
            Network::Baseline(n) => n.forward(ctx, x, &self.config)?,
        };
        let logits = out.logits.ok_or_else(|| TensorError::Usage("network produced no logits".into()))?;
        Ok((logits, out.alphas, out.fused, out.branch_features))
    }

    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        x: Var,
        mode: Mode,
        rng: &mut Pcg32,
    ) -> Result<ForwardOutput> {
        let mut ctx = ForwardCtx::new(graph, &self.store, mode, rng);
        let (logits, alphas, fused, branch_features) = self.forward_in(&mut ctx, x)?;
        Ok(ForwardOutput {
            logits,
            alphas,
            fused,
            branch_features,
            record: ctx.finish(),
        })
    }

    /// Sigmoid probabilities for a batch, without gradient bookkeeping
    /// beyond a throwaway graph.
    pub fn predict_probs(&self, x: &Tensor<T>, mode: Mode, rng: &mut Pcg32) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, xv, mode, rng)?;
        let p = g.sigmoid(out.logits)?;
        Ok(g.value(p).clone())
    }

    /// Parameter and FLOP rows for one `h x w` input.
    pub fn cost_table(&self, h: usize, w: usize) -> Result<CostTable> {
        let mut rows = Vec::new();
        match &self.net {
            Network::Dual(n) => n.costs(h, w, &self.config, &mut rows)?,
            Network::Baseline(n) => n.costs(h, w, &self.config, &mut rows)?,
        }
        Ok(CostTable::from_rows(rows))
    }

    /// Layers holding parameters, with the exact total.
    pub fn count_params(&self) -> Result<CostTable> {
        let table = self.cost_table(64, 64)?;
        Ok(CostTable::from_rows(
            table.rows.into_iter().filter(|r| r.params > 0).collect(),
        ))
    }

    /// FLOP table for an `h x w` input.
    pub fn count_flops(&self, h: usize, w: usize) -> Result<CostTable> {
        self.cost_table(h, w)
    }
}
