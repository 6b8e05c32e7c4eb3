//! Finite-difference gradient audit over every differentiable op family,
//! the network blocks, the losses and a full small network.

use rand::Rng;

use crate::losses::{composite_loss, dice_loss, focal_loss, wbce, LossConfig};
use crate::models::{Architecture, ModelConfig, ModelInstance};
use crate::nn::{Cafim, DecoderBlock, ForwardCtx, Mode, ParamStore, ResidualBlock};
use crate::rng::Pcg32;
use crate::tensor::gradcheck::{gradient_check_at, GradCheckReport};
use crate::tensor::{Graph, Result, Tensor, Var};

pub const GRADCHECK_STEP: f64 = 1e-3;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
/// Random inputs drawn per op family.
pub const TRIALS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub family: String,
    pub report: GradCheckReport,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.report.checked > 0 && self.report.max_rel_error < GRADCHECK_TOLERANCE
    }
}

pub const GRADCHECK_HEADER: &str = "family,max_rel_error,checked,skipped_kinks,pass";

pub fn gradcheck_csv(rows: &[GradCheckRow]) -> String {
    let mut s = format!("{GRADCHECK_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:e},{},{},{}\n",
            r.family,
            r.report.max_rel_error,
            r.report.checked,
            r.report.skipped_kinks,
            r.passed()
        ));
    }
    s
}

fn uniform(rng: &mut Pcg32, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Contract an arbitrary output with fixed random weights so every output
/// element contributes to the scalar.
fn project(g: &mut Graph<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let p = g.mul(y, w)?;
    g.sum(p)
}

fn all_coords(x: &Tensor<f64>) -> Vec<usize> {
    (0..x.len()).collect()
}

fn sample_coords(rng: &mut Pcg32, len: usize, k: usize) -> Vec<usize> {
    if len <= k {
        return (0..len).collect();
    }
    let mut v = rand::seq::index::sample(rng, len, k).into_vec();
    v.sort_unstable();
    v
}

/// Run `TRIALS` checks of a unary op with a random projection of its output.
fn unary_family<F>(rng: &mut Pcg32, shape: &[usize], lo: f64, hi: f64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    let mut total = GradCheckReport::empty();
    for _ in 0..TRIALS {
        let x = uniform(rng, shape, lo, hi);
        let mut probe = Graph::new();
        let xv = probe.constant(x.clone());
        let y = op(&mut probe, xv)?;
        let out_shape = probe.shape(y).to_vec();
        let w = uniform(rng, &out_shape, -1.0, 1.0);
        let r = gradient_check_at(
            |g, x| {
                let y = op(g, x)?;
                project(g, y, &w)
            },
            &x,
            GRADCHECK_STEP,
            &all_coords(&x),
        )?;
        total = total.merge(r);
    }
    Ok(total)
}

/// A binary op checked with respect to each operand in turn.
fn binary_family<F>(rng: &mut Pcg32, sa: &[usize], sb: &[usize], lo: f64, hi: f64, op: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
{
    let mut total = GradCheckReport::empty();
    for _ in 0..TRIALS {
        let a = uniform(rng, sa, lo, hi);
        let b = uniform(rng, sb, lo, hi);
        let mut probe = Graph::new();
        let (av, bv) = (probe.constant(a.clone()), probe.constant(b.clone()));
        let y = op(&mut probe, av, bv)?;
        let out_shape = probe.shape(y).to_vec();
        let w = uniform(rng, &out_shape, -1.0, 1.0);
        let ra = gradient_check_at(
            |g, x| {
                let bv = g.constant(b.clone());
                let y = op(g, x, bv)?;
                project(g, y, &w)
            },
            &a,
            GRADCHECK_STEP,
            &all_coords(&a),
        )?;
        let rb = gradient_check_at(
            |g, x| {
                let av = g.constant(a.clone());
                let y = op(g, av, x)?;
                project(g, y, &w)
            },
            &b,
            GRADCHECK_STEP,
            &all_coords(&b),
        )?;
        total = total.merge(ra).merge(rb);
    }
    Ok(total)
}

fn conv_family(rng: &mut Pcg32, stride: usize) -> Result<GradCheckReport> {
    let mut total = GradCheckReport::empty();
    for t in 0..TRIALS {
        let k = [1, 3, 5][t % 3];
        let (n, ci, co, h) = (1 + t % 2, 2, 3, 6);
        let x = uniform(rng, &[n, ci, h, h], -1.0, 1.0);
        let wt = uniform(rng, &[co, ci, k, k], -1.0, 1.0);
        let b = uniform(rng, &[co], -1.0, 1.0);
        let pad = k / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let proj = uniform(rng, &[n, co, ho, ho], -1.0, 1.0);
        let run = |g: &mut Graph<f64>, x: Var, wv: Var, bv: Var| -> Result<Var> {
            let y = g.conv2d(x, wv, Some(bv), stride, pad)?;
            project(g, y, &proj)
        };
        let r = gradient_check_at(
            |g, xv| {
                let (wv, bv) = (g.constant(wt.clone()), g.constant(b.clone()));
                run(g, xv, wv, bv)
            },
            &x,
            GRADCHECK_STEP,
            &all_coords(&x),
        )?;
        total = total.merge(r);
        let r = gradient_check_at(
            |g, wv| {
                let (xv, bv) = (g.constant(x.clone()), g.constant(b.clone()));
                run(g, xv, wv, bv)
            },
            &wt,
            GRADCHECK_STEP,
            &all_coords(&wt),
        )?;
        total = total.merge(r);
        let r = gradient_check_at(
            |g, bv| {
                let (xv, wv) = (g.constant(x.clone()), g.constant(wt.clone()));
                run(g, xv, wv, bv)
            },
            &b,
            GRADCHECK_STEP,
            &all_coords(&b),
        )?;
        total = total.merge(r);
    }
    Ok(total)
}

fn batch_norm_family(rng: &mut Pcg32, train: bool) -> Result<GradCheckReport> {
    let mut total = GradCheckReport::empty();
    for _ in 0..TRIALS {
        let shape = [2, 3, 3, 3];
        let x = uniform(rng, &shape, -2.0, 2.0);
        let gamma = uniform(rng, &[3], 0.5, 1.5);
        let beta = uniform(rng, &[3], -0.5, 0.5);
        let rm = uniform(rng, &[3], -0.5, 0.5);
        let rv = uniform(rng, &[3], 0.5, 2.0);
        let proj = uniform(rng, &shape, -1.0, 1.0);
        let run = |g: &mut Graph<f64>, x: Var, gm: Var, bt: Var| -> Result<Var> {
            let y = if train {
                g.batch_norm_train(x, gm, bt, 1e-5)?.0
            } else {
                g.batch_norm_eval(x, gm, bt, rm.data(), rv.data(), 1e-5)?
            };
            project(g, y, &proj)
        };
        let checks: [(&Tensor<f64>, usize); 3] = [(&x, 0), (&gamma, 1), (&beta, 2)];
        for (t, which) in checks {
            let r = gradient_check_at(
                |g, v| {
                    let mut args = [None, None, None];
                    args[which] = Some(v);
                    let xs = [&x, &gamma, &beta];
                    for (i, a) in args.iter_mut().enumerate() {
                        if a.is_none() {
                            *a = Some(g.constant(xs[i].clone()));
                        }
                    }
                    run(g, args[0].unwrap(), args[1].unwrap(), args[2].unwrap())
                },
                t,
                GRADCHECK_STEP,
                &all_coords(t),
            )?;
            total = total.merge(r);
        }
    }
    Ok(total)
}

fn dropout_family(rng: &mut Pcg32) -> Result<GradCheckReport> {
    let mut total = GradCheckReport::empty();
    for trial in 0..TRIALS {
        let x = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
        let w = uniform(rng, &[2, 3, 4, 4], -1.0, 1.0);
        let seed = trial as u64;
        let r = gradient_check_at(
            |g, xv| {
                let mut mask_rng = Pcg32::new(seed);
                let y = g.dropout(xv, 0.3, &mut mask_rng, true)?;
                project(g, y, &w)
            },
            &x,
            GRADCHECK_STEP,
            &all_coords(&x),
        )?;
        total = total.merge(r);
    }
    Ok(total)
}

fn loss_targets(rng: &mut Pcg32, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => -1.0,
            1..=3 => rng.random_range(0.8..0.99),
            _ => rng.random_range(0.01..0.03),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

fn loss_family<F>(rng: &mut Pcg32, loss: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, Var, &Tensor<f64>) -> Result<Var>,
{
    let mut total = GradCheckReport::empty();
    for _ in 0..TRIALS {
        let shape = [2, 1, 4, 4];
        let z = uniform(rng, &shape, -3.0, 3.0);
        let t = loss_targets(rng, &shape);
        let r = gradient_check_at(|g, zv| loss(g, zv, &t), &z, GRADCHECK_STEP, &all_coords(&z))?;
        total = total.merge(r);
    }
    Ok(total)
}

/// Check a block with respect to its input and to a sample of coordinates
/// of every parameter, running in training mode.
fn block_family<B>(rng: &mut Pcg32, init: impl Fn(&mut ParamStore<f64>, &mut Pcg32) -> Result<()>, inputs: &[Vec<usize>], forward: B) -> Result<GradCheckReport>
where
    B: Fn(&mut ForwardCtx<'_, f64>, &[Var]) -> Result<Var>,
{
    let mut total = GradCheckReport::empty();
    for _ in 0..TRIALS.min(3) {
        let mut store = ParamStore::new();
        init(&mut store, rng)?;
        let xs: Vec<Tensor<f64>> = inputs.iter().map(|s| uniform(rng, s, -1.0, 1.0)).collect();
        let out_shape = {
            let mut g = Graph::new();
            let mut r = Pcg32::new(0);
            let mut ctx = ForwardCtx::new(&mut g, &store, Mode::Train, &mut r);
            let vs: Vec<Var> = xs.iter().map(|x| ctx.graph.constant(x.clone())).collect();
            let y = forward(&mut ctx, &vs)?;
            g.shape(y).to_vec()
        };
        let proj = uniform(rng, &out_shape, -1.0, 1.0);
        let run = |g: &mut Graph<f64>, bind: Option<(&str, Var)>, input: Option<(usize, Var)>| -> Result<Var> {
            let mut r = Pcg32::new(0);
            let mut ctx = ForwardCtx::new(g, &store, Mode::Train, &mut r);
            if let Some((name, v)) = bind {
                ctx.bind(name, v);
            }
            let vs: Vec<Var> = xs
                .iter()
                .enumerate()
                .map(|(i, x)| match input {
                    Some((j, v)) if j == i => v,
                    _ => ctx.graph.constant(x.clone()),
                })
                .collect();
            let y = forward(&mut ctx, &vs)?;
            project(g, y, &proj)
        };
        for (i, x) in xs.iter().enumerate() {
            let coords = sample_coords(rng, x.len(), 48);
            total = total.merge(gradient_check_at(|g, v| run(g, None, Some((i, v))), x, GRADCHECK_STEP, &coords)?);
        }
        for (name, p) in store.params() {
            let coords = sample_coords(rng, p.len(), 6);
            total = total.merge(gradient_check_at(|g, v| run(g, Some((name, v)), None), p, GRADCHECK_STEP, &coords)?);
        }
    }
    Ok(total)
}

/// FireSenseNet at width 0.25 plus the composite loss on a `1 x 12 x 16 x
/// 16` input, checked against the input and a sample of every parameter.
pub fn full_network_check(seed: u64, input_coords: usize, per_param: usize) -> Result<GradCheckReport> {
    let cfg = ModelConfig::new(Architecture::FireSenseNet).with_width(0.25);
    let model = ModelInstance::<f64>::build(cfg, seed)?;
    let mut rng = Pcg32::derived(seed, 7);
    let x = uniform(&mut rng, &[1, 12, 16, 16], -1.5, 1.5);
    let targets = loss_targets(&mut rng, &[1, 1, 16, 16]);
    let loss_cfg = LossConfig::default();
    let run = |g: &mut Graph<f64>, bind: Option<(&str, Var)>, input: Option<Var>| -> Result<Var> {
        let mut drop_rng = Pcg32::derived(seed, 8);
        let mut ctx = ForwardCtx::new(g, &model.store, Mode::Train, &mut drop_rng);
        if let Some((name, v)) = bind {
            ctx.bind(name, v);
        }
        let xv = match input {
            Some(v) => v,
            None => ctx.graph.constant(x.clone()),
        };
        let (logits, ..) = model.forward_in(&mut ctx, xv)?;
        Ok(composite_loss(g, logits, &targets, &loss_cfg)?.total)
    };
    let coords = sample_coords(&mut rng, x.len(), input_coords);
    let mut total = gradient_check_at(|g, v| run(g, None, Some(v)), &x, GRADCHECK_STEP, &coords)?;
    for (name, p) in model.store.params() {
        let coords = sample_coords(&mut rng, p.len(), per_param);
        total = total.merge(gradient_check_at(|g, v| run(g, Some((name, v)), None), p, GRADCHECK_STEP, &coords)?);
    }
    Ok(total)
}

/// Every op family, block, loss and the full network.
pub fn run_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    let mut rng = Pcg32::new(seed);
    let r = &mut rng;
    let s4 = [2, 3, 4, 4];
    let mut push = |family: &str, report: GradCheckReport| {
        rows.push(GradCheckRow {
            family: family.to_string(),
            report,
        })
    };
    push("conv2d", conv_family(r, 1)?);
    push("conv2d_stride2", conv_family(r, 2)?);
    push("relu", unary_family(r, &s4, -1.0, 1.0, |g, x| g.relu(x))?);
    push("sigmoid", unary_family(r, &s4, -4.0, 4.0, |g, x| g.sigmoid(x))?);
    push("softplus", unary_family(r, &s4, -4.0, 4.0, |g, x| g.softplus(x))?);
    push("maxpool2x2", unary_family(r, &s4, -1.0, 1.0, |g, x| g.maxpool2x2(x))?);
    push("upsample2x", unary_family(r, &s4, -1.0, 1.0, |g, x| g.upsample2x(x))?);
    push("batch_norm_train", batch_norm_family(r, true)?);
    push("batch_norm_eval", batch_norm_family(r, false)?);
    push("dropout", dropout_family(r)?);
    push("concat_channels", binary_family(r, &s4, &[2, 2, 4, 4], -1.0, 1.0, |g, a, b| g.concat_channels(a, b))?);
    push("slice_channels", unary_family(r, &s4, -1.0, 1.0, |g, x| g.slice_channels(x, 1, 2))?);
    push("slice_batch", unary_family(r, &s4, -1.0, 1.0, |g, x| g.slice_batch(x, 1))?);
    push("add", binary_family(r, &s4, &s4, -1.0, 1.0, |g, a, b| g.add(a, b))?);
    push("sub", binary_family(r, &s4, &s4, -1.0, 1.0, |g, a, b| g.sub(a, b))?);
    push("mul", binary_family(r, &s4, &s4, -1.0, 1.0, |g, a, b| g.mul(a, b))?);
    push("div", binary_family(r, &s4, &s4, 0.5, 2.0, |g, a, b| g.div(a, b))?);
    push(
        "mul_channel_broadcast",
        binary_family(r, &s4, &[2, 1, 4, 4], -1.0, 1.0, |g, a, b| g.mul_channel_broadcast(a, b))?,
    );
    push("scale", unary_family(r, &s4, -1.0, 1.0, |g, x| g.scale(x, -1.7))?);
    push("add_scalar", unary_family(r, &s4, -1.0, 1.0, |g, x| g.add_scalar(x, 0.3))?);
    push("one_minus", unary_family(r, &s4, -1.0, 1.0, |g, x| g.one_minus(x))?);
    push("powf", unary_family(r, &s4, 0.2, 2.0, |g, x| g.powf(x, 2.5))?);
    push("sum", unary_family(r, &s4, -1.0, 1.0, |g, x| g.sum(x))?);
    push("mean", unary_family(r, &s4, -1.0, 1.0, |g, x| g.mean(x))?);
    push("loss_wbce", loss_family(r, |g, z, t| Ok(wbce(g, z, t, 3.0)?.value))?);
    push("loss_dice", loss_family(r, |g, z, t| Ok(dice_loss(g, z, t, 1.0)?.value))?);
    push("loss_focal", loss_family(r, |g, z, t| Ok(focal_loss(g, z, t, 2.0)?.value))?);
    push(
        "loss_composite",
        loss_family(r, |g, z, t| Ok(composite_loss(g, z, t, &LossConfig::default())?.total))?,
    );

    let res = ResidualBlock::new("res", 3, 4, 3);
    push(
        "residual_block",
        block_family(r, |s, r| res.init(s, r), &[vec![2, 3, 4, 4]], |ctx, v| res.forward(ctx, v[0]))?,
    );
    let cafim = Cafim::new("cafim", 3);
    push(
        "cafim",
        block_family(
            r,
            |s, r| cafim.init(s, r),
            &[vec![2, 3, 4, 4], vec![2, 3, 4, 4]],
            |ctx, v| Ok(cafim.forward(ctx, v[0], v[1])?.fused),
        )?,
    );
    let dec = DecoderBlock::new("dec", 4, 2, 3);
    push(
        "decoder_block",
        block_family(
            r,
            |s, r| dec.init(s, r),
            &[vec![2, 4, 2, 2], vec![2, 2, 4, 4]],
            |ctx, v| dec.forward(ctx, v[0], v[1]),
        )?,
    );
    push("firesensenet_w0.25_composite", full_network_check(seed, 384, 4)?);
    Ok(rows)
}
