use std::fmt::Write as _;
use std::fs;
use std::io::{self, Write as _};
use std::path::{Path, PathBuf};

use firesense::analysis::{copy_prev_probs, export_attention, importance_report, mc_predict};
use firesense::checks::{gradcheck_csv, run_suite};
use firesense::config::RunConfig;
use firesense::data::{
    generate_synthetic, read_file, split, write_file, Dataset, Direction, NormStats, Smoothing, SyntheticConfig,
    N_CHANNELS,
};
use firesense::eval::{evaluate, inflation_audit, MetricsReport, Protocol, Sweep};
use firesense::prepared::{predict, Preprocessing, PreparedSet};
use firesense::train::{history_csv, init_seed, Checkpoint, Trainer};
use firesense::{Architecture, ModelConfig, ModelInstance, Tensor};

use crate::error::{CliError, CliResult};
use crate::overrides;
use crate::{BuiltinModel, Cmd, DataArgs, ModelSource, Subset};

pub const METRICS_HEADER: &str = "model,protocol,threshold,tp,fp,fn,tn,precision,recall,f1,auc_pr";
pub const SWEEP_HEADER: &str = "threshold,tp,fp,fn,tn,precision,recall,f1";
pub const AUDIT_HEADER: &str =
    "model,clean_threshold,clean_f1,clean_auc_pr,inflated_threshold,inflated_f1,inflated_auc_pr,inflation_pct";
pub const COUNT_HEADER: &str = "layer,kind,params,flops";
pub const SUMMARY_HEADER: &str = "model,params,flops";

/// Marker for metrics that do not exist (no positives, zero clean F1).
const UNDEFINED: &str = "undefined";

pub fn run(cmd: Cmd) -> CliResult<()> {
    match cmd {
        Cmd::GenData { n, seed, out, size, spread_bias, unknown_prob } => {
            gen_data(n, seed, &out, size, &spread_bias, unknown_prob)
        }
        Cmd::Stats { data, out, config, whole, overrides } => {
            let run = overrides::load(config.as_deref(), &overrides)?;
            stats(&data, &out, &run, whole)
        }
        Cmd::Train { data, out, config, val_data, resume, stop_after, overrides } => {
            if resume.is_some() && !overrides.0.is_empty() {
                return Err(CliError::Usage("config overrides cannot be combined with --resume".into()));
            }
            let run = overrides::load(config.as_deref(), &overrides)?;
            train(&data, val_data.as_deref(), &out, run, resume.as_deref(), stop_after)
        }
        Cmd::Eval { source, data, protocol, threshold, out } => {
            eval(&source, &data, protocol.into(), threshold, out.as_deref())
        }
        Cmd::Audit { ckpt, dummy, data, out } => audit(&ckpt, dummy, &data, out.as_deref()),
        Cmd::Importance { ckpt, data, threshold, out } => importance(&ckpt, &data, threshold, out.as_deref()),
        Cmd::Uncertainty { ckpt, data, sample_id, passes, seed, out } => {
            uncertainty(&ckpt, &data, sample_id, passes, seed, &out)
        }
        Cmd::Attention { ckpt, data, sample_id, out } => attention(&ckpt, &data, sample_id, &out),
        Cmd::Count { config, size, summary, out, overrides } => {
            let run = overrides::load(config.as_deref(), &overrides)?;
            count(&run, size, summary, out.as_deref())
        }
        Cmd::Gradcheck { seed, out } => gradcheck(seed, out.as_deref()),
    }
}

fn gen_data(n: usize, seed: u64, out: &Path, size: usize, bias: &str, unknown_prob: f64) -> CliResult<()> {
    let spread_bias: Direction = bias.parse().map_err(|e: firesense::data::DataError| CliError::Usage(e.to_string()))?;
    if size == 0 || !(0.0..=1.0).contains(&unknown_prob) {
        return Err(CliError::Usage("need size > 0 and unknown-prob in [0, 1]".into()));
    }
    let cfg = SyntheticConfig { h: size, w: size, spread_bias, unknown_prob };
    write_file(&generate_synthetic(n, seed, &cfg), out)?;
    println!("wrote {n} samples ({size}x{size}) to {}", out.display());
    Ok(())
}

fn training_part(ds: &Dataset, seed: u64) -> CliResult<Dataset> {
    Ok(ds.subset(&split(ds.len(), seed)?.train))
}

fn stats(data: &Path, out: &Path, run: &RunConfig, whole: bool) -> CliResult<()> {
    let ds = read_file(data)?;
    let fit_on = if whole { ds } else { training_part(&ds, run.train.seed)? };
    let prep = Preprocessing::fit(&fit_on, run.smoothing)?;
    prep.stats.save(out)?;
    println!("statistics of {} samples written to {}", fit_on.len(), out.display());
    Ok(())
}

fn echo_config(dir: &Path, notes: &[(&str, String)], run: Option<&RunConfig>) -> CliResult<()> {
    let mut s = String::new();
    for (k, v) in notes {
        let _ = writeln!(s, "# {k}={v}");
    }
    if let Some(r) = run {
        s.push_str(&r.to_text());
    }
    fs::write(dir.join("config.txt"), s)?;
    Ok(())
}

fn out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn train(
    data: &Path,
    val_data: Option<&Path>,
    out: &Path,
    run: RunConfig,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> CliResult<()> {
    let ds = read_file(data)?;
    let (mut trainer, run, prep) = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let prep = ck
                .preprocessing()
                .ok_or_else(|| CliError::Data("checkpoint has no normalization statistics".into()))?;
            let run = ck.run.clone();
            (ck.into_trainer()?, run, prep)
        }
        None => {
            let fit_on = match val_data {
                Some(_) => ds.clone(),
                None => training_part(&ds, run.train.seed)?,
            };
            let prep = Preprocessing::fit(&fit_on, run.smoothing)?;
            let model = ModelInstance::build(run.model, init_seed(run.train.seed))?;
            (Trainer::new(model, run.train.clone())?, run, prep)
        }
    };
    let (train_raw, val_raw) = match val_data {
        Some(v) => (ds, read_file(v)?),
        None => {
            let s = split(ds.len(), run.train.seed)?;
            (ds.subset(&s.train), ds.subset(&s.val))
        }
    };
    let (train_set, val_set) = (prep.apply(&train_raw)?, prep.apply(&val_raw)?);
    out_dir(out)?;
    let notes = [("command", "train".to_string()), ("data", data.display().to_string())];
    echo_config(out, &notes, Some(&run))?;
    let mut budget = stop_after.unwrap_or(usize::MAX);
    while !trainer.state.finished && budget > 0 {
        trainer.run_epoch(&train_set, &val_set)?;
        budget -= 1;
    }
    Checkpoint::from_trainer(&trainer, &run, Some(&prep)).save(out.join("checkpoint.fsck"))?;
    fs::write(out.join("history.csv"), history_csv(&trainer.state.history))?;
    prep.stats.save(out.join("norm_stats.txt"))?;
    let st = &trainer.state;
    println!(
        "epochs={} finished={} best_f1={} best_epoch={} train={} val={}",
        st.history.len(),
        st.finished,
        st.best_f1,
        st.best_epoch.map_or_else(|| "none".to_string(), |e| e.to_string()),
        train_set.len(),
        val_set.len()
    );
    Ok(())
}

/// A checkpointed network or a built-in reference predictor.
enum Predictor {
    Net {
        name: String,
        run: Box<RunConfig>,
        model: ModelInstance<f32>,
        prep: Preprocessing,
    },
    CopyPrev,
}

impl Predictor {
    fn load(path: &Path) -> CliResult<Self> {
        let ck = Checkpoint::load(path)?;
        let prep = ck
            .preprocessing()
            .ok_or_else(|| CliError::Data(format!("{}: checkpoint has no normalization statistics", path.display())))?;
        Ok(Predictor::Net {
            name: ck.run.model.arch.to_string(),
            model: ck.best_model()?,
            run: Box::new(ck.run),
            prep,
        })
    }

    fn from_source(src: &ModelSource) -> CliResult<Self> {
        match (&src.ckpt, src.model) {
            (Some(p), _) => Self::load(p),
            (None, Some(BuiltinModel::DummyCopyPrev)) => Ok(Predictor::CopyPrev),
            (None, None) => Err(CliError::Usage("need --ckpt or --model".into())),
        }
    }

    fn name(&self) -> String {
        match self {
            Predictor::Net { name, .. } => name.clone(),
            Predictor::CopyPrev => "dummy-copy-prev".to_string(),
        }
    }

    fn run(&self) -> Option<&RunConfig> {
        match self {
            Predictor::Net { run, .. } => Some(run),
            Predictor::CopyPrev => None,
        }
    }

    fn split_seed(&self) -> u64 {
        self.run().map_or(0, |r| r.train.seed)
    }

    fn prepare(&self, raw: &Dataset) -> CliResult<PreparedSet> {
        let prep = match self {
            Predictor::Net { prep, .. } => prep.clone(),
            // Only labels and the raw previous-day mask are needed.
            Predictor::CopyPrev => Preprocessing {
                stats: NormStats {
                    mean: vec![0.0; N_CHANNELS],
                    std: vec![1.0; N_CHANNELS],
                },
                smoothing: Smoothing::none(),
            },
        };
        Ok(prep.apply(raw)?)
    }

    fn predict(&self, set: &PreparedSet, batch: usize) -> CliResult<Vec<f32>> {
        match self {
            Predictor::Net { model, .. } => Ok(predict(model, set, batch.max(1))?),
            Predictor::CopyPrev => Ok(copy_prev_probs(set)),
        }
    }

    fn network(&self) -> CliResult<&ModelInstance<f32>> {
        match self {
            Predictor::Net { model, .. } => Ok(model),
            Predictor::CopyPrev => Err(CliError::Usage("this command needs a trained checkpoint".into())),
        }
    }
}

fn select(raw: Dataset, subset: Subset, seed: u64) -> CliResult<Dataset> {
    let s = match subset {
        Subset::All => return Ok(raw),
        _ => split(raw.len(), seed)?,
    };
    let idx = match subset {
        Subset::Train => &s.train,
        Subset::Val => &s.val,
        _ => &s.test,
    };
    Ok(raw.subset(idx))
}

fn opt_f64(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

fn metrics_row(model: &str, m: &MetricsReport) -> String {
    let c = m.confusion;
    format!(
        "{model},{},{},{},{},{},{},{},{},{},{}",
        m.protocol,
        m.threshold,
        c.tp,
        c.fp,
        c.fn_,
        c.tn,
        m.precision,
        m.recall,
        m.f1,
        opt_f64(m.auc_pr)
    )
}

fn sweep_csv(s: &Sweep) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in &s.rows {
        let c = r.confusion;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.threshold, c.tp, c.fp, c.fn_, c.tn, r.precision, r.recall, r.f1
        );
    }
    out
}

/// Print `text`, and also save it under `dir/file` with a config echo.
fn emit(dir: Option<&Path>, files: &[(&str, &str)], notes: &[(&str, String)], run: Option<&RunConfig>) -> CliResult<()> {
    if let Some(d) = dir {
        out_dir(d)?;
        for (name, text) in files {
            fs::write(d.join(name), text)?;
        }
        echo_config(d, notes, run)?;
    }
    let mut stdout = io::stdout().lock();
    let printed = files.iter().enumerate().try_for_each(|(i, (_, text))| {
        let sep = if i > 0 { "\n" } else { "" };
        write!(stdout, "{sep}{text}")
    });
    match printed.and_then(|()| stdout.flush()) {
        // A closed pipe (e.g. `| head`) is not an error for the caller.
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn data_notes(command: &str, data: &DataArgs) -> Vec<(&'static str, String)> {
    vec![
        ("command", command.to_string()),
        ("data", data.data.display().to_string()),
        ("subset", format!("{:?}", data.subset).to_lowercase()),
    ]
}

fn eval(src: &ModelSource, data: &DataArgs, protocol: Protocol, threshold: Option<f64>, out: Option<&Path>) -> CliResult<()> {
    let p = Predictor::from_source(src)?;
    let set = p.prepare(&select(read_file(&data.data)?, data.subset, p.split_seed())?)?;
    let probs = p.predict(&set, data.batch)?;
    let (best, sweep) = evaluate(&probs, &set.prev, &set.y, protocol)?;
    let report = match threshold {
        Some(t) => MetricsReport::at_threshold(&probs, &set.prev, &set.y, protocol, t)?,
        None => best,
    };
    let metrics = format!("{METRICS_HEADER}\n{}\n", metrics_row(&p.name(), &report));
    let mut notes = data_notes("eval", data);
    notes.push(("model", p.name()));
    notes.push(("protocol", protocol.to_string()));
    emit(out, &[("metrics.csv", &metrics), ("sweep.csv", &sweep_csv(&sweep))], &notes, p.run())
}

fn audit(ckpts: &[PathBuf], dummy: bool, data: &DataArgs, out: Option<&Path>) -> CliResult<()> {
    let mut models = ckpts.iter().map(|p| Predictor::load(p)).collect::<CliResult<Vec<_>>>()?;
    if dummy {
        models.push(Predictor::CopyPrev);
    }
    if models.is_empty() {
        return Err(CliError::Usage("audit needs at least one --ckpt or --dummy".into()));
    }
    let raw = read_file(&data.data)?;
    let mut csv = format!("{AUDIT_HEADER}\n");
    let mut names: Vec<String> = Vec::new();
    for p in &models {
        let set = p.prepare(&select(raw.clone(), data.subset, p.split_seed())?)?;
        let probs = p.predict(&set, data.batch)?;
        let mut name = p.name();
        let seen = names.iter().filter(|n| n.split('#').next() == Some(name.as_str())).count();
        if seen > 0 {
            name = format!("{name}#{}", seen + 1);
        }
        let row = inflation_audit(&name, &probs, &set.prev, &set.y)?;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            row.model,
            row.clean.threshold,
            row.clean.f1,
            opt_f64(row.clean.auc_pr),
            row.inflated.threshold,
            row.inflated.f1,
            opt_f64(row.inflated.auc_pr),
            opt_f64(row.inflation_pct)
        );
        names.push(name);
    }
    let mut notes = data_notes("audit", data);
    notes.push(("models", names.join(" ")));
    emit(out, &[("audit.csv", &csv)], &notes, models.first().and_then(Predictor::run))
}

fn importance(ckpt: &Path, data: &DataArgs, threshold: Option<f64>, out: Option<&Path>) -> CliResult<()> {
    let p = Predictor::load(ckpt)?;
    let Predictor::Net { model, prep, run, .. } = &p else { unreachable!("loaded from a checkpoint") };
    let set = prep.apply(&select(read_file(&data.data)?, data.subset, p.split_seed())?)?;
    let report = importance_report(model, &set, &prep.stats, threshold, data.batch.max(1))?;
    let mut notes = data_notes("importance", data);
    notes.push(("threshold", report.threshold.to_string()));
    emit(out, &[("importance.csv", &report.to_csv())], &notes, Some(run))
}

/// One `[12, H, W]` input tensor plus the loaded network.
fn single_input(ckpt: &Path, data: &Path, sample_id: u64) -> CliResult<(Predictor, Tensor<f32>)> {
    let p = Predictor::load(ckpt)?;
    let raw = read_file(data)?;
    let sample = raw
        .find(sample_id)
        .ok_or_else(|| CliError::Data(format!("no sample with id {sample_id} in {}", data.display())))?;
    let mut one = Dataset::new(raw.h, raw.w);
    one.samples.push(sample.clone());
    let set = p.prepare(&one)?;
    let x = Tensor::new(vec![N_CHANNELS, set.h, set.w], set.sample_x(0).to_vec())?;
    Ok((p, x))
}

fn uncertainty(ckpt: &Path, data: &Path, sample_id: u64, passes: usize, seed: u64, out: &Path) -> CliResult<()> {
    let (p, x) = single_input(ckpt, data, sample_id)?;
    let u = mc_predict(p.network()?, &x, passes, seed)?;
    let (mean, std) = u.rasters()?;
    out_dir(out)?;
    mean.save(out.join("mean.fsr"))?;
    std.save(out.join("std.fsr"))?;
    let notes = [
        ("command", "uncertainty".to_string()),
        ("data", data.display().to_string()),
        ("sample_id", sample_id.to_string()),
        ("passes", passes.to_string()),
        ("mc_seed", seed.to_string()),
    ];
    echo_config(out, &notes, p.run())?;
    let max_std = u.std.iter().copied().fold(0.0, f64::max);
    println!("wrote mean.fsr and std.fsr ({}x{}), max std {max_std}", u.h, u.w);
    Ok(())
}

fn attention(ckpt: &Path, data: &Path, sample_id: u64, out: &Path) -> CliResult<()> {
    let (p, x) = single_input(ckpt, data, sample_id)?;
    let maps = export_attention(p.network()?, &x)?;
    out_dir(out)?;
    for (i, r) in maps.iter().enumerate() {
        r.save(out.join(format!("alpha{i}.fsr")))?;
        println!("alpha{i}.fsr {}x{}", r.h, r.w);
    }
    let notes = [
        ("command", "attention".to_string()),
        ("data", data.display().to_string()),
        ("sample_id", sample_id.to_string()),
    ];
    echo_config(out, &notes, p.run())
}

fn count(run: &RunConfig, size: usize, summary: bool, out: Option<&Path>) -> CliResult<()> {
    let mut csv = String::new();
    if summary {
        csv.push_str(SUMMARY_HEADER);
        csv.push('\n');
        for arch in Architecture::ALL {
            let cfg = ModelConfig { arch, ..run.model };
            let t = ModelInstance::<f32>::build(cfg, 0)?.count_flops(size, size)?;
            let _ = writeln!(csv, "{arch},{},{}", t.total_params, t.total_flops);
        }
    } else {
        let t = ModelInstance::<f32>::build(run.model, 0)?.count_flops(size, size)?;
        csv.push_str(COUNT_HEADER);
        csv.push('\n');
        for r in &t.rows {
            let _ = writeln!(csv, "{},{},{},{}", r.name, r.kind, r.params, r.flops);
        }
        let _ = writeln!(csv, "total,,{},{}", t.total_params, t.total_flops);
    }
    let notes = [("command", "count".to_string()), ("size", size.to_string())];
    emit(out, &[("count.csv", &csv)], &notes, Some(run))
}

fn gradcheck(seed: u64, out: Option<&Path>) -> CliResult<()> {
    let rows = run_suite(seed)?;
    let notes = [("command", "gradcheck".to_string()), ("seed", seed.to_string())];
    emit(out, &[("gradcheck.csv", &gradcheck_csv(&rows))], &notes, None)?;
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.family.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}
