use std::path::Path;
use std::str::FromStr;

use forkseq::autodiff::{read_checkpoint, write_checkpoint, ParamStore};
use forkseq::bench::{fit_counter_exponent, fit_exponent, machine_metadata, run_scaling_bench, BenchOptions, BenchResult};
use forkseq::decoder::ForecastGrid;
use forkseq::encoders::EncoderFamily;
use forkseq::ensemble::{ensemble, EnsembleMethod, EnsembleSpec};
use forkseq::evaluation::{forecast_test, grid_metrics};
use forkseq::inference::{analytic_exponent, InferenceScheme};
use forkseq::metrics::{EvalReport, EvalRow};
use forkseq::model::{Forecaster, ModelSpec, MqForecaster};
use forkseq::panel::{load_long_panel, standard_scale, synthesize_panel, FrequencyMeta, TimeSeriesPanel};
use forkseq::theory::{
    ar_convergence_ablation_parallel, ar_fcd_gradients, derive_seed, forecast_variance_decay, frozen_gradient_variance,
    loglog_fit, mean_estimator_variance, steps_to_fraction_of_final, AblationConfig, AblationData, MDependentProcess,
};
use forkseq::model::LinearAr;
use forkseq::training::{train, Optimizer, Scheme, TrainConfig};
use forkseq::{Error, Result};

use crate::config::{key, KeyDef, RunConfig, RunDir};

fn data_keys(length: &'static str) -> Vec<KeyDef> {
    vec![
        key("data", "synthetic"),
        key("frequency", "Monthly"),
        key("horizon", "auto"),
        key("synthetic.n_series", "100"),
        key("synthetic.length", length),
        key("synthetic.noise", "1.0"),
        key("synthetic.seed", "1"),
    ]
}

fn with_common(mut defs: Vec<KeyDef>, extra: &[(&'static str, &'static str)]) -> Vec<KeyDef> {
    defs.push(key("seed", "1"));
    defs.push(key("out", ""));
    defs.extend(extra.iter().map(|&(k, v)| key(k, v)));
    defs
}

pub fn train_keys() -> Vec<KeyDef> {
    with_common(
        data_keys("150"),
        &[
            ("scheme", "fs"),
            ("encoder", "cnn"),
            ("steps", "30000"),
            ("lr", "0.001"),
            ("lr_decay", "0.1"),
            ("lr_step", "10000"),
            ("batch_size", "8"),
            ("window_length", "auto"),
            ("optimizer", "sgd"),
        ],
    )
}

pub fn forecast_keys() -> Vec<KeyDef> {
    with_common(
        data_keys("150"),
        &[
            ("checkpoint", ""),
            ("scheme", "fs"),
            ("window", "auto"),
            ("ensemble", "none"),
            ("ensemble_window", "auto"),
        ],
    )
}

pub fn evaluate_keys() -> Vec<KeyDef> {
    with_common(
        data_keys("150"),
        &[
            ("checkpoints", ""),
            ("forecasts", ""),
            ("dataset", "auto"),
            ("scheme", "fs"),
            ("window", "auto"),
            ("ensemble", "moving_average"),
            ("ensemble_window", "auto"),
            ("parallel", "1"),
        ],
    )
}

pub fn ablate_keys() -> Vec<KeyDef> {
    with_common(
        data_keys("132"),
        &[
            ("sample_sizes", "2,14,27,40,53,66,80,93,106,119,132"),
            ("learning_rates", "0.001,0.005,0.01,0.05"),
            ("steps", "15000"),
            ("lr_decay", "0.1"),
            ("lr_step", "1000"),
            ("batch_size", "1"),
            ("quantile", "0.5"),
            ("ar_order", "12"),
            ("variance_draws", "2000"),
            ("parallel", "1"),
        ],
    )
}

pub fn simulate_keys() -> Vec<KeyDef> {
    with_common(
        Vec::new(),
        &[
            ("theorem", "1"),
            ("M", "0,2,5"),
            ("reps", "200"),
            ("T", "2,4,8,16,32,64,128,256,512,1024,2048,4096"),
            ("sizes", "1..18"),
            ("dim", "16"),
            ("parallel", "1"),
        ],
    )
}

pub fn bench_keys() -> Vec<KeyDef> {
    with_common(
        Vec::new(),
        &[
            ("family", "cnn"),
            ("schemes", "fs,ws_restricted,ws_full"),
            ("T", "256,512,1024,2048,4096"),
            ("reps", "5"),
            ("window", "auto"),
            ("counters_only", "false"),
        ],
    )
}

fn load_panel(cfg: &RunConfig, rd: &mut RunDir) -> Result<TimeSeriesPanel> {
    let name = cfg.require("frequency")?;
    let mut meta =
        FrequencyMeta::named(name).ok_or_else(|| Error::Config(format!("unknown frequency `{name}`")))?;
    if let Some(h) = cfg.parse_auto::<usize>("horizon")? {
        meta = FrequencyMeta::new(&meta.name, meta.seasonality, h)?;
    }
    let data = cfg.require("data")?;
    if data == "synthetic" {
        let mut p = synthesize_panel(
            cfg.parse("synthetic.n_series")?,
            cfg.parse("synthetic.length")?,
            meta.seasonality,
            cfg.parse("synthetic.noise")?,
            cfg.parse("synthetic.seed")?,
        );
        p.frequency = meta;
        return Ok(p);
    }
    let path = Path::new(data);
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let (panel, report) = load_long_panel(path, meta)?;
    report.write_csv(&rd.file("load_report.csv"))?;
    Ok(panel)
}

/// Keep series long enough for a train/validation/test split.
fn splittable(mut panel: TimeSeriesPanel) -> Result<TimeSeriesPanel> {
    let need = 3 * panel.horizon() + 1;
    let before = panel.len();
    panel.series.retain(|s| s.len() >= need);
    if panel.series.len() < before {
        eprintln!(
            "skipping {} series shorter than {need} observations",
            before - panel.series.len()
        );
    }
    if panel.is_empty() {
        return Err(Error::Config(format!("no series with at least {need} observations")));
    }
    Ok(panel)
}

fn parse_with<T: FromStr<Err = Error>>(cfg: &RunConfig, k: &str) -> Result<T> {
    cfg.require(k)?.parse()
}

pub fn cmd_train(cfg: &mut RunConfig) -> Result<()> {
    let family: EncoderFamily = parse_with(cfg, "encoder")?;
    let scheme: Scheme = parse_with(cfg, "scheme")?;
    let optimizer: Optimizer = parse_with(cfg, "optimizer")?;
    let mut rd = RunDir::create(cfg)?;
    let panel = splittable(load_panel(cfg, &mut rd)?)?;
    let mut spec = ModelSpec::new(family, panel.horizon());
    for (k, v) in cfg.model_pairs() {
        spec.set(&k, &v)?;
    }
    spec.encoder.validate()?;
    spec.decoder.validate()?;
    for (k, v) in spec.to_pairs() {
        if k != "encoder.family" && k != "decoder.horizon" {
            cfg.set(&k, v);
        }
    }
    let mut tc = TrainConfig::new(scheme, spec.clone());
    tc.batch_size = cfg.parse("batch_size")?;
    tc.lr0 = cfg.parse("lr")?;
    tc.max_steps = cfg.parse("steps")?;
    tc.lr_decay = cfg.parse("lr_decay")?;
    tc.lr_step = cfg.parse("lr_step")?;
    tc.window_length = cfg.parse_auto("window_length")?;
    tc.optimizer = optimizer;
    tc.seed = cfg.parse("seed")?;

    let splits = panel.splits()?;
    let (scaled, _) = standard_scale(&panel, &splits)?;
    let (_, store, trajectory) = match train(&scaled, &tc) {
        Ok(r) => r,
        Err(Error::Divergence { step, trajectory }) => {
            trajectory.write_csv(&rd.file("trajectory.csv"))?;
            rd.finish(cfg)?;
            return Err(Error::Divergence { step, trajectory });
        }
        Err(e) => return Err(e),
    };
    trajectory.write_csv(&rd.file("trajectory.csv"))?;
    let mut meta = spec.to_pairs();
    meta.push(("train.scheme".into(), scheme.to_string()));
    meta.push(("train.seed".into(), tc.seed.to_string()));
    meta.push(("train.steps".into(), tc.max_steps.to_string()));
    meta.push(("data.frequency".into(), panel.frequency.name.clone()));
    write_checkpoint(&rd.file("checkpoint.txt"), &store, &meta)?;
    rd.finish(cfg)?;
    println!(
        "trained {family} ({scheme}) for {} steps, final loss {:.6}; outputs in {}",
        trajectory.len(),
        trajectory.final_loss().unwrap_or(f64::NAN),
        rd.path.display()
    );
    Ok(())
}

struct Loaded {
    model: MqForecaster,
    store: ParamStore,
    label: String,
    seed: u64,
}

fn load_model(path: &Path) -> Result<Loaded> {
    let ck = read_checkpoint(path)?;
    let spec = ModelSpec::from_pairs(&ck.meta)?;
    let (model, mut store) = MqForecaster::new(spec, 0)?;
    ck.load_into(&mut store)?;
    let label = format!(
        "{}_{}",
        model.family(),
        ck.meta_value("train.scheme").unwrap_or("unknown")
    );
    let seed = ck.meta_value("train.seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    Ok(Loaded {
        model,
        store,
        label,
        seed,
    })
}

fn inference_scheme(cfg: &RunConfig, model: &MqForecaster) -> Result<InferenceScheme> {
    let s = cfg.require("scheme")?;
    if s.contains(':') {
        return s.parse();
    }
    let l = match cfg.parse_auto("window")? {
        Some(l) => l,
        None => TrainConfig::default_window(model.receptive_field(), model.horizon()),
    };
    InferenceScheme::parse(s, l)
}

fn ensemble_spec(cfg: &RunConfig, horizon: usize) -> Result<Option<EnsembleSpec>> {
    let m = cfg.require("ensemble")?;
    if m == "none" {
        return Ok(None);
    }
    let method: EnsembleMethod = m.parse()?;
    let window = cfg.parse_auto("ensemble_window")?.unwrap_or(horizon);
    Ok(Some(EnsembleSpec::new(method, Some(window))?))
}

fn check_horizon(panel: &TimeSeriesPanel, model: &MqForecaster) -> Result<()> {
    if panel.horizon() != model.horizon() {
        return Err(Error::Contract(format!(
            "data horizon {} differs from the checkpoint's {}",
            panel.horizon(),
            model.horizon()
        )));
    }
    Ok(())
}

pub fn cmd_forecast(cfg: &mut RunConfig) -> Result<()> {
    let loaded = load_model(Path::new(cfg.require("checkpoint")?))?;
    let scheme = inference_scheme(cfg, &loaded.model)?;
    let spec = ensemble_spec(cfg, loaded.model.horizon())?;
    let mut rd = RunDir::create(cfg)?;
    let panel = splittable(load_panel(cfg, &mut rd)?)?;
    check_horizon(&panel, &loaded.model)?;
    let f = forecast_test(&loaded.model, &loaded.store, &panel, scheme, spec.as_ref())?;
    f.raw.write_csv(&rd.file("forecasts.csv"))?;
    if let (Some(g), Some(spec)) = (&f.ensembled, &spec) {
        g.write_csv(&rd.file("forecasts_ensembled.csv"))?;
        spec.write_sidecar(&rd.file("ensemble.txt"), 1)?;
    }
    rd.finish(cfg)?;
    println!("wrote forecasts to {}", rd.path.display());
    Ok(())
}

/// The series of `panel` in the order of the grid's ids.
fn aligned(panel: &TimeSeriesPanel, grid: &ForecastGrid) -> Result<TimeSeriesPanel> {
    let series = grid
        .series_ids
        .iter()
        .map(|id| {
            panel
                .series
                .iter()
                .find(|s| &s.id == id)
                .cloned()
                .ok_or_else(|| Error::Contract(format!("forecast series `{id}` not in the data")))
        })
        .collect::<Result<_>>()?;
    Ok(TimeSeriesPanel {
        series,
        frequency: panel.frequency.clone(),
    })
}

struct Job {
    label: String,
    seed: u64,
    scheme: String,
    grids: Vec<(String, ForecastGrid)>,
}

fn push_rows(report: &mut EvalReport, dataset: &str, panel: &TimeSeriesPanel, job: &Job) -> Result<()> {
    for (variant, grid) in &job.grids {
        let sub = aligned(panel, grid)?;
        for (metric, v) in grid_metrics(&sub, grid)? {
            report.push(EvalRow {
                dataset: dataset.to_string(),
                frequency: panel.frequency.name.clone(),
                model: job.label.clone(),
                scheme: format!("{}{variant}", job.scheme),
                seed: job.seed,
                metric: metric.to_string(),
                value: v.value,
                n_terms: v.n_terms,
            });
        }
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &mut RunConfig) -> Result<()> {
    let checkpoints: Vec<String> = match cfg.get("checkpoints") {
        Some(_) => cfg.list("checkpoints")?,
        None => Vec::new(),
    };
    let forecasts: Vec<String> = match cfg.get("forecasts") {
        Some(_) => cfg.list("forecasts")?,
        None => Vec::new(),
    };
    if checkpoints.is_empty() == forecasts.is_empty() {
        return Err(Error::Config("give exactly one of `checkpoints` or `forecasts`".into()));
    }
    let threads: usize = cfg.parse("parallel")?;
    let mut rd = RunDir::create(cfg)?;
    let panel = splittable(load_panel(cfg, &mut rd)?)?;
    let dataset = match cfg.get("dataset") {
        Some("auto") | None => Path::new(cfg.require("data")?)
            .file_stem()
            .map_or("data".into(), |s| s.to_string_lossy().into_owned()),
        Some(d) => d.to_string(),
    };
    let ens = ensemble_spec(cfg, panel.horizon())?;
    let ens_suffix = ens.map(|s| format!("+{}", s.method));

    let jobs: Vec<Result<Job>> = if !checkpoints.is_empty() {
        let run = |path: &String| -> Result<Job> {
            let loaded = load_model(Path::new(path))?;
            check_horizon(&panel, &loaded.model)?;
            let scheme = inference_scheme(cfg, &loaded.model)?;
            let f = forecast_test(&loaded.model, &loaded.store, &panel, scheme, ens.as_ref())?;
            let mut grids = vec![(String::new(), f.raw)];
            if let (Some(g), Some(sfx)) = (f.ensembled, &ens_suffix) {
                grids.push((sfx.clone(), g));
            }
            Ok(Job {
                label: loaded.label,
                seed: loaded.seed,
                scheme: scheme.name().to_string(),
                grids,
            })
        };
        fan_out(&checkpoints, threads, run)
    } else {
        forecasts
            .iter()
            .enumerate()
            .map(|(i, path)| {
                let raw = ForecastGrid::read_csv(Path::new(path))?;
                let mut grids = Vec::new();
                if let (Some(spec), Some(sfx)) = (&ens, &ens_suffix) {
                    grids.push((sfx.clone(), ensemble(&raw, spec, 1)));
                }
                grids.insert(0, (String::new(), raw));
                Ok(Job {
                    label: "forecasts".into(),
                    seed: i as u64 + 1,
                    scheme: "file".into(),
                    grids,
                })
            })
            .collect()
    };
    let mut report = EvalReport::default();
    for job in jobs {
        push_rows(&mut report, &dataset, &panel, &job?)?;
    }
    report.write_per_seed_csv(&rd.file("eval_per_seed.csv"))?;
    report.write_summary_csv(&rd.file("eval_summary.csv"))?;
    rd.finish(cfg)?;
    for s in report.summarize() {
        println!(
            "{:<16} {:<28} {:<6} {:.6}{}",
            s.key[2],
            s.key[3],
            s.key[4],
            s.mean,
            s.stderr.map_or(String::new(), |e| format!(" ± {e:.6}"))
        );
    }
    Ok(())
}

/// Run `f` over `items` on up to `threads` scoped threads, keeping order.
fn fan_out<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| scope.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

pub fn cmd_ablate(cfg: &mut RunConfig) -> Result<()> {
    let acfg = AblationConfig {
        window_sample_sizes: cfg.list("sample_sizes")?,
        learning_rates: cfg.list("learning_rates")?,
        max_steps: cfg.parse("steps")?,
        lr_decay: cfg.parse("lr_decay")?,
        lr_step: cfg.parse("lr_step")?,
        batch_size: cfg.parse("batch_size")?,
        seed: cfg.parse("seed")?,
        quantile: cfg.parse("quantile")?,
        ar_order: cfg.parse("ar_order")?,
    };
    if acfg.max_steps == 0 || acfg.lr_step == 0 || acfg.batch_size == 0 {
        return Err(Error::Config("steps, lr_step and batch_size must be positive".into()));
    }
    let draws: usize = cfg.parse("variance_draws")?;
    let threads: usize = cfg.parse("parallel")?;
    let mut rd = RunDir::create(cfg)?;
    let panel = load_panel(cfg, &mut rd)?;
    let data = AblationData {
        series: panel.series.iter().map(|s| s.values.clone()).collect(),
    };
    let cells = ar_convergence_ablation_parallel(&acfg, &data, threads);

    let mut traj = csv::Writer::from_path(rd.file("ablation.csv")).map_err(Error::from)?;
    traj.write_record(["sample_size", "lr", "step", "loss"]).map_err(Error::from)?;
    let mut conv = csv::Writer::from_path(rd.file("convergence.csv")).map_err(Error::from)?;
    conv.write_record(["sample_size", "lr", "status", "steps_to_110pct", "final_loss"])
        .map_err(Error::from)?;
    for c in &cells {
        let (t, status) = match &c.result {
            Ok(t) => (t, "ok".to_string()),
            Err(Error::Divergence { trajectory, step }) => (trajectory.as_ref(), format!("diverged at step {step}")),
            Err(e) => return Err(Error::Contract(format!("ablation cell failed: {e}"))),
        };
        for r in &t.records {
            traj.write_record([
                c.sample_size.to_string(),
                format!("{:?}", c.lr),
                r.step.to_string(),
                format!("{:?}", r.loss),
            ])
            .map_err(Error::from)?;
        }
        let reached = if status == "ok" { steps_to_fraction_of_final(t, 1.1) } else { None };
        conv.write_record([
            c.sample_size.to_string(),
            format!("{:?}", c.lr),
            status,
            reached.map_or(String::new(), |s| s.to_string()),
            t.final_loss().map_or(String::new(), |l| format!("{l:?}")),
        ])
        .map_err(Error::from)?;
    }
    traj.flush()?;
    conv.flush()?;

    // Gradient variance at the shared initial parameters.
    let (model, store) = LinearAr::new(acfg.ar_order, 1, &[acfg.quantile], acfg.seed)?;
    let grads = ar_fcd_gradients(&model, &store, &data, acfg.quantile);
    let var = frozen_gradient_variance(&grads, &acfg.window_sample_sizes, draws, derive_seed(acfg.seed, 0xfeed))?;
    let mut w = csv::Writer::from_path(rd.file("gradient_variance.csv")).map_err(Error::from)?;
    w.write_record(["sample_size", "variance"]).map_err(Error::from)?;
    for (k, v) in &var {
        w.write_record([k.to_string(), format!("{v:?}")]).map_err(Error::from)?;
    }
    w.flush()?;
    let pairs: Vec<(f64, f64)> = var.iter().map(|&(k, v)| (k as f64, v)).collect();
    if let Ok(fit) = loglog_fit(&pairs) {
        println!("gradient variance slope {:.3} (r² {:.3})", fit.slope, fit.r_squared);
    }
    rd.finish(cfg)?;
    println!("{} ablation cells written to {}", cells.len(), rd.path.display());
    Ok(())
}

pub fn cmd_simulate(cfg: &mut RunConfig) -> Result<()> {
    let theorem: u32 = cfg.parse("theorem")?;
    let orders: Vec<usize> = cfg.list("M")?;
    let reps: usize = cfg.parse("reps")?;
    let seed: u64 = cfg.parse("seed")?;
    let threads: usize = cfg.parse("parallel")?;
    if theorem != 1 && theorem != 2 {
        return Err(Error::Config(format!("theorem must be 1 or 2, got {theorem}")));
    }
    let mut rd = RunDir::create(cfg)?;
    let mut fits = csv::Writer::from_path(rd.file("fits.csv")).map_err(Error::from)?;
    fits.write_record(["M", "slope", "r_squared"]).map_err(Error::from)?;
    let mut curves = csv::Writer::from_path(rd.file("variance.csv")).map_err(Error::from)?;
    let results: Vec<Result<Vec<(usize, f64, f64)>>> = if theorem == 1 {
        let t_grid: Vec<usize> = cfg.list("T")?;
        let dim: usize = cfg.parse("dim")?;
        curves.write_record(["M", "T", "variance", "analytic_variance"]).map_err(Error::from)?;
        fan_out(&orders, threads, |&m| {
            let proc = MDependentProcess::new(m, dim, derive_seed(seed, m as u64));
            let v = mean_estimator_variance(&proc, &t_grid, reps)?;
            Ok(v.into_iter().map(|(t, x)| (t, x, proc.mean_variance(t))).collect())
        })
    } else {
        let sizes: Vec<usize> = cfg.list("sizes")?;
        curves.write_record(["M", "ensemble_size", "variance"]).map_err(Error::from)?;
        fan_out(&orders, threads, |&m| {
            let v = forecast_variance_decay(&sizes, m, reps, derive_seed(seed, m as u64))?;
            Ok(v.into_iter().map(|(n, x)| (n, x, f64::NAN)).collect())
        })
    };
    for (&m, res) in orders.iter().zip(results) {
        let rows = res?;
        for &(x, v, a) in &rows {
            let mut rec = vec![m.to_string(), x.to_string(), format!("{v:?}")];
            if theorem == 1 {
                rec.push(format!("{a:?}"));
            }
            curves.write_record(&rec).map_err(Error::from)?;
        }
        let fit = loglog_fit(&rows.iter().map(|&(x, v, _)| (x as f64, v)).collect::<Vec<_>>())?;
        fits.write_record([m.to_string(), format!("{:?}", fit.slope), format!("{:?}", fit.r_squared)])
            .map_err(Error::from)?;
        println!("M={m}: slope {:.3} (r² {:.3})", fit.slope, fit.r_squared);
    }
    curves.flush()?;
    fits.flush()?;
    rd.finish(cfg)?;
    Ok(())
}

pub fn cmd_bench(cfg: &mut RunConfig) -> Result<()> {
    let families: Vec<EncoderFamily> = cfg.list("family")?;
    let scheme_names: Vec<String> = cfg.list("schemes")?;
    let t_grid: Vec<usize> = cfg.list("T")?;
    let reps: usize = cfg.parse("reps")?;
    let seed: u64 = cfg.parse("seed")?;
    let counters_only: bool = cfg.parse("counters_only")?;
    let window: Option<usize> = cfg.parse_auto("window")?;
    let schemes: Vec<InferenceScheme> = scheme_names
        .iter()
        .map(|s| if s.contains(':') { s.parse() } else { InferenceScheme::parse(s, 1) })
        .collect::<Result<_>>()?;
    let mut rd = RunDir::create(cfg)?;
    std::fs::write(rd.file("machine.txt"), machine_metadata())?;
    let mut all = BenchResult::default();
    let mut exps = csv::Writer::from_path(rd.file("exponents.csv")).map_err(Error::from)?;
    exps.write_record([
        "family",
        "scheme",
        "time_exponent",
        "time_r_squared",
        "counter_exponent",
        "analytic_exponent",
    ])
    .map_err(Error::from)?;
    for &family in &families {
        for &scheme in &schemes {
            let mut opts = BenchOptions::new(family);
            opts.counters_only = counters_only;
            match (scheme, window) {
                (InferenceScheme::WsRestricted(l), _) if l > 1 => opts.window = l,
                (_, Some(l)) => opts.window = l,
                _ => {}
            }
            let res = run_scaling_bench(family, scheme, &t_grid, reps, seed, &opts)?;
            let time = if counters_only { None } else { Some(fit_exponent(&res)?) };
            let counter = fit_counter_exponent(&res)?;
            exps.write_record([
                family.to_string(),
                scheme.to_string(),
                time.map_or(String::new(), |f| format!("{:?}", f.slope)),
                time.map_or(String::new(), |f| format!("{:?}", f.r_squared)),
                format!("{:?}", counter.slope),
                format!("{:?}", analytic_exponent(scheme, family)),
            ])
            .map_err(Error::from)?;
            println!(
                "{family} {scheme}: counter exponent {:.3}, analytic {}{}",
                counter.slope,
                analytic_exponent(scheme, family),
                time.map_or(String::new(), |f| format!(", wall-clock {:.3} (r² {:.3})", f.slope, f.r_squared))
            );
            all.rows.extend(res.rows);
        }
    }
    exps.flush()?;
    all.write_csv(&rd.file("bench.csv"))?;
    rd.finish(cfg)?;
    Ok(())
}
