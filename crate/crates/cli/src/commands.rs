//! Subcommand bodies, generic over the scalar type.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use fdia::config::ExperimentConfig;
use fdia::env::{write_traces, MarlEnv};
use fdia::eval::{evaluate_defender, time_invariant_sweep, Attacker, Defender};
use fdia::grid::GridParams;
use fdia::io::{load_model, save_model, ModelKind};
use fdia::marl::{train_marl, write_history, EpochRecord};
use fdia::offline::{generate_fdia_dataset, label_histogram, read_dataset, train_offline_classifier, write_dataset, OfflineClassifier};
use fdia::policy::PolicyNet;
use fdia::predictor::{benign_corpus, train_predictor, LstmPredictor};
use fdia::rng::stream;
use fdia::scalar::Scalar;
use fdia::{Error, Result};
use serde_json::json;

use crate::manifest::{beside, RunManifest};
use crate::{Command, EvaluateArgs};

pub struct Context {
    pub cfg: ExperimentConfig,
    pub quiet: bool,
    pub threads: usize,
}

impl Context {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

pub fn dispatch<T: Scalar>(ctx: &Context, cmd: &Command) -> Result<()> {
    match cmd {
        Command::TrainPredictor { out } => train_predictor_cmd::<T>(ctx, out),
        Command::GenOfflineData { predictor, out, episodes } => gen_offline_data::<T>(ctx, predictor, out, *episodes),
        Command::TrainOffline { dataset, out } => train_offline::<T>(ctx, dataset, out),
        Command::TrainMarl { predictor, out_dir, warm_start, .. } => train_marl_cmd::<T>(ctx, predictor, out_dir, warm_start.as_deref()),
        Command::Evaluate(args) => evaluate::<T>(ctx, args),
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} not found: {}", path.display())))
    }
}

fn load_predictor<T: Scalar>(path: &Path, grid: &GridParams<T>) -> Result<LstmPredictor<T>> {
    require(path, "predictor")?;
    let p: LstmPredictor<T> = load_model(path, ModelKind::Predictor)?;
    p.validate_for(grid)?;
    Ok(p)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

fn train_predictor_cmd<T: Scalar>(ctx: &Context, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let grid: GridParams<T> = cfg.grid_params()?;
    let hyper = &cfg.predictor;
    let mut man = RunManifest::new("train-predictor", cfg, ctx.threads);

    let t = Instant::now();
    ctx.progress(format!("simulating {} benign episodes", hyper.episodes));
    let corpus = benign_corpus(&grid, hyper.episodes, hyper.disturbance, cfg.seed)?;
    man.timings.insert("corpus".into(), secs(t));

    let t = Instant::now();
    let (model, report) = train_predictor(&corpus, cfg.env.d - 1, hyper, &mut stream(cfg.seed, "predictor-train", 0))?;
    man.timings.insert("training".into(), secs(t));
    ctx.progress(format!("held-out RMSE {:.3e}", report.heldout_rmse));

    save_model(out, &model)?;
    man.artifact(out)?;
    man.summary = json!({
        "heldout_rmse": report.heldout_rmse,
        "train_windows": report.train_windows,
        "heldout_windows": report.heldout_windows,
        "epoch_losses": report.epoch_losses,
    });
    man.write(&beside(out))
}

fn gen_offline_data<T: Scalar>(ctx: &Context, predictor: &Path, out: &Path, episodes: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg;
    let grid: GridParams<T> = cfg.grid_params()?;
    let pred = load_predictor(predictor, &grid)?;
    let env = MarlEnv::new(&grid, &pred, &cfg.env)?;
    let episodes = episodes.unwrap_or(cfg.offline.episodes);
    let mut man = RunManifest::new("gen-offline-data", cfg, ctx.threads);
    man.input(predictor)?;

    let t = Instant::now();
    ctx.progress(format!("generating {episodes} episodes for each of {} attack fractions", cfg.offline.t_a.len()));
    let data = generate_fdia_dataset(&env, &cfg.offline.t_a, episodes, cfg.seed)?;
    man.timings.insert("generation".into(), secs(t));

    let mut w = create(out)?;
    write_dataset(&mut w, &data)?;
    w.flush()?;
    drop(w);
    man.artifact(out)?;

    let hist = label_histogram(&data, grid.n_buses());
    let strata: Vec<_> = cfg
        .offline
        .t_a
        .iter()
        .map(|&f| {
            let rows: Vec<_> = data.iter().filter(|w| w.t_a == f).collect();
            let attacked = rows.iter().filter(|w| w.label >= 0).count();
            json!({ "t_a": f, "windows": rows.len(), "attacked": attacked,
                    "attacked_fraction": attacked as f64 / rows.len().max(1) as f64 })
        })
        .collect();
    man.summary = json!({
        "episodes": episodes,
        "windows": data.len(),
        "label_histogram": hist,
        "strata": strata,
    });
    ctx.progress(format!("{} labeled windows", data.len()));
    man.write(&beside(out))
}

fn train_offline<T: Scalar>(ctx: &Context, dataset: &Path, out: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    require(dataset, "dataset")?;
    let grid: GridParams<T> = cfg.grid_params()?;
    let mut man = RunManifest::new("train-offline", cfg, ctx.threads);
    man.input(dataset)?;
    let data = read_dataset::<T, _>(BufReader::new(File::open(dataset)?))?;

    let t = Instant::now();
    let (clf, report) = train_offline_classifier(&data, grid.n_buses(), &cfg.offline, &mut stream(cfg.seed, "offline-train", 0))?;
    man.timings.insert("training".into(), secs(t));
    ctx.progress(format!("held-out accuracy {:.2}%", report.heldout_accuracy));

    save_model(out, &clf)?;
    man.artifact(out)?;
    man.summary = serde_json::to_value(&report)?;
    man.write(&beside(out))
}

fn decile_mean(history: &[EpochRecord], last: bool) -> f64 {
    let k = (history.len() / 10).max(1).min(history.len());
    let slice = if last { &history[history.len() - k..] } else { &history[..k] };
    slice.iter().map(|r| r.defender_mean_reward).sum::<f64>() / k.max(1) as f64
}

fn train_marl_cmd<T: Scalar>(ctx: &Context, predictor: &Path, out_dir: &Path, warm_start: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let grid: GridParams<T> = cfg.grid_params()?;
    let pred = load_predictor(predictor, &grid)?;
    let env = MarlEnv::new(&grid, &pred, &cfg.env)?;
    let mut man = RunManifest::new("train-marl", cfg, ctx.threads);
    man.input(predictor)?;
    let clf: Option<OfflineClassifier<T>> = match warm_start {
        Some(p) => {
            require(p, "warm-start classifier")?;
            man.input(p)?;
            Some(load_model(p, ModelKind::OfflineClassifier)?)
        }
        None => None,
    };
    fs::create_dir_all(out_dir)?;

    let t = Instant::now();
    let mut last = Instant::now();
    let outcome = train_marl(&env, &cfg.train, clf.as_ref(), cfg.seed, |r| {
        ctx.progress(format!(
            "epoch {:>4}  {:>5.1}s  adversary {:>8.3}  defender {:>8.3}  accuracy {:>5.1}%  c share {:.2}/{:.2}/{:.2}",
            r.epoch,
            last.elapsed().as_secs_f64(),
            r.adversary_mean_reward,
            r.defender_mean_reward,
            r.defender_accuracy,
            r.c_share[0],
            r.c_share[1],
            r.c_share[2]
        ));
        last = Instant::now();
    })?;
    man.timings.insert("training".into(), secs(t));

    let prefix = if clf.is_some() { "tf_marl" } else { "marl" };
    let adv_path = out_dir.join(format!("{prefix}_a.json"));
    let def_path = out_dir.join(format!("{prefix}_d.json"));
    let hist_path = out_dir.join("history.csv");
    save_model(&adv_path, &outcome.adversary)?;
    save_model(&def_path, &outcome.defender)?;
    let mut w = create(&hist_path)?;
    write_history(&mut w, &outcome.history)?;
    w.flush()?;
    drop(w);
    for p in [&adv_path, &def_path, &hist_path] {
        man.artifact(p)?;
    }
    man.summary = json!({
        "warm_start": clf.is_some(),
        "epochs": outcome.history.len(),
        "defender_reward_first_decile": decile_mean(&outcome.history, false),
        "defender_reward_last_decile": decile_mean(&outcome.history, true),
        "final": outcome.history.last(),
    });
    man.write(&out_dir.join("manifest.json"))
}

fn evaluate<T: Scalar>(ctx: &Context, args: &EvaluateArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let grid: GridParams<T> = cfg.grid_params()?;
    let pred = load_predictor(&args.predictor, &grid)?;
    let env = MarlEnv::new(&grid, &pred, &cfg.env)?;
    let mut man = RunManifest::new("evaluate", cfg, ctx.threads);
    man.input(&args.predictor)?;

    let def_policy: Option<PolicyNet<T>> = match &args.defender {
        Some(p) => {
            require(p, "defender policy")?;
            man.input(p)?;
            Some(load_model(p, ModelKind::DefenderPolicy)?)
        }
        None => None,
    };
    let offline: Option<OfflineClassifier<T>> = match &args.offline {
        Some(p) => {
            require(p, "offline classifier")?;
            man.input(p)?;
            Some(load_model(p, ModelKind::OfflineClassifier)?)
        }
        None => None,
    };
    let adv_policy: Option<PolicyNet<T>> = match &args.attacker {
        Some(p) => {
            require(p, "attacker policy")?;
            man.input(p)?;
            Some(load_model(p, ModelKind::AdversaryPolicy)?)
        }
        None => None,
    };
    let defender = match (&def_policy, &offline) {
        (Some(p), _) => Defender::Policy(p),
        (None, Some(c)) => Defender::Offline(c),
        _ if args.oracle => Defender::Oracle,
        _ => Defender::Uniform,
    };
    fs::create_dir_all(&args.out_dir)?;
    let t = Instant::now();

    if args.time_invariant {
        if args.traces {
            return Err(Error::Config("--traces is not available with --time-invariant".into()));
        }
        let per_bus = args.episodes.unwrap_or(cfg.eval.episodes_per_bus);
        let sweep = time_invariant_sweep(&env, &defender, per_bus, cfg.seed)?;
        man.timings.insert("evaluation".into(), secs(t));
        let table = sweep.to_table();
        ctx.progress(&table);
        let json_path = args.out_dir.join("sweep.json");
        let txt_path = args.out_dir.join("sweep.txt");
        write_text(&json_path, &serde_json::to_string_pretty(&sweep)?)?;
        write_text(&txt_path, &table)?;
        man.artifact(&json_path)?;
        man.artifact(&txt_path)?;
        man.summary = json!({ "mean_accuracy": sweep.mean, "per_bus": sweep.per_bus });
        return man.write(&args.out_dir.join("manifest.json"));
    }

    let attacker = match &adv_policy {
        Some(p) => Attacker::Policy(p),
        None if args.no_attack => Attacker::NoAttack,
        None => Attacker::Uniform,
    };
    let episodes = args.episodes.unwrap_or(cfg.eval.episodes);
    let (report, traces) = evaluate_defender(&env, &attacker, &defender, episodes, cfg.seed, args.traces)?;
    man.timings.insert("evaluation".into(), secs(t));
    let table = report.to_table();
    ctx.progress(&table);
    let json_path = args.out_dir.join("report.json");
    let txt_path = args.out_dir.join("report.txt");
    write_text(&json_path, &serde_json::to_string_pretty(&report)?)?;
    write_text(&txt_path, &table)?;
    man.artifact(&json_path)?;
    man.artifact(&txt_path)?;
    if let Some(traces) = traces {
        let path = args.out_dir.join("traces.csv");
        let rows: Vec<_> = traces.iter().enumerate().map(|(i, t)| (i, t.as_slice())).collect();
        let mut w = create(&path)?;
        write_traces(&mut w, &rows)?;
        w.flush()?;
        drop(w);
        man.artifact(&path)?;
    }
    man.summary = json!({
        "accuracy": report.accuracy,
        "decisions": report.decisions,
        "mean_r_omega": report.mean_r_omega,
        "modal_c": report.actions.modal_c().as_i8(),
    });
    man.write(&args.out_dir.join("manifest.json"))
}
