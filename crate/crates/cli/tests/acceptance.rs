//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit when any
//! hard criterion fails.
//!
//! `FDIA_ACCEPTANCE_ONLY=1,2,5` restricts the run to the listed criteria.
//! `FDIA_ACCEPTANCE_LONG=1` enables the warm-started training comparison
//! (criterion 10), which only warns on failure.

mod common;

use std::cell::OnceCell;
use std::collections::BTreeSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use fdia::attack::{apply_mask, effective_droop, AdversaryAction, DroopSetting, Label, WindowRecord, NO_ATTACK};
use fdia::config::ExperimentConfig;
use fdia::env::{EnvConfig, MarlEnv, Transition};
use fdia::eval::{action_statistics, evaluate_defender, time_invariant_sweep, Attacker, Defender};
use fdia::grid::{simulate_reference, GridFile, GridParams, SystemState};
use fdia::marl::{initial_policies, train_marl, write_history, EpochRecord, MarlOutcome};
use fdia::nn::{softmax_cross_entropy, Dense, LstmCell, Mlp, Params};
use fdia::offline::{generate_fdia_dataset, train_offline_classifier, window_of_step, LabeledWindow, OfflineClassifier};
use fdia::policy::decode_defender;
use fdia::ppo::gae_advantages;
use fdia::predictor::{benign_corpus, train_predictor, LstmPredictor};
use fdia::rng::stream;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type S = f32;
const SEEDS: [u64; 3] = [1, 2, 3];

#[derive(PartialEq)]
enum Verdict {
    Pass,
    Fail,
    Warn,
}

struct Report {
    verdict: Verdict,
    detail: String,
}

fn pass(detail: impl Into<String>) -> Report {
    Report { verdict: Verdict::Pass, detail: detail.into() }
}

fn judge(ok: bool, detail: impl Into<String>) -> Report {
    Report { verdict: if ok { Verdict::Pass } else { Verdict::Fail }, detail: detail.into() }
}

fn within(elapsed: Duration, limit: Duration, r: Report) -> Report {
    if r.verdict == Verdict::Pass && elapsed > limit {
        return Report { verdict: Verdict::Fail, detail: format!("{} (took {:.1?}, limit {limit:?})", r.detail, elapsed) };
    }
    r
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("    .. {}", msg.as_ref());
}

/// Trained artifacts shared between criteria, built on first use.
struct Shared {
    cfg: ExperimentConfig,
    grid: GridParams<S>,
    out: PathBuf,
    predictor: OnceCell<LstmPredictor<S>>,
    dataset: OnceCell<Vec<LabeledWindow<S>>>,
    offline: OnceCell<(OfflineClassifier<S>, f64)>,
    marl: OnceCell<Vec<MarlOutcome<S>>>,
}

impl Shared {
    fn new() -> Self {
        let cfg = ExperimentConfig::default();
        let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        fs::create_dir_all(&out).unwrap();
        Shared {
            grid: cfg.grid_params().unwrap(),
            cfg,
            out,
            predictor: OnceCell::new(),
            dataset: OnceCell::new(),
            offline: OnceCell::new(),
            marl: OnceCell::new(),
        }
    }

    fn predictor(&self) -> &LstmPredictor<S> {
        self.predictor.get_or_init(|| {
            let t = Instant::now();
            let h = &self.cfg.predictor;
            let corpus = benign_corpus(&self.grid, h.episodes, h.disturbance, self.cfg.seed).unwrap();
            let (p, rep) = train_predictor(&corpus, self.cfg.env.d - 1, h, &mut stream(self.cfg.seed, "predictor-train", 0)).unwrap();
            progress(format!("predictor trained in {:.0?}, held-out RMSE {:.3e}", t.elapsed(), rep.heldout_rmse));
            p
        })
    }

    fn env(&self) -> MarlEnv<'_, S> {
        MarlEnv::new(&self.grid, self.predictor(), &self.cfg.env).unwrap()
    }

    fn dataset(&self) -> &Vec<LabeledWindow<S>> {
        self.dataset.get_or_init(|| {
            let t = Instant::now();
            let d = generate_fdia_dataset(&self.env(), &self.cfg.offline.t_a, self.cfg.offline.episodes, self.cfg.seed).unwrap();
            progress(format!("{} labeled windows in {:.0?}", d.len(), t.elapsed()));
            d
        })
    }

    fn offline(&self) -> &(OfflineClassifier<S>, f64) {
        self.offline.get_or_init(|| {
            let t = Instant::now();
            let (clf, rep) =
                train_offline_classifier(self.dataset(), self.grid.n_buses(), &self.cfg.offline, &mut stream(self.cfg.seed, "offline-train", 0))
                    .unwrap();
            progress(format!("offline classifier trained in {:.0?}", t.elapsed()));
            (clf, rep.heldout_accuracy)
        })
    }

    fn marl(&self) -> &Vec<MarlOutcome<S>> {
        self.marl.get_or_init(|| {
            let env = self.env();
            SEEDS
                .iter()
                .map(|&seed| {
                    let t = Instant::now();
                    let out = train_marl(&env, &self.cfg.train, None, seed, |r| {
                        if (r.epoch + 1) % 20 == 0 {
                            progress(format!(
                                "seed {seed} epoch {:>3}: defender {:.3} accuracy {:.1}% adversary {:.3}",
                                r.epoch + 1,
                                r.defender_mean_reward,
                                r.defender_accuracy,
                                r.adversary_mean_reward
                            ));
                        }
                    })
                    .unwrap();
                    write_history(fs::File::create(self.out.join(format!("marl_seed{seed}.csv"))).unwrap(), &out.history).unwrap();
                    progress(format!("seed {seed} trained in {:.0?}", t.elapsed()));
                    out
                })
                .collect()
        })
    }
}

// ---------------------------------------------------------------- 1, 2

fn two_bus() -> GridParams<f64> {
    GridParams::from_file(&GridFile {
        name: None,
        n_buses: 2,
        dt: 0.01,
        t_f: 1.0,
        inertia: vec![0.5, 0.8],
        damping: vec![0.6, 0.9],
        droop_ref: vec![1.0, 1.2],
        equilibrium_theta: vec![0.05, -0.05],
        susceptance: vec![0.0, 1.7, 1.7, 0.0],
    })
    .unwrap()
}

fn integrator() -> Report {
    let g = two_bus();
    let s0 = SystemState { theta: vec![0.2, -0.15], omega: vec![0.1, -0.2], step: 0 };
    let end = simulate_reference(&g, &s0).unwrap().states.last().unwrap().stacked();
    // explicit Euler at dt = 1e-6 on the written-out equations
    let (m, d, k, p, b) = (g.inertia(), g.damping(), g.droop_ref(), g.injection(), g.susceptance()[1]);
    let (mut th, mut om): ([f64; 2], [f64; 2]) = ([0.2, -0.15], [0.1, -0.2]);
    let h = 1e-6;
    for _ in 0..1_000_000 {
        let s = (th[0] - th[1]).sin();
        let dw = [(p[0] - (k[0] + d[0]) * om[0] - b * s) / m[0], (p[1] - (k[1] + d[1]) * om[1] + b * s) / m[1]];
        th = [th[0] + h * om[0], th[1] + h * om[1]];
        om = [om[0] + h * dw[0], om[1] + h * dw[1]];
    }
    let want = [th[0], th[1], om[0], om[1]];
    let scale = want.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let rel = end.iter().zip(want).map(|(a, b)| (a - b).abs() / scale).fold(0.0, f64::max);

    let (mm, dd, kk) = (0.7, 0.4, 1.1);
    let g1: GridParams<f64> = GridParams::from_file(&GridFile {
        name: None,
        n_buses: 1,
        dt: 0.01,
        t_f: 1.0,
        inertia: vec![mm],
        damping: vec![dd],
        droop_ref: vec![kk],
        equilibrium_theta: vec![0.3],
        susceptance: vec![0.0],
    })
    .unwrap();
    let traj = simulate_reference(&g1, &SystemState { theta: vec![0.3], omega: vec![0.25], step: 0 }).unwrap();
    let a = (dd + kk) / mm;
    let decay = traj
        .states
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let e = (-a * t as f64 * 0.01).exp();
            (s.omega[0] - 0.25 * e).abs().max((s.theta[0] - 0.3 - 0.25 / a * (1.0 - e)).abs())
        })
        .fold(0.0, f64::max);
    judge(rel < 1e-5 && decay < 1e-8, format!("two-bus relative error {rel:.2e} (< 1e-5), decay error {decay:.2e} (< 1e-8)"))
}

fn equilibrium() -> Report {
    let g = GridParams::<f64>::default_10_bus();
    let traj = simulate_reference(&g, &g.equilibrium_state()).unwrap();
    let worst = traj.states.iter().map(|s| s.max_abs_omega()).fold(0.0, f64::max);
    judge(traj.states.len() == 501 && worst < 1e-9, format!("max |omega| over 500 steps {worst:.2e} (< 1e-9)"))
}

// ---------------------------------------------------------------- 3

fn mask() -> Report {
    const N: usize = 10;
    let d = 6;
    let k_ref: Vec<f64> = GridParams::<f64>::default_10_bus().droop_ref().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let sequences = 100_000;
    let mut steps = 0usize;
    let mut attacked_windows = 0usize;
    for _ in 0..sequences {
        let len = rng.random_range(1..=500);
        let mut rec = WindowRecord::fresh(0);
        let mut window = 0;
        let mut buses = BTreeSet::new();
        for t in 0..len {
            if window_of_step(t, d) != window {
                attacked_windows += usize::from(!buses.is_empty());
                window = window_of_step(t, d);
                rec = WindowRecord::fresh(t);
                buses.clear();
            }
            let a = AdversaryAction {
                bus: rng.random_range(-1..N as Label),
                setting: DroopSetting::from_index(rng.random_range(0..3)).unwrap(),
                mute: rng.random_bool(0.5),
            };
            let (eff, next) = apply_mask(&rec, &a);
            rec = next;
            let k = effective_droop(&k_ref, eff, a.setting);
            if k.iter().zip(&k_ref).filter(|(x, y)| x != y).count() > 1 {
                return judge(false, format!("two gains changed at step {t}"));
            }
            if eff != NO_ATTACK {
                buses.insert(eff);
            }
            if buses.len() > 1 {
                return judge(false, format!("window {window} attacked buses {buses:?}"));
            }
            steps += 1;
        }
    }
    pass(format!("{sequences} sequences, {steps} steps, {attacked_windows} attacked windows, never more than one bus or gain"))
}

// ---------------------------------------------------------------- 4

fn rewards() -> Report {
    let grid = GridParams::<f64>::default_10_bus();
    let pred = LstmPredictor::zeros(10, 5, 8);
    let cfg = EnvConfig::default();
    let env = MarlEnv::new(&grid, &pred, &cfg).unwrap();
    let attack = AdversaryAction { bus: 3, setting: DroopSetting::Minus, mute: false };
    let mut fails = Vec::new();

    // capture at a detection step
    let (mut ctx, _) = env.reset(&mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let mut non_detection = None;
    loop {
        match env.advance(&mut ctx, &attack).unwrap() {
            Transition::Done(o) => non_detection = Some(o),
            Transition::Detect(_) => break,
        }
    }
    let o = env.resolve(&mut ctx, 3).unwrap();
    if o.defender_reward != Some(0.1) || o.adversary_reward != -0.1 || o.info.captured != Some(true) {
        fails.push(format!("capture: defender {:?}, adversary {}", o.defender_reward, o.adversary_reward));
    }
    let nd = non_detection.unwrap();
    if nd.defender_reward.is_some() || nd.info.defender_action.is_some() {
        fails.push("non-detection step carried a defender reward".into());
    }

    // quiet window, correct "no attack"
    let (mut ctx, _) = env.reset(&mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    while let Transition::Done(_) = env.advance(&mut ctx, &AdversaryAction::idle()).unwrap() {}
    let o = env.resolve(&mut ctx, NO_ATTACK).unwrap();
    if o.defender_reward != Some(0.1) || o.adversary_reward != o.info.r_omega || o.info.captured != Some(false) {
        fails.push(format!("quiet window: defender {:?}, adversary {} vs r_omega {}", o.defender_reward, o.adversary_reward, o.info.r_omega));
    }

    // no-attack episodes accumulate exactly zero
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for ep in 0..20 {
        let (mut ctx, _) = env.reset(&mut rng).unwrap();
        while !ctx.done {
            env.step_with(&mut ctx, &AdversaryAction::idle(), |_, _| Ok(4)).unwrap();
        }
        if ctx.totals.adversary_reward != 0.0 {
            fails.push(format!("episode {ep}: no-attack adversary reward {}", ctx.totals.adversary_reward));
        }
        if ctx.totals.defender_reward.abs() > 0.1 * 83.0 + 1e-9 {
            fails.push(format!("episode {ep}: defender total {} out of range", ctx.totals.defender_reward));
        }
    }
    judge(fails.is_empty(), if fails.is_empty() { "capture +0.1/-0.1, quiet window +0.1 with r_omega kept, non-detection absent, 20 no-attack episodes sum to 0".into() } else { fails.join("; ") })
}

// ---------------------------------------------------------------- 5

fn fd_worst<P: Params<f64> + Clone>(model: &P, analytic: &[f64], loss: impl Fn(&P) -> f64) -> f64 {
    let h = 1e-5;
    let mut probe = model.clone();
    let mut k = 0;
    let mut worst = 0.0f64;
    for s in 0..probe.slices().len() {
        for i in 0..probe.slices()[s].len() {
            let orig = probe.slices()[s][i];
            probe.slices_mut()[s][i] = orig + h;
            let up = loss(&probe);
            probe.slices_mut()[s][i] = orig - h;
            let down = loss(&probe);
            probe.slices_mut()[s][i] = orig;
            let num = (up - down) / (2.0 * h);
            worst = worst.max((num - analytic[k]).abs() / (num.abs() + analytic[k].abs()).max(1e-3));
            k += 1;
        }
    }
    assert_eq!(k, analytic.len());
    worst
}

fn fd_input_worst(x: &Array2<f64>, analytic: &Array2<f64>, loss: impl Fn(&Array2<f64>) -> f64) -> f64 {
    let h = 1e-5;
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = loss(&probe);
        probe[[r, c]] = orig - h;
        let down = loss(&probe);
        probe[[r, c]] = orig;
        let num = (up - down) / (2.0 * h);
        worst = worst.max((num - analytic[[r, c]]).abs() / (num.abs() + analytic[[r, c]].abs()).max(1e-3));
    }
    worst
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-s..s))
}

fn gradients() -> Report {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst = [0.0f64; 4];
    let per_kind = 30;
    for case in 0..per_kind {
        // dense
        let (i, o, b) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..5));
        let mut layer = Dense::<f64>::zeros(i, o);
        layer.weight = rand_mat(&mut rng, i, o, 1.0);
        layer.bias = rand_mat(&mut rng, 1, o, 1.0).row(0).to_owned();
        let x = rand_mat(&mut rng, b, i, 1.0);
        let proj = rand_mat(&mut rng, b, o, 1.0);
        let mut g = Dense::zeros(i, o);
        let dx = layer.backward(x.view(), proj.view(), &mut g);
        worst[0] = worst[0]
            .max(fd_worst(&layer, &g.flat(), |l| (l.forward(x.view()) * &proj).sum()))
            .max(fd_input_worst(&x, &dx, |xx| (layer.forward(xx.view()) * &proj).sum()));

        // tanh MLP
        let sizes = [rng.random_range(1..5), rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..4)];
        let net = Mlp::<f64>::new(&sizes, case % 2 == 0, 1.2, 1.0, &mut rng);
        let b = rng.random_range(1..4);
        let x = rand_mat(&mut rng, b, sizes[0], 1.5);
        let proj = rand_mat(&mut rng, b, sizes[3], 1.0);
        let cache = net.forward_cached(x.view());
        let mut g = net.zeros_like();
        let dx = net.backward(&cache, proj.view(), &mut g, true).unwrap();
        worst[1] = worst[1]
            .max(fd_worst(&net, &g.flat(), |n| (n.forward(x.view()) * &proj).sum()))
            .max(fd_input_worst(&x, &dx, |xx| (net.forward(xx.view()) * &proj).sum()));

        // softmax cross-entropy
        let (b, k) = (rng.random_range(1..6), rng.random_range(2..8));
        let logits = rand_mat(&mut rng, b, k, 3.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let (_, g) = softmax_cross_entropy(logits.view(), &labels);
        worst[2] = worst[2].max(fd_input_worst(&logits, &g, |l| softmax_cross_entropy(l.view(), &labels).0));

        // LSTM cell through time
        let (inp, hid) = (rng.random_range(1..5), rng.random_range(1..5));
        let steps = rng.random_range(1..6);
        let b = rng.random_range(1..4);
        let mut cell = LstmCell::<f64>::new(inp, hid, &mut rng);
        cell.bias = rand_mat(&mut rng, 1, 4 * hid, 0.5).row(0).to_owned();
        let xs: Vec<Array2<f64>> = (0..steps).map(|_| rand_mat(&mut rng, b, inp, 1.0)).collect();
        let proj = rand_mat(&mut rng, b, hid, 1.0);
        let cache = cell.forward_cached(&xs);
        let mut g = cell.zeros_like();
        let dxs = cell.backward(&cache, proj.view(), &mut g);
        worst[3] = worst[3].max(fd_worst(&cell, &g.flat(), |c| (c.forward(&xs) * &proj).sum()));
        for t in 0..steps {
            worst[3] = worst[3].max(fd_input_worst(&xs[t], &dxs[t], |xt| {
                let mut seq = xs.clone();
                seq[t] = xt.clone();
                (cell.forward(&seq) * &proj).sum()
            }));
        }
    }

    // GAE against the direct double sum
    let mut gae_worst = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..300);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let dn: Vec<bool> = (0..n).map(|_| rng.random_bool(0.05)).collect();
        let (last, gamma, lambda) = (rng.random_range(-5.0..5.0), rng.random_range(0.5..1.0), rng.random_range(0.0..1.0));
        let (adv, _) = gae_advantages(&r, &v, &dn, last, gamma, lambda).unwrap();
        for t in 0..n {
            let mut acc = 0.0;
            let mut w = 1.0;
            for l in t..n {
                let next = if l + 1 < n { v[l + 1] } else { last };
                let live = if dn[l] { 0.0 } else { 1.0 };
                acc += w * (r[l] + gamma * live * next - v[l]);
                if dn[l] {
                    break;
                }
                w *= gamma * lambda;
            }
            gae_worst = gae_worst.max((acc - adv[t]).abs());
        }
    }
    let ok = worst.iter().all(|w| *w < 1e-4) && gae_worst < 1e-10;
    judge(
        ok,
        format!(
            "{} instances; worst relative error dense {:.1e}, mlp {:.1e}, softmax-ce {:.1e}, lstm {:.1e} (< 1e-4); GAE {:.1e} (< 1e-10)",
            4 * per_kind,
            worst[0],
            worst[1],
            worst[2],
            worst[3],
            gae_worst
        ),
    )
}

// ---------------------------------------------------------------- 6

fn offline(sh: &Shared) -> Report {
    let data = sh.dataset();
    let episodes = sh.cfg.offline.episodes;
    let mut parts = Vec::new();
    let mut ok = episodes >= 100;
    for &ta in &sh.cfg.offline.t_a {
        let rows: Vec<_> = data.iter().filter(|w| w.t_a == ta).collect();
        let frac = rows.iter().filter(|w| w.label != NO_ATTACK).count() as f64 / rows.len().max(1) as f64;
        ok &= (frac - ta).abs() <= 0.02;
        parts.push(format!("{ta}->{frac:.3}"));
    }
    let (_, acc) = sh.offline();
    ok &= *acc >= 60.0;
    judge(ok, format!("{episodes} episodes, attacked fractions [{}] (+-0.02); held-out accuracy {acc:.2}% (>= 60)", parts.join(", ")))
}

// ---------------------------------------------------------------- 7

fn decile(h: &[EpochRecord], last: bool) -> f64 {
    let k = (h.len() / 10).max(1);
    let s = if last { &h[h.len() - k..] } else { &h[..k] };
    s.iter().map(|r| r.defender_mean_reward).sum::<f64>() / k as f64
}

fn trend(sh: &Shared) -> Report {
    let runs = sh.marl();
    let env = sh.env();
    let mut rising = 0;
    let mut modal_ok = 0;
    let mut parts = Vec::new();
    for (seed, run) in SEEDS.iter().zip(runs) {
        let (first, last) = (decile(&run.history, false), decile(&run.history, true));
        rising += usize::from(last > first);
        let hist = action_statistics(&env, &Attacker::Policy(&run.adversary), sh.cfg.eval.episodes, 1000 + seed).unwrap();
        let modal = hist.modal_c().as_i8();
        modal_ok += usize::from(modal == -1);
        let c = hist.c_frequencies();
        parts.push(format!("seed {seed}: defender {first:.3} -> {last:.3}, modal c {modal} ({:.2}/{:.2}/{:.2})", c[0], c[1], c[2]));
    }
    judge(
        rising >= 2 && modal_ok == SEEDS.len(),
        format!("{}; rising in {rising}/3 (need 2), modal c = -1 in {modal_ok}/3 (need 3)", parts.join("; ")),
    )
}

// ---------------------------------------------------------------- 8

fn table_one(sh: &Shared) -> Report {
    let runs = sh.marl();
    let env = sh.env();
    let (clf, _) = sh.offline();
    let mut wins = 0;
    let mut parts = Vec::new();
    for (seed, run) in SEEDS.iter().zip(runs) {
        let attacker = Attacker::Policy(&run.adversary);
        let eval_seed = 2000 + seed;
        let (marl, _) = evaluate_defender(&env, &attacker, &Defender::Policy(&run.defender), sh.cfg.eval.episodes, eval_seed, false).unwrap();
        let (off, _) = evaluate_defender(&env, &attacker, &Defender::Offline(clf), sh.cfg.eval.episodes, eval_seed, false).unwrap();
        wins += usize::from(marl.accuracy >= off.accuracy);
        parts.push(format!("seed {seed}: MARL-D {:.2}% vs offline {:.2}%", marl.accuracy, off.accuracy));
    }
    judge(wins >= 2, format!("{}; MARL-D ahead in {wins}/3 (need 2)", parts.join("; ")))
}

// ---------------------------------------------------------------- 9

fn warm_start(sh: &Shared) -> Report {
    let (clf, _) = sh.offline();
    let (_, defender) = initial_policies(sh.grid.n_buses(), &sh.cfg.train, Some(clf), 1).unwrap();
    // real residuals from the offline dataset, topped up with perturbed copies
    let data = sh.dataset();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(&mut rng);
    let dim = 2 * sh.grid.n_buses();
    let n = 10_000;
    let probes = Array2::from_shape_fn((n, dim), |(r, c)| {
        let base = data[idx[r % idx.len()]].features[c];
        if r < idx.len().min(n / 2) {
            base
        } else {
            base + rng.random_range(-1.0f32..1.0)
        }
    });
    let out = defender.forward(probes.view()).unwrap();
    let rows: Vec<&[S]> = probes.rows().into_iter().map(|r| r.to_slice().unwrap()).collect();
    let want = clf.classify_batch(&rows).unwrap();
    let agree = (0..n).filter(|&r| decode_defender(&out.greedy(r)) == want[r]).count();
    let vmax = out.values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    judge(agree == n, format!("epoch-0 defender agrees with the classifier on {agree}/{n} probes; max |V| {vmax:.3e}"))
}

// ---------------------------------------------------------------- 10

fn table_two(sh: &Shared) -> Report {
    if std::env::var("FDIA_ACCEPTANCE_LONG").map_or(true, |v| v != "1") {
        return Report { verdict: Verdict::Warn, detail: "skipped; set FDIA_ACCEPTANCE_LONG=1 to train the warm-started runs".into() };
    }
    let env = sh.env();
    let (clf, _) = sh.offline();
    let marl = sh.marl();
    let mut wins = 0;
    let (mut tf_sweep, mut marl_sweep) = (0.0, 0.0);
    let mut parts = Vec::new();
    for (seed, base) in SEEDS.iter().zip(marl) {
        let t = Instant::now();
        let tf = train_marl(&env, &sh.cfg.train, Some(clf), *seed, |_| {}).unwrap();
        write_history(fs::File::create(sh.out.join(format!("tf_marl_seed{seed}.csv"))).unwrap(), &tf.history).unwrap();
        progress(format!("warm-started seed {seed} trained in {:.0?}", t.elapsed()));
        let attacker = Attacker::Policy(&tf.adversary);
        let s = 3000 + seed;
        let (a, _) = evaluate_defender(&env, &attacker, &Defender::Policy(&tf.defender), sh.cfg.eval.episodes, s, false).unwrap();
        let (b, _) = evaluate_defender(&env, &attacker, &Defender::Offline(clf), sh.cfg.eval.episodes, s, false).unwrap();
        wins += usize::from(a.accuracy >= b.accuracy);
        let per_bus = sh.cfg.eval.episodes_per_bus;
        let ts = time_invariant_sweep(&env, &Defender::Policy(&tf.defender), per_bus, s).unwrap();
        let ms = time_invariant_sweep(&env, &Defender::Policy(&base.defender), per_bus, s).unwrap();
        tf_sweep += ts.mean / 3.0;
        marl_sweep += ms.mean / 3.0;
        parts.push(format!("seed {seed}: TF-MARL-D {:.2}% vs offline {:.2}%, sweep {:.2}% vs MARL-D {:.2}%", a.accuracy, b.accuracy, ts.mean, ms.mean));
    }
    let ok = wins >= 2 && tf_sweep >= marl_sweep;
    let detail = format!("{}; ahead in {wins}/3, mean sweep {tf_sweep:.2}% vs {marl_sweep:.2}%", parts.join("; "));
    Report { verdict: if ok { Verdict::Pass } else { Verdict::Warn }, detail }
}

// ---------------------------------------------------------------- 11

fn reproducible() -> Report {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_config(dir.path());
    let a = common::full_pipeline(&cfg, &dir.path().join("a"));
    let b = common::full_pipeline(&cfg, &dir.path().join("b"));
    let same = a == b;
    judge(same && !a.is_empty(), format!("{} artifacts from five subcommands hash identically across two --threads 1 runs", a.len()))
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> =
        std::env::var("FDIA_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let sh = Shared::new();
    let secs = Duration::from_secs;
    type Check<'a> = Box<dyn Fn() -> Report + 'a>;
    let criteria: Vec<(usize, &str, Option<Duration>, Check)> = vec![
        (1, "integrator vs Euler oracle and closed-form decay", Some(secs(1)), Box::new(integrator)),
        (2, "equilibrium invariance", Some(secs(1)), Box::new(equilibrium)),
        (3, "action-mask property suite", None, Box::new(mask)),
        (4, "reward arithmetic", None, Box::new(rewards)),
        (5, "gradient and GAE oracles", Some(secs(60)), Box::new(gradients)),
        (6, "offline pipeline strata and accuracy", Some(secs(30 * 60)), Box::new(|| offline(&sh))),
        (7, "MARL training trend (desk, 3 seeds)", None, Box::new(|| trend(&sh))),
        (8, "MARL-D vs offline defender against MARL-A", None, Box::new(|| table_one(&sh))),
        (9, "warm-start fidelity", None, Box::new(|| warm_start(&sh))),
        (10, "warm-started defender comparison (advisory)", None, Box::new(|| table_two(&sh))),
        (11, "single-thread reproducibility", None, Box::new(reproducible)),
    ];
    let mut failed = 0;
    for (id, name, limit, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        eprintln!("[{id}] {name} ...");
        let t = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            judge(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = t.elapsed();
        let r = match limit {
            Some(l) => within(elapsed, *l, r),
            None => r,
        };
        let tag = match r.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                failed += 1;
                "FAIL"
            }
            Verdict::Warn => "WARN",
        };
        println!("{tag} [{id:>2}] {name}: {} ({:.1?})", r.detail, elapsed);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
