//! Synthetic FDIA dataset and the supervised residual classifier used as
//! the offline baseline and as the defender's warm start.

use std::io::{Read, Write};

use ndarray::{Array2, Axis};
use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{class_to_label, label_to_class, AdversaryAction, DroopSetting, Label, NO_ATTACK};
use crate::env::{MarlEnv, Transition};
use crate::error::{Error, Result};
use crate::nn::{argmax, softmax_cross_entropy, softmax_rows, Adam, Mlp};
use crate::rng::stream;
use crate::scalar::Scalar;

/// Attack fractions of the synthetic dataset.
pub const DEFAULT_T_A: [f64; 5] = [0.16, 0.2, 0.4, 0.6, 0.8];

/// Residual at a detection time with its ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct LabeledWindow<T> {
    pub features: Vec<T>,
    pub label: Label,
    pub episode: usize,
    pub window_start: usize,
    pub detection_step: usize,
    pub t_a: f64,
    /// Droop value written in this window; meaningless when unattacked.
    pub c: i8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineHyper {
    pub episodes: usize,
    pub t_a: Vec<f64>,
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub holdout_fraction: f64,
}

impl Default for OfflineHyper {
    fn default() -> Self {
        Self {
            episodes: 200,
            t_a: DEFAULT_T_A.to_vec(),
            hidden: vec![256, 256],
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 50,
            holdout_fraction: 0.2,
        }
    }
}

/// Window index of the action at step `t`: the first window spans
/// `0..=d`, later ones `(k d, (k+1) d]`.
pub fn window_of_step(t: usize, d: usize) -> usize {
    t.saturating_sub(1) / d
}

/// Number of attacked windows for fraction `t_a`: `⌈t_a T / d⌉`, capped at
/// the number of detection windows.
pub fn attacked_window_count(t_a: f64, steps: usize, d: usize, windows: usize) -> usize {
    ((t_a * steps as f64 / d as f64).ceil() as usize).min(windows)
}

/// Runs `episodes` episodes for every fraction in `t_a_set`. In each run a
/// random subset of windows is attacked for all of its steps on one random
/// bus with a random droop value; every detection time yields one window.
/// Runs are independent and seeded from `(seed, episode, stratum)`.
pub fn generate_fdia_dataset<T: Scalar>(
    env: &MarlEnv<'_, T>,
    t_a_set: &[f64],
    episodes: usize,
    seed: u64,
) -> Result<Vec<LabeledWindow<T>>> {
    if !env.predictor.heldout_rmse.is_finite() {
        return Err(Error::Model("predictor has not been trained (no held-out RMSE recorded)".into()));
    }
    if t_a_set.is_empty() || t_a_set.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config(format!("attack fractions must lie in (0, 1], got {t_a_set:?}")));
    }
    let runs: Vec<(usize, usize)> = (0..episodes).flat_map(|e| (0..t_a_set.len()).map(move |k| (e, k))).collect();
    let per_run: Vec<Vec<LabeledWindow<T>>> = runs
        .par_iter()
        .map(|&(e, k)| {
            let mut rng = stream(seed, "offline-dataset", (e * t_a_set.len() + k) as u64);
            attacked_episode(env, t_a_set[k], e, &mut rng)
        })
        .collect::<Result<_>>()?;
    Ok(per_run.into_iter().flatten().collect())
}

fn attacked_episode<T: Scalar, R: Rng + ?Sized>(
    env: &MarlEnv<'_, T>,
    t_a: f64,
    episode: usize,
    rng: &mut R,
) -> Result<Vec<LabeledWindow<T>>> {
    let d = env.config.d;
    let steps = env.steps();
    let n = env.n_buses();
    let windows = crate::attack::detection_times(steps, d).len();
    let count = attacked_window_count(t_a, steps, d, windows);
    let mut plan: Vec<Option<(Label, DroopSetting)>> = vec![None; windows + 1];
    for w in sample(rng, windows, count) {
        let bus = rng.random_range(0..n) as Label;
        let c = DroopSetting::ALL[rng.random_range(0..3)];
        plan[w] = Some((bus, c));
    }
    let (mut ctx, _) = env.reset(rng)?;
    let mut out = Vec::with_capacity(windows);
    let mut window_start = 0;
    while !ctx.done {
        let t = ctx.step();
        let w = window_of_step(t, d);
        let action = match plan[w] {
            Some((bus, setting)) => AdversaryAction { bus, setting, mute: false },
            None => AdversaryAction::idle(),
        };
        if let Transition::Detect(res) = env.advance(&mut ctx, &action)? {
            let label = env.pending_label(&ctx).expect("pending detection");
            env.resolve(&mut ctx, label)?;
            out.push(LabeledWindow {
                features: res.values,
                label,
                episode,
                window_start,
                detection_step: t,
                t_a,
                c: plan[w].map_or(0, |(_, c)| c.as_i8()),
            });
            window_start = t + 1;
        }
    }
    Ok(out)
}

/// Multiclass residual classifier; output class `0` is "no attack", class
/// `i + 1` is bus `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OfflineClassifier<T> {
    pub n_buses: usize,
    pub mlp: Mlp<T>,
}

impl<T: Scalar> OfflineClassifier<T> {
    pub fn new<R: Rng + ?Sized>(n_buses: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![2 * n_buses];
        sizes.extend_from_slice(hidden);
        sizes.push(n_buses + 1);
        Self { n_buses, mlp: Mlp::new(&sizes, false, 2f64.sqrt(), 0.01, rng) }
    }

    pub fn validate_shapes(&self) -> Result<()> {
        if self.mlp.inputs() != 2 * self.n_buses || self.mlp.outputs() != self.n_buses + 1 || self.mlp.activate_last {
            return Err(Error::Model(format!(
                "classifier maps {} -> {} but {} buses need {} -> {}",
                self.mlp.inputs(),
                self.mlp.outputs(),
                self.n_buses,
                2 * self.n_buses,
                self.n_buses + 1
            )));
        }
        Ok(())
    }

    fn batch(&self, features: &[&[T]]) -> Result<Array2<T>> {
        let dim = 2 * self.n_buses;
        let mut x = Array2::zeros((features.len(), dim));
        for (r, f) in features.iter().enumerate() {
            if f.len() != dim {
                return Err(Error::contract(format!("feature has {} entries, classifier expects {dim}", f.len())));
            }
            x.row_mut(r).assign(&ndarray::ArrayView1::from(*f));
        }
        Ok(x)
    }

    pub fn logits(&self, features: &[&[T]]) -> Result<Array2<T>> {
        Ok(self.mlp.forward(self.batch(features)?.view()))
    }

    pub fn probabilities(&self, features: &[&[T]]) -> Result<Array2<T>> {
        Ok(softmax_rows(self.logits(features)?.view()))
    }

    /// Argmax label; ties go to the smaller class index.
    pub fn classify(&self, features: &[T]) -> Result<Label> {
        Ok(self.classify_batch(&[features])?[0])
    }

    pub fn classify_batch(&self, features: &[&[T]]) -> Result<Vec<Label>> {
        let logits = self.logits(features)?;
        Ok(logits
            .axis_iter(Axis(0))
            .map(|row| class_to_label(argmax(row.as_slice().expect("contiguous row"))))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub label: Label,
    pub count: usize,
    pub correct: usize,
    /// Percent; `None` when the class is absent from the held-out split.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineReport {
    pub epoch_losses: Vec<f64>,
    pub train_windows: usize,
    pub heldout_windows: usize,
    /// Percent of held-out windows classified correctly.
    pub heldout_accuracy: f64,
    pub per_class: Vec<ClassAccuracy>,
}

/// Fits the classifier with softmax cross-entropy and Adam. The held-out
/// split is by episode when the data spans several episodes.
pub fn train_offline_classifier<T: Scalar, R: Rng + ?Sized>(
    dataset: &[LabeledWindow<T>],
    n_buses: usize,
    hyper: &OfflineHyper,
    rng: &mut R,
) -> Result<(OfflineClassifier<T>, OfflineReport)> {
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let first = dataset[0].label;
    if dataset.iter().all(|w| w.label == first) {
        return Err(Error::Dataset(format!("every window has label {first}; need at least two classes")));
    }
    for w in dataset {
        if w.features.len() != 2 * n_buses || w.label < NO_ATTACK || w.label >= n_buses as Label {
            return Err(Error::Dataset(format!(
                "window (episode {}, step {}) does not fit a {n_buses}-bus classifier",
                w.episode, w.detection_step
            )));
        }
    }

    let (train, held) = split(dataset, hyper.holdout_fraction, rng);
    if train.is_empty() {
        return Err(Error::Dataset("no training windows after the split".into()));
    }
    let mut clf = OfflineClassifier::new(n_buses, &hyper.hidden, rng);
    let mut opt = Adam::new(hyper.learning_rate);
    let mut order = train.clone();
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(hyper.batch_size.max(1)) {
            let feats: Vec<&[T]> = chunk.iter().map(|w| w.features.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|w| label_to_class(w.label)).collect();
            let x = clf.batch(&feats)?;
            let cache = clf.mlp.forward_cached(x.view());
            let (loss, dlogits) = softmax_cross_entropy(cache.output().view(), &labels);
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::Numerical("classifier loss is not finite".into()));
            }
            let mut grad = clf.mlp.zeros_like();
            clf.mlp.backward(&cache, dlogits.view(), &mut grad, false);
            opt.step(&mut clf.mlp, &grad);
            total += loss;
            batches += 1;
        }
        epoch_losses.push(total / batches as f64);
    }

    let mut per_class: Vec<ClassAccuracy> = (0..=n_buses)
        .map(|c| ClassAccuracy { label: class_to_label(c), count: 0, correct: 0, accuracy: None })
        .collect();
    for chunk in held.chunks(1024) {
        let feats: Vec<&[T]> = chunk.iter().map(|w| w.features.as_slice()).collect();
        for (w, pred) in chunk.iter().zip(clf.classify_batch(&feats)?) {
            let entry = &mut per_class[label_to_class(w.label)];
            entry.count += 1;
            entry.correct += (pred == w.label) as usize;
        }
    }
    for c in &mut per_class {
        c.accuracy = (c.count > 0).then(|| 100.0 * c.correct as f64 / c.count as f64);
    }
    let correct: usize = per_class.iter().map(|c| c.correct).sum();
    let heldout_accuracy = if held.is_empty() { f64::NAN } else { 100.0 * correct as f64 / held.len() as f64 };
    let report = OfflineReport {
        epoch_losses,
        train_windows: train.len(),
        heldout_windows: held.len(),
        heldout_accuracy,
        per_class,
    };
    Ok((clf, report))
}

fn split<'a, T, R: Rng + ?Sized>(
    data: &'a [LabeledWindow<T>],
    fraction: f64,
    rng: &mut R,
) -> (Vec<&'a LabeledWindow<T>>, Vec<&'a LabeledWindow<T>>) {
    let mut episodes: Vec<usize> = data.iter().map(|w| w.episode).collect();
    episodes.sort_unstable();
    episodes.dedup();
    if episodes.len() >= 2 {
        episodes.shuffle(rng);
        let held = ((episodes.len() as f64 * fraction).round() as usize).min(episodes.len() - 1);
        let held_set: std::collections::HashSet<usize> = episodes[..held].iter().copied().collect();
        data.iter().partition(|w| !held_set.contains(&w.episode))
    } else {
        let mut all: Vec<&LabeledWindow<T>> = data.iter().collect();
        all.shuffle(rng);
        let held = ((all.len() as f64 * fraction).round() as usize).min(all.len().saturating_sub(1));
        let b = all.split_off(all.len() - held);
        (all, b)
    }
}

/// CSV with columns `episode, window_start, detection_step, t_a, c, label,
/// r0 .. r{2N-1}`.
pub fn write_dataset<T: Scalar, W: Write>(out: W, data: &[LabeledWindow<T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = data.first().map_or(0, |x| x.features.len());
    let mut header: Vec<String> = ["episode", "window_start", "detection_step", "t_a", "c", "label"].iter().map(|s| s.to_string()).collect();
    header.extend((0..dim).map(|k| format!("r{k}")));
    w.write_record(&header)?;
    for x in data {
        if x.features.len() != dim {
            return Err(Error::Dataset("windows have differing feature lengths".into()));
        }
        let mut rec = vec![
            x.episode.to_string(),
            x.window_start.to_string(),
            x.detection_step.to_string(),
            x.t_a.to_string(),
            x.c.to_string(),
            x.label.to_string(),
        ];
        rec.extend(x.features.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<T: Scalar, R: Read>(input: R) -> Result<Vec<LabeledWindow<T>>> {
    let mut rd = csv::Reader::from_reader(input);
    let headers = rd.headers()?.clone();
    let fixed = ["episode", "window_start", "detection_step", "t_a", "c", "label"];
    if headers.len() < fixed.len() || headers.iter().zip(fixed).any(|(h, f)| h != f) {
        return Err(Error::Dataset(format!("unexpected dataset header {headers:?}")));
    }
    let bad = |what: &str, row: usize| Error::Dataset(format!("row {row}: cannot parse {what}"));
    let mut out = Vec::new();
    for (row, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |i: usize, what: &str| rec[i].parse::<f64>().map_err(|_| bad(what, row));
        let features = (fixed.len()..rec.len())
            .map(|i| rec[i].parse::<f64>().map(T::lit).map_err(|_| bad("residual", row)))
            .collect::<Result<Vec<T>>>()?;
        out.push(LabeledWindow {
            episode: rec[0].parse().map_err(|_| bad("episode", row))?,
            window_start: rec[1].parse().map_err(|_| bad("window_start", row))?,
            detection_step: rec[2].parse().map_err(|_| bad("detection_step", row))?,
            t_a: num(3, "t_a")?,
            c: rec[4].parse().map_err(|_| bad("c", row))?,
            label: rec[5].parse().map_err(|_| bad("label", row))?,
            features,
        });
    }
    Ok(out)
}

/// Histogram of labels `-1..N-1` (index = class).
pub fn label_histogram<T>(data: &[LabeledWindow<T>], n_buses: usize) -> Vec<usize> {
    let mut h = vec![0; n_buses + 1];
    for w in data {
        h[label_to_class(w.label)] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::EnvConfig;
    use crate::grid::GridParams;
    use crate::nn::Params;
    use crate::predictor::LstmPredictor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize) -> Vec<LabeledWindow<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        (0..n)
            .map(|i| {
                let label = if i % 2 == 0 { NO_ATTACK } else { 0 };
                let sign = if label == NO_ATTACK { -1.0 } else { 1.0 };
                let features = vec![sign + rng.random_range(-0.1..0.1), sign];
                LabeledWindow { features, label, episode: i % 10, window_start: 0, detection_step: 6, t_a: 0.5, c: -1 }
            })
            .collect()
    }

    fn small_hyper() -> OfflineHyper {
        OfflineHyper { hidden: vec![16, 16], epochs: 30, batch_size: 16, learning_rate: 1e-2, ..Default::default() }
    }

    #[test]
    fn separable_toy_is_learned() {
        let data = toy(400);
        let (clf, rep) = train_offline_classifier(&data, 1, &small_hyper(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(rep.heldout_accuracy, 100.0);
        assert_eq!(clf.classify(&[1.0, 1.0]).unwrap(), 0);
        assert_eq!(clf.classify(&[-1.0, -1.0]).unwrap(), NO_ATTACK);
    }

    #[test]
    fn seeded_training_is_deterministic() {
        let data = toy(100);
        let h = OfflineHyper { epochs: 3, ..small_hyper() };
        let a = train_offline_classifier(&data, 1, &h, &mut ChaCha8Rng::seed_from_u64(7)).unwrap().0;
        let b = train_offline_classifier(&data, 1, &h, &mut ChaCha8Rng::seed_from_u64(7)).unwrap().0;
        assert_eq!(a.mlp.flat(), b.mlp.flat());
    }

    #[test]
    fn single_class_is_rejected() {
        let data: Vec<_> = toy(10).into_iter().filter(|w| w.label == 0).collect();
        let r = train_offline_classifier(&data, 1, &small_hyper(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(Error::Dataset(_))));
        let r = train_offline_classifier::<f64, _>(&[], 1, &small_hyper(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(r.is_err());
    }

    #[test]
    fn classify_conventions() {
        let mut clf = OfflineClassifier::<f64> { n_buses: 10, mlp: Mlp::zeros(&[20, 4, 11], false) };
        assert_eq!(clf.classify(&[0.3; 20]).unwrap(), NO_ATTACK);
        let last = clf.mlp.layers.len() - 1;
        clf.mlp.layers[last].bias[7] = 1.0;
        assert_eq!(clf.classify(&[0.3; 20]).unwrap(), 6);
        clf.mlp.layers[last].bias.mapv_inplace(|b| b + 5.0);
        assert_eq!(clf.classify(&[0.3; 20]).unwrap(), 6);
        assert!(clf.classify(&[0.3; 19]).is_err());
        let p = clf.probabilities(&[&[0.1; 20]]).unwrap();
        assert!((p.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_indexing() {
        assert_eq!(window_of_step(0, 6), 0);
        assert_eq!(window_of_step(6, 6), 0);
        assert_eq!(window_of_step(7, 6), 1);
        assert_eq!(window_of_step(498, 6), 82);
        assert_eq!(attacked_window_count(0.8, 500, 6, 83), 67);
        assert_eq!(attacked_window_count(0.16, 500, 6, 83), 14);
        assert_eq!(attacked_window_count(1.0, 500, 6, 83), 83);
    }

    #[test]
    fn untrained_predictor_is_rejected() {
        let g = GridParams::<f64>::default_10_bus();
        let p = LstmPredictor::zeros(10, 5, 4);
        let c = EnvConfig::default();
        let env = MarlEnv::new(&g, &p, &c).unwrap();
        assert!(matches!(generate_fdia_dataset(&env, &DEFAULT_T_A, 1, 0), Err(Error::Model(_))));
    }

    #[test]
    fn dataset_strata_and_csv() {
        let g = GridParams::<f64>::default_10_bus();
        let mut p = LstmPredictor::zeros(10, 5, 4);
        p.heldout_rmse = 0.0;
        let c = EnvConfig::default();
        let env = MarlEnv::new(&g, &p, &c).unwrap();
        let data = generate_fdia_dataset(&env, &[0.2, 0.8], 2, 3).unwrap();
        assert_eq!(data.len(), 2 * 2 * 83);
        for (ta, expect) in [(0.2, 17), (0.8, 67)] {
            for e in 0..2 {
                let attacked = data.iter().filter(|w| w.t_a == ta && w.episode == e && w.label != NO_ATTACK).count();
                assert_eq!(attacked, expect);
            }
        }
        assert_eq!(label_histogram(&data, 10).iter().sum::<usize>(), data.len());
        let mut buf = Vec::new();
        write_dataset(&mut buf, &data).unwrap();
        let back: Vec<LabeledWindow<f64>> = read_dataset(buf.as_slice()).unwrap();
        assert_eq!(back, data);
        let again = generate_fdia_dataset(&env, &[0.2, 0.8], 2, 3).unwrap();
        assert_eq!(again, data);
    }
}
