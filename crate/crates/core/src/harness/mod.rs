//! Experiment orchestration: data loading, baselines, the probe, ablation,
//! swap, shuffle, repetition and variant studies, checkpoints and reports.
//!
//! Every experiment is a pure function of its [`ExperimentConfig`] and input
//! files. Randomness flows from `config.seed` through labelled streams, so a
//! single replicate of a population can be re-run in isolation.

mod checkpoint;
mod config;
mod report;

pub use checkpoint::{decode_checkpoint, decode_tensors, encode_checkpoint, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{
    DataConfig, DataSource, ExperimentConfig, ExperimentKind, RecoveryConfig, SweepConfig, SwapPairs, VariantName,
    VALIDATION_L2_GRID,
};
pub use report::{format_sig6, BoxStats, Cell, ExperimentReport, Population, ReportFormat};

use std::path::Path;
use std::time::Instant;

use crate::data::{load_mnist_idx, split, synthetic_splits, Dataset};
use crate::error::{Error, Result};
use crate::linearity::{
    approximator_recipe, fit_approximator, linearity_score, linearity_score_detailed, probe_model, LinearApproximator,
    LinearityReport,
};
use crate::models::{build_cnn, build_encoder, build_mlp, BlockKind, EncoderConfig, EncoderVariant, Family, Model};
use crate::rng::Stream;
use crate::surgery::{
    movable_positions, recovery_finetune, remove_blocks, repeat_layer, replace_mlp_with_approximator, shuffle_layers, swap_layers, RemoveTarget, SurgeryEdit, SurgeryResult,
};
use crate::train::{collect_taps, evaluate, train, TrainStats};

/// Model-training, held-out and evaluation splits.
///
/// The held-out split fits approximators and drives recovery fine-tuning;
/// the evaluation split is only ever scored.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub heldout: Dataset,
    pub eval: Dataset,
}

pub const MNIST_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

pub fn load_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.data;
    match d.source {
        DataSource::Synthetic => {
            let (train, heldout, eval) = synthetic_splits(&d.synthetic)?;
            Ok(Splits { train, heldout, eval })
        }
        DataSource::Mnist => {
            let p = |f: &str| d.mnist_dir.join(f);
            let mut full = load_mnist_idx(&p(MNIST_FILES[0]), &p(MNIST_FILES[1]))?;
            let mut eval = load_mnist_idx(&p(MNIST_FILES[2]), &p(MNIST_FILES[3]))?;
            if let Some(n) = d.mnist_train_limit {
                full = full.head(n);
            }
            if let Some(n) = d.mnist_test_limit {
                eval = eval.head(n);
            }
            let h = d.heldout_fraction;
            let mut parts = split(&full, &[1.0 - h, h], cfg.seed)?.into_iter();
            let (train, heldout) = (parts.next().expect("two parts"), parts.next().expect("two parts"));
            Ok(Splits { train, heldout, eval })
        }
    }
}

pub fn build_model(family: &Family, init_seed: u64) -> Result<Model> {
    match family {
        Family::Encoder(c) => build_encoder(c, init_seed),
        Family::Mlp(c) => build_mlp(c, init_seed),
        Family::Cnn(c) => build_cnn(c, init_seed),
    }
}

/// A trained model with its evaluation accuracy.
#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub accuracy: f64,
    pub stats: TrainStats,
}

/// Builds `family` from the experiment seed, trains it on the training
/// split and scores it on the evaluation split.
pub fn train_family(cfg: &ExperimentConfig, family: &Family, data: &Splits, stream: Stream) -> Result<Trained> {
    let mut model = build_model(family, stream.derive("init").seed())?;
    let stats = train(&mut model, &data.train, &cfg.train, stream.derive("train"))?;
    let accuracy = evaluate(&model, &data.eval)?;
    Ok(Trained { model, accuracy, stats })
}

pub fn train_baseline(cfg: &ExperimentConfig, data: &Splits) -> Result<Trained> {
    train_family(cfg, &cfg.model, data, Stream::root(cfg.seed).derive("baseline"))
}

/// Runs `f` over `items` on up to `jobs` threads; results keep item order.
fn par_map<T, R, F>(jobs: usize, items: Vec<T>, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    if jobs <= 1 || items.len() <= 1 {
        return items.into_iter().map(f).collect();
    }
    let n = items.len();
    let mut buckets: Vec<Vec<(usize, T)>> = (0..jobs).map(|_| Vec::new()).collect();
    for (i, item) in items.into_iter().enumerate() {
        buckets[i % jobs].push((i, item));
    }
    let mut slots: Vec<Option<Result<R>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = buckets
            .into_iter()
            .map(|bucket| {
                let f = &f;
                s.spawn(move || bucket.into_iter().map(|(i, t)| (i, f(t))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every slot filled")).collect()
}

fn recover(cfg: &ExperimentConfig, model: &Model, data: &Splits, stream: Stream) -> Result<Option<f64>> {
    if !cfg.recovery.enabled {
        return Ok(None);
    }
    let (_, acc) = recovery_finetune(
        model,
        &data.heldout,
        &data.eval,
        &cfg.train,
        cfg.recovery.epochs,
        cfg.recovery.lr_factor,
        stream.derive("recovery"),
    )?;
    Ok(Some(acc))
}

fn surgery_row(r: &SurgeryResult) -> (Cell, Cell, Cell) {
    (r.metrics_direct.into(), r.metrics_recovered.into(), r.seed.into())
}

pub fn report_train(cfg: &ExperimentConfig, trained: &Trained) -> Result<ExperimentReport> {
    let mut r = ExperimentReport::new("train", cfg, &["family", "params", "epochs", "final_loss", "eval_acc", "seed"]);
    let family = match &cfg.model {
        Family::Encoder(_) => "encoder",
        Family::Mlp(_) => "mlp",
        Family::Cnn(_) => "cnn",
    };
    r.baseline_accuracy = Some(trained.accuracy);
    r.push_row(vec![
        family.into(),
        trained.model.count_params().total.into(),
        cfg.train.epochs.into(),
        trained.stats.epoch_loss.last().map(|&l| f64::from(l)).into(),
        trained.accuracy.into(),
        cfg.seed.into(),
    ])?;
    r.details = serde_json::json!({ "train_stats": trained.stats, "params": trained.model.count_params() });
    Ok(r)
}

/// One point of the validation sweep.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ValidationPoint {
    pub nonlinear: bool,
    pub l2_weight: f32,
    pub gamma: f64,
    pub gamma_train: f64,
    pub excluded_rows: usize,
    pub eval_acc: f64,
    pub seed: u64,
}

/// Hidden-layer linearity of ReLU and linear MLPs across L2 strengths:
/// each model trains on the training split, its hidden-layer approximator
/// fits on the held-out split and γ is measured on the evaluation split.
pub fn run_validation_sweep(cfg: &ExperimentConfig, data: &Splits) -> Result<ExperimentReport> {
    let Family::Mlp(base) = &cfg.model else {
        return Err(Error::Config("the validation sweep needs an mlp model".into()));
    };
    let root = Stream::root(cfg.seed).derive("validation");
    let mut points = Vec::new();
    for nonlinear in [true, false] {
        for (i, &l2) in cfg.sweep.l2_grid.iter().enumerate() {
            points.push((nonlinear, i, l2));
        }
    }
    let results = par_map(cfg.jobs, points, |(nonlinear, i, l2)| {
        let label = if nonlinear { "relu" } else { "linear" };
        let stream = root.derive(label).derive_idx("l2", i as u64);
        let family = Family::Mlp(crate::models::MlpConfig { nonlinear, ..base.clone() });
        let mut local = cfg.clone();
        local.train.adam.l2_weight = l2;
        let trained = train_family(&local, &family, data, stream)?;
        let fit = collect_taps(&trained.model, &data.heldout, &["layer1.dense.block_in", "hidden"])?;
        let eval = collect_taps(&trained.model, &data.eval, &["layer1.dense.block_in", "hidden"])?;
        let recipe = crate::train::TrainConfig { epochs: cfg.sweep.approximator_epochs, ..cfg.probe.fit.clone() };
        let approx = fit_approximator(&fit[0], &fit[1], &recipe, stream.derive("approximator"))?;
        let score = linearity_score_detailed(&approx, &eval[0], &eval[1])?;
        Ok(ValidationPoint {
            nonlinear,
            l2_weight: l2,
            gamma: score.gamma,
            gamma_train: linearity_score(&approx, &fit[0], &fit[1])?,
            excluded_rows: score.excluded,
            eval_acc: trained.accuracy,
            seed: stream.seed(),
        })
    })?;
    let mut r = ExperimentReport::new(
        "sweep_validation",
        cfg,
        &["mlp", "l2_weight", "gamma", "gamma_train", "excluded_rows", "eval_acc", "seed"],
    );
    for p in &results {
        r.push_row(vec![
            if p.nonlinear { "relu" } else { "linear" }.into(),
            f64::from(p.l2_weight).into(),
            p.gamma.into(),
            p.gamma_train.into(),
            p.excluded_rows.into(),
            p.eval_acc.into(),
            p.seed.into(),
        ])?;
    }
    r.details = serde_json::to_value(&results)?;
    Ok(r)
}

fn linearity_report(cfg: &ExperimentConfig, name: &str, reports: &[LinearityReport]) -> Result<ExperimentReport> {
    let cols: Vec<&str> = LinearityReport::CSV_HEADER.split(',').collect();
    let mut r = ExperimentReport::new(name, cfg, &cols);
    for p in reports {
        r.push_row(vec![
            p.probe.clone().into(),
            p.layer.into(),
            p.gamma.into(),
            p.cone_size.into(),
            p.gamma_norm.into(),
            p.n_eval_samples.into(),
            p.n_pairs.into(),
            p.excluded_rows.into(),
            p.seed.into(),
        ])?;
    }
    r.details = serde_json::to_value(reports)?;
    Ok(r)
}

/// Per-layer γ, cone size and γ̃ for the configured block kinds. Kinds the
/// model lacks (e.g. feed-forward blocks of an attention-only variant) are
/// skipped; asking only for absent kinds is a lookup error.
pub fn run_probe_suite(cfg: &ExperimentConfig, data: &Splits, model: &Model) -> Result<ExperimentReport> {
    let present: Vec<BlockKind> = cfg
        .probe
        .kinds
        .iter()
        .copied()
        .filter(|&k| (1..=model.n_layers()).any(|p| model.layer_at(p).is_ok_and(|l| l.block(k).is_some())))
        .collect();
    if present.is_empty() {
        return Err(Error::Lookup(format!("model has none of the probed blocks {:?}", cfg.probe.kinds)));
    }
    let spec = crate::linearity::ProbeSpec { kinds: present, ..cfg.probe.clone() };
    let reports = probe_model(model, &data.heldout, &data.eval, &spec, Stream::root(cfg.seed).derive("probe"))?;
    linearity_report(cfg, "probe", &reports)
}

/// Approximators for every feed-forward core of `model`, fitted on the
/// held-out split.
pub fn fit_mlp_approximators(cfg: &ExperimentConfig, data: &Splits, model: &Model) -> Result<Vec<LinearApproximator>> {
    let root = Stream::root(cfg.seed).derive("ablation").derive("approximators");
    (1..=model.n_layers())
        .map(|p| {
            let base = format!("layer{p}.ffn");
            let (tin, tout) = (format!("{base}.block_in"), format!("{base}.core_out"));
            let taps = collect_taps(model, &data.heldout, &[&tin, &tout])?;
            let mut a = fit_approximator(&taps[0], &taps[1], &cfg.probe.fit, root.derive_idx("layer", p as u64))?;
            a.target_block = tout;
            Ok(a)
        })
        .collect()
}

/// Backwards replacement/removal sweeps over suffixes `{n}, {n−1, n}, …`.
pub fn run_backwards_ablation(cfg: &ExperimentConfig, data: &Splits, model: &Model) -> Result<ExperimentReport> {
    let n = model.n_layers();
    let baseline = evaluate(model, &data.eval)?;
    let approximators = fit_mlp_approximators(cfg, data, model)?;
    let root = Stream::root(cfg.seed).derive("ablation");
    let sweeps = ["replace_mlp", "remove_mlp", "remove_sa_ff", "remove_encoder"];
    let mut points = Vec::new();
    for (si, &sweep) in sweeps.iter().enumerate() {
        for len in 1..=n {
            points.push((si, sweep, len));
        }
    }
    let results = par_map(cfg.jobs, points, |(si, sweep, len)| {
        let layers: Vec<usize> = (n + 1 - len..=n).collect();
        let edited = match sweep {
            "replace_mlp" => {
                let approx: Vec<LinearApproximator> = layers.iter().map(|&p| approximators[p - 1].clone()).collect();
                replace_mlp_with_approximator(model, &layers, &approx)?
            }
            "remove_mlp" => remove_blocks(model, RemoveTarget::Mlp, &layers)?,
            "remove_sa_ff" => remove_blocks(model, RemoveTarget::SaFf, &layers)?,
            _ => remove_blocks(model, RemoveTarget::EncoderLayer, &layers)?,
        };
        let stream = root.derive_idx("sweep", si as u64).derive_idx("suffix", len as u64);
        let edit = match sweep {
            "replace_mlp" => SurgeryEdit::ReplaceMlp {
                approximators: layers.iter().map(|&p| approximators[p - 1].target_block.clone()).collect(),
                layers: layers.clone(),
            },
            "remove_mlp" => SurgeryEdit::Remove { target: RemoveTarget::Mlp, layers: layers.clone() },
            "remove_sa_ff" => SurgeryEdit::Remove { target: RemoveTarget::SaFf, layers: layers.clone() },
            _ => SurgeryEdit::Remove { target: RemoveTarget::EncoderLayer, layers: layers.clone() },
        };
        Ok((
            sweep,
            len,
            SurgeryResult {
                edit,
                baseline,
                metrics_direct: evaluate(&edited, &data.eval)?,
                metrics_recovered: recover(cfg, &edited, data, stream)?,
                seed: stream.seed(),
            },
        ))
    })?;
    let mut r = ExperimentReport::new(
        "ablate_backwards",
        cfg,
        &["sweep", "suffix_len", "direct_acc", "recovered_acc", "seed"],
    );
    r.baseline_accuracy = Some(baseline);
    for &sweep in &sweeps {
        r.push_row(vec![sweep.into(), 0usize.into(), baseline.into(), Cell::Empty, cfg.seed.into()])?;
        for (s, len, res) in results.iter().filter(|(s, _, _)| *s == sweep) {
            let (d, rec, seed) = surgery_row(res);
            r.push_row(vec![(*s).into(), (*len).into(), d, rec, seed])?;
        }
    }
    let details: Vec<&SurgeryResult> = results.iter().map(|(_, _, res)| res).collect();
    r.details = serde_json::to_value(details)?;
    Ok(r)
}

/// Two-layer swaps (adjacent or all pairs among movable layers), each
/// scored directly and after recovery fine-tuning.
pub fn run_swap_study(cfg: &ExperimentConfig, data: &Splits, model: &Model) -> Result<ExperimentReport> {
    let baseline = evaluate(model, &data.eval)?;
    let movable = movable_positions(model);
    let mut pairs = Vec::new();
    for (a, &i) in movable.iter().enumerate() {
        for &j in &movable[a + 1..] {
            if cfg.sweep.swap_pairs == SwapPairs::All || j == i + 1 {
                pairs.push((i, j));
            }
        }
    }
    let root = Stream::root(cfg.seed).derive("swap");
    let results = par_map(cfg.jobs, pairs, |(i, j)| {
        let edited = swap_layers(model, i, j)?;
        let stream = root.derive_idx("i", i as u64).derive_idx("j", j as u64);
        Ok(SurgeryResult {
            edit: SurgeryEdit::Swap { i, j },
            baseline,
            metrics_direct: evaluate(&edited, &data.eval)?,
            metrics_recovered: recover(cfg, &edited, data, stream)?,
            seed: stream.seed(),
        })
    })?;
    let mut r = ExperimentReport::new("swap", cfg, &["i", "j", "distance", "direct_acc", "recovered_acc", "seed"]);
    r.baseline_accuracy = Some(baseline);
    let mut by_distance: std::collections::BTreeMap<usize, (Vec<f64>, Vec<f64>)> = Default::default();
    for res in &results {
        let SurgeryEdit::Swap { i, j } = res.edit else { unreachable!() };
        let (d, rec, seed) = surgery_row(res);
        r.push_row(vec![i.into(), j.into(), (j - i).into(), d, rec, seed])?;
        let e = by_distance.entry(j - i).or_default();
        e.0.push(res.metrics_direct);
        e.1.extend(res.metrics_recovered);
    }
    for (dist, (direct, recovered)) in by_distance {
        if let Some(stats) = BoxStats::from_values(&direct) {
            r.populations.push(Population { label: "distance_direct".into(), value: dist as f64, stats });
        }
        if let Some(stats) = BoxStats::from_values(&recovered) {
            r.populations.push(Population { label: "distance_recovered".into(), value: dist as f64, stats });
        }
    }
    r.details = serde_json::to_value(&results)?;
    Ok(r)
}

/// The `k` values of a shuffle study, largest first.
pub fn shuffle_k_grid(cfg: &ExperimentConfig, model: &Model) -> Vec<usize> {
    let mut ks = if cfg.sweep.k_grid.is_empty() {
        (0..=movable_positions(model).len()).collect()
    } else {
        cfg.sweep.k_grid.clone()
    };
    ks.sort_unstable_by(|a, b| b.cmp(a));
    ks.dedup();
    ks
}

/// Stream of shuffle replicate `replicate` at fixed-layer count `k`.
pub fn shuffle_stream(seed: u64, k: usize, replicate: usize) -> Stream {
    Stream::root(seed).derive("shuffle").derive_idx("k", k as u64).derive_idx("replicate", replicate as u64)
}

/// Fixed-k shuffle populations.
pub fn run_shuffle_study(cfg: &ExperimentConfig, data: &Splits, model: &Model) -> Result<ExperimentReport> {
    let baseline = evaluate(model, &data.eval)?;
    let ks = shuffle_k_grid(cfg, model);
    let mut items = Vec::new();
    for &k in &ks {
        for rep in 0..cfg.sweep.population {
            items.push((k, rep));
        }
    }
    let results = par_map(cfg.jobs, items, |(k, rep)| {
        let stream = shuffle_stream(cfg.seed, k, rep);
        let (edited, edit) = shuffle_layers(model, k, stream)?;
        let direct = if edited == *model { baseline } else { evaluate(&edited, &data.eval)? };
        Ok((
            k,
            rep,
            SurgeryResult {
                edit,
                baseline,
                metrics_direct: direct,
                metrics_recovered: recover(cfg, &edited, data, stream)?,
                seed: stream.seed(),
            },
        ))
    })?;
    let mut r = ExperimentReport::new("shuffle", cfg, &["k", "replicate", "direct_acc", "recovered_acc", "seed"]);
    r.baseline_accuracy = Some(baseline);
    for (k, rep, res) in &results {
        let (d, rec, seed) = surgery_row(res);
        r.push_row(vec![(*k).into(), (*rep).into(), d, rec, seed])?;
    }
    for &k in &ks {
        let direct: Vec<f64> = results.iter().filter(|(kk, _, _)| *kk == k).map(|(_, _, x)| x.metrics_direct).collect();
        let recovered: Vec<f64> = results
            .iter()
            .filter(|(kk, _, _)| *kk == k)
            .filter_map(|(_, _, x)| x.metrics_recovered)
            .collect();
        if let Some(stats) = BoxStats::from_values(&direct) {
            r.populations.push(Population { label: "k_direct".into(), value: k as f64, stats });
        }
        if let Some(stats) = BoxStats::from_values(&recovered) {
            r.populations.push(Population { label: "k_recovered".into(), value: k as f64, stats });
        }
    }
    let details: Vec<&SurgeryResult> = results.iter().map(|(_, _, x)| x).collect();
    r.details = serde_json::to_value(details)?;
    Ok(r)
}

/// Stacks made of `n` copies of a single layer, for every source layer.
pub fn run_repeat_study(cfg: &ExperimentConfig, data: &Splits, model: &Model) -> Result<ExperimentReport> {
    let baseline = evaluate(model, &data.eval)?;
    let n = model.n_layers();
    let tied = cfg.sweep.repeat_tied;
    let root = Stream::root(cfg.seed).derive("repeat");
    let results = par_map(cfg.jobs, (1..=n).collect(), |src| {
        let edited = repeat_layer(model, src, n, tied)?;
        let stream = root.derive_idx("source", src as u64);
        Ok(SurgeryResult {
            edit: SurgeryEdit::Repeat { source_layer: src, n_times: n, tied },
            baseline,
            metrics_direct: evaluate(&edited, &data.eval)?,
            metrics_recovered: recover(cfg, &edited, data, stream)?,
            seed: stream.seed(),
        })
    })?;
    let mut r = ExperimentReport::new(
        "repeat",
        cfg,
        &["source_layer", "n_times", "tied", "direct_acc", "recovered_acc", "seed"],
    );
    r.baseline_accuracy = Some(baseline);
    for (src, res) in (1..=n).zip(&results) {
        let (d, rec, seed) = surgery_row(res);
        r.push_row(vec![src.into(), n.into(), tied.to_string().into(), d, rec, seed])?;
    }
    r.details = serde_json::to_value(&results)?;
    Ok(r)
}

/// Encoder configuration of a named architecture variant built from `base`.
pub fn variant_config(base: &EncoderConfig, v: VariantName) -> EncoderConfig {
    let std = EncoderConfig { variant: EncoderVariant::Standard, ..base.clone() };
    match v {
        VariantName::Standard => std,
        VariantName::NoFfn => EncoderConfig { variant: EncoderVariant::NoFfn, ..std },
        VariantName::NoFfnGeluSa => EncoderConfig { variant: EncoderVariant::NoFfnGeluSa, ..std },
        VariantName::NoFfnSaPlus => std.attention_only_at_parity(EncoderVariant::NoFfn),
        VariantName::NoFfnGeluSaPlus => std.attention_only_at_parity(EncoderVariant::NoFfnGeluSa),
    }
}

/// Trains every configured encoder variant from scratch with a shared recipe.
pub fn run_variant_comparison(cfg: &ExperimentConfig, data: &Splits) -> Result<ExperimentReport> {
    let Family::Encoder(base) = &cfg.model else {
        return Err(Error::Config("the variant comparison needs an encoder model".into()));
    };
    let mut items = Vec::new();
    for s in 0..cfg.sweep.variant_seeds {
        for &v in &cfg.sweep.variants {
            items.push((s, v));
        }
    }
    let root = Stream::root(cfg.seed).derive("variants");
    let results = par_map(cfg.jobs, items, |(s, v)| {
        let ecfg = variant_config(base, v);
        // One init/shuffle stream per seed, shared across variants.
        let trained = train_family(cfg, &Family::Encoder(ecfg.clone()), data, root.derive_idx("seed", s as u64))?;
        Ok((s, v, ecfg.n_layers, trained.model.count_params(), trained.accuracy))
    })?;
    let mut r = ExperimentReport::new(
        "variants",
        cfg,
        &["variant", "seed_index", "n_layers", "params", "stack_params", "eval_acc"],
    );
    for (s, v, n, params, acc) in &results {
        let name = serde_json::to_value(v)?.as_str().unwrap_or_default().to_string();
        r.push_row(vec![
            name.into(),
            (*s).into(),
            (*n).into(),
            params.total.into(),
            params.stack_total().into(),
            (*acc).into(),
        ])?;
    }
    Ok(r)
}

/// Loads `cfg.checkpoint` or trains (and checkpoints) the baseline.
pub fn obtain_baseline(cfg: &ExperimentConfig, data: &Splits) -> Result<Trained> {
    if let Some(path) = &cfg.checkpoint {
        let (model, _) = load_checkpoint(path)?;
        let accuracy = evaluate(&model, &data.eval)?;
        return Ok(Trained { model, accuracy, stats: TrainStats::default() });
    }
    let trained = train_baseline(cfg, data)?;
    save_checkpoint(&trained.model, &cfg.out_dir.join("model.ntk"), trained.stats.steps)?;
    Ok(trained)
}

/// Runs the configured experiment end to end and writes
/// `<out_dir>/<experiment>.{csv,json}`.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let start = Instant::now();
    let data = load_splits(cfg)?;
    let mut report = match cfg.experiment {
        ExperimentKind::SweepValidation => run_validation_sweep(cfg, &data)?,
        ExperimentKind::Variants => run_variant_comparison(cfg, &data)?,
        kind => {
            let base = obtain_baseline(cfg, &data)?;
            let mut r = match kind {
                ExperimentKind::Train => report_train(cfg, &base)?,
                ExperimentKind::Probe => run_probe_suite(cfg, &data, &base.model)?,
                ExperimentKind::AblateBackwards => run_backwards_ablation(cfg, &data, &base.model)?,
                ExperimentKind::Swap => run_swap_study(cfg, &data, &base.model)?,
                ExperimentKind::Shuffle => run_shuffle_study(cfg, &data, &base.model)?,
                ExperimentKind::Repeat => run_repeat_study(cfg, &data, &base.model)?,
                ExperimentKind::SweepValidation | ExperimentKind::Variants => unreachable!(),
            };
            r.baseline_accuracy = Some(base.accuracy);
            r
        }
    };
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    report.emit(&cfg.out_dir, cfg.experiment.name(), &[ReportFormat::Csv, ReportFormat::Json])?;
    Ok(report)
}

/// Re-emits a saved JSON report in the requested formats.
pub fn convert_report(json_path: &Path, out_dir: &Path, formats: &[ReportFormat]) -> Result<Vec<std::path::PathBuf>> {
    let text = std::fs::read_to_string(json_path)?;
    let report = ExperimentReport::from_json(&text)?;
    let stem = json_path.file_stem().and_then(|s| s.to_str()).unwrap_or("report").to_string();
    report.emit(out_dir, &stem, formats)
}

/// Reference figure for the recipe in the docs; used by [`approximator_recipe`].
pub fn default_probe_recipe() -> crate::train::TrainConfig {
    approximator_recipe()
}
