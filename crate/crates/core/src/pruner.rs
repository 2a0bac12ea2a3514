//! Scoring, masking and the pruning experiments.
//!
//! A score run propagates bounds around a batch, encodes the network,
//! warm-starts the solver from the unpruned forward pass and reads the
//! importance scores off the optimum. Masks drop every unit scoring below
//! a threshold; the random and critical baselines remove the same number of
//! units per layer, chosen at random or from the top of the ranking.

use std::fmt::Write as _;

use log::warn;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::propagate_batch;
use crate::data::{Dataset, DatasetSpec};
use crate::error::{invalid, Result};
use crate::mip::{encode_network, reference_assignment, Batch, MipModel, Rescale};
use crate::network::{apply_mask, forward, init, Architecture, Mask, Network};
use crate::solver::{solve_mip, warm_start, Solution, SolveStatus, SolverConfig};
use crate::train::{evaluate, train, TrainConfig};

/// Tolerance on scores leaving `[0, 1]` before they are clamped.
const SCORE_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub rescale: Rescale,
    pub solver: SolverConfig,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            lambda: 5.0,
            epsilon: 0.0,
            rescale: Rescale::Minus2,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub objective: f64,
    pub bound: f64,
    pub gap: f64,
    pub nodes: usize,
    pub cut_rounds: usize,
    pub status: SolveStatus,
    pub oa_tol: f64,
}

impl SolverStats {
    pub fn from_solution(s: &Solution, cfg: &SolverConfig) -> Self {
        Self {
            objective: s.objective,
            bound: s.bound,
            gap: s.gap,
            nodes: s.nodes,
            cut_rounds: s.cut_rounds,
            status: s.status,
            oa_tol: cfg.oa_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer: usize,
    pub scores: Vec<f64>,
    /// `sum_i (s_i + r)`.
    pub sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub layers: Vec<LayerScores>,
    pub lambda: f64,
    pub rescale: Rescale,
    pub epsilon: f64,
    pub threshold: Option<f64>,
    pub batch_size: usize,
    pub batch_digest: String,
    /// One entry per solve (several for class-by-class scoring).
    pub solver: Vec<SolverStats>,
}

impl ImportanceReport {
    pub fn to_text(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 of the serialized report.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    pub fn scores(&self, layer: usize) -> Option<&[f64]> {
        self.layers
            .iter()
            .find(|l| l.layer == layer)
            .map(|l| l.scores.as_slice())
    }

    /// Every score in layer order.
    pub fn all_scores(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.scores.iter().copied()).collect()
    }
}

/// SHA-256 over the bit patterns of the inputs and the labels.
pub fn batch_digest(batch: &Batch) -> String {
    let mut h = Sha256::new();
    for (x, &y) in batch.inputs.iter().zip(&batch.labels) {
        for v in x {
            h.update(v.to_bits().to_le_bytes());
        }
        h.update((y as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// `per_class` points of every class, drawn without replacement with a
/// seeded shuffle and listed class by class.
pub fn balanced_batch(ds: &Dataset, per_class: usize, seed: u64) -> Result<Batch> {
    if per_class == 0 {
        return invalid("batch needs at least one point per class");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batch = Batch::default();
    for (c, idx) in ds.class_indices().iter().enumerate() {
        if idx.len() < per_class {
            return invalid(format!("class {c} has {} points, need {per_class}", idx.len()));
        }
        let mut picks: Vec<usize> = sample(&mut rng, idx.len(), per_class).into_vec();
        picks.sort_unstable();
        for p in picks {
            batch.inputs.push(ds.inputs[idx[p]].clone());
            batch.labels.push(c);
        }
    }
    Ok(batch)
}

/// The first `n` points of the dataset, whatever their classes.
pub fn leading_batch(ds: &Dataset, n: usize) -> Batch {
    let n = n.min(ds.len());
    Batch {
        inputs: ds.inputs[..n].to_vec(),
        labels: ds.labels[..n].to_vec(),
    }
}

/// Encodes `net` around `batch` and returns the model with its "no
/// pruning" assignment.
pub fn build_model(net: &Network, batch: &Batch, cfg: &ScoreConfig) -> Result<(MipModel, Vec<f64>)> {
    let bounds = propagate_batch(net, &batch.inputs, cfg.epsilon)?;
    let model = encode_network(net, batch, &bounds, cfg.lambda, cfg.rescale)?;
    let reference = reference_assignment(&model, net, batch)?;
    Ok((model, reference))
}

/// Report for a solved (or externally supplied) assignment of `model`.
pub fn report_from_values(
    model: &MipModel,
    values: &[f64],
    batch: &Batch,
    cfg: &ScoreConfig,
    stats: Vec<SolverStats>,
) -> ImportanceReport {
    let r = cfg.rescale.offset();
    let layers = model
        .scores(values)
        .into_iter()
        .map(|(layer, raw)| {
            let scores: Vec<f64> = raw
                .into_iter()
                .map(|s| {
                    if !(-SCORE_SLACK..=1.0 + SCORE_SLACK).contains(&s) {
                        warn!("score {s} of layer {layer} is outside [0, 1]");
                    }
                    s.clamp(0.0, 1.0)
                })
                .collect();
            let sum = scores.iter().map(|s| s + r).sum();
            LayerScores { layer, scores, sum }
        })
        .collect();
    ImportanceReport {
        layers,
        lambda: cfg.lambda,
        rescale: cfg.rescale,
        epsilon: cfg.epsilon,
        threshold: None,
        batch_size: batch.len(),
        batch_digest: batch_digest(batch),
        solver: stats,
    }
}

/// Scores every prunable unit of `net` on `batch`.
pub fn score(net: &Network, batch: &Batch, cfg: &ScoreConfig) -> Result<(ImportanceReport, Solution)> {
    let (mut model, reference) = build_model(net, batch, cfg)?;
    let start = warm_start(&model, &reference)?;
    let sol = solve_mip(&mut model, &cfg.solver, Some(start))?;
    if !sol.is_optimal() {
        warn!(
            "solver stopped with status {:?}, gap {:.3e}",
            sol.status, sol.gap
        );
    }
    let stats = vec![SolverStats::from_solution(&sol, &cfg.solver)];
    Ok((report_from_values(&model, &sol.values, batch, cfg, stats), sol))
}

/// Masks every unit scoring strictly below `threshold` (clamped to
/// `[0, 1]`). A layer is never emptied: its best unit is kept. Returns the
/// mask and any warnings.
pub fn mask_from_scores(net: &Network, report: &ImportanceReport, threshold: f64) -> Result<(Mask, Vec<String>)> {
    let mut warnings = Vec::new();
    if threshold.is_nan() {
        return invalid("threshold is not a number");
    }
    let t = threshold.clamp(0.0, 1.0);
    if t != threshold {
        warnings.push(format!("threshold {threshold} clamped to {t}"));
    }
    let mut mask = Mask::empty(net);
    for ls in &report.layers {
        if net.units(ls.layer) != ls.scores.len() {
            return invalid(format!(
                "report has {} scores for layer {}, network has {} units",
                ls.scores.len(),
                ls.layer,
                net.units(ls.layer)
            ));
        }
        let mut pruned: Vec<bool> = ls.scores.iter().map(|&s| s < t).collect();
        if pruned.iter().all(|&p| p) {
            let keep = top_indices(&ls.scores, 1)[0];
            pruned[keep] = false;
            warnings.push(format!(
                "threshold would empty layer {}; keeping unit {keep}",
                ls.layer
            ));
        }
        for (i, p) in pruned.into_iter().enumerate() {
            mask.set(ls.layer, i, p)?;
        }
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok((mask, warnings))
}

/// Indices of the `c` largest values, ties to the lower index.
fn top_indices(values: &[f64], c: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(c);
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct Baselines {
    pub random: Mask,
    pub critical: Mask,
}

/// Per layer, removes as many units as `ours` does: at random (seeded) and
/// from the top of the score ranking.
pub fn baselines(net: &Network, report: &ImportanceReport, ours: &Mask, seed: u64) -> Result<Baselines> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = Mask::empty(net);
    let mut critical = Mask::empty(net);
    for ls in &report.layers {
        let c = ours.masked_in_layer(ls.layer);
        for i in sample(&mut rng, ls.scores.len(), c) {
            random.set(ls.layer, i, true)?;
        }
        for i in top_indices(&ls.scores, c) {
            critical.set(ls.layer, i, true)?;
        }
    }
    Ok(Baselines { random, critical })
}

/// Masked and structurally pruned forward passes must agree.
pub fn check_pruning_equivalence(net: &Network, mask: &Mask, inputs: &[Vec<f64>]) -> Result<()> {
    let pruned = apply_mask(net, mask)?;
    for (k, x) in inputs.iter().enumerate() {
        let a = forward(net, x, Some(mask))?;
        let b = forward(&pruned, x, None)?;
        let diff = a
            .logits()
            .iter()
            .zip(b.logits())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        if diff > 1e-9 {
            return invalid(format!(
                "masked and pruned networks disagree on point {k} by {diff:e}"
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub test_data: u64,
    pub train: u64,
    pub batch: u64,
    pub baseline: u64,
}

impl Seeds {
    /// All seeds derived from one experiment seed.
    pub fn from_seed(seed: u64) -> Self {
        Self {
            init: seed,
            data: seed,
            test_data: seed.wrapping_add(1_000_003),
            train: seed,
            batch: seed,
            baseline: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub reference: f64,
    pub ours: f64,
    pub ours_finetuned: f64,
    pub random: f64,
    pub critical: f64,
    /// Masked units over prunable units, in percent.
    pub prune_pct: f64,
    pub masked_per_layer: Vec<usize>,
    pub threshold: f64,
    pub seeds: Seeds,
}

/// Evaluates `ours` and both baselines on `test`, plus `ours` after one
/// epoch of fine-tuning on `train_ds`.
pub fn compare(
    net: &Network,
    train_ds: &Dataset,
    test: &Dataset,
    report: &ImportanceReport,
    threshold: f64,
    train_cfg: &TrainConfig,
    seeds: Seeds,
) -> Result<ExperimentResult> {
    let (ours, _) = mask_from_scores(net, report, threshold)?;
    let base = baselines(net, report, &ours, seeds.baseline)?;
    let probe: Vec<Vec<f64>> = test.inputs.iter().take(8).cloned().collect();
    for m in [&ours, &base.random, &base.critical] {
        check_pruning_equivalence(net, m, &probe)?;
    }
    let pruned = apply_mask(net, &ours)?;
    let ft_cfg = TrainConfig {
        epochs: 1,
        ..*train_cfg
    };
    let tuned = train(&pruned, train_ds, &ft_cfg)?.net;
    let layers = net.prunable_layers();
    Ok(ExperimentResult {
        reference: evaluate(net, test, None)?,
        ours: evaluate(net, test, Some(&ours))?,
        ours_finetuned: evaluate(&tuned, test, None)?,
        random: evaluate(net, test, Some(&base.random))?,
        critical: evaluate(net, test, Some(&base.critical))?,
        prune_pct: 100.0 * ours.pruned_fraction(),
        masked_per_layer: layers.iter().map(|&l| ours.masked_in_layer(l)).collect(),
        threshold: threshold.clamp(0.0, 1.0),
        seeds,
    })
}

/// Everything needed to reproduce one train/score/compare run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub arch: Architecture,
    pub data: DatasetSpec,
    pub test_per_class: usize,
    pub train: TrainConfig,
    pub score: ScoreConfig,
    pub batch_per_class: usize,
    pub threshold: f64,
    pub seed: u64,
}

/// A trained network with its data, ready for scoring.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub net: Network,
    pub train: Dataset,
    pub test: Dataset,
    pub batch: Batch,
    pub seeds: Seeds,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let seeds = Seeds::from_seed(cfg.seed);
    let train_ds = cfg.data.with_seed(seeds.data).generate()?;
    let test = cfg
        .data
        .with_seed(seeds.test_data)
        .with_n(cfg.test_per_class)
        .generate()?;
    let net = init(&cfg.arch, seeds.init)?;
    let tc = TrainConfig {
        seed: seeds.train,
        ..cfg.train
    };
    let net = train(&net, &train_ds, &tc)?.net;
    let batch = balanced_batch(&train_ds, cfg.batch_per_class, seeds.batch)?;
    Ok(Prepared {
        net,
        train: train_ds,
        test,
        batch,
        seeds,
    })
}

/// Train, score, mask and compare against the baselines.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(ExperimentResult, ImportanceReport)> {
    let p = prepare(cfg)?;
    let (mut report, _) = score(&p.net, &p.batch, &cfg.score)?;
    report.threshold = Some(cfg.threshold.clamp(0.0, 1.0));
    let tc = TrainConfig {
        seed: p.seeds.train,
        ..cfg.train
    };
    let result = compare(&p.net, &p.train, &p.test, &report, cfg.threshold, &tc, p.seeds)?;
    Ok((result, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClasswiseMode {
    /// One solve per class, scores averaged in class order.
    Independent,
    /// One solve over one point of every class.
    Simultaneous,
}

/// Class-by-class scoring with `per_class` points of each class. In
/// independent mode up to `jobs` solves run concurrently; the result does
/// not depend on `jobs`.
pub fn score_classwise(
    net: &Network,
    ds: &Dataset,
    per_class: usize,
    cfg: &ScoreConfig,
    mode: ClasswiseMode,
    seed: u64,
    jobs: usize,
) -> Result<ImportanceReport> {
    let classes = ds.class_indices();
    if let Some(c) = classes.iter().position(Vec::is_empty) {
        return invalid(format!("class {c} has no points"));
    }
    let batch = balanced_batch(ds, per_class, seed)?;
    if mode == ClasswiseMode::Simultaneous || classes.len() == 1 {
        return Ok(score(net, &batch, cfg)?.0);
    }
    let per: Vec<Batch> = (0..classes.len())
        .map(|c| Batch {
            inputs: batch.inputs[c * per_class..(c + 1) * per_class].to_vec(),
            labels: batch.labels[c * per_class..(c + 1) * per_class].to_vec(),
        })
        .collect();
    let run = |b: &Batch| score(net, b, cfg).map(|r| r.0);
    let reports: Vec<ImportanceReport> = if jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| crate::Error::InvalidArgument(format!("thread pool: {e}")))?;
        pool.install(|| per.par_iter().map(run).collect::<Result<Vec<_>>>())?
    } else {
        per.iter().map(run).collect::<Result<Vec<_>>>()?
    };
    Ok(average_reports(&reports, &batch, cfg))
}

/// Mean of per-class reports, accumulated in the given order.
fn average_reports(reports: &[ImportanceReport], batch: &Batch, cfg: &ScoreConfig) -> ImportanceReport {
    let n = reports.len() as f64;
    let r = cfg.rescale.offset();
    let mut layers = reports[0].layers.clone();
    for (li, ls) in layers.iter_mut().enumerate() {
        for (i, s) in ls.scores.iter_mut().enumerate() {
            *s = reports.iter().map(|rep| rep.layers[li].scores[i]).sum::<f64>() / n;
        }
        ls.sum = ls.scores.iter().map(|s| s + r).sum();
    }
    ImportanceReport {
        layers,
        lambda: cfg.lambda,
        rescale: cfg.rescale,
        epsilon: cfg.epsilon,
        threshold: None,
        batch_size: batch.len(),
        batch_digest: batch_digest(batch),
        solver: reports.iter().flat_map(|r| r.solver.clone()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferResult {
    pub source_accuracy: f64,
    /// Target accuracy of the masked network retrained from its init.
    pub masked: f64,
    /// Target accuracy of the unmasked network retrained from the same init.
    pub reference: f64,
    pub prune_pct: f64,
    pub threshold: f64,
    pub seeds: Seeds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferConfig {
    pub arch: Architecture,
    pub source: DatasetSpec,
    pub target: DatasetSpec,
    pub test_per_class: usize,
    pub source_train: TrainConfig,
    pub target_train: TrainConfig,
    pub score: ScoreConfig,
    pub batch_per_class: usize,
    pub threshold: f64,
    pub seed: u64,
}

fn check_compatible(arch: &Architecture, ds: &DatasetSpec) -> Result<()> {
    if arch.input != ds.input_shape() {
        return invalid(format!(
            "architecture input {} does not match dataset {} input {}",
            arch.input,
            ds.kind,
            ds.input_shape()
        ));
    }
    if arch.outputs().is_none_or(|o| o < ds.classes) {
        return invalid(format!("architecture has fewer outputs than {} classes", ds.classes));
    }
    Ok(())
}

/// Scores on the source task, then retrains the masked network from its
/// original initialization on the target task.
pub fn transfer(cfg: &TransferConfig) -> Result<(TransferResult, ImportanceReport)> {
    check_compatible(&cfg.arch, &cfg.source)?;
    check_compatible(&cfg.arch, &cfg.target)?;
    let seeds = Seeds::from_seed(cfg.seed);
    let source = cfg.source.with_seed(seeds.data).generate()?;
    let source_test = cfg
        .source
        .with_seed(seeds.test_data)
        .with_n(cfg.test_per_class)
        .generate()?;
    let target = cfg.target.with_seed(seeds.data).generate()?;
    let target_test = cfg
        .target
        .with_seed(seeds.test_data)
        .with_n(cfg.test_per_class)
        .generate()?;
    let initial = init(&cfg.arch, seeds.init)?;
    let src_cfg = TrainConfig {
        seed: seeds.train,
        ..cfg.source_train
    };
    let trained = train(&initial, &source, &src_cfg)?.net;
    let batch = balanced_batch(&source, cfg.batch_per_class, seeds.batch)?;
    let (mut report, _) = score(&trained, &batch, &cfg.score)?;
    report.threshold = Some(cfg.threshold.clamp(0.0, 1.0));
    let (mask, _) = mask_from_scores(&trained, &report, cfg.threshold)?;

    let tgt_cfg = TrainConfig {
        seed: seeds.train,
        ..cfg.target_train
    };
    let masked_init = apply_mask(&initial, &mask)?;
    let masked = train(&masked_init, &target, &tgt_cfg)?.net;
    let reference = train(&initial, &target, &tgt_cfg)?.net;
    Ok((
        TransferResult {
            source_accuracy: evaluate(&trained, &source_test, None)?,
            masked: evaluate(&masked, &target_test, None)?,
            reference: evaluate(&reference, &target_test, None)?,
            prune_pct: 100.0 * mask.pruned_fraction(),
            threshold: cfg.threshold.clamp(0.0, 1.0),
            seeds,
        },
        report,
    ))
}

/// One swept parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Setting {
    Lambda(f64),
    Threshold(f64),
    Rescale(Rescale),
}

impl Setting {
    fn label(&self) -> (&'static str, String) {
        match self {
            Setting::Lambda(v) => ("lambda", v.to_string()),
            Setting::Threshold(v) => ("threshold", v.to_string()),
            Setting::Rescale(r) => ("rescale", r.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub setting: Setting,
    pub accuracy: f64,
    pub prune_pct: f64,
}

/// One score/mask/evaluate run per setting on a shared trained network.
/// Threshold sweeps reuse a single solve.
pub fn sweep(
    net: &Network,
    batch: &Batch,
    test: &Dataset,
    base: &ScoreConfig,
    threshold: f64,
    settings: &[Setting],
) -> Result<Vec<SweepRow>> {
    if settings.is_empty() {
        return invalid("sweep needs at least one setting");
    }
    let mut shared: Option<ImportanceReport> = None;
    let mut rows = Vec::with_capacity(settings.len());
    for &setting in settings {
        let mut cfg = base.clone();
        let mut t = threshold;
        let report = match setting {
            Setting::Lambda(l) => {
                cfg.lambda = l;
                score(net, batch, &cfg)?.0
            }
            Setting::Rescale(r) => {
                cfg.rescale = r;
                score(net, batch, &cfg)?.0
            }
            Setting::Threshold(v) => {
                t = v;
                if shared.is_none() {
                    shared = Some(score(net, batch, &cfg)?.0);
                }
                shared.clone().expect("shared report")
            }
        };
        let (mask, _) = mask_from_scores(net, &report, t)?;
        rows.push(SweepRow {
            setting,
            accuracy: evaluate(net, test, Some(&mask))?,
            prune_pct: 100.0 * mask.pruned_fraction(),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let name = rows.first().map_or("setting", |r| r.setting.label().0);
    let mut out = format!("{name},accuracy,prune_pct\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.setting.label().1, r.accuracy, r.prune_pct);
    }
    out
}

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Draws a uniformly random unit index per layer; used by tests that need
/// arbitrary masks.
pub fn random_mask(net: &Network, fraction: f64, seed: u64) -> Result<Mask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = Mask::empty(net);
    for l in net.prunable_layers() {
        let n = net.units(l);
        let keep = rng.random_range(0..n);
        for i in 0..n {
            if i != keep && rng.random_bool(fraction.clamp(0.0, 1.0)) {
                mask.set(l, i, true)?;
            }
        }
    }
    Ok(mask)
}
