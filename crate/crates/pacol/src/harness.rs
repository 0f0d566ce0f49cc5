//! Experiment orchestration: declarative configs, seeded scenario runs,
//! aggregation into mean +/- confidence tables, and file emission.
//!
//! A scenario trains one continual learner over a task stream, optionally
//! injecting crafted poison at the carrier tasks, and records per-task
//! validation accuracy after the final task. Runs are seeded as
//! `base_seed + run_index` so any row is reproducible in isolation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attack::{
    build_surrogate, make_label_flip_poison, make_pacol_poison, Distance, FlipSpec, PacolConfig,
    ThreatKind,
};
use crate::data::{
    apply_poison, build_rotation_stream, build_split_stream, even_angles, load_mnist,
    select_carrier_indices, AttackKind, ImageSet, LabeledBatch, PoisonArtifact, PoisonPlan,
    TaskStream,
};
use crate::defense::{
    sanitize_centroid, sanitize_detector, DetectorKind, DetectorSpec, EmbeddingSpec,
};
use crate::error::{Error, Result};
use crate::models::{Architecture, Classifier, ModelSpec};
use crate::regularizer::{
    consolidate, ewc_importance, train_task, Method, RegularizerState, TrainConfig,
    FISHER_SAMPLES,
};
use crate::replay::{train_task_dgr, DgrConfig, GeneratorState, GAN_ITERS_MNIST};

/// Rotation angles (degrees) for the five-task rotation stream.
pub const ROTATION_MAX_DEG: f64 = 80.0;
pub const ROTATION_TASKS: usize = 5;
pub const SOLVER_ITERS: usize = 5000;
pub const DEFAULT_REPETITIONS: usize = 10;
/// Iterations per task for the defense victims: the sanitization outcome
/// depends on the crafted artifacts, not the victim's final accuracy, so the
/// victim trains on a shortened schedule to keep the sweep in minutes.
pub const DEFENSE_VICTIM_ITERS: usize = 1000;
/// t-SNE embeddings are quadratic in sample count; carrier sets above this
/// size are subsampled (keeping the poison rows scoreable) before embedding.
pub const TSNE_MAX_SAMPLES: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    /// Hyperparameters straight from the protocol the tables were made with.
    #[default]
    Paper,
    /// Iteration counts divided by 5 and repetitions capped at 3. Useful for
    /// directional checks; not comparable to paper numbers.
    Desk,
}

impl Scale {
    pub fn iterations(self, paper: usize) -> usize {
        match self {
            Scale::Paper => paper,
            Scale::Desk => (paper / 5).max(1),
        }
    }

    pub fn repetitions(self, requested: usize) -> usize {
        match self {
            Scale::Paper => requested,
            Scale::Desk => requested.min(3),
        }
    }
}

impl std::str::FromStr for Scale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!(
                "unknown scale {other:?}, expected paper or desk"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnerId {
    Ewc,
    OnlineEwc,
    Si,
    Dgr,
}

impl LearnerId {
    pub fn regularizer_method(self) -> Option<Method> {
        match self {
            LearnerId::Ewc => Some(Method::Ewc),
            LearnerId::OnlineEwc => Some(Method::OnlineEwc),
            LearnerId::Si => Some(Method::Si),
            LearnerId::Dgr => None,
        }
    }
}

impl fmt::Display for LearnerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LearnerId::Ewc => "ewc",
            LearnerId::OnlineEwc => "online-ewc",
            LearnerId::Si => "si",
            LearnerId::Dgr => "dgr",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StreamId {
    /// Five rotations of full MNIST; domain-incremental, 10 classes.
    RotationMnist,
    /// Rotation stream restricted to digits 0 and 1 (the defense subset).
    RotationMnist01,
    /// Five disjoint binary digit pairs; task-incremental, 2 classes.
    SplitMnist,
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StreamId::RotationMnist => "rotation-mnist",
            StreamId::RotationMnist01 => "rotation-mnist-01",
            StreamId::SplitMnist => "split-mnist",
        };
        f.write_str(s)
    }
}

/// Attack portion of an experiment. `None` in the config means clean run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct AttackSetting {
    pub kind: AttackKind,
    pub threat: ThreatKind,
    /// Poisoned fraction of each carrier task's training set.
    pub ratio: f64,
}

impl AttackSetting {
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::LabelFlip => "label-flip".into(),
            AttackKind::Pacol => format!(
                "pacol-{}",
                match self.threat {
                    ThreatKind::White => "white",
                    ThreatKind::Gray => "gray",
                    ThreatKind::Black => "black",
                }
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamId,
    pub learner: LearnerId,
    pub attack: Option<AttackSetting>,
    #[serde(default = "default_reps")]
    pub repetitions: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub scale: Scale,
    /// Override for the per-task solver iteration count.
    #[serde(default)]
    pub solver_iterations: Option<usize>,
    /// Override for the per-task generator iteration count (DGR only).
    #[serde(default)]
    pub generator_iterations: Option<usize>,
    /// Cap each task's training set to this many samples (seeded subsample).
    /// Intended for smoke tests; paper runs leave it unset.
    #[serde(default)]
    pub train_cap: Option<usize>,
    /// Largest rotation angle of the rotation streams, in degrees.
    #[serde(default)]
    pub rotation_max_deg: Option<f64>,
}

fn default_reps() -> usize {
    DEFAULT_REPETITIONS
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be at least 1".into()));
        }
        if let Some(a) = &self.attack {
            if !(a.ratio > 0.0 && a.ratio <= 0.10) {
                return Err(Error::Config(format!(
                    "poison ratio {} outside (0, 0.10]",
                    a.ratio
                )));
            }
        }
        if self.solver_iterations == Some(0) || self.generator_iterations == Some(0) {
            return Err(Error::Config("iteration overrides must be positive".into()));
        }
        Ok(())
    }

    /// Short stable identifier used for the results directory layout.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        let mut s = String::with_capacity(12);
        for b in &digest[..6] {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    pub fn effective_repetitions(&self) -> usize {
        self.scale.repetitions(self.repetitions)
    }

    fn solver_iterations(&self) -> usize {
        self.solver_iterations
            .unwrap_or_else(|| self.scale.iterations(SOLVER_ITERS))
    }

    fn generator_iterations(&self) -> usize {
        self.generator_iterations
            .unwrap_or_else(|| self.scale.iterations(GAN_ITERS_MNIST))
    }

    pub fn attack_label(&self) -> String {
        self.attack.map_or("clean".into(), |a| a.label())
    }

    pub fn ratio(&self) -> f64 {
        self.attack.map_or(0.0, |a| a.ratio)
    }
}

/// Summary of one carrier's injected artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactSummary {
    pub carrier_task: usize,
    pub kind: AttackKind,
    pub count: usize,
    pub perturbation_linf: f32,
}

/// Outcome of one seeded scenario run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_index: usize,
    pub seed: u64,
    /// Per-task validation accuracy in [0,1], measured after the final task.
    pub task_accuracy: Vec<f64>,
    /// Per-task training objective traces.
    pub loss_traces: Vec<Vec<f64>>,
    pub artifacts: Vec<ArtifactSummary>,
    pub wall_seconds: f64,
    pub complete: bool,
    pub stage_error: Option<String>,
}

impl RunRecord {
    pub fn failed(run_index: usize, seed: u64, err: &Error) -> Self {
        RunRecord {
            run_index,
            seed,
            task_accuracy: Vec::new(),
            loss_traces: Vec::new(),
            artifacts: Vec::new(),
            wall_seconds: 0.0,
            complete: false,
            stage_error: Some(err.to_string()),
        }
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn subsample_batch(batch: &LabeledBatch, cap: usize, seed: u64) -> LabeledBatch {
    use rand::SeedableRng;
    if batch.len() <= cap {
        return batch.clone();
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, batch.len(), cap).into_vec();
    idx.sort_unstable();
    let inputs = batch.inputs.select(ndarray::Axis(0), &idx);
    let labels = idx.iter().map(|&i| batch.labels[i]).collect();
    LabeledBatch::clean(inputs, labels)
}

fn filter_classes(set: &ImageSet, keep: &[usize]) -> ImageSet {
    let idx: Vec<usize> = set
        .labels
        .iter()
        .enumerate()
        .filter(|(_, l)| keep.contains(l))
        .map(|(i, _)| i)
        .collect();
    let images = set.images.select(ndarray::Axis(0), &idx);
    let labels = idx
        .iter()
        .map(|&i| keep.iter().position(|&k| k == set.labels[i]).unwrap())
        .collect();
    ImageSet {
        images,
        labels,
        num_classes: keep.len(),
    }
}

/// Build the requested task stream from the MNIST cache.
pub fn build_stream(
    id: StreamId,
    seed: u64,
    train_cap: Option<usize>,
    rotation_max_deg: Option<f64>,
) -> Result<TaskStream> {
    let mnist = load_mnist().map_err(|e| e.in_stage("dataset load"))?;
    let angles = even_angles(ROTATION_TASKS, rotation_max_deg.unwrap_or(ROTATION_MAX_DEG));
    let mut stream = match id {
        StreamId::RotationMnist => build_rotation_stream(&mnist.train, &mnist.test, &angles, seed),
        StreamId::RotationMnist01 => {
            let train = filter_classes(&mnist.train, &[0, 1]);
            let test = filter_classes(&mnist.test, &[0, 1]);
            build_rotation_stream(&train, &test, &angles, seed)
        }
        StreamId::SplitMnist => build_split_stream(
            &mnist.train,
            &mnist.test,
            &[(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)],
        ),
    }
    .map_err(|e| e.in_stage("stream build"))?;
    if let Some(cap) = train_cap {
        for (t, task) in stream.tasks.iter_mut().enumerate() {
            task.train = std::sync::Arc::new(subsample_batch(&task.train, cap, mix(seed, t as u64 + 101)));
        }
    }
    Ok(stream)
}

fn victim_architecture(learner: LearnerId) -> Architecture {
    match learner {
        LearnerId::Dgr => Architecture::CnnSmall,
        _ => Architecture::Mlp400x2,
    }
}

/// Tasks that receive poison: the last two of the stream.
fn carrier_tasks(stream: &TaskStream) -> Vec<usize> {
    let t = stream.task_count();
    if t >= 3 {
        vec![t - 2, t - 1]
    } else {
        vec![t - 1]
    }
}

struct AttackContext<'a> {
    setting: AttackSetting,
    plan: PoisonPlan,
    carrier_rows: Vec<Vec<usize>>,
    stream: &'a TaskStream,
    pacol_cfg: PacolConfig,
    surrogate: Option<Classifier<f32>>,
}

impl AttackContext<'_> {
    /// Craft this carrier's artifact against the model state entering the
    /// task (white box) or a surrogate trained on the targeted task.
    fn craft(
        &mut self,
        carrier: usize,
        victim: &Classifier<f32>,
        surrogate_iters: usize,
        seed: u64,
    ) -> Result<PoisonArtifact> {
        let targeted = &self.stream.tasks[self.plan.targeted_task].train;
        let pos = self
            .plan
            .carrier_tasks
            .iter()
            .position(|&c| c == carrier)
            .expect("carrier in plan");
        match self.setting.kind {
            AttackKind::LabelFlip => make_label_flip_poison(
                targeted,
                carrier,
                self.plan.budget(self.stream.tasks[carrier].train.len()),
                &FlipSpec {
                    num_classes: self.stream.num_classes,
                    seed: mix(seed, carrier as u64 + 7),
                },
            ),
            AttackKind::Pacol => {
                let mut cfg = self.pacol_cfg;
                cfg.seed = mix(seed, carrier as u64 + 7);
                let reference = match self.setting.threat {
                    ThreatKind::White => victim,
                    _ => {
                        if self.surrogate.is_none() {
                            let train_cfg = TrainConfig {
                                iterations: surrogate_iters,
                                seed: mix(seed, 0x5a5a),
                                ..TrainConfig::default()
                            };
                            self.surrogate = Some(build_surrogate(
                                self.setting.threat,
                                &victim.spec,
                                targeted,
                                &train_cfg,
                            )?);
                        }
                        self.surrogate.as_ref().unwrap()
                    }
                };
                make_pacol_poison(
                    reference,
                    targeted,
                    &self.stream.tasks[carrier].train,
                    &self.carrier_rows[pos],
                    carrier,
                    &cfg,
                )
            }
        }
    }
}

fn attack_context<'a>(
    cfg: &ExperimentConfig,
    stream: &'a TaskStream,
    seed: u64,
) -> Result<Option<AttackContext<'a>>> {
    let Some(setting) = cfg.attack else {
        return Ok(None);
    };
    let plan = PoisonPlan {
        targeted_task: 0,
        carrier_tasks: carrier_tasks(stream),
        ratio: setting.ratio,
        attack_kind: setting.kind,
        seed,
    };
    let carrier_rows = select_carrier_indices(stream, &plan)?;
    let pacol_cfg = match cfg.learner {
        LearnerId::Dgr => PacolConfig::for_replay(Distance::L2, seed),
        _ => PacolConfig::for_regularization(Distance::L2, seed),
    };
    Ok(Some(AttackContext {
        setting,
        plan,
        carrier_rows,
        stream,
        pacol_cfg,
        surrogate: None,
    }))
}

/// Execute one seeded run of the configured scenario.
pub fn run_scenario(cfg: &ExperimentConfig, run_index: usize) -> Result<RunRecord> {
    cfg.validate()?;
    let started = Instant::now();
    let seed = cfg.base_seed.wrapping_add(run_index as u64);
    let stream = build_stream(cfg.stream, seed, cfg.train_cap, cfg.rotation_max_deg)?;
    let mut attack = attack_context(cfg, &stream, seed).map_err(|e| e.in_stage("poison plan"))?;
    let solver_iters = cfg.solver_iterations();

    let spec = ModelSpec {
        architecture: victim_architecture(cfg.learner),
        input_shape: stream.input_shape(),
        num_classes: stream.num_classes,
        init_seed: seed,
    };
    let mut model = Classifier::<f32>::build(&spec).map_err(|e| e.in_stage("model build"))?;

    let mut artifacts: Vec<PoisonArtifact> = Vec::new();
    let mut summaries = Vec::new();
    let mut traces = Vec::new();

    let mut reg_state = cfg.learner.regularizer_method().map(|m| {
        RegularizerState::<f32>::new(m, m.default_lambda(), model.param_count())
    });
    let mut generator = match cfg.learner {
        LearnerId::Dgr => Some(GeneratorState::<f32>::new_28x28(mix(seed, 0x6e6e))),
        _ => None,
    };
    let dgr_cfg = DgrConfig {
        generator_iterations: cfg.generator_iterations(),
        ..DgrConfig::default()
    };

    for tau in 0..stream.task_count() {
        // craft against the snapshot entering the carrier task
        if let Some(ctx) = attack.as_mut() {
            if ctx.plan.carrier_tasks.contains(&tau) {
                let art = ctx
                    .craft(tau, &model, solver_iters, seed)
                    .map_err(|e| e.in_stage(&format!("crafting for task {}", tau + 1)))?;
                summaries.push(ArtifactSummary {
                    carrier_task: tau,
                    kind: art.kind,
                    count: art.labels.len(),
                    perturbation_linf: art.perturbation_linf,
                });
                artifacts.push(art);
            }
        }
        let train_batch = if artifacts.iter().any(|a| a.carrier_task == tau) {
            let plan = &attack.as_ref().unwrap().plan;
            let poisoned = apply_poison(&stream, plan, &artifacts)
                .map_err(|e| e.in_stage(&format!("poison injection for task {}", tau + 1)))?;
            poisoned.tasks[tau].train.clone()
        } else {
            stream.tasks[tau].train.clone()
        };

        let train_cfg = TrainConfig {
            iterations: solver_iters,
            seed: mix(seed, tau as u64 + 1),
            ..TrainConfig::default()
        };
        let trace = match (&mut reg_state, &mut generator) {
            (Some(state), None) => {
                let trace = train_task(&mut model, &train_batch, state, &train_cfg)
                    .map_err(|e| e.in_stage(&format!("training task {}", tau + 1)))?;
                let importance = if state.method == Method::Si {
                    Vec::new()
                } else {
                    ewc_importance(&model, &train_batch, FISHER_SAMPLES, mix(seed, tau as u64 + 31))
                        .map_err(|e| e.in_stage(&format!("importance after task {}", tau + 1)))?
                };
                consolidate(state, &model, &importance)
                    .map_err(|e| e.in_stage(&format!("consolidation after task {}", tau + 1)))?;
                trace
            }
            (None, Some(gen)) => train_task_dgr(&mut model, gen, &train_batch, tau + 1, &train_cfg, &dgr_cfg)
                .map_err(|e| e.in_stage(&format!("replay training task {}", tau + 1)))?,
            _ => unreachable!("a learner is either regularized or generative"),
        };
        traces.push(trace);
    }

    let mut accuracy = Vec::with_capacity(stream.task_count());
    for (t, task) in stream.tasks.iter().enumerate() {
        let acc = model
            .accuracy(&task.validation.inputs, &task.validation.labels)
            .map_err(|e| e.in_stage(&format!("evaluating task {}", t + 1)))?;
        accuracy.push(acc);
    }
    Ok(RunRecord {
        run_index,
        seed,
        task_accuracy: accuracy,
        loss_traces: traces,
        artifacts: summaries,
        wall_seconds: started.elapsed().as_secs_f64(),
        complete: true,
        stage_error: None,
    })
}

/// One aggregated table row with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub learner: String,
    pub ratio: f64,
    pub attack: String,
    pub runs: usize,
    /// Per-task mean accuracy in [0,1].
    pub mean: Vec<f64>,
    /// Per-task 95% interval half-width.
    pub ci: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<TableRow>,
}

/// Mean and normal-approximation 95% half-width per task over complete runs.
pub fn aggregate(cfg: &ExperimentConfig, records: &[RunRecord]) -> Result<TableRow> {
    let complete: Vec<&RunRecord> = records.iter().filter(|r| r.complete).collect();
    if complete.len() < 2 {
        return Err(Error::Data(format!(
            "need at least 2 complete runs to aggregate, have {}",
            complete.len()
        )));
    }
    let tasks = complete[0].task_accuracy.len();
    if complete.iter().any(|r| r.task_accuracy.len() != tasks) {
        return Err(Error::Shape("records disagree on task count".into()));
    }
    let n = complete.len() as f64;
    let mut mean = vec![0.0; tasks];
    let mut ci = vec![0.0; tasks];
    for t in 0..tasks {
        let m = complete.iter().map(|r| r.task_accuracy[t]).sum::<f64>() / n;
        let var = complete
            .iter()
            .map(|r| (r.task_accuracy[t] - m).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        mean[t] = m;
        ci[t] = 1.96 * var.sqrt() / n.sqrt();
    }
    Ok(TableRow {
        learner: cfg.learner.to_string(),
        ratio: cfg.ratio(),
        attack: cfg.attack_label(),
        runs: complete.len(),
        mean,
        ci,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    DelimiterText,
    Markdown,
}

fn format_table(table: &ResultTable, format: TableFormat) -> Result<String> {
    if table.rows.is_empty() {
        return Err(Error::Data("refusing to emit an empty table".into()));
    }
    let tasks = table.rows[0].mean.len();
    let mut header: Vec<String> = vec!["learner".into(), "ratio".into(), "attack".into(), "runs".into()];
    for t in 1..=tasks {
        header.push(format!("task{t}_mean"));
    }
    for t in 1..=tasks {
        header.push(format!("task{t}_ci"));
    }
    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.learner.clone(),
                format!("{:.2}", r.ratio),
                r.attack.clone(),
                r.runs.to_string(),
            ];
            cells.extend(r.mean.iter().map(|m| format!("{:.2}", m * 100.0)));
            cells.extend(r.ci.iter().map(|c| format!("{:.2}", c * 100.0)));
            cells
        })
        .collect();
    let mut out = String::new();
    match format {
        TableFormat::DelimiterText => {
            out.push_str(&header.join("\t"));
            out.push('\n');
            for row in rows {
                out.push_str(&row.join("\t"));
                out.push('\n');
            }
        }
        TableFormat::Markdown => {
            out.push_str(&format!("| {} |\n", header.join(" | ")));
            out.push_str(&format!("|{}\n", "---|".repeat(header.len())));
            for row in rows {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            }
        }
    }
    Ok(out)
}

/// Write the aggregated table (and optional error-bar series) under `dir`.
/// Error-bar files report 1 - accuracy on the targeted (first) task per
/// poison ratio, one file per attack label.
pub fn emit_outputs(
    table: &ResultTable,
    dir: &Path,
    basename: &str,
    errorbar_data: bool,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for (format, ext) in [
        (TableFormat::DelimiterText, "tsv"),
        (TableFormat::Markdown, "md"),
    ] {
        let text = format_table(table, format)?;
        let path = dir.join(format!("{basename}.{ext}"));
        std::fs::write(&path, text)?;
        written.push(path);
    }
    if errorbar_data {
        let mut attacks: Vec<&str> = table.rows.iter().map(|r| r.attack.as_str()).collect();
        attacks.sort_unstable();
        attacks.dedup();
        for attack in attacks {
            let mut text = String::from("ratio\terror\tci\n");
            let mut rows: Vec<&TableRow> =
                table.rows.iter().filter(|r| r.attack == attack).collect();
            rows.sort_by(|a, b| a.ratio.partial_cmp(&b.ratio).unwrap());
            for r in rows {
                text.push_str(&format!(
                    "{:.2}\t{:.4}\t{:.4}\n",
                    r.ratio,
                    1.0 - r.mean[0],
                    r.ci[0]
                ));
            }
            let path = dir.join(format!("{basename}_errorbar_{attack}.tsv"));
            std::fs::write(&path, text)?;
            written.push(path);
        }
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Defense evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseRow {
    pub method: String,
    pub attack: String,
    pub embedding: String,
    pub budget: f64,
    pub success: f64,
}

/// Everything a sanitization sweep needs from one victim run: the poisoned
/// carrier training set and the first-task model for deep features.
pub struct DefenseSetting {
    pub carrier_train: LabeledBatch,
    pub first_task_model: Classifier<f32>,
    pub seed: u64,
}

/// Train a victim on the 0-1 rotation stream, poison the final carrier task
/// at `ratio`, and capture the materials the filters operate on.
pub fn prepare_defense_setting(
    kind: AttackKind,
    ratio: f64,
    run_index: usize,
    base_seed: u64,
    victim_iters: usize,
) -> Result<DefenseSetting> {
    let seed = base_seed.wrapping_add(run_index as u64);
    let stream = build_stream(StreamId::RotationMnist01, seed, None, None)?;
    let carrier = stream.task_count() - 1;
    let plan = PoisonPlan {
        targeted_task: 0,
        carrier_tasks: vec![carrier],
        ratio,
        attack_kind: kind,
        seed,
    };
    let spec = ModelSpec {
        architecture: Architecture::Mlp400x2,
        input_shape: stream.input_shape(),
        num_classes: stream.num_classes,
        init_seed: seed,
    };
    let mut model = Classifier::<f32>::build(&spec)?;
    let mut state = RegularizerState::<f32>::new(
        Method::Ewc,
        Method::Ewc.default_lambda(),
        model.param_count(),
    );
    let mut first_task_model = None;
    for tau in 0..carrier {
        let train_cfg = TrainConfig {
            iterations: victim_iters,
            seed: mix(seed, tau as u64 + 1),
            ..TrainConfig::default()
        };
        train_task(&mut model, &stream.tasks[tau].train, &mut state, &train_cfg)
            .map_err(|e| e.in_stage(&format!("victim training task {}", tau + 1)))?;
        let imp = ewc_importance(
            &model,
            &stream.tasks[tau].train,
            FISHER_SAMPLES,
            mix(seed, tau as u64 + 31),
        )?;
        consolidate(&mut state, &model, &imp)?;
        if tau == 0 {
            first_task_model = Some(model.clone());
        }
    }
    let artifact = match kind {
        AttackKind::LabelFlip => make_label_flip_poison(
            &stream.tasks[0].train,
            carrier,
            plan.budget(stream.tasks[carrier].train.len()),
            &FlipSpec {
                num_classes: stream.num_classes,
                seed: mix(seed, 7),
            },
        )?,
        AttackKind::Pacol => {
            let rows = select_carrier_indices(&stream, &plan)?;
            let mut cfg = PacolConfig::for_regularization(Distance::L2, mix(seed, 7));
            cfg.seed = mix(seed, 7);
            make_pacol_poison(
                &model,
                &stream.tasks[0].train,
                &stream.tasks[carrier].train,
                &rows[0],
                carrier,
                &cfg,
            )?
        }
    };
    let poisoned = apply_poison(&stream, &plan, &[artifact])?;
    Ok(DefenseSetting {
        carrier_train: (*poisoned.tasks[carrier].train).clone(),
        first_task_model: first_task_model.expect("stream has at least two tasks"),
        seed,
    })
}

fn keep_rows(batch: &LabeledBatch, idx: &[usize]) -> LabeledBatch {
    LabeledBatch {
        inputs: batch.inputs.select(ndarray::Axis(0), idx),
        labels: idx.iter().map(|&i| batch.labels[i]).collect(),
        poison_mask: idx.iter().map(|&i| batch.poison_mask[i]).collect(),
    }
}

/// Run every filter x embedding combination over the prepared carrier set at
/// the given budgets. The t-SNE embedding works on a seeded subsample when
/// the set exceeds [`TSNE_MAX_SAMPLES`].
pub fn evaluate_defenses(
    setting: &DefenseSetting,
    attack_label: &str,
    budgets: &[f64],
) -> Result<Vec<DefenseRow>> {
    use rand::SeedableRng;
    let full = &setting.carrier_train;
    let tsne_batch = if full.len() > TSNE_MAX_SAMPLES {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix(setting.seed, 0x7357));
        let mut idx =
            rand::seq::index::sample(&mut rng, full.len(), TSNE_MAX_SAMPLES).into_vec();
        idx.sort_unstable();
        keep_rows(full, &idx)
    } else {
        full.clone()
    };
    let embeddings: [(EmbeddingSpec, &LabeledBatch); 3] = [
        (EmbeddingSpec::Raw, full),
        (
            EmbeddingSpec::DeepFeature {
                model: &setting.first_task_model,
            },
            full,
        ),
        (EmbeddingSpec::tsne(setting.seed), &tsne_batch),
    ];
    let mut rows = Vec::new();
    for (spec, batch) in &embeddings {
        if batch.poison_mask.iter().all(|&m| !m) {
            continue;
        }
        let embedded = crate::defense::embed(&batch.inputs, spec)
            .map_err(|e| e.in_stage(&format!("{} embedding", spec.name())))?;
        for &budget in budgets {
            let report = sanitize_centroid(&embedded, &batch.labels, &batch.poison_mask, budget)?;
            rows.push(DefenseRow {
                method: "l2-centroid".into(),
                attack: attack_label.into(),
                embedding: spec.name().into(),
                budget,
                success: report.success_rate,
            });
            for kind in [
                DetectorKind::OneClassSvm,
                DetectorKind::IsolationForest,
                DetectorKind::LocalOutlierFactor,
            ] {
                let dspec = DetectorSpec::new(kind, budget, mix(setting.seed, budget.to_bits()));
                let report =
                    sanitize_detector(&embedded, &batch.labels, &batch.poison_mask, &dspec)
                        .map_err(|e| e.in_stage(&format!("{kind} on {}", spec.name())))?;
                rows.push(DefenseRow {
                    method: kind.to_string(),
                    attack: attack_label.into(),
                    embedding: spec.name().into(),
                    budget,
                    success: report.success_rate,
                });
            }
        }
    }
    Ok(rows)
}

/// Average defense rows that share (method, attack, embedding, budget) and
/// render them as a delimiter-separated table with 95% half-widths.
pub fn defense_table(all_rows: &[Vec<DefenseRow>]) -> Result<String> {
    if all_rows.is_empty() || all_rows[0].is_empty() {
        return Err(Error::Data("no defense rows to tabulate".into()));
    }
    let mut out = String::from("method\tattack\tembedding\tbudget\tsuccess_mean\tci_halfwidth\truns\n");
    let template = &all_rows[0];
    for (i, key) in template.iter().enumerate() {
        let samples: Vec<f64> = all_rows
            .iter()
            .filter_map(|run| run.get(i).map(|r| r.success))
            .collect();
        let n = samples.len() as f64;
        let m = samples.iter().sum::<f64>() / n;
        let ci = if samples.len() > 1 {
            let var = samples.iter().map(|s| (s - m).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * var.sqrt() / n.sqrt()
        } else {
            0.0
        };
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.2}\t{:.2}\t{:.2}\t{}\n",
            key.method,
            key.attack,
            key.embedding,
            key.budget,
            m * 100.0,
            ci * 100.0,
            samples.len()
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(accs: &[f64]) -> RunRecord {
        RunRecord {
            run_index: 0,
            seed: 0,
            task_accuracy: accs.to_vec(),
            loss_traces: vec![],
            artifacts: vec![],
            wall_seconds: 0.0,
            complete: true,
            stage_error: None,
        }
    }

    fn config() -> ExperimentConfig {
        ExperimentConfig {
            stream: StreamId::RotationMnist,
            learner: LearnerId::Ewc,
            attack: None,
            repetitions: 10,
            base_seed: 0,
            output_dir: PathBuf::from("results"),
            scale: Scale::Paper,
            solver_iterations: None,
            generator_iterations: None,
            train_cap: None,
            rotation_max_deg: None,
        }
    }

    #[test]
    fn aggregate_two_runs() {
        let rows = aggregate(&config(), &[record(&[0.6]), record(&[0.8])]).unwrap();
        assert!((rows.mean[0] - 0.7).abs() < 1e-12);
        assert!((rows.ci[0] - 1.96 * (0.1414213562373095) / (2f64).sqrt()).abs() < 1e-6);
        assert_eq!(rows.runs, 2);
    }

    #[test]
    fn aggregate_identical_runs_zero_ci() {
        let rows = aggregate(&config(), &[record(&[0.5, 0.5]), record(&[0.5, 0.5])]).unwrap();
        assert_eq!(rows.ci, vec![0.0, 0.0]);
    }

    #[test]
    fn aggregate_needs_two_complete() {
        let mut bad = record(&[0.4]);
        bad.complete = false;
        assert!(aggregate(&config(), &[record(&[0.6]), bad]).is_err());
    }

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
stream = "rotation-mnist"
learner = "ewc"

[attack]
kind = "label-flip"
threat = "white"
ratio = 0.05
"#,
        )
        .unwrap();
        assert_eq!(cfg.repetitions, DEFAULT_REPETITIONS);
        assert_eq!(cfg.attack_label(), "label-flip");
        assert_eq!(cfg.ratio(), 0.05);
    }

    #[test]
    fn toml_errors_are_positioned() {
        let err = ExperimentConfig::from_toml_str("stream = \"nowhere\"").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("config parse error"), "{msg}");
    }

    #[test]
    fn invalid_ratio_rejected() {
        let mut cfg = config();
        cfg.attack = Some(AttackSetting {
            kind: AttackKind::LabelFlip,
            threat: ThreatKind::White,
            ratio: 0.5,
        });
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn desk_scale_math() {
        assert_eq!(Scale::Desk.iterations(5000), 1000);
        assert_eq!(Scale::Desk.repetitions(10), 3);
        assert_eq!(Scale::Paper.iterations(5000), 5000);
        assert_eq!(Scale::Paper.repetitions(10), 10);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = config();
        let mut b = config();
        assert_eq!(a.hash(), b.hash());
        b.base_seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn table_emission_formats() {
        let table = ResultTable {
            rows: vec![TableRow {
                learner: "ewc".into(),
                ratio: 0.05,
                attack: "label-flip".into(),
                runs: 10,
                mean: vec![0.3301, 0.7],
                ci: vec![0.0159, 0.01],
            }],
        };
        let tsv = format_table(&table, TableFormat::DelimiterText).unwrap();
        assert!(tsv.starts_with("learner\tratio\tattack\truns\ttask1_mean"));
        assert!(tsv.contains("33.01"));
        let md = format_table(&table, TableFormat::Markdown).unwrap();
        assert!(md.contains("| ewc |"));
        assert!(format_table(&ResultTable::default(), TableFormat::Markdown).is_err());
    }

    #[test]
    fn emit_writes_errorbar_series() {
        let dir = tempfile::tempdir().unwrap();
        let table = ResultTable {
            rows: vec![
                TableRow {
                    learner: "ewc".into(),
                    ratio: 0.01,
                    attack: "label-flip".into(),
                    runs: 10,
                    mean: vec![0.5],
                    ci: vec![0.02],
                },
                TableRow {
                    learner: "ewc".into(),
                    ratio: 0.05,
                    attack: "label-flip".into(),
                    runs: 10,
                    mean: vec![0.33],
                    ci: vec![0.01],
                },
            ],
        };
        let files = emit_outputs(&table, dir.path(), "table1", true).unwrap();
        assert_eq!(files.len(), 3);
        let series = std::fs::read_to_string(dir.path().join("table1_errorbar_label-flip.tsv")).unwrap();
        let lines: Vec<&str> = series.lines().collect();
        assert_eq!(lines[0], "ratio\terror\tci");
        assert!(lines[1].starts_with("0.01\t0.5000"));
        assert!(lines[2].starts_with("0.05\t0.6700"));
    }
}
