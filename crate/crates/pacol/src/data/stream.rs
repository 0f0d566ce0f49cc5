//! Benchmark task streams and poison splicing.
//!
//! A stream is an ordered list of immutable tasks. Poisoning never mutates a
//! stream in place: `apply_poison` returns a new stream that shares untouched
//! tasks with the original.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayD, ArrayView2, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::mnist::ImageSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// All tasks share the identical label set (e.g. rotations).
    DomainIncremental,
    /// Disjoint class pairs per task (split streams).
    TaskIncremental,
}

/// Training or validation data for one task.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    /// Sample-major tensor with values in [0,1].
    pub inputs: ArrayD<f32>,
    pub labels: Vec<usize>,
    /// True exactly on adversarially inserted or perturbed rows.
    pub poison_mask: Vec<bool>,
}

impl LabeledBatch {
    pub fn clean(inputs: ArrayD<f32>, labels: Vec<usize>) -> Self {
        let n = labels.len();
        LabeledBatch {
            inputs,
            labels,
            poison_mask: vec![false; n],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = self.inputs.shape()[0];
        if n != self.labels.len() || n != self.poison_mask.len() {
            return Err(Error::Shape(format!(
                "batch length mismatch: {} inputs, {} labels, {} mask entries",
                n,
                self.labels.len(),
                self.poison_mask.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if let Some(bad) = self
            .inputs
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite())
        {
            return Err(Error::Data(format!(
                "input value {bad} outside [0,1]"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Arc<LabeledBatch>,
    pub validation: Arc<LabeledBatch>,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<TaskData>,
    pub scenario: Scenario,
    /// Original dataset class ids covered by each task.
    pub classes_per_task: Vec<Vec<usize>>,
    /// Width of the per-task label space.
    pub num_classes: usize,
    pub seed: u64,
}

impl TaskStream {
    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    /// Per-sample input shape.
    pub fn input_shape(&self) -> Vec<usize> {
        self.tasks[0].train.inputs.shape()[1..].to_vec()
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.tasks {
            t.train.validate(self.num_classes)?;
            t.validation.validate(self.num_classes)?;
            if t.validation.poison_mask.iter().any(|&m| m) {
                return Err(Error::Data("validation batch carries poison mask".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    LabelFlip,
    Pacol,
}

/// Where and how much poison goes into a stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonPlan {
    /// Task whose knowledge the attack targets (0-based).
    pub targeted_task: usize,
    /// Later tasks whose training data carries the poison.
    pub carrier_tasks: Vec<usize>,
    /// Fraction of each carrier's training size, in (0, 0.10].
    pub ratio: f64,
    pub attack_kind: AttackKind,
    pub seed: u64,
}

impl PoisonPlan {
    pub fn validate(&self, stream: &TaskStream) -> Result<()> {
        if self.carrier_tasks.is_empty() {
            return Err(Error::Config("poison plan has no carrier tasks".into()));
        }
        let min_carrier = *self.carrier_tasks.iter().min().unwrap();
        if self.targeted_task >= min_carrier {
            return Err(Error::Config(format!(
                "targeted task {} must precede all carriers {:?}",
                self.targeted_task, self.carrier_tasks
            )));
        }
        if let Some(&bad) = self
            .carrier_tasks
            .iter()
            .find(|&&c| c >= stream.task_count())
        {
            return Err(Error::Config(format!(
                "carrier task {bad} out of range for a {}-task stream",
                stream.task_count()
            )));
        }
        if !(self.ratio > 0.0 && self.ratio <= 0.10) {
            return Err(Error::Config(format!(
                "poison ratio {} outside (0, 0.10]",
                self.ratio
            )));
        }
        Ok(())
    }

    pub fn budget(&self, carrier_train_len: usize) -> usize {
        (self.ratio * carrier_train_len as f64).floor() as usize
    }
}

/// One carrier's worth of crafted poison.
#[derive(Debug, Clone)]
pub struct PoisonArtifact {
    pub kind: AttackKind,
    pub carrier_task: usize,
    pub inputs: ArrayD<f32>,
    pub labels: Vec<usize>,
    /// Carrier rows to replace in place; append to the carrier when `None`.
    pub replace_indices: Option<Vec<usize>>,
    /// Source rows the samples were built from (targeted task for
    /// label flips, carrier rows for in-place perturbations).
    pub origin_indices: Vec<usize>,
    /// Largest absolute per-pixel perturbation applied while crafting.
    pub perturbation_linf: f32,
}

/// Rotate one grayscale image by `angle` degrees (counter-clockwise) about
/// its center: bilinear interpolation, zero outside the frame.
pub fn rotate_bilinear(img: &ArrayView2<f32>, angle_deg: f64) -> Array2<f32> {
    let (h, w) = img.dim();
    let theta = angle_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            // Inverse map: where in the source does this output pixel come from.
            let dy = i as f64 - cy;
            let dx = j as f64 - cx;
            let sy = cos * dy + sin * dx + cy;
            let sx = -sin * dy + cos * dx + cx;
            let y0 = sy.floor();
            let x0 = sx.floor();
            let fy = (sy - y0) as f32;
            let fx = (sx - x0) as f32;
            let mut acc = 0.0f32;
            for (oy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
                for (ox, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                    let yy = y0 as i64 + oy;
                    let xx = x0 as i64 + ox;
                    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                        acc += wy * wx * img[(yy as usize, xx as usize)];
                    }
                }
            }
            out[(i, j)] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

fn rotate_set(set: &ImageSet, angle_deg: f64) -> Array4<f32> {
    let (n, c, h, w) = set.images.dim();
    let mut out = Array4::<f32>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let rotated = rotate_bilinear(&set.images.index_axis(Axis(0), ni).index_axis(Axis(0), ci), angle_deg);
            out.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .assign(&rotated);
        }
    }
    out
}

fn check_normalized(set: &ImageSet, what: &str) -> Result<()> {
    if let Some(bad) = set
        .images
        .iter()
        .find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite())
    {
        return Err(Error::Data(format!(
            "{what} images not normalized to [0,1]: found {bad}"
        )));
    }
    Ok(())
}

/// Evenly spaced rotation angles starting at 0 degrees.
pub fn even_angles(count: usize, max_deg: f64) -> Vec<f64> {
    if count == 1 {
        return vec![0.0];
    }
    (0..count)
        .map(|i| max_deg * i as f64 / (count - 1) as f64)
        .collect()
}

/// One task per angle; every task is the full dataset under that rotation.
pub fn build_rotation_stream(
    train: &ImageSet,
    test: &ImageSet,
    angles: &[f64],
    seed: u64,
) -> Result<TaskStream> {
    if angles.is_empty() {
        return Err(Error::Config("empty rotation angle list".into()));
    }
    check_normalized(train, "train")?;
    check_normalized(test, "test")?;
    let all_classes: Vec<usize> = (0..train.num_classes).collect();
    let mut tasks = Vec::with_capacity(angles.len());
    for &a in angles {
        let tr = LabeledBatch::clean(rotate_set(train, a).into_dyn(), train.labels.clone());
        let va = LabeledBatch::clean(rotate_set(test, a).into_dyn(), test.labels.clone());
        tasks.push(TaskData {
            train: Arc::new(tr),
            validation: Arc::new(va),
        });
    }
    let stream = TaskStream {
        tasks,
        scenario: Scenario::DomainIncremental,
        classes_per_task: vec![all_classes; angles.len()],
        num_classes: train.num_classes,
        seed,
    };
    stream.validate()?;
    Ok(stream)
}

fn subset(set: &ImageSet, classes: (usize, usize)) -> Result<LabeledBatch> {
    let (a, b) = classes;
    let idx: Vec<usize> = set
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == a || l == b)
        .map(|(i, _)| i)
        .collect();
    if !set.labels.contains(&a) || !set.labels.contains(&b) {
        return Err(Error::Config(format!(
            "class pair ({a},{b}) not fully present in dataset"
        )));
    }
    let images = set.images.select(Axis(0), &idx);
    let labels: Vec<usize> = idx
        .iter()
        .map(|&i| usize::from(set.labels[i] == b))
        .collect();
    Ok(LabeledBatch::clean(images.into_dyn(), labels))
}

/// One binary task per disjoint class pair; labels remapped to {0,1}.
pub fn build_split_stream(
    train: &ImageSet,
    test: &ImageSet,
    class_pairs: &[(usize, usize)],
) -> Result<TaskStream> {
    if class_pairs.is_empty() {
        return Err(Error::Config("empty class pair list".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for &(a, b) in class_pairs {
        if a == b || !seen.insert(a) || !seen.insert(b) {
            return Err(Error::Config(format!(
                "class pairs must be pairwise disjoint; {a} or {b} repeats"
            )));
        }
    }
    check_normalized(train, "train")?;
    check_normalized(test, "test")?;
    let mut tasks = Vec::with_capacity(class_pairs.len());
    for &pair in class_pairs {
        tasks.push(TaskData {
            train: Arc::new(subset(train, pair)?),
            validation: Arc::new(subset(test, pair)?),
        });
    }
    let stream = TaskStream {
        tasks,
        scenario: Scenario::TaskIncremental,
        classes_per_task: class_pairs.iter().map(|&(a, b)| vec![a, b]).collect(),
        num_classes: 2,
        seed: 0,
    };
    stream.validate()?;
    Ok(stream)
}

/// For each carrier task, draw `floor(ratio * N)` distinct training indices,
/// reproducibly from the plan seed.
pub fn select_carrier_indices(stream: &TaskStream, plan: &PoisonPlan) -> Result<Vec<Vec<usize>>> {
    plan.validate(stream)?;
    let mut out = Vec::with_capacity(plan.carrier_tasks.len());
    for (k, &carrier) in plan.carrier_tasks.iter().enumerate() {
        let n = stream.tasks[carrier].train.len();
        let budget = plan.budget(n);
        if budget == 0 {
            return Err(Error::Config(format!(
                "empty poison budget: ratio {} of {n} samples rounds to zero",
                plan.ratio
            )));
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(k as u64 + 1)));
        let mut idx = rand::seq::index::sample(&mut rng, n, budget).into_vec();
        idx.sort_unstable();
        out.push(idx);
    }
    Ok(out)
}

/// Splice artifacts into a stream. Appending artifacts grow the carrier's
/// training set; replacing artifacts overwrite the listed rows. The poison
/// mask is set exactly on affected rows and untouched tasks are shared.
pub fn apply_poison(
    stream: &TaskStream,
    plan: &PoisonPlan,
    artifacts: &[PoisonArtifact],
) -> Result<TaskStream> {
    plan.validate(stream)?;
    let mut out = stream.clone();
    let shape = stream.input_shape();
    for art in artifacts {
        if !plan.carrier_tasks.contains(&art.carrier_task) {
            return Err(Error::Config(format!(
                "artifact bound to task {} which is not a plan carrier",
                art.carrier_task
            )));
        }
        let m = art.labels.len();
        if art.inputs.shape()[0] != m || art.inputs.shape()[1..] != shape[..] {
            return Err(Error::Shape(format!(
                "artifact shape {:?} incompatible with stream samples {:?}",
                art.inputs.shape(),
                shape
            )));
        }
        if let Some(bad) = art
            .inputs
            .iter()
            .find(|v| !(0.0..=1.0).contains(*v) || !v.is_finite())
        {
            return Err(Error::Data(format!(
                "artifact input value {bad} outside [0,1]"
            )));
        }
        match (art.kind, &art.replace_indices, plan.attack_kind) {
            (AttackKind::LabelFlip, None, AttackKind::LabelFlip)
            | (AttackKind::Pacol, Some(_), AttackKind::Pacol) => {}
            _ => {
                return Err(Error::Config(
                    "artifact splice mode does not match the plan's attack kind".into(),
                ))
            }
        }
        let task = &mut out.tasks[art.carrier_task];
        let old = task.train.as_ref();
        let new_train = match &art.replace_indices {
            None => {
                let inputs =
                    ndarray::concatenate(Axis(0), &[old.inputs.view(), art.inputs.view()])
                        .map_err(|e| Error::Shape(e.to_string()))?;
                let mut labels = old.labels.clone();
                labels.extend_from_slice(&art.labels);
                let mut mask = old.poison_mask.clone();
                mask.extend(std::iter::repeat(true).take(m));
                LabeledBatch {
                    inputs,
                    labels,
                    poison_mask: mask,
                }
            }
            Some(rows) => {
                if rows.len() != m {
                    return Err(Error::Shape(
                        "replace index count differs from artifact size".into(),
                    ));
                }
                let mut inputs = old.inputs.clone();
                let mut labels = old.labels.clone();
                let mut mask = old.poison_mask.clone();
                for (r, &row) in rows.iter().enumerate() {
                    if row >= old.len() {
                        return Err(Error::Shape(format!(
                            "replace index {row} out of range for carrier of {}",
                            old.len()
                        )));
                    }
                    inputs
                        .index_axis_mut(Axis(0), row)
                        .assign(&art.inputs.index_axis(Axis(0), r));
                    labels[row] = art.labels[r];
                    mask[row] = true;
                }
                LabeledBatch {
                    inputs,
                    labels,
                    poison_mask: mask,
                }
            }
        };
        new_train.validate(stream.num_classes)?;
        task.train = Arc::new(new_train);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct StreamManifest {
    scenario: Scenario,
    task_count: usize,
    classes_per_task: Vec<Vec<usize>>,
    num_classes: usize,
    seed: u64,
    input_shape: Vec<usize>,
}

fn write_batch(path: &Path, b: &LabeledBatch) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let shape = b.inputs.shape();
    f.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        f.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in b.inputs.as_standard_layout().as_slice().unwrap() {
        f.write_all(&v.to_le_bytes())?;
    }
    for &l in &b.labels {
        f.write_all(&(l as u32).to_le_bytes())?;
    }
    for &m in &b.poison_mask {
        f.write_all(&[u8::from(m)])?;
    }
    Ok(())
}

fn read_batch(path: &Path) -> Result<LabeledBatch> {
    use std::io::Read;
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    f.read_exact(&mut b4)?;
    let ndim = u32::from_le_bytes(b4) as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        f.read_exact(&mut b8)?;
        shape.push(u64::from_le_bytes(b8) as usize);
    }
    let total: usize = shape.iter().product();
    let mut data = vec![0f32; total];
    for v in data.iter_mut() {
        f.read_exact(&mut b4)?;
        *v = f32::from_le_bytes(b4);
    }
    let n = shape[0];
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        f.read_exact(&mut b4)?;
        labels.push(u32::from_le_bytes(b4) as usize);
    }
    let mut mask = vec![0u8; n];
    f.read_exact(&mut mask)?;
    Ok(LabeledBatch {
        inputs: ArrayD::from_shape_vec(IxDyn(&shape), data).unwrap(),
        labels,
        poison_mask: mask.into_iter().map(|m| m != 0).collect(),
    })
}

/// Write a stream as one manifest plus one file per task per split.
pub fn save_stream(stream: &TaskStream, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = StreamManifest {
        scenario: stream.scenario,
        task_count: stream.task_count(),
        classes_per_task: stream.classes_per_task.clone(),
        num_classes: stream.num_classes,
        seed: stream.seed,
        input_shape: stream.input_shape(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for (i, t) in stream.tasks.iter().enumerate() {
        write_batch(&dir.join(format!("task{i}_train.bin")), &t.train)?;
        write_batch(&dir.join(format!("task{i}_validation.bin")), &t.validation)?;
    }
    Ok(())
}

pub fn load_stream(dir: &Path) -> Result<TaskStream> {
    let manifest: StreamManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut tasks = Vec::with_capacity(manifest.task_count);
    for i in 0..manifest.task_count {
        tasks.push(TaskData {
            train: Arc::new(read_batch(&dir.join(format!("task{i}_train.bin")))?),
            validation: Arc::new(read_batch(&dir.join(format!("task{i}_validation.bin")))?),
        });
    }
    Ok(TaskStream {
        tasks,
        scenario: manifest.scenario,
        classes_per_task: manifest.classes_per_task,
        num_classes: manifest.num_classes,
        seed: manifest.seed,
    })
}
