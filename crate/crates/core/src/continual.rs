//! Class-incremental learning with a fixed per-class memory that is rebuilt
//! from the new classes at each step and used to retrain from scratch.

use std::fmt::Write as _;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baselines::{herding_coreset_of, random_coreset_of};
use crate::condense::{condense, CondenseConfig};
use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, mean_std, train_on_set, EvalProtocol, TrainRecipe};
use crate::networks::EmbedderConfig;
use crate::repro::{derive_seed, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemoryBuilder {
    Random,
    Herding,
    Dm,
}

impl MemoryBuilder {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "herding" => Ok(Self::Herding),
            "dm" => Ok(Self::Dm),
            _ => Err(Error::Config(format!("unknown memory builder `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncrementalSchedule {
    /// Classes introduced at each step.
    pub steps: Vec<Vec<usize>>,
    /// Memory images per class.
    pub budget: usize,
    pub builder: MemoryBuilder,
    pub seed: u64,
}

impl IncrementalSchedule {
    /// Shuffles the classes with the schedule seed and splits them evenly.
    pub fn random_split(
        num_classes: usize,
        num_steps: usize,
        budget: usize,
        builder: MemoryBuilder,
        seed: u64,
    ) -> Result<Self> {
        if num_steps == 0 || !num_classes.is_multiple_of(num_steps) {
            return Err(Error::Config(format!(
                "{num_classes} classes cannot be split evenly into {num_steps} steps"
            )));
        }
        let mut order: Vec<usize> = (0..num_classes).collect();
        order.shuffle(&mut stream(seed, "classes", 0));
        let steps = order.chunks(num_classes / num_steps).map(<[usize]>::to_vec).collect();
        let s = Self {
            steps,
            budget,
            builder,
            seed,
        };
        s.validate(num_classes)?;
        Ok(s)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::Config("memory budget must be at least 1".into()));
        }
        let mut seen: Vec<usize> = self.steps.iter().flatten().copied().collect();
        seen.sort_unstable();
        if seen != (0..num_classes).collect::<Vec<_>>() || self.steps.iter().any(Vec::is_empty) {
            return Err(Error::Config(format!(
                "steps {:?} do not partition the {num_classes} classes",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Per-builder settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryOptions {
    /// Template for the DM builder; ipc, seed and classes are set per step.
    pub condense: CondenseConfig,
    /// The herding embedder is trained on the step's data only.
    pub herding_arch: EmbedderConfig,
    pub herding_recipe: TrainRecipe,
}

/// `budget` images for every class present in `step_data`.
pub fn build_memory(
    builder: MemoryBuilder,
    step_data: &LabeledImageSet,
    budget: usize,
    seed: u64,
    opts: &MemoryOptions,
) -> Result<LabeledImageSet> {
    let classes: Vec<usize> = step_data
        .class_index()
        .lists
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(c, _)| c)
        .collect();
    if classes.is_empty() {
        return Err(Error::Contract("step data is empty".into()));
    }
    match builder {
        MemoryBuilder::Random => Ok(random_coreset_of(step_data, &classes, budget, seed)?.set),
        MemoryBuilder::Herding => {
            let embed_seed = derive_seed(seed, "herding", classes[0] as u64);
            let net = train_on_set(step_data, &opts.herding_arch, &opts.herding_recipe, embed_seed)?;
            Ok(herding_coreset_of(step_data, &classes, budget, &net)?.set)
        }
        MemoryBuilder::Dm => {
            let mut cfg = opts.condense.clone();
            cfg.ipc = budget;
            cfg.seed = seed;
            cfg.classes = Some(classes.clone());
            let (synth, _) = condense(step_data, &cfg)?;
            let rows: Vec<usize> = classes.iter().flat_map(|&c| synth.class_rows(c)).collect();
            Ok(synth.to_labeled().subset(&rows))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step: usize,
    pub classes_seen: Vec<usize>,
    pub memory_size: usize,
    /// Percent, one per trained network, measured on test data of the seen classes.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Runs the schedule: memory for new classes is built from that step's data
/// only and appended; `protocol.nets` networks are then trained from scratch
/// on the whole memory and tested on every class seen so far.
pub fn run_incremental(
    real: &LabeledImageSet,
    test: &LabeledImageSet,
    schedule: &IncrementalSchedule,
    opts: &MemoryOptions,
    arch: &EmbedderConfig,
    protocol: &EvalProtocol,
) -> Result<Vec<StepResult>> {
    schedule.validate(real.num_classes)?;
    if protocol.nets == 0 {
        return Err(Error::Config("need at least one network per step".into()));
    }
    let mut memory: Option<LabeledImageSet> = None;
    let mut seen = Vec::new();
    let mut curve = Vec::with_capacity(schedule.steps.len());
    for (step, new) in schedule.steps.iter().enumerate() {
        let step_data = real.filter_classes(new);
        let part = build_memory(schedule.builder, &step_data, schedule.budget, schedule.seed, opts)?;
        memory = Some(match memory {
            Some(m) => m.concat(&part)?,
            None => part,
        });
        seen.extend_from_slice(new);
        seen.sort_unstable();
        let mem = memory.as_ref().expect("memory was just set");
        let seen_test = test.filter_classes(&seen);
        let mut accs = Vec::with_capacity(protocol.nets);
        for m in 0..protocol.nets {
            let seed = derive_seed(protocol.seed, "eval", (step * protocol.nets + m) as u64);
            let net = train_on_set(mem, arch, &protocol.recipe, seed)?;
            accs.push(accuracy(&net, &seen_test, Some(&seen))?);
        }
        let (mean, std) = mean_std(&accs);
        info!("step {step}: {} classes, memory {}, accuracy {mean:.2}", seen.len(), mem.len());
        curve.push(StepResult {
            step,
            classes_seen: seen.clone(),
            memory_size: mem.len(),
            accuracies: accs,
            mean,
            std,
        });
    }
    Ok(curve)
}

/// `step,classes_seen,memory_size,accuracy_mean,accuracy_std`
pub fn curve_csv(curve: &[StepResult]) -> String {
    let mut out = String::from("step,classes_seen,memory_size,accuracy_mean,accuracy_std\n");
    for r in curve {
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4}",
            r.step,
            r.classes_seen.len(),
            r.memory_size,
            r.mean,
            r.std
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augmentation::AugConfig;
    use crate::baselines::random_coreset;
    use crate::datasets::make_toy_dataset;
    use crate::evaluation::evaluate_sets;

    fn small_arch() -> EmbedderConfig {
        let mut c = EmbedderConfig::convnet([1, 8, 8], 4);
        c.width = 8;
        c
    }

    fn opts() -> MemoryOptions {
        let mut condense = CondenseConfig::defaults("toy", [1, 8, 8], 4, 1);
        condense.embedder = small_arch();
        condense.iterations = 20;
        condense.real_batch = 32;
        let herding_recipe = TrainRecipe {
            epochs: 2,
            batch_size: 32,
            ..TrainRecipe::defaults(1)
        };
        MemoryOptions {
            condense,
            herding_arch: small_arch(),
            herding_recipe,
        }
    }

    fn protocol() -> EvalProtocol {
        EvalProtocol {
            recipe: TrainRecipe {
                epochs: 3,
                batch_size: 16,
                augmentation: AugConfig::identity(),
                ..TrainRecipe::defaults(1)
            },
            nets: 2,
            seed: 5,
            workers: 1,
        }
    }

    #[test]
    fn schedules_partition_the_classes() {
        let s = IncrementalSchedule::random_split(10, 5, 2, MemoryBuilder::Random, 3).unwrap();
        assert_eq!(s.steps.len(), 5);
        assert!(s.steps.iter().all(|st| st.len() == 2));
        assert_eq!(s, IncrementalSchedule::random_split(10, 5, 2, MemoryBuilder::Random, 3).unwrap());
        assert!(IncrementalSchedule::random_split(10, 3, 2, MemoryBuilder::Random, 0).is_err());
        let bad = IncrementalSchedule {
            steps: vec![vec![0, 1], vec![1, 2, 3]],
            budget: 1,
            builder: MemoryBuilder::Random,
            seed: 0,
        };
        assert!(matches!(bad.validate(4), Err(Error::Config(_))));
    }

    #[test]
    fn single_step_random_matches_coreset_evaluation() {
        let real = make_toy_dataset(0, 16);
        let test = make_toy_dataset(1, 8);
        let schedule = IncrementalSchedule {
            steps: vec![vec![0, 1, 2, 3]],
            budget: 2,
            builder: MemoryBuilder::Random,
            seed: 7,
        };
        let curve = run_incremental(&real, &test, &schedule, &opts(), &small_arch(), &protocol()).unwrap();
        let core = random_coreset(&real, 2, 7).unwrap();
        let direct = evaluate_sets(&[core.set], &test, &small_arch(), &protocol()).unwrap();
        assert_eq!(curve[0].accuracies, direct.accuracies);
    }

    #[test]
    fn memory_grows_by_budget_per_new_class() {
        let real = make_toy_dataset(0, 8);
        let test = make_toy_dataset(1, 4);
        let schedule = IncrementalSchedule {
            steps: vec![vec![2], vec![0, 3], vec![1]],
            budget: 2,
            builder: MemoryBuilder::Dm,
            seed: 1,
        };
        let curve = run_incremental(&real, &test, &schedule, &opts(), &small_arch(), &protocol()).unwrap();
        let sizes: Vec<usize> = curve.iter().map(|r| r.memory_size).collect();
        assert_eq!(sizes, vec![2, 6, 8]);
        assert_eq!(curve[1].classes_seen, vec![0, 2, 3]);
        let csv = curve_csv(&curve);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("1,3,6,"));
    }

    #[test]
    fn memory_is_independent_of_the_step_split() {
        let real = make_toy_dataset(0, 8);
        for builder in [MemoryBuilder::Random, MemoryBuilder::Dm] {
            let joint = build_memory(builder, &real, 1, 3, &opts()).unwrap();
            let single = build_memory(builder, &real.filter_classes(&[2]), 1, 3, &opts()).unwrap();
            let row = joint.labels.iter().position(|&l| l == 2).unwrap();
            assert_eq!(single.images.item(0), joint.images.item(row), "{builder:?}");
        }
    }

    #[test]
    fn dm_memory_has_one_image_per_new_class() {
        let real = make_toy_dataset(0, 8).filter_classes(&[1, 3]);
        let mem = build_memory(MemoryBuilder::Dm, &real, 1, 0, &opts()).unwrap();
        assert_eq!(mem.labels, vec![1, 3]);
        let herd = build_memory(MemoryBuilder::Herding, &real, 2, 0, &opts()).unwrap();
        assert_eq!(herd.labels, vec![1, 1, 3, 3]);
    }

    #[test]
    fn oversized_budget_is_a_selection_error() {
        let real = make_toy_dataset(0, 2);
        let err = build_memory(MemoryBuilder::Random, &real, 3, 0, &opts()).unwrap_err();
        assert!(matches!(err, Error::Selection(_)), "{err}");
    }
}
