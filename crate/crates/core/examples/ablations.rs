//! The three sparsification modes on the same task: learned temperature,
//! decay-only temperature, and hard top-K truncation.

use fcbm::hypernet::WeightMode;
use fcbm::pipeline::evaluate_pool;
use fcbm::projector::{clip_concept_features, project_concepts, train_projector, ProjectorConfig};
use fcbm::synthetic::{suite_config, SyntheticConfig, SyntheticTask};
use fcbm::trainer::{train_head, AblationMode, HeadData};

fn main() -> fcbm::Result<()> {
    println!("{:>4}  {:<10}  {:>8}  {:>6}  {:>7}", "seed", "mode", "accuracy", "NEC", "tau");
    for seed in 0..3 {
        let task = SyntheticTask::generate(SyntheticConfig {
            seed,
            ..Default::default()
        })?;
        let target = clip_concept_features(&task.train.clip, task.concepts.embeddings())?;
        let fit = train_projector(
            &task.train.backbone,
            &target,
            &task.concepts.fingerprint(),
            &ProjectorConfig {
                seed,
                ..Default::default()
            },
        )?;
        let values = project_concepts(&fit.weights, &fit.stats, &task.train.backbone)?;
        for mode in [AblationMode::Full, AblationMode::FixedTemp, AblationMode::Hard] {
            let data = HeadData {
                values: &values,
                labels: &task.train.labels,
                num_classes: task.train.num_classes,
            };
            let (mut ckpt, _) = train_head(&data, &task.concepts, fit.stats.clone(), &suite_config(seed, mode))?
                .into_result()?;
            ckpt.projector = Some(fit.weights.round_to_f32());
            let (r, _) = evaluate_pool(&ckpt, &task.concepts, &task.test, WeightMode::Trained)?;
            println!("{seed:>4}  {:<10}  {:>8.3}  {:>6.2}  {:>7.4}", mode.to_string(), r.accuracy, r.nec, ckpt.tau);
        }
    }
    Ok(())
}
