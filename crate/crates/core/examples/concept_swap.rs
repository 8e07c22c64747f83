//! Replacing the concept pool: zero-shot weights for a reworded pool via
//! distribution alignment, then a single epoch of fine-tuning.

use fcbm::hypernet::WeightMode;
use fcbm::pipeline::{evaluate_pool, fresh_clip_values};
use fcbm::projector::{clip_concept_features, project_concepts, train_projector, ProjectorConfig};
use fcbm::synthetic::{paraphrase, suite_config, SyntheticConfig, SyntheticTask};
use fcbm::trainer::{finetune, train_head, AblationMode, HeadData};

fn main() -> fcbm::Result<()> {
    let task = SyntheticTask::generate(SyntheticConfig::default())?;
    let target = clip_concept_features(&task.train.clip, task.concepts.embeddings())?;
    let fit = train_projector(&task.train.backbone, &target, &task.concepts.fingerprint(), &ProjectorConfig::default())?;
    let values = project_concepts(&fit.weights, &fit.stats, &task.train.backbone)?;
    let cfg = suite_config(0, AblationMode::Full);
    let data = HeadData {
        values: &values,
        labels: &task.train.labels,
        num_classes: task.train.num_classes,
    };
    let (mut ckpt, _) = train_head(&data, &task.concepts, fit.stats.clone(), &cfg)?.into_result()?;
    ckpt.projector = Some(fit.weights.round_to_f32());

    let (trained, _) = evaluate_pool(&ckpt, &task.concepts, &task.test, WeightMode::Trained)?;
    println!("trained pool        accuracy {:.3}  NEC {}", trained.accuracy, trained.nec);

    let reworded = paraphrase(&task.concepts, 0.1, 0)?;
    let (zero_shot, _) = evaluate_pool(&ckpt, &reworded, &task.test, WeightMode::Swap)?;
    println!("reworded, zero-shot accuracy {:.3}  NEC {}", zero_shot.accuracy, zero_shot.nec);

    let new_values = fresh_clip_values(&reworded, &task.train.clip)?;
    let tuned = finetune(
        &ckpt,
        &reworded,
        &HeadData {
            values: &new_values.values,
            labels: &task.train.labels,
            num_classes: task.train.num_classes,
        },
        new_values.stats,
        1,
        &cfg,
    )?
    .into_result()?
    .0;
    let (after, _) = evaluate_pool(&tuned, &reworded, &task.test, WeightMode::Swap)?;
    println!("reworded, 1 epoch   accuracy {:.3}  NEC {}", after.accuracy, after.nec);
    Ok(())
}
