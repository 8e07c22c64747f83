//! Both training stages on the planted-structure task: fit the projector to
//! CLIP-derived concept values, then train the hypernetwork head while the
//! temperature decays toward the NEC threshold.

use fcbm::hypernet::WeightMode;
use fcbm::pipeline::evaluate_pool;
use fcbm::projector::{clip_concept_features, project_concepts, train_projector, ProjectorConfig};
use fcbm::synthetic::{suite_config, SyntheticConfig, SyntheticTask};
use fcbm::trainer::{train_head, AblationMode, HeadData};

fn main() -> fcbm::Result<()> {
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
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
    println!("projector: final cos3 loss {:.4}", fit.losses.last().unwrap());

    let values = project_concepts(&fit.weights, &fit.stats, &task.train.backbone)?;
    let cfg = suite_config(seed, AblationMode::Full);
    let outcome = train_head(
        &HeadData {
            values: &values,
            labels: &task.train.labels,
            num_classes: task.train.num_classes,
        },
        &task.concepts,
        fit.stats.clone(),
        &cfg,
    )?;
    for r in outcome.log.records.iter().filter(|r| r.epoch % 100 == 0) {
        println!(
            "epoch {:>4}  loss {:.4}  acc {:.3}  NEC {:>5.2}  tau {:.4}  {}",
            r.epoch,
            r.loss,
            r.acc,
            r.nec,
            r.tau,
            if r.decay_active { "decaying" } else { "learned" }
        );
    }
    let (mut ckpt, _) = outcome.into_result()?;
    ckpt.projector = Some(fit.weights.round_to_f32());
    let (report, _) = evaluate_pool(&ckpt, &task.concepts, &task.test, WeightMode::Trained)?;
    println!("test accuracy {:.3}, NEC {}", report.accuracy, report.nec);
    Ok(())
}
