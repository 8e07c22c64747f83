//! Which concepts drove a prediction: per-concept contributions
//! (standardized value × class weight) rendered as text bars, CSV and JSON.

use fcbm::metrics::{explain_sample, render_report, ReportFormat};
use fcbm::projector::{clip_concept_features, project_concepts, train_projector, ProjectorConfig};
use fcbm::synthetic::{suite_config, SyntheticConfig, SyntheticTask};
use fcbm::trainer::{train_head, AblationMode, HeadData};

fn main() -> fcbm::Result<()> {
    let task = SyntheticTask::generate(SyntheticConfig::default())?;
    let target = clip_concept_features(&task.train.clip, task.concepts.embeddings())?;
    let fit = train_projector(&task.train.backbone, &target, &task.concepts.fingerprint(), &ProjectorConfig::default())?;
    let values = project_concepts(&fit.weights, &fit.stats, &task.train.backbone)?;
    let (ckpt, _) = train_head(
        &HeadData {
            values: &values,
            labels: &task.train.labels,
            num_classes: task.train.num_classes,
        },
        &task.concepts,
        fit.stats.clone(),
        &suite_config(0, AblationMode::Full),
    )?
    .into_result()?;

    let test_values = project_concepts(&fit.weights, &fit.stats, &task.test.backbone)?;
    let raw = fit.weights.predict(&task.test.backbone)?;
    let reports = (0..3)
        .map(|i| {
            explain_sample(
                i,
                test_values.row(i),
                Some(raw.row(i)),
                &ckpt.weights,
                &ckpt.concepts,
                Some(task.test.labels[i]),
                5,
            )
        })
        .collect::<fcbm::Result<Vec<_>>>()?;

    print!("{}", render_report(&reports, ReportFormat::TextBars, 30)?);
    print!("{}", render_report(&reports[..1], ReportFormat::Csv, 0)?);
    print!("{}", render_report(&reports[..1], ReportFormat::Json, 0)?);
    Ok(())
}
