//! Writes the planted-structure task to a directory so the `fcbm` binary can
//! be driven against it.
//!
//! ```text
//! cargo run --example write_synthetic -- /tmp/fcbm-demo 0
//! ```
//!
//! Produces `train.json`, `test.json` (manifests with their tensors and
//! labels), `concepts.txt`/`concepts.fcbt`, and a reworded pool
//! `reworded.txt`/`reworded.fcbt` for concept-swap experiments.

use std::path::PathBuf;

use fcbm::io::{default_embeddings_path, write_concept_set};
use fcbm::synthetic::{paraphrase, SyntheticConfig, SyntheticTask};

fn main() -> fcbm::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "fcbm-demo".into()));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));

    let task = SyntheticTask::generate(SyntheticConfig {
        seed,
        ..Default::default()
    })?;
    let files = task.write(&dir)?;
    let reworded = dir.join("reworded.txt");
    write_concept_set(
        &paraphrase(&task.concepts, 0.1, seed)?,
        &reworded,
        default_embeddings_path(&reworded),
    )?;

    println!("train manifest  {}", files.train_manifest.display());
    println!("test manifest   {}", files.test_manifest.display());
    println!("concepts        {}", files.concepts.display());
    println!("reworded pool   {}", reworded.display());
    Ok(())
}
