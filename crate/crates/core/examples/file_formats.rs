//! Writing and reading every on-disk format: FCBT tensors, concept pools
//! (names file plus embeddings), label files, dataset manifests and the
//! FCBM container used for projectors and checkpoints.

use fcbm::io::{
    default_embeddings_path, fingerprint, load_concept_set, read_labels, read_tensor, write_concept_set,
    write_labels, write_tensor, ConceptSet, Container, DatasetManifest, Tensor,
};
use fcbm::numeric::Matrix;
use serde_json::json;

fn main() -> fcbm::Result<()> {
    let dir = std::env::temp_dir().join(format!("fcbm-formats-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| fcbm::FcbmError::io(&dir, e))?;

    let t = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0])?;
    let path = dir.join("t.fcbt");
    write_tensor(&t, &path)?;
    let bytes = t.to_bytes();
    println!("FCBT 2x2: {} bytes, header {:02x?}", bytes.len(), &bytes[..24]);
    assert!(read_tensor(&path)?.bit_eq(&t));

    let names = vec!["red wings".to_string(), "long beak".to_string(), "webbed feet".to_string()];
    let pool = ConceptSet::new(names.clone(), Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 / 8.0))?;
    let names_path = dir.join("birds.txt");
    write_concept_set(&pool, &names_path, default_embeddings_path(&names_path))?;
    let back = load_concept_set(&names_path, default_embeddings_path(&names_path))?;
    println!("pool fingerprint {} (matches: {})", back.fingerprint(), back.fingerprint() == fingerprint(&names));

    let labels_path = dir.join("labels.txt");
    write_labels(&[0, 2, 1], &labels_path)?;
    println!("labels {:?}", read_labels(&labels_path)?);

    let manifest = DatasetManifest {
        split: "train".into(),
        backbone_features: "backbone.fcbt".into(),
        clip_features: "clip.fcbt".into(),
        labels: "labels.txt".into(),
        num_classes: 3,
    };
    println!("manifest {}", serde_json::to_string(&manifest).expect("serializes"));

    let c = Container {
        kind: "demo".into(),
        meta: json!({ "note": "any JSON" }),
        blobs: vec![("weights".into(), Matrix::identity(2))],
    };
    let decoded = Container::from_bytes(&c.to_bytes())?;
    println!("container kind {:?}, blob {:?}", decoded.kind, decoded.blob("weights")?.shape());

    match Tensor::from_bytes(b"NOPE\x01\x00\x00\x00") {
        Err(e) => println!("corrupt input -> error({}): {e}", e.kind()),
        Ok(_) => unreachable!(),
    }
    let _ = std::fs::remove_dir_all(&dir);
    Ok(())
}
