use std::path::PathBuf;

use flowr_core::checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
use flowr_core::crp::CrpParams;
use flowr_core::data::{generate_synthetic_world, read_dataset, write_dataset};
use flowr_core::encoder::{ClassEmbeddings, Encoder};
use flowr_core::gaussian::NoiseModel;
use flowr_core::meta::MetaParams;
use flowr_core::metrics::{ranking_flip_search, RankingFlip};

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests")
        .join("fixtures")
        .join(name)
}

/// The search output is stored in the repository; a fresh search with the
/// same seed must reproduce it exactly. Delete the file to regenerate it.
#[test]
fn ranking_flip_matches_fixture() {
    let found = ranking_flip_search(2024, 10_000).unwrap().found.expect("flip found");
    let path = fixture("ranking_flip.json");
    if !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(&found).unwrap()).unwrap();
    }
    let stored: RankingFlip = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(stored, found);
    assert_eq!(
        (stored.auroc_first - stored.auroc_second).signum(),
        -(stored.h_first - stored.h_second).signum()
    );
}

#[test]
fn large_context_checkpoint_replays_predictions() {
    let emb = ClassEmbeddings::new(vec![vec![0.0, 0.0], vec![4.0, 0.0]], vec![0.25, 0.25]).unwrap();
    let crp = CrpParams::with_b(0.5, 1.0).unwrap().with_empty_class_mass(1e-3);
    let params = MetaParams::large_context(Encoder::identity(2), &emb, crp, NoiseModel::new(0.5).unwrap()).unwrap();
    let ck = Checkpoint::new(params, Some(emb), None);
    let back = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();

    let mut a = ck.params.large_context_state().unwrap();
    let mut b = back.params.large_context_state().unwrap();
    for (i, x) in [[0.1, -0.2], [3.9, 0.3], [-6.0, 5.0], [-6.1, 5.2]].iter().enumerate() {
        let (pa, pb) = (a.predict(x).unwrap(), b.predict(x).unwrap());
        assert_eq!(pa, pb, "query {i}");
        let y = if i == 2 {
            a.n_classes() + 1
        } else {
            pa.known_argmax.unwrap()
        };
        a.update(x, y).unwrap();
        b.update(x, y).unwrap();
    }
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.fse");
    let world = generate_synthetic_world(5, 4, 25.0, 0.5, 6, 1).unwrap();
    write_dataset(&path, &world.dataset).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), world.dataset);
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 20 + 30 * (4 + 16));
}
