// Regenerates the checked-in fuzz corpus seeds from the real encoders.
use std::fs;
use std::path::Path;

use collagan::tensor::snapshot::Snapshot;
use collagan::tensor::Tensor;

fn main() {
    let corpus = Path::new("fuzz/corpus");

    let mut snap = Snapshot::new();
    snap.insert("g/enc/b0/l0/w1", Tensor::new(vec![2, 2], vec![0.5, -1.0, 0.25, 3.0]).unwrap());
    snap.insert("g/out/b", Tensor::scalar(0.125));
    fs::write(corpus.join("snapshot_decode/small_checkpoint.snap"), snap.to_bytes()).unwrap();
    fs::write(
        corpus.join("snapshot_decode/empty.snap"),
        Snapshot::new().to_bytes(),
    )
    .unwrap();
    let mut truncated = snap.to_bytes();
    truncated.truncate(truncated.len() / 2);
    fs::write(corpus.join("snapshot_decode/truncated.snap"), truncated).unwrap();

    let ds = collagan::phantom::generate_dataset(3, 1, 8, 8, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    collagan::phantom::save_dataset(&ds, dir.path()).unwrap();
    fs::copy(
        dir.path().join("manifest.txt"),
        corpus.join("manifest_parse/valid_manifest.txt"),
    )
    .unwrap();
    fs::write(
        corpus.join("manifest_parse/minimal.txt"),
        "collagan-dataset 1\nseed 0\nsize 8 8\ndomains a b\nsubject 0 slices 1 split train file s.snap\n",
    )
    .unwrap();
    fs::write(
        corpus.join("manifest_parse/bad_directive.txt"),
        "collagan-dataset 1\nvolume 3\n",
    )
    .unwrap();

    let cfg = collagan::trainer::TrainConfig::default();
    fs::write(corpus.join("config_parse/default_train.txt"), cfg.to_kv().to_text()).unwrap();
    fs::write(
        corpus.join("config_parse/sparse.txt"),
        "# just a seed override\nseed = 42\nsteps = 10\n",
    )
    .unwrap();
    println!("seeds written");
}
