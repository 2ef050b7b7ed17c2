//! Regenerates the bundled classifier checkpoints and the sparsity input.
//!
//! Usage: `cargo run --release -p adderkit --example bundle_assets [assets-dir]`

use std::path::PathBuf;

use adderkit::trainer::classifier::{probe_batch, Arch};
use adderkit::trainer::{run_experiment, ExperimentConfig, Task};

fn main() -> adderkit::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../assets"));
    std::fs::create_dir_all(root.join("checkpoints"))?;
    std::fs::create_dir_all(root.join("inputs"))?;
    for arch in [Arch::Adder, Arch::Conv] {
        let cfg = ExperimentConfig { task: Task::Pretrain, arch, ..Default::default() };
        let report = run_experiment(&cfg)?;
        let path = root.join(format!("checkpoints/classifier_{arch}.ckpt"));
        report.checkpoint.as_ref().expect("pretrain yields weights").save(&path)?;
        print!("{}\n{}", path.display(), report.summary());
    }
    let path = root.join("inputs/cluster_batch.adt4");
    probe_batch(64)?.save(&path)?;
    println!("{}", path.display());
    Ok(())
}
