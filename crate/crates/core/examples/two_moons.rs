//! Trains the reference two-moons model and prints its accuracies.
//!
//! `cargo run --release -p lipforge-core --example two_moons -- [offset] [noise] [lr] [samples]`

use std::time::Instant;

use lipforge_core::trainer::{evaluate, make_two_moons, train, SllModel, TrainConfig};

fn main() -> lipforge_core::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).map(|a| a.parse().expect("arguments must be numbers")).collect();
    let mut cfg = TrainConfig::default();
    cfg.offset = args.first().copied().unwrap_or(cfg.offset);
    let noise = args.get(1).copied().unwrap_or(0.1);
    cfg.lr = args.get(2).copied().unwrap_or(cfg.lr);
    let samples = args.get(3).map(|v| *v as usize).unwrap_or(1000);
    let data = make_two_moons(samples, noise, cfg.seed)?;
    let start = Instant::now();
    let model = SllModel::init(data.input_dim(), data.num_classes, &cfg.model, cfg.seed)?;
    let out = train(model, &data, &cfg)?;
    let (x, y) = data.test();
    let (nat, report) = evaluate(&out.network, &x, &y, &[0.05, 0.1, 0.2, 0.5, 1.0])?;
    println!("offset {:.4} noise {noise} lr {} n {samples}  natural {nat:.4}  elapsed {:.1?}", cfg.offset, cfg.lr, start.elapsed());
    for (r, acc) in report.radii_grid.iter().zip(&report.certified_accuracy) {
        println!("  certified at {r}: {acc:.4}");
    }
    Ok(())
}
