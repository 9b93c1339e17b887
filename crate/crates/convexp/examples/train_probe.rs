//! Scratch probe (temporary).
use convexp::commands::*;
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let iters: usize = args[1].parse().unwrap();
    let lr: f64 = args[2].parse().unwrap();
    let dataset = DatasetId::parse(&args[3]).unwrap();
    let model = ModelPreset::parse(&args[4]).unwrap();
    let seed: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(0);
    let dir = std::env::temp_dir().join(format!("probe_{}_{}_{}_{}", dataset.name(), model.name(), iters, seed));
    let mut cfg = TrainConfig::new(dataset, model, dir);
    cfg.iters = iters; cfg.learning_rate = lr; cfg.seed = seed;
    cfg.val_every = 2000; cfg.val_samples = 2048; cfg.final_samples = 8192;
    let t0 = std::time::Instant::now();
    match cmd_train(&cfg) {
        Ok(r) => println!("{} {} seed={} iters={}: final NLL {:.4} ({:.0}s)", dataset.name(), model.name(), seed, iters, r.final_per_node_nll, t0.elapsed().as_secs_f64()),
        Err(e) => println!("FAILED seed={seed}: {e}"),
    }
}
