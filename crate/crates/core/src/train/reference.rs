//! Single-threaded in-memory trainer with the same batch order and arithmetic
//! as a one-worker run at bound 0.

use std::collections::HashMap;

use crate::error::Result;
use crate::train::dataset::Dataset;
use crate::train::trainer::{compute_step, epoch_batches, model_of, BatchPlan, TrainerConfig, TrajectoryPoint};

pub fn serial_reference(ds: &Dataset, cfg: &TrainerConfig) -> Result<Vec<TrajectoryPoint>> {
    let cfg = TrainerConfig { workers: 1, ..cfg.clone() };
    cfg.validate()?;
    let model = model_of(ds);
    let mut w = model.init_nn(cfg.seed);
    let mut table: HashMap<u64, Vec<f32>> = HashMap::new();
    let mut out = Vec::with_capacity(cfg.epochs);
    let d = model.dim;
    for epoch in 0..cfg.epochs {
        for samples in epoch_batches(ds, &cfg, epoch) {
            let plan = BatchPlan::new(ds, samples);
            let mut rows = Vec::with_capacity(plan.keys.len() * d);
            for &k in &plan.keys {
                rows.extend_from_slice(table.entry(k).or_insert_with(|| model.init_embedding(cfg.seed, k)));
            }
            let (_, grads) = compute_step(&model, ds, &plan, &rows, &mut w, cfg.learning_rate);
            for (i, k) in plan.keys.iter().enumerate() {
                let v = table.get_mut(k).expect("row materialized above");
                for (x, g) in v.iter_mut().zip(&grads[i * d..(i + 1) * d]) {
                    *x += -cfg.learning_rate * g;
                }
            }
        }
        let mut embeddings: Vec<(u64, Vec<f32>)> = table.iter().map(|(k, v)| (*k, v.clone())).collect();
        embeddings.sort_unstable_by_key(|(k, _)| *k);
        out.push(TrajectoryPoint {
            epoch,
            w_nn: w.clone(),
            embeddings,
        });
    }
    Ok(out)
}
