//! `pilight gen`: procedural dataset generation.

use rayon::prelude::*;

use pilight_core::scenegen::{dataset_scene_plan, scene_records, write_dataset, DatasetRecord};

use crate::config::RunConfig;
use crate::CliError;

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let dataset_cfg = cfg.gen.dataset_config(cfg.seed);
    let plan = dataset_scene_plan(&dataset_cfg);
    // Scenes derive independent substreams, so parallel generation is
    // byte-identical to sequential.
    let per_scene: Vec<Result<Vec<DatasetRecord>, pilight_core::Error>> = plan
        .par_iter()
        .map(|&(scene_id, split)| scene_records(&dataset_cfg, scene_id, split))
        .collect();
    let mut records = Vec::new();
    for r in per_scene {
        records.extend(r?);
    }

    let root = cfg.out.join("dataset");
    std::fs::create_dir_all(&root)
        .map_err(|e| CliError::Data(format!("create {}: {e}", root.display())))?;
    let manifest = write_dataset(&records, &root, cfg.seed)?;
    cfg.write_resolved(&cfg.out)?;
    println!(
        "wrote {} records ({} scenes x {} views x {} lights) to {}",
        manifest.records.len(),
        plan.len(),
        cfg.gen.views,
        cfg.gen.lights,
        root.display()
    );
    Ok(())
}
