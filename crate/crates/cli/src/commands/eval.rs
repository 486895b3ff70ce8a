//! `pilight eval`: score checkpoints on a dataset split (intrinsics plus
//! relighting) into JSON and aligned-text tables.

use pilight_core::difftoy::{CrossBatchDenoiser, Stage2Variant, ToyAutoencoder};
use pilight_core::eval::{constant_albedo_baseline, eval_relight, eval_stage1, EvalSettings, MetricRow, MetricTable};
use pilight_core::scenegen::Split;

use super::{ae_checkpoint_path, load_records, parse_split, split_records, stage1_checkpoint_path, stage2_checkpoint_path};
use crate::config::RunConfig;
use crate::CliError;

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let split = parse_split(&cfg.eval.split)?;
    let records = load_records(&cfg.eval.dataset)?;
    let mut test = split_records(&records, split);
    if test.is_empty() {
        return Err(CliError::Data(format!("split {:?} is empty", cfg.eval.split)));
    }
    if cfg.eval.max_records > 0 && test.len() > cfg.eval.max_records {
        test.truncate(cfg.eval.max_records);
    }
    let train = split_records(&records, Split::Train);

    let ckpt_dir = &cfg.eval.checkpoints;
    let ae = ToyAutoencoder::load(&ae_checkpoint_path(ckpt_dir))?;
    let settings = EvalSettings {
        cfg_scale_stage1: cfg.eval.cfg_scale_stage1,
        cfg_scale_stage2: cfg.eval.cfg_scale_stage2,
        ddim_steps: cfg.eval.ddim_steps,
        seed: cfg.seed,
    };

    let mut table = MetricTable::default();
    let stage1_path = stage1_checkpoint_path(ckpt_dir);
    if stage1_path.is_file() {
        let stage1 = CrossBatchDenoiser::load(&stage1_path)?;
        let scores = eval_stage1(&stage1, &ae, &test, &cfg.eval.split, &settings)?;
        table.rows.extend(scores.table.rows);
        if !train.is_empty() {
            table.rows.push(MetricRow {
                method: "baseline/mean-albedo".into(),
                split: cfg.eval.split.clone(),
                psnr: constant_albedo_baseline(&train, &test)?,
                ssim: 0.0,
                mae_within: None,
            });
        }
    }
    let stage2_path = stage2_checkpoint_path(ckpt_dir);
    if stage2_path.is_file() {
        let stage2 = CrossBatchDenoiser::load(&stage2_path)?;
        let (psnr, ssim) = eval_relight(&stage2, &ae, &test, Stage2Variant::ThreeSlot, &settings)?;
        table.rows.push(MetricRow {
            method: "stage2/relight".into(),
            split: cfg.eval.split.clone(),
            psnr,
            ssim,
            mae_within: None,
        });
    }
    if table.rows.is_empty() {
        return Err(CliError::Data(format!(
            "no checkpoints found under {}",
            ckpt_dir.display()
        )));
    }
    debug_assert!(table.mae_monotone());

    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Data(format!("create {}: {e}", cfg.out.display())))?;
    std::fs::write(cfg.out.join("metrics.json"), table.to_json())
        .map_err(|e| CliError::Data(format!("write metrics.json: {e}")))?;
    std::fs::write(cfg.out.join("metrics.txt"), table.to_text())
        .map_err(|e| CliError::Data(format!("write metrics.txt: {e}")))?;
    cfg.write_resolved(&cfg.out)?;
    print!("{}", table.to_text());
    Ok(())
}
