//! `pilight train --stage 1|2`: the two training stages (pretraining the
//! autoencoder on demand).

use pilight_core::difftoy::{train_stage1, train_stage2, Stage2Variant, TrainParams};
use pilight_core::losses::EdgeStructureExtractor;
use pilight_core::scenegen::Split;

use super::{load_or_train_ae, load_records, split_records, stage1_checkpoint_path, stage2_checkpoint_path, write_jsonl};
use crate::config::RunConfig;
use crate::CliError;

pub fn run(cfg: &RunConfig, stage: u8) -> Result<(), CliError> {
    if stage != 1 && stage != 2 {
        return Err(CliError::Usage(format!("stage must be 1 or 2, got {stage}")));
    }
    let records = load_records(&cfg.train.dataset)?;
    let train = split_records(&records, Split::Train);
    if train.is_empty() {
        return Err(CliError::Data("dataset has no train split".into()));
    }
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Data(format!("create {}: {e}", cfg.out.display())))?;
    let ae = load_or_train_ae(cfg, &train)?;
    let dcfg = cfg.train.denoiser_config();

    match stage {
        1 => {
            let params = TrainParams {
                steps: cfg.train.steps_stage1,
                lr: cfg.train.lr,
                seed: cfg.seed,
                p_uncond: cfg.train.p_uncond,
                log_every: cfg.train.log_every,
            };
            println!("stage 1: {} steps on {} records", params.steps, train.len());
            let (model, logs) = train_stage1(&train, &ae, &dcfg, &params)?;
            model.save(&stage1_checkpoint_path(&cfg.out))?;
            write_jsonl(&cfg.out.join("stage1_log.jsonl"), &logs)?;
            let last = logs.last().expect("training logs");
            println!("stage 1 done; final v-pred loss {:.5}", last.l_vpred);
        }
        _ => {
            let params = TrainParams {
                steps: cfg.train.steps_stage2,
                lr: cfg.train.lr,
                seed: cfg.seed,
                p_uncond: cfg.train.p_uncond,
                log_every: cfg.train.log_every,
            };
            let mut ae = ae;
            let extractor = EdgeStructureExtractor::default();
            println!("stage 2: {} steps on {} records", params.steps, train.len());
            let (model, logs) = train_stage2(
                &train,
                &mut ae,
                &dcfg,
                &cfg.train.weights,
                &params,
                Stage2Variant::ThreeSlot,
                &extractor,
            )?;
            model.save(&stage2_checkpoint_path(&cfg.out))?;
            write_jsonl(&cfg.out.join("stage2_log.jsonl"), &logs)?;
            let last = logs.last().expect("training logs");
            println!("stage 2 done; final total loss {:.5}", last.total);
        }
    }
    cfg.write_resolved(&cfg.out)?;
    Ok(())
}
