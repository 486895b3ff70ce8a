pub mod ablate;
pub mod eval;
pub mod gen;
pub mod relight;
pub mod train;

use std::path::{Path, PathBuf};

use pilight_core::difftoy::{train_autoencoder, AeConfig, ToyAutoencoder};
use pilight_core::image::{downsample_area, Image};
use pilight_core::scenegen::{read_dataset, DatasetRecord, Split};

use crate::config::RunConfig;
use crate::CliError;

pub fn ae_checkpoint_path(out: &Path) -> PathBuf {
    out.join("ae.ckpt")
}
pub fn stage1_checkpoint_path(out: &Path) -> PathBuf {
    out.join("stage1.ckpt")
}
pub fn stage2_checkpoint_path(out: &Path) -> PathBuf {
    out.join("stage2.ckpt")
}

pub fn load_records(dataset: &Path) -> Result<Vec<DatasetRecord>, CliError> {
    let (records, _) = read_dataset(dataset)?;
    if records.is_empty() {
        return Err(CliError::Data(format!("dataset {} has no records", dataset.display())));
    }
    Ok(records)
}

pub fn split_records(records: &[DatasetRecord], split: Split) -> Vec<DatasetRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

pub fn parse_split(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "object_test" => Ok(Split::ObjectTest),
        "scene_test" => Ok(Split::SceneTest),
        other => Err(CliError::Usage(format!(
            "unknown split {other:?}; expected train, object_test or scene_test"
        ))),
    }
}

/// Every image kind the pipeline ever encodes, so the autoencoder sees the
/// full statistics during pretraining.
pub fn ae_corpus(records: &[DatasetRecord]) -> Result<Vec<Image>, CliError> {
    let mut corpus = Vec::with_capacity(records.len() * 9);
    for rec in records {
        let res = rec.input_image.height();
        let ball_img = if rec.ball.size() == res {
            rec.ball.image().clone()
        } else {
            downsample_area(rec.ball.image(), rec.ball.size() / res)?
        };
        corpus.push(rec.input_image.clone());
        corpus.push(rec.intrinsics.albedo.clone());
        corpus.push(rec.intrinsics.normal.image().clone());
        corpus.push(rec.intrinsics.roughness.replicate(3)?);
        corpus.push(rec.intrinsics.metallic.replicate(3)?);
        corpus.push(rec.intrinsics.mask.replicate(3)?);
        corpus.push(rec.diffuse_gt.clone());
        corpus.push(rec.specular_gt.clone());
        corpus.push(ball_img);
    }
    Ok(corpus)
}

/// Load the autoencoder checkpoint, or pretrain and save it when absent.
pub fn load_or_train_ae(
    cfg: &RunConfig,
    records: &[DatasetRecord],
) -> Result<ToyAutoencoder, CliError> {
    let path = ae_checkpoint_path(&cfg.out);
    if path.is_file() {
        return Ok(ToyAutoencoder::load(&path)?);
    }
    let corpus = ae_corpus(records)?;
    let ae_cfg = AeConfig { c1: cfg.train.ae_c1, c2: cfg.train.ae_c2, latent_ch: 4 };
    println!(
        "pretraining autoencoder: {} steps on {} images",
        cfg.train.ae_steps,
        corpus.len()
    );
    let ae = train_autoencoder(&corpus, ae_cfg, cfg.train.ae_steps, cfg.train.ae_lr, cfg.seed)?;
    std::fs::create_dir_all(&cfg.out)
        .map_err(|e| CliError::Data(format!("create {}: {e}", cfg.out.display())))?;
    ae.save(&path)?;
    Ok(ae)
}

pub fn write_jsonl<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).expect("log row serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::Data(format!("write {}: {e}", path.display())))
}
