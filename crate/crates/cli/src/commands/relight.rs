//! `pilight relight`: relight one image under a new gray-ball condition.
//! Runs stage 1 first when no intrinsics are supplied.

use std::path::Path;

use pilight_core::difftoy::{relight, sample_stage1, CrossBatchDenoiser, ToyAutoencoder};
use pilight_core::image::{ColorSpace, NormalMap};
use pilight_core::io::{read_pfm, read_png, write_pfm, write_png};
use pilight_core::lighting::GrayBall;
use pilight_core::shading::IntrinsicSet;

use super::{ae_checkpoint_path, stage1_checkpoint_path, stage2_checkpoint_path};
use crate::config::RunConfig;
use crate::CliError;

pub struct RelightArgs<'a> {
    pub input: &'a Path,
    pub ball: &'a Path,
    pub intrinsics: Option<&'a Path>,
    pub cfg_scale: Option<f64>,
}

fn read_intrinsics(dir: &Path) -> Result<IntrinsicSet, CliError> {
    Ok(IntrinsicSet {
        albedo: read_png(&dir.join("albedo.png"), ColorSpace::Linear)?,
        normal: NormalMap::from_image(
            read_pfm(&dir.join("normal.pfm"))?.with_color_space(ColorSpace::Data),
        )?,
        roughness: read_png(&dir.join("roughness.png"), ColorSpace::Data)?,
        metallic: read_png(&dir.join("metallic.png"), ColorSpace::Data)?,
        mask: read_png(&dir.join("mask.png"), ColorSpace::Data)?
            .map(|v| if v > 0.5 { 1.0 } else { 0.0 }),
    })
}

pub fn run(cfg: &RunConfig, args: &RelightArgs) -> Result<(), CliError> {
    let ckpt_dir = &cfg.relight.checkpoints;
    let ae = ToyAutoencoder::load(&ae_checkpoint_path(ckpt_dir))?;
    let stage2 = CrossBatchDenoiser::load(&stage2_checkpoint_path(ckpt_dir))?;

    let input = read_png(args.input, ColorSpace::Linear)?;
    let ball = GrayBall::from_image(read_pfm(args.ball)?)?;
    let out_dir = cfg.out.join("relight");
    std::fs::create_dir_all(&out_dir)
        .map_err(|e| CliError::Data(format!("create {}: {e}", out_dir.display())))?;

    let intrinsics = match args.intrinsics {
        Some(dir) => read_intrinsics(dir)?,
        None => {
            // Inverse rendering first, forward rendering second.
            let stage1 = CrossBatchDenoiser::load(&stage1_checkpoint_path(ckpt_dir))?;
            let pred = sample_stage1(
                &stage1,
                &ae,
                &input,
                cfg.relight.stage1_cfg_scale,
                cfg.relight.ddim_steps,
                cfg.seed,
            )?;
            write_png(&out_dir.join("albedo.png"), &pred.albedo)?;
            write_pfm(&out_dir.join("normal.pfm"), pred.normal.image())?;
            write_png(&out_dir.join("roughness.png"), &pred.roughness)?;
            write_png(&out_dir.join("metallic.png"), &pred.metallic)?;
            let mask = pilight_core::image::Image::filled(
                1,
                input.height(),
                input.width(),
                1.0,
                ColorSpace::Data,
            );
            IntrinsicSet {
                albedo: pred.albedo,
                normal: pred.normal,
                roughness: pred.roughness,
                metallic: pred.metallic,
                mask,
            }
        }
    };

    let cfg_scale = args.cfg_scale.unwrap_or(cfg.relight.cfg_scale);
    let out = relight(
        &stage2,
        &ae,
        &input,
        &intrinsics,
        &ball,
        cfg_scale,
        cfg.relight.ddim_steps,
        cfg.seed,
    )?;
    write_png(&out_dir.join("relit.png"), &out.relit)?;
    write_pfm(&out_dir.join("relit.pfm"), &out.relit)?;
    write_pfm(&out_dir.join("diffuse.pfm"), &out.diffuse)?;
    write_pfm(&out_dir.join("specular.pfm"), &out.specular)?;
    cfg.write_resolved(&cfg.out)?;
    println!("relit image written to {}", out_dir.display());
    Ok(())
}
