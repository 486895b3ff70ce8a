//! Metric tables and scoring for the evaluation harness: PSNR / SSIM per
//! intrinsic, normal mean-angular-error percent-within thresholds, and
//! relighting quality over record pairs.

use serde::{Deserialize, Serialize};

use crate::difftoy::{
    relight, relight_no_decomposition, sample_stage1, CrossBatchDenoiser, Stage2Variant,
    ToyAutoencoder,
};
use crate::error::Result;
use crate::image::{psnr, ssim, Image, NormalMap};
use crate::scenegen::DatasetRecord;

pub const MAE_THRESHOLDS_DEG: [f64; 3] = [11.25, 22.5, 30.0];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub split: String,
    /// Peak signal-to-noise ratio; identical images serialize as null
    /// (the +infinity sentinel has no JSON encoding).
    pub psnr: f64,
    pub ssim: f64,
    /// Percent of pixels within 11.25 / 22.5 / 30 degrees, normals only.
    pub mae_within: Option<[f64; 3]>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric table serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<28} {:<12} {:>8} {:>8} {:>24}\n",
            "method", "split", "PSNR", "SSIM", "MAE@11.25/22.5/30"
        ));
        for r in &self.rows {
            let psnr_s =
                if r.psnr.is_infinite() { "inf".to_string() } else { format!("{:.2}", r.psnr) };
            let mae_s = match r.mae_within {
                Some(m) => format!("{:.1}% {:.1}% {:.1}%", m[0], m[1], m[2]),
                None => "-".to_string(),
            };
            out.push_str(&format!(
                "{:<28} {:<12} {:>8} {:>8.4} {:>24}\n",
                r.method, r.split, psnr_s, r.ssim, mae_s
            ));
        }
        out
    }

    /// Threshold monotonicity: percent-within must not decrease with the
    /// threshold.
    pub fn mae_monotone(&self) -> bool {
        self.rows.iter().all(|r| match r.mae_within {
            Some(m) => m[0] <= m[1] + 1e-9 && m[1] <= m[2] + 1e-9,
            None => true,
        })
    }
}

/// Percent of masked pixels whose predicted normal lies within each
/// threshold of the ground truth. Predicted vectors are renormalized.
pub fn normal_mae_within(pred: &NormalMap, gt: &NormalMap, mask: &Image) -> Option<[f64; 3]> {
    let (h, w) = (gt.height(), gt.width());
    let mut counts = [0usize; 3];
    let mut total = 0usize;
    for y in 0..h {
        for x in 0..w {
            if mask.get(0, y, x) <= 0.5 {
                continue;
            }
            let g = gt.vector(y, x);
            let mut p = pred.vector(y, x);
            let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
            if norm > 1e-6 {
                for v in p.iter_mut() {
                    *v /= norm;
                }
            }
            let dot = (p[0] * g[0] + p[1] * g[1] + p[2] * g[2]).clamp(-1.0, 1.0);
            let angle = (dot as f64).acos().to_degrees();
            total += 1;
            for (i, &th) in MAE_THRESHOLDS_DEG.iter().enumerate() {
                if angle <= th {
                    counts[i] += 1;
                }
            }
        }
    }
    if total == 0 {
        return None;
    }
    Some([
        100.0 * counts[0] as f64 / total as f64,
        100.0 * counts[1] as f64 / total as f64,
        100.0 * counts[2] as f64 / total as f64,
    ])
}

/// PSNR capped for averaging (identical images would otherwise poison the
/// mean with infinity).
fn capped_psnr(a: &Image, b: &Image, peak: f32) -> Result<f64> {
    Ok(psnr(a, b, peak)?.min(60.0))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalSettings {
    pub cfg_scale_stage1: f64,
    pub cfg_scale_stage2: f64,
    pub ddim_steps: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings { cfg_scale_stage1: 1.0, cfg_scale_stage2: 1.5, ddim_steps: 10, seed: 42 }
    }
}

/// Per-intrinsic metrics of a stage-1 model over records, plus the albedo
/// PSNR alone (the quantity the guidance-scale sweep tracks).
pub struct Stage1Scores {
    pub table: MetricTable,
    pub albedo_psnr: f64,
    pub normal_within30: f64,
}

pub fn eval_stage1(
    model: &CrossBatchDenoiser,
    ae: &ToyAutoencoder,
    records: &[DatasetRecord],
    split: &str,
    settings: &EvalSettings,
) -> Result<Stage1Scores> {
    let mut acc = [[0.0f64; 2]; 4]; // psnr, ssim per intrinsic
    let mut mae_acc = [0.0f64; 3];
    let mut mae_n = 0usize;
    for (i, rec) in records.iter().enumerate() {
        let pred = sample_stage1(
            model,
            ae,
            &rec.input_image,
            settings.cfg_scale_stage1,
            settings.ddim_steps,
            settings.seed ^ (i as u64).wrapping_mul(0x9E37_79B9),
        )?;
        let pairs: [(&Image, &Image); 4] = [
            (&pred.albedo, &rec.intrinsics.albedo),
            (pred.normal.image(), rec.intrinsics.normal.image()),
            (&pred.roughness, &rec.intrinsics.roughness),
            (&pred.metallic, &rec.intrinsics.metallic),
        ];
        for (k, (p, g)) in pairs.iter().enumerate() {
            acc[k][0] += capped_psnr(p, g, 1.0)?;
            acc[k][1] += ssim(p, g)?;
        }
        if let Some(m) = normal_mae_within(&pred.normal, &rec.intrinsics.normal, &rec.intrinsics.mask)
        {
            for k in 0..3 {
                mae_acc[k] += m[k];
            }
            mae_n += 1;
        }
    }
    let n = records.len() as f64;
    let names = ["albedo", "normal", "roughness", "metallic"];
    let mut table = MetricTable::default();
    for (k, name) in names.iter().enumerate() {
        let mae = if k == 1 && mae_n > 0 {
            Some([
                mae_acc[0] / mae_n as f64,
                mae_acc[1] / mae_n as f64,
                mae_acc[2] / mae_n as f64,
            ])
        } else {
            None
        };
        table.rows.push(MetricRow {
            method: format!("stage1/{name}"),
            split: split.to_string(),
            psnr: acc[k][0] / n,
            ssim: acc[k][1] / n,
            mae_within: mae,
        });
    }
    Ok(Stage1Scores {
        albedo_psnr: acc[0][0] / n,
        normal_within30: if mae_n > 0 { mae_acc[2] / mae_n as f64 } else { 0.0 },
        table,
    })
}

/// Mean relighting quality over cross-lighting pairs: each record is
/// relit toward every sibling target and compared against the sibling's
/// ground-truth image.
pub fn eval_relight(
    model: &CrossBatchDenoiser,
    ae: &ToyAutoencoder,
    records: &[DatasetRecord],
    variant: Stage2Variant,
    settings: &EvalSettings,
) -> Result<(f64, f64)> {
    let mut psnr_acc = 0.0f64;
    let mut ssim_acc = 0.0f64;
    let mut n = 0usize;
    for (i, rec) in records.iter().enumerate() {
        for target in &rec.relit_targets {
            let seed = settings.seed ^ ((i as u64) << 8) ^ target.light as u64;
            let out = match variant {
                Stage2Variant::ThreeSlot => {
                    relight(
                        model,
                        ae,
                        &rec.input_image,
                        &rec.intrinsics,
                        &target.ball,
                        settings.cfg_scale_stage2,
                        settings.ddim_steps,
                        seed,
                    )?
                    .relit
                }
                Stage2Variant::NoDecomposition => relight_no_decomposition(
                    model,
                    ae,
                    &rec.input_image,
                    &target.ball,
                    settings.cfg_scale_stage2,
                    settings.ddim_steps,
                    seed,
                )?,
            };
            psnr_acc += capped_psnr(&out, &target.image, 1.0)?;
            ssim_acc += ssim(&out, &target.image)?;
            n += 1;
        }
    }
    if n == 0 {
        return Err(crate::error::Error::MissingData("no relighting pairs in split".into()));
    }
    Ok((psnr_acc / n as f64, ssim_acc / n as f64))
}

/// The constant predictor baseline: dataset-mean albedo scored against
/// each record.
pub fn constant_albedo_baseline(train: &[DatasetRecord], test: &[DatasetRecord]) -> Result<f64> {
    let first = &train[0].intrinsics.albedo;
    let mut mean = Image::new(first.channels(), first.height(), first.width(), first.color_space());
    for rec in train {
        for (m, &v) in mean.data_mut().iter_mut().zip(rec.intrinsics.albedo.data().iter()) {
            *m += v / train.len() as f32;
        }
    }
    let mut acc = 0.0;
    for rec in test {
        acc += capped_psnr(&mean, &rec.intrinsics.albedo, 1.0)?;
    }
    Ok(acc / test.len() as f64)
}
