use serde::{Deserialize, Serialize};

use super::{evaluate, mean_std, EvalReport, CSV_HEADER};
use crate::data::Dataset;
use crate::error::{CladError, Result};
use crate::model::{Config, EncoderKind};
use crate::training::{default_pretrain, fit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoContrastive,
    NoFinetune,
    ShallowEncoder,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Full,
        Variant::NoContrastive,
        Variant::NoFinetune,
        Variant::ShallowEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoContrastive => "no_contrastive",
            Variant::NoFinetune => "no_finetune",
            Variant::ShallowEncoder => "shallow_encoder",
        }
    }

    pub fn apply(self, config: &Config) -> Config {
        let mut c = config.clone();
        match self {
            Variant::Full => {}
            Variant::NoContrastive => c.contrastive = false,
            Variant::NoFinetune => c.epochs_finetune = 0,
            Variant::ShallowEncoder => c.encoder = EncoderKind::Shallow,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    /// One report per seed, in seed order.
    pub reports: Vec<EvalReport>,
    pub image_auc: (f64, f64),
    pub pixel_auc: (f64, f64),
    pub iou: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub seeds: Vec<u64>,
    pub variants: Vec<VariantSummary>,
}

impl AblationResult {
    pub fn variant(&self, v: Variant) -> &VariantSummary {
        self.variants.iter().find(|s| s.variant == v).expect("every variant is present")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("ablation serializes");
        s.push('\n');
        s
    }

    /// One row per variant: means and sample deviations over seeds.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for v in &self.variants {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                v.variant.name(),
                v.image_auc.0,
                v.image_auc.1,
                v.pixel_auc.0,
                v.pixel_auc.1,
                v.iou.0
            ));
        }
        out
    }
}

/// [`ablate_with`] using synthetic pretraining sets derived from each seed.
pub fn ablate(config: &Config, data: &Dataset, seeds: &[u64]) -> Result<AblationResult> {
    ablate_with(config, data, seeds, |seed| default_pretrain(seed, data), |_, _| {})
}

/// Trains and evaluates every variant once per seed.
pub fn ablate_with(
    config: &Config,
    data: &Dataset,
    seeds: &[u64],
    pretrain: impl Fn(u64) -> Result<Vec<Dataset>>,
    mut progress: impl FnMut(Variant, &EvalReport),
) -> Result<AblationResult> {
    if seeds.len() < 2 {
        return Err(CladError::usage("ablation needs at least two seeds"));
    }
    let mut runs: Vec<Vec<EvalReport>> = vec![Vec::new(); Variant::ALL.len()];
    for &seed in seeds {
        let pre = pretrain(seed)?;
        for (k, variant) in Variant::ALL.into_iter().enumerate() {
            let mut c = variant.apply(config);
            c.seed = seed;
            let state = fit(&c, &pre, data)?;
            let report = evaluate(&state.params, data, &state.config)?;
            progress(variant, &report);
            runs[k].push(report);
        }
    }
    let variants = Variant::ALL
        .into_iter()
        .zip(runs)
        .map(|(variant, reports)| {
            let stat = |f: fn(&EvalReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
            VariantSummary {
                variant,
                image_auc: stat(|r| r.image_auc),
                pixel_auc: stat(|r| r.pixel_auc),
                iou: stat(|r| r.iou),
                reports,
            }
        })
        .collect();
    Ok(AblationResult {
        seeds: seeds.to_vec(),
        variants,
    })
}
