//! Central finite-difference check of the analytic gradients.

use rand::seq::index::sample as sample_indices;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{batch_gradients, batch_loss, forward_sample, AlignmentModel, ModelConfig, Sample};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Coordinates whose perturbation brings a selection gap below this value
    /// (or flips a selection) are skipped.
    pub boundary_margin: f64,
    /// Denominator floor for the relative error, so gradients that are zero
    /// up to rounding do not blow it up.
    pub abs_floor: f64,
    /// Check a random subset of this many coordinates instead of all.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            boundary_margin: 1e-6,
            abs_floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the largest error, as `name[index]`.
    pub worst: Option<String>,
    pub checked: usize,
    pub skipped: usize,
}

type Selection = Vec<Vec<(usize, Vec<usize>)>>;

fn selections(model: &AlignmentModel, cfg: &ModelConfig, samples: &[Sample]) -> Result<(Selection, f64)> {
    let mut sel = Vec::with_capacity(samples.len());
    let mut margin = f64::INFINITY;
    for s in samples {
        let tape = forward_sample(model, cfg, s)?;
        margin = margin.min(tape.ecs.min_margin);
        sel.push(
            tape.ecs
                .experts
                .iter()
                .map(|e| (e.expert, e.route.indices.clone()))
                .collect(),
        );
    }
    Ok((sel, margin))
}

fn perturbed(model: &AlignmentModel, tensor: usize, index: usize, delta: f64) -> AlignmentModel {
    let mut m = model.clone();
    m.tensors_mut()[tensor].1[index] += delta;
    m
}

pub fn gradient_check(
    model: &AlignmentModel,
    cfg: &ModelConfig,
    samples: &[Sample],
    tau: f64,
    gc: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if samples.is_empty() {
        return Err(Error::invalid("gradient check needs at least one sample"));
    }
    let batch: Vec<&Sample> = samples.iter().collect();
    let (_, grads) = batch_gradients(model, cfg, &batch, tau)?;
    let (base_sel, _) = selections(model, cfg, samples)?;

    let sizes: Vec<(String, usize)> = model
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.values.len()))
        .collect();
    let mut coords: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(ti, (_, n))| (0..*n).map(move |i| (ti, i)))
        .collect();
    if let Some(limit) = gc.max_coords {
        if limit < coords.len() {
            let mut rng = ChaCha8Rng::seed_from_u64(gc.seed);
            let mut picked: Vec<usize> = sample_indices(&mut rng, coords.len(), limit).into_vec();
            picked.sort_unstable();
            coords = picked.into_iter().map(|i| coords[i]).collect();
        }
    }

    let analytic = grads.tensors();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for (ti, i) in coords {
        let plus = perturbed(model, ti, i, gc.eps);
        let minus = perturbed(model, ti, i, -gc.eps);
        let (sel_p, margin_p) = selections(&plus, cfg, samples)?;
        let (sel_m, margin_m) = selections(&minus, cfg, samples)?;
        if sel_p != base_sel || sel_m != base_sel || margin_p.min(margin_m) < gc.boundary_margin {
            report.skipped += 1;
            continue;
        }
        let numeric = (batch_loss(&plus, cfg, &batch, tau)? - batch_loss(&minus, cfg, &batch, tau)?) / (2.0 * gc.eps);
        let a = analytic[ti].values[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(gc.abs_floor);
        report.checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some(format!("{}[{i}]", sizes[ti].0));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ecs::EcsConfig;
    use crate::trainer::Regime;
    use ndarray::{Array1, Array2};
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn tiny_model_gradients_agree() {
        let d = 6;
        let cfg = ModelConfig {
            ecs: EcsConfig {
                num_experts: 3,
                active_experts: 2,
                top_r: 2,
                dim: d,
                seed: 4,
            },
            ecs_enabled: true,
            regime: Regime::Both,
        };
        let mut model = AlignmentModel::init(&cfg.ecs).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = Normal::new(0.0, 0.5).unwrap();
        for ex in &mut model.ecs.experts {
            ex.output.mapv_inplace(|_| n.sample(&mut rng));
        }
        model.ecs.routers.weight.mapv_inplace(|_| n.sample(&mut rng));
        model.ecs.gate.weight.mapv_inplace(|_| n.sample(&mut rng));
        let samples: Vec<Sample> = (0..3)
            .map(|i| Sample {
                video_id: format!("v{i}"),
                frames: Array2::from_shape_fn((2, d), |_| rng.random_range(-1.0..1.0)),
                captions: Array2::from_shape_fn((3, d), |_| rng.random_range(-1.0..1.0)),
                text: Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0)),
            })
            .collect();
        let r = gradient_check(&model, &cfg, &samples, 0.5, &GradCheckConfig::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.checked > 100);
    }
}
