//! Two-stage end-to-end trainer with scheduled pocket sampling, pocket
//! shift augmentation, and the shared predict pipeline used for
//! validation, evaluation, and the CLI.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::complex::{
    extract_pocket, place_ligand_at, ComplexRecord, LigandGraph, PocketSubgraph, ProteinGraph,
    POCKET_RADIUS,
};
use crate::docking::{
    coord_loss, dist_map_loss, dock, docking_loss, las_constraint, las_pairs,
    reconstruct_distance_direct, RefinementPolicy,
};
use crate::geom::{self, Vec3};
use crate::layer::coords_tensor;
use crate::metrics::{centroid_distance, dcc, ligand_rmsd, PerComplexMetrics};
use crate::model::{normalize_coords, parse_config, FabindModel, ModelConfig, NORM_SCALE};
use crate::nn::AdamW;
use crate::pocket::{
    center_constraint_loss, classification_loss, decide_pocket, pocket_loss, predict_pocket,
    PocketPrediction,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("complex {index} is unusable: {detail}")]
    BadComplex { index: usize, detail: String },
    #[error("numerical abort at epoch {epoch}, step {step}: {detail}")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("prediction failed: {0}")]
    Predict(String),
}

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Validation mean-DCC threshold that switches on stage 2.
    pub dcc_gate: f64,
    /// Probability of feeding the predicted pocket in stage 2.
    pub predicted_pocket_prob: f64,
    /// Per-axis pocket center shift range (angstroms).
    pub pocket_shift: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::toy(),
            epochs: 40,
            batch_size: 2,
            lr: 1e-3,
            warmup_epochs: 3,
            weight_decay: 1e-2,
            seed: 0,
            dcc_gate: 4.0,
            predicted_pocket_prob: 0.25,
            pocket_shift: 5.0,
        }
    }
}

/// Parse a flat key=value file; unknown keys are forwarded to the model
/// config parser.
pub fn parse_train_config(text: &str, base: TrainConfig) -> Result<TrainConfig, String> {
    let mut cfg = base;
    let mut model_lines = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got `{line}`", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let us = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
        let fl = |v: &str| v.parse::<f64>().map_err(|e| format!("{key}: {e}"));
        match key {
            "epochs" => cfg.epochs = us(value)?,
            "batch_size" => cfg.batch_size = us(value)?,
            "lr" => cfg.lr = fl(value)?,
            "warmup_epochs" => cfg.warmup_epochs = us(value)?,
            "weight_decay" => cfg.weight_decay = fl(value)?,
            "seed" => cfg.seed = value.parse::<u64>().map_err(|e| format!("seed: {e}"))?,
            "dcc_gate" => cfg.dcc_gate = fl(value)?,
            "predicted_pocket_prob" => cfg.predicted_pocket_prob = fl(value)?,
            "pocket_shift" => cfg.pocket_shift = fl(value)?,
            _ => {
                model_lines.push_str(raw);
                model_lines.push('\n');
            }
        }
    }
    cfg.model = parse_config(&model_lines, cfg.model)?;
    Ok(cfg)
}

/// Uniform refinement-round count for a training step; inference always
/// uses the configured maximum.
pub fn sample_refinement_iterations(rng: &mut ChaCha8Rng, k_max: usize) -> usize {
    rng.gen_range(1..=k_max.max(1))
}

/// Scheduled pocket sampling: stage 1 always trains on the native pocket;
/// stage 2 swaps in the predicted pocket with probability `prob`. A
/// missing predicted pocket falls back to native.
pub fn choose_pocket<'a>(
    native: &'a PocketSubgraph,
    predicted: Option<&'a PocketSubgraph>,
    stage2: bool,
    prob: f64,
    rng: &mut ChaCha8Rng,
) -> (&'a PocketSubgraph, bool) {
    if stage2 && rng.gen_range(0.0..1.0) < prob {
        if let Some(p) = predicted {
            return (p, true);
        }
    }
    (native, false)
}

/// Shift the pocket center uniformly within the cube of half-width
/// `range` and recrop; an empty crop keeps the original pocket.
pub fn augment_pocket_shift(
    pocket: &PocketSubgraph,
    protein: &ProteinGraph,
    range: f64,
    rng: &mut ChaCha8Rng,
) -> PocketSubgraph {
    let shift = [
        rng.gen_range(-range..=range),
        rng.gen_range(-range..=range),
        rng.gen_range(-range..=range),
    ];
    let center = geom::add(pocket.center, shift);
    extract_pocket(protein, center, pocket.radius).unwrap_or_else(|_| pocket.clone())
}

/// Full inference path: pocket prediction, pocket crop, ligand moved to
/// the center, docking with iterative refinement.
pub struct Prediction {
    pub pocket: PocketPrediction,
    pub pocket_sub: PocketSubgraph,
    pub pose: Vec<Vec3>,
}

pub fn predict_complex(
    model: &FabindModel,
    ligand: &LigandGraph,
    protein: &ProteinGraph,
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Prediction, TrainError> {
    let pred = predict_pocket(&model.pocket, &model.cfg, ligand, protein, rng);
    let pocket_sub = decide_pocket(&pred, protein).map_err(|e| TrainError::Predict(e.to_string()))?;
    let lig = place_ligand_at(ligand, pocket_sub.center);
    let res = dock(
        &model.dock,
        &lig,
        &pocket_sub.protein,
        &RefinementPolicy { iterations },
    )
    .map_err(|e| TrainError::Predict(e.to_string()))?;
    Ok(Prediction {
        pocket: pred,
        pocket_sub,
        pose: res.coords,
    })
}

/// Per-complex metrics over a dataset at a fixed refinement count.
pub fn evaluate(
    model: &FabindModel,
    records: &[ComplexRecord],
    iterations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PerComplexMetrics>, TrainError> {
    records
        .iter()
        .map(|rec| {
            let p = predict_complex(model, &rec.ligand, &rec.protein, iterations, rng)?;
            Ok(PerComplexMetrics {
                rmsd: ligand_rmsd(&p.pose, &rec.truth).map_err(|e| TrainError::Predict(e.to_string()))?,
                centroid: centroid_distance(&p.pose, &rec.truth)
                    .map_err(|e| TrainError::Predict(e.to_string()))?,
                dcc: dcc(p.pocket.decided_center, rec.native_center()),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    pub stage: u8,
    pub l_pocket: f64,
    pub l_docking: f64,
    pub l_total: f64,
    pub val_dcc_mean: f64,
    pub val_rmsd_mean: f64,
}

pub struct TrainOutcome {
    pub rows: Vec<EpochRow>,
    /// First epoch (0-based) that ran in stage 2, if the gate ever opened.
    pub stage2_from: Option<usize>,
}

pub fn metrics_csv(rows: &[EpochRow]) -> String {
    let mut s = String::from("epoch,stage,L_pocket,L_docking,L_total,val_DCC_mean,val_RMSD_mean\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.stage, r.l_pocket, r.l_docking, r.l_total, r.val_dcc_mean, r.val_rmsd_mean
        ));
    }
    s
}

pub struct StepLosses {
    pub pocket: Tensor,
    pub docking: Tensor,
    pub total: Tensor,
}

pub fn complex_losses(
    model: &FabindModel,
    rec: &ComplexRecord,
    stage2: bool,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses, String> {
    let mcfg = &model.cfg;
    let native_center = rec.native_center();

    let pred = predict_pocket(&model.pocket, mcfg, &rec.ligand, &rec.protein, rng);
    let l_cls = classification_loss(&pred.probs_tensor, &rec.pocket_labels);
    let l_ctr = center_constraint_loss(
        &pred.gumbel_center_tensor,
        geom::scale(native_center, 1.0 / NORM_SCALE),
    );
    let pocket_report = pocket_loss(l_cls, l_ctr, mcfg.alpha_pocket);

    let native_pocket =
        extract_pocket(&rec.protein, native_center, POCKET_RADIUS).map_err(|e| e.to_string())?;
    let predicted_pocket = decide_pocket(&pred, &rec.protein).ok();
    let (pocket, _) = choose_pocket(
        &native_pocket,
        predicted_pocket.as_ref(),
        stage2,
        cfg.predicted_pocket_prob,
        rng,
    );
    let pocket = augment_pocket_shift(pocket, &rec.protein, cfg.pocket_shift, rng);

    let lig_init = place_ligand_at(&rec.ligand, pocket.center);
    let k = sample_refinement_iterations(rng, mcfg.refine_iterations);
    let res = dock(
        &model.dock,
        &lig_init,
        &pocket.protein,
        &RefinementPolicy { iterations: k },
    )
    .map_err(|e| e.to_string())?;

    let truth_norm = normalize_coords(&rec.truth);
    let l_coord = coord_loss(&res.coords_tensor, &truth_norm);
    let d_true = reconstruct_distance_direct(
        &coords_tensor(&truth_norm),
        &coords_tensor(&normalize_coords(&pocket.protein.coords())),
    );
    let l_dist = dist_map_loss(&d_true, &res.d_direct, &res.d_pair, mcfg.gamma);
    let l_las = las_constraint(
        &res.coords_tensor,
        &normalize_coords(&lig_init.coords()),
        &las_pairs(&rec.ligand),
    );
    let l_dock = docking_loss(&l_coord, &l_dist, &l_las, mcfg.beta, mcfg.w_las);

    let total = pocket_report.combined.add(&l_dock);
    let check = pocket_report.combined.value() + l_dock.value();
    debug_assert!((total.value() - check).abs() < 1e-10);
    Ok(StepLosses {
        pocket: pocket_report.combined,
        docking: l_dock,
        total,
    })
}

fn epoch_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else if cfg.epochs > cfg.warmup_epochs {
        let t = (epoch - cfg.warmup_epochs) as f64 / (cfg.epochs - cfg.warmup_epochs) as f64;
        // decay linearly but keep a floor so late epochs still learn
        cfg.lr * (1.0 - 0.9 * t)
    } else {
        cfg.lr
    }
}

/// Two-stage training. Stage 1 uses native pockets only; once validation
/// mean DCC drops below the gate, stage 2 mixes in predicted pockets.
pub fn train(
    model: &mut FabindModel,
    dataset: &[ComplexRecord],
    val: &[ComplexRecord],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if dataset.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut stage2 = false;
    let mut stage2_from = None;

    for epoch in 0..cfg.epochs {
        opt.lr = epoch_lr(cfg, epoch);
        if stage2 && stage2_from.is_none() {
            stage2_from = Some(epoch);
        }
        let mut sums = (0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for (step, batch) in dataset.chunks(cfg.batch_size.max(1)).enumerate() {
            model.store.zero_grad();
            let out = catch_unwind(AssertUnwindSafe(|| -> Result<(f64, f64, f64), String> {
                let mut acc: Option<Tensor> = None;
                let (mut lp, mut ld, mut lt) = (0.0, 0.0, 0.0);
                for rec in batch {
                    let l = complex_losses(model, rec, stage2, cfg, &mut rng)?;
                    lp += l.pocket.value();
                    ld += l.docking.value();
                    lt += l.total.value();
                    acc = Some(match acc {
                        Some(a) => a.add(&l.total),
                        None => l.total,
                    });
                }
                let mean = acc.expect("non-empty batch").scale(1.0 / batch.len() as f64);
                mean.backward().map_err(|e| e.to_string())?;
                let b = batch.len() as f64;
                Ok((lp / b, ld / b, lt / b))
            }))
            .map_err(|_| TrainError::NumericalAbort {
                epoch,
                step,
                detail: "non-finite value during forward/backward".into(),
            })?
            .map_err(|detail| TrainError::NumericalAbort { epoch, step, detail })?;
            model.store.ensure_grads();
            opt.step(&model.store)
                .map_err(|e| TrainError::NumericalAbort { epoch, step, detail: e.to_string() })?;
            sums.0 += out.0;
            sums.1 += out.1;
            sums.2 += out.2;
            steps += 1;
        }

        let per = evaluate(model, val, model.cfg.refine_iterations, &mut rng)?;
        let val_dcc = per.iter().map(|m| m.dcc).sum::<f64>() / per.len() as f64;
        let val_rmsd = per.iter().map(|m| m.rmsd).sum::<f64>() / per.len() as f64;
        rows.push(EpochRow {
            epoch,
            stage: if stage2 { 2 } else { 1 },
            l_pocket: sums.0 / steps as f64,
            l_docking: sums.1 / steps as f64,
            l_total: sums.2 / steps as f64,
            val_dcc_mean: val_dcc,
            val_rmsd_mean: val_rmsd,
        });
        // the gate is monotone: once open, stage 2 is permanent
        if !stage2 && val_dcc < cfg.dcc_gate {
            stage2 = true;
        }
    }
    Ok(TrainOutcome { rows, stage2_from })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_complex, SyntheticSpec};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn tiny_dataset(n: usize, seed: u64) -> Vec<ComplexRecord> {
        let spec = SyntheticSpec {
            residue_range: (6, 8),
            atom_range: (4, 5),
            ..SyntheticSpec::default()
        };
        let mut r = rng(seed);
        (0..n).map(|_| generate_synthetic_complex(&spec, &mut r)).collect()
    }

    #[test]
    fn refinement_sampling_is_uniform() {
        let mut r = rng(1);
        let k = 8;
        let n = 10_000;
        let mut counts = vec![0usize; k + 1];
        for _ in 0..n {
            counts[sample_refinement_iterations(&mut r, k)] += 1;
        }
        assert_eq!(counts[0], 0);
        // chi-square against uniform over 1..=8, df=7, 1% critical 18.48
        let expected = n as f64 / k as f64;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        assert!(chi2 < 18.48, "chi2 {chi2}");
        assert_eq!(sample_refinement_iterations(&mut r, 1), 1);
    }

    #[test]
    fn stage1_always_selects_native() {
        let recs = tiny_dataset(1, 5);
        let native = extract_pocket(&recs[0].protein, recs[0].native_center(), POCKET_RADIUS).unwrap();
        let other = native.clone();
        let mut r = rng(2);
        for _ in 0..100 {
            let (_, used_predicted) = choose_pocket(&native, Some(&other), false, 0.25, &mut r);
            assert!(!used_predicted);
        }
    }

    #[test]
    fn stage2_predicted_fraction_is_one_quarter() {
        let recs = tiny_dataset(1, 6);
        let native = extract_pocket(&recs[0].protein, recs[0].native_center(), POCKET_RADIUS).unwrap();
        let other = native.clone();
        let mut r = rng(3);
        let n = 10_000;
        let mut hits = 0;
        for _ in 0..n {
            let (_, used) = choose_pocket(&native, Some(&other), true, 0.25, &mut r);
            hits += usize::from(used);
        }
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.25).abs() < 0.02, "fraction {frac}");
        // missing predicted pocket falls back to native
        let (_, used) = choose_pocket(&native, None, true, 1.0, &mut r);
        assert!(!used);
    }

    #[test]
    fn pocket_shift_stays_in_range_and_membership_is_brute_force() {
        let recs = tiny_dataset(1, 7);
        let protein = &recs[0].protein;
        let native = extract_pocket(protein, recs[0].native_center(), POCKET_RADIUS).unwrap();
        let mut r = rng(4);
        for _ in 0..20 {
            let shifted = augment_pocket_shift(&native, protein, 5.0, &mut r);
            let d = geom::sub(shifted.center, native.center);
            for c in d {
                assert!(c.abs() <= 5.0 + 1e-12);
            }
            let expect: Vec<usize> = protein
                .coords()
                .iter()
                .enumerate()
                .filter(|(_, &c)| geom::dist(c, shifted.center) <= shifted.radius)
                .map(|(i, _)| i)
                .collect();
            assert_eq!(shifted.parent_indices, expect);
        }
    }

    #[test]
    fn train_config_parsing() {
        let cfg = parse_train_config(
            "epochs=7\nlr=0.002\nseed=42\ndock_hidden=16\n# comment\n",
            TrainConfig::default(),
        )
        .unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.lr, 0.002);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.model.dock_hidden, 16);
        assert!(parse_train_config("bogus_key=1\n", TrainConfig::default()).is_err());
        assert!(parse_train_config("epochs\n", TrainConfig::default()).is_err());
    }

    #[test]
    fn lr_schedule_warms_up_then_decays() {
        let cfg = TrainConfig {
            epochs: 10,
            warmup_epochs: 2,
            lr: 1.0,
            ..TrainConfig::default()
        };
        assert!((epoch_lr(&cfg, 0) - 0.5).abs() < 1e-12);
        assert!((epoch_lr(&cfg, 1) - 1.0).abs() < 1e-12);
        assert!(epoch_lr(&cfg, 9) < epoch_lr(&cfg, 2));
        assert!(epoch_lr(&cfg, 9) > 0.0);
    }

    #[test]
    fn one_epoch_runs_and_is_deterministic() {
        let train_set = tiny_dataset(2, 8);
        let val_set = tiny_dataset(1, 9);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            model: ModelConfig {
                refine_iterations: 2,
                ..ModelConfig::toy()
            },
            ..TrainConfig::default()
        };
        let mut m1 = FabindModel::new(cfg.model, 1);
        let out1 = train(&mut m1, &train_set, &val_set, &cfg).unwrap();
        let mut m2 = FabindModel::new(cfg.model, 1);
        let out2 = train(&mut m2, &train_set, &val_set, &cfg).unwrap();
        assert_eq!(out1.rows.len(), 2);
        for (a, b) in out1.rows.iter().zip(&out2.rows) {
            assert_eq!(a.l_total, b.l_total, "identical seed, identical loss curve");
            assert_eq!(a.val_rmsd_mean, b.val_rmsd_mean);
        }
        for ((_, p1), (_, p2)) in m1.store.iter().zip(m2.store.iter()) {
            assert_eq!(p1.to_vec(), p2.to_vec());
        }
        let csv = metrics_csv(&out1.rows);
        assert!(csv.starts_with("epoch,stage,"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn logged_components_sum_to_total() {
        let train_set = tiny_dataset(1, 10);
        let cfg = TrainConfig {
            model: ModelConfig {
                refine_iterations: 1,
                ..ModelConfig::toy()
            },
            ..TrainConfig::default()
        };
        let model = FabindModel::new(cfg.model, 2);
        let mut r = rng(11);
        let l = complex_losses(&model, &train_set[0], false, &cfg, &mut r).unwrap();
        assert!((l.pocket.value() + l.docking.value() - l.total.value()).abs() < 1e-10);
        assert!(l.pocket.value() >= 0.0 && l.docking.value() >= 0.0);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let cfg = TrainConfig::default();
        let mut model = FabindModel::new(cfg.model, 1);
        assert!(matches!(
            train(&mut model, &[], &tiny_dataset(1, 1), &cfg),
            Err(TrainError::EmptyDataset)
        ));
    }
}
