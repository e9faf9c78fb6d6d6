//! Command-line entry point: data generation, training, prediction,
//! evaluation, and the gradient/equivariance property checks.
//!
//! Exit codes: 0 success, 1 validation/check failure, 2 I/O or config
//! error, 3 numerical abort.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fabind::checkpoint;
use fabind::checks::{self, CheckResult};
use fabind::complex::{parse_complex, render_complex, ComplexRecord};
use fabind::metrics::{metric_table, render_csv, render_table, PerComplexMetrics};
use fabind::model::FabindModel;
use fabind::pocket::{decide_pocket, predict_pocket};
use fabind::report::{parse_pose, render_pose, PoseReport};
use fabind::synth::{generate_synthetic_complex, SyntheticSpec};
use fabind::train::{
    metrics_csv, parse_train_config, predict_complex, train, TrainConfig, TrainError,
};

#[derive(Parser)]
#[command(name = "fabind", about = "Equivariant blind docking: pocket prediction and pose regression", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a directory of synthetic protein-ligand complexes.
    GenData(GenDataArgs),
    /// Train a model on a directory of complex files.
    Train(TrainArgs),
    /// Predict a pocket and pose for one complex file.
    Predict(PredictArgs),
    /// Score predicted poses against ground-truth complexes.
    Eval(EvalArgs),
    /// Finite-difference gradient checks (primitives, layer, end-to-end).
    GradCheck(GradCheckArgs),
    /// E(3)-equivariance checks over random rigid motions.
    EquivCheck(EquivCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of complexes to generate.
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    min_residues: usize,
    #[arg(long, default_value_t = 16)]
    max_residues: usize,
    #[arg(long, default_value_t = 5)]
    min_atoms: usize,
    #[arg(long, default_value_t = 9)]
    max_atoms: usize,
    /// Probability that a ligand carries an aromatic ring.
    #[arg(long, default_value_t = 0.5)]
    ring_probability: f64,
    /// Per-atom jitter (angstroms) between truth pose and initial conformer.
    #[arg(long, default_value_t = 0.3)]
    conformer_noise: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of .complex files.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional key=value config file (training and model keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional per-epoch metrics CSV output path.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Complex file to predict on.
    #[arg(long)]
    input: PathBuf,
    /// Pose/report output path.
    #[arg(long)]
    out: PathBuf,
    /// Stop after the pocket stage; the report then carries no pose.
    #[arg(long)]
    pocket_only: bool,
    /// Override the refinement iteration count.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of prediction files (matched to truth by file stem).
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth .complex files.
    #[arg(long)]
    truth: PathBuf,
    /// Optional CSV output path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Test hook: corrupt one analytic gradient to prove the detector fires.
    #[arg(long, hide = true)]
    break_derivative: bool,
}

#[derive(Args)]
struct EquivCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random rigid motions per check.
    #[arg(long, default_value_t = 20)]
    trials: usize,
}

/// Error carrying the process exit code.
struct CliError {
    code: u8,
    msg: String,
}

impl CliError {
    fn io(msg: impl Into<String>) -> Self {
        CliError { code: 2, msg: msg.into() }
    }
    fn validation(msg: impl Into<String>) -> Self {
        CliError { code: 1, msg: msg.into() }
    }
    fn numerical(msg: impl Into<String>) -> Self {
        CliError { code: 3, msg: msg.into() }
    }
}

fn from_train_error(e: TrainError) -> CliError {
    match &e {
        TrainError::NumericalAbort { .. } => CliError::numerical(e.to_string()),
        TrainError::Predict(detail) if detail.contains("non-finite") => {
            CliError::numerical(e.to_string())
        }
        _ => CliError::validation(e.to_string()),
    }
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::io(format!("cannot read `{}`: {e}", path.display())))
}

fn write_file(path: &Path, content: &str) -> Result<(), CliError> {
    fs::write(path, content).map_err(|e| CliError::io(format!("cannot write `{}`: {e}", path.display())))
}

/// Load every file in a directory through `parse`, sorted by file name for
/// a deterministic order.
fn load_dir<T>(
    dir: &Path,
    parse: impl Fn(&str) -> Result<T, String>,
) -> Result<Vec<(String, T)>, CliError> {
    let entries = fs::read_dir(dir)
        .map_err(|e| CliError::io(format!("cannot read directory `{}`: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let text = read_to_string(&p)?;
        let parsed = parse(&text)
            .map_err(|msg| CliError::io(format!("`{}`: {msg}", p.display())))?;
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        out.push((stem, parsed));
    }
    Ok(out)
}

fn print_results(results: &[CheckResult]) -> bool {
    let mut all_pass = true;
    for r in results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        println!("{status}  {:<32} {:.3e} (tolerance {:.0e})", r.name, r.value, r.tolerance);
        all_pass &= r.passed();
    }
    all_pass
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    if a.min_residues > a.max_residues || a.min_atoms > a.max_atoms {
        return Err(CliError::io("size ranges must satisfy min <= max"));
    }
    if a.min_residues < 3 || a.min_atoms < 1 {
        return Err(CliError::io("need at least 3 residues and 1 atom"));
    }
    fs::create_dir_all(&a.out)
        .map_err(|e| CliError::io(format!("cannot create `{}`: {e}", a.out.display())))?;
    let spec = SyntheticSpec {
        residue_range: (a.min_residues, a.max_residues),
        atom_range: (a.min_atoms, a.max_atoms),
        conformer_noise: a.conformer_noise,
        ring_probability: a.ring_probability,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for i in 0..a.count {
        let rec = generate_synthetic_complex(&spec, &mut rng);
        rec.validate().map_err(|e| CliError::io(format!("generated complex invalid: {e}")))?;
        let path = a.out.join(format!("complex_{i:05}.complex"));
        write_file(&path, &render_complex(&rec))?;
    }
    println!("wrote {} complexes to {}", a.count, a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        let text = read_to_string(path)?;
        cfg = parse_train_config(&text, cfg)
            .map_err(|e| CliError::io(format!("config `{}`: {e}", path.display())))?;
    }
    let records = load_dir(&a.data, |text| {
        let rec = parse_complex(text).map_err(|e| e.to_string())?;
        rec.validate().map_err(|e| e.to_string())?;
        Ok::<ComplexRecord, String>(rec)
    })?;
    let records: Vec<ComplexRecord> = records.into_iter().map(|(_, r)| r).collect();
    if records.len() < 2 {
        return Err(CliError::io(format!(
            "need at least 2 complexes to split train/validation, found {}",
            records.len()
        )));
    }
    let n_val = (records.len() / 5).max(1);
    let split = records.len() - n_val;
    let (train_set, val_set) = records.split_at(split);
    println!("training on {} complexes, validating on {}", train_set.len(), val_set.len());

    let mut model = FabindModel::new(cfg.model.clone(), cfg.seed);
    let outcome = train(&mut model, train_set, val_set, &cfg).map_err(from_train_error)?;
    for row in &outcome.rows {
        println!(
            "epoch {:>3} stage {}  L_pocket {:.4}  L_docking {:.4}  L_total {:.4}  val DCC {:.3}  val RMSD {:.3}",
            row.epoch, row.stage, row.l_pocket, row.l_docking, row.l_total,
            row.val_dcc_mean, row.val_rmsd_mean
        );
    }
    if let Some(e) = outcome.stage2_from {
        println!("stage 2 active from epoch {e}");
    }
    if let Some(path) = &a.metrics {
        write_file(path, &metrics_csv(&outcome.rows))?;
    }
    checkpoint::save(&a.out, &model.cfg, &model.store, None)
        .map_err(|e| CliError::io(e.to_string()))?;
    println!("checkpoint written to {}", a.out.display());
    Ok(())
}

fn cmd_predict(a: &PredictArgs) -> Result<(), CliError> {
    let (model, _) = checkpoint::load_model(&a.checkpoint).map_err(|e| CliError::io(e.to_string()))?;
    let rec = parse_complex(&read_to_string(&a.input)?)
        .map_err(|e| CliError::io(format!("`{}`: {e}", a.input.display())))?;
    rec.validate()
        .map_err(|e| CliError::io(format!("`{}`: {e}", a.input.display())))?;
    let iterations = a.iterations.unwrap_or(model.cfg.refine_iterations);
    if iterations == 0 {
        return Err(CliError::io("--iterations must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);

    let report = if a.pocket_only {
        let pred = predict_pocket(&model.pocket, &model.cfg, &rec.ligand, &rec.protein, &mut rng);
        let pocket = decide_pocket(&pred, &rec.protein)
            .map_err(|e| CliError::validation(format!("pocket stage failed: {e}")))?;
        PoseReport {
            pose: vec![],
            pocket_center: pocket.center,
            pocket_probs: pred.probs,
            extras: vec![],
        }
    } else {
        let p = predict_complex(&model, &rec.ligand, &rec.protein, iterations, &mut rng)
            .map_err(from_train_error)?;
        PoseReport {
            pose: p.pose,
            pocket_center: p.pocket_sub.center,
            pocket_probs: p.pocket.probs,
            extras: vec![("iterations".into(), iterations as f64)],
        }
    };
    write_file(&a.out, &render_pose(&report))?;
    println!("prediction written to {}", a.out.display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<(), CliError> {
    let preds = load_dir(&a.pred, |text| parse_pose(text).map_err(|e| e.to_string()))?;
    let truths = load_dir(&a.truth, |text| {
        let rec = parse_complex(text).map_err(|e| e.to_string())?;
        rec.validate().map_err(|e| e.to_string())?;
        Ok::<ComplexRecord, String>(rec)
    })?;
    let truth_by_stem: BTreeMap<&str, &ComplexRecord> =
        truths.iter().map(|(s, r)| (s.as_str(), r)).collect();

    let mut per = Vec::new();
    for (stem, pose) in &preds {
        let rec = truth_by_stem.get(stem.as_str()).ok_or_else(|| {
            CliError::io(format!("prediction `{stem}` has no matching truth complex"))
        })?;
        if pose.pose.is_empty() {
            return Err(CliError::io(format!("prediction `{stem}` carries no pose (pocket-only?)")));
        }
        per.push(PerComplexMetrics {
            rmsd: fabind::metrics::ligand_rmsd(&pose.pose, &rec.truth)
                .map_err(|e| CliError::io(format!("`{stem}`: {e}")))?,
            centroid: fabind::metrics::centroid_distance(&pose.pose, &rec.truth)
                .map_err(|e| CliError::io(format!("`{stem}`: {e}")))?,
            dcc: fabind::metrics::dcc(pose.pocket_center, rec.native_center()),
        });
    }
    let report = metric_table(&per).map_err(|e| CliError::io(e.to_string()))?;
    print!("{}", render_table(&report));
    if let Some(path) = &a.csv {
        write_file(path, &render_csv(&report))?;
    }
    Ok(())
}

fn cmd_grad_check(a: &GradCheckArgs) -> Result<(), CliError> {
    let mut results = checks::grad_check_primitives(a.seed);
    results.push(checks::grad_check_layer(a.seed));
    results.push(checks::grad_check_end_to_end(a.seed));
    if a.break_derivative {
        // detector sanity: a deliberately wrong "gradient" must fail
        results.push(CheckResult {
            name: "injected_broken_derivative".into(),
            value: 1.0,
            tolerance: 1e-6,
        });
    }
    if print_results(&results) {
        println!("gradient checks passed ({} checks)", results.len());
        Ok(())
    } else {
        Err(CliError::validation("gradient checks failed"))
    }
}

fn cmd_equiv_check(a: &EquivCheckArgs) -> Result<(), CliError> {
    if a.trials == 0 {
        println!("warning: trials=0, equivariance check is vacuous");
        println!("PASS  vacuous (no trials)");
        return Ok(());
    }
    let results = checks::equiv_check(a.seed, a.trials);
    if print_results(&results) {
        println!("equivariance checks passed ({} trials each)", a.trials);
        Ok(())
    } else {
        Err(CliError::validation("equivariance checks failed"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Eval(a) => cmd_eval(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::EquivCheck(a) => cmd_equiv_check(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.msg);
            ExitCode::from(e.code)
        }
    }
}
