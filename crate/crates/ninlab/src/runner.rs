//! The experiment runner behind the CLI subcommands.
//!
//! Each command resolves an [`ExperimentConfig`], runs the work per seed
//! (fanning seeds across worker threads when `--threads > 1`; reference
//! single-threaded mode is the byte-reproducibility contract), and writes
//! CSV artifacts plus a `manifest.json` into `<out>/<preset>/`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::diagnostics::{classify_phase, PhaseThresholds};
use crate::lineartoy::{toy_loss, toy_phase_boundary, toy_step, LinearToyState,
    TOY_DIVERGENCE_CAP};
use crate::manifest::{load_checkpoint, save_checkpoint, RunManifest};
use crate::network::{NetworkSpec, Params};
use crate::presets::{build_network, build_train_config, make_datasets, ExperimentConfig,
    ExperimentData, NinSettings};
use crate::network::NinTopology;
use crate::rng::RngStream;
use crate::robustness::{attack_curve, corruption_curve, domain_shift_eval, AttackKind,
    AttackSpec, RobustnessReport};
use crate::training::{train, TrainTrace, TrainTraceRow};
use crate::{Error, Result};

/// Data generation is keyed by a constant: the dataset belongs to the
/// experiment, not to any single training seed.
const DATA_SEED: u64 = 1234;

fn out_dir(cfg: &ExperimentConfig) -> PathBuf {
    Path::new(&cfg.out_dir).join(&cfg.preset)
}

fn rel(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

/// Write a trace as RFC 4180 CSV.
pub fn write_trace_csv(path: &Path, trace: &TrainTrace) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(crate::training::trace_csv_header(trace))?;
    for row in &trace.rows {
        w.write_record(crate::training::trace_csv_row(trace, row))?;
    }
    w.flush()?;
    Ok(())
}

/// Read a trace CSV back (the inverse of [`write_trace_csv`]).
pub fn read_trace_csv(path: &Path) -> Result<TrainTrace> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    let n_wni = header.iter().filter(|h| h.starts_with("wni_norm_")).count();
    let n_w = header.iter().filter(|h| h.starts_with("w_norm_")).count();
    let expected = 7 + n_wni + n_w + 1;
    if header.len() != expected {
        return Err(Error::Format(format!(
            "trace CSV {}: unrecognized header ({} columns)",
            path.display(),
            header.len()
        )));
    }
    let mut trace = TrainTrace::default();
    for record in r.records() {
        let record = record?;
        let f = |i: usize| -> Result<f64> {
            record
                .get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Format(format!("trace CSV: bad field {i}")))
        };
        let row = TrainTraceRow {
            epoch: f(0)? as usize,
            train_loss: f(1)?,
            train_acc: f(2)?,
            clean_train_loss: f(3)?,
            clean_train_acc: f(4)?,
            test_loss: f(5)?,
            test_acc: f(6)?,
            wni_norms: (0..n_wni).map(|i| f(7 + i)).collect::<Result<_>>()?,
            weight_norms: (0..n_w).map(|i| f(7 + n_wni + i)).collect::<Result<_>>()?,
            wall_clock_s: 0.0,
        };
        if f(7 + n_wni + n_w)? != 0.0 {
            trace.diverged = true;
        }
        trace.rows.push(row);
    }
    Ok(trace)
}

fn write_report_csv(path: &Path, level_name: &str, report: &RobustnessReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([level_name, "acc_mean", "acc_2std", "n"])?;
    for p in &report.points {
        w.write_record([
            p.level.to_string(),
            p.acc_mean.to_string(),
            p.acc_2std.to_string(),
            p.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Train + trace + checkpoint for one seed of a resolved config.
fn run_one_seed(
    cfg: &ExperimentConfig,
    spec: &NetworkSpec,
    data: &ExperimentData,
    seed: u64,
) -> Result<(Params, TrainTrace)> {
    let tc = build_train_config(cfg, seed)?;
    let rng = RngStream::new(seed);
    train(spec, &data.train, &data.eval, &tc, &rng)
}

/// Fan a per-seed job across `cfg.threads` workers, preserving seed order.
fn for_each_seed<T: Send>(
    cfg: &ExperimentConfig,
    job: impl Fn(u64) -> Result<T> + Sync,
) -> Result<Vec<(u64, T)>> {
    if cfg.threads <= 1 || cfg.seeds.len() <= 1 {
        return cfg.seeds.iter().map(|&s| job(s).map(|t| (s, t))).collect();
    }
    let mut slots: Vec<Option<Result<T>>> = Vec::new();
    slots.resize_with(cfg.seeds.len(), || None);
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in cfg
            .seeds
            .iter()
            .enumerate()
            .collect::<Vec<_>>()
            .chunks((cfg.seeds.len() + cfg.threads - 1) / cfg.threads)
        {
            let chunk: Vec<(usize, u64)> = chunk.iter().map(|(i, s)| (*i, **s)).collect();
            let job = &job;
            handles.push(scope.spawn(move || {
                chunk.into_iter().map(|(i, s)| (i, job(s))).collect::<Vec<_>>()
            }));
        }
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    cfg.seeds
        .iter()
        .zip(slots)
        .map(|(&s, r)| r.expect("all slots filled").map(|t| (s, t)))
        .collect()
}

/// `train`: run training per seed; emit trace CSV, checkpoint, manifest.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let started = Instant::now();
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let spec = build_network(cfg)?;
    let data = make_datasets(cfg, DATA_SEED)?;
    let mut manifest = RunManifest::new("train", cfg.clone());

    let results = for_each_seed(cfg, |seed| run_one_seed(cfg, &spec, &data, seed))?;
    for (seed, (params, trace)) in results {
        let trace_path = dir.join(format!("trace_seed{seed}.csv"));
        write_trace_csv(&trace_path, &trace)?;
        let ckpt_path = dir.join(format!("checkpoint_seed{seed}.json"));
        save_checkpoint(&params, &ckpt_path)?;
        manifest.record(seed, &rel(&dir, &format!("trace_seed{seed}.csv")));
        manifest.record(seed, &rel(&dir, &format!("checkpoint_seed{seed}.json")));
        if let Some(row) = trace.rows.last() {
            manifest.metrics.insert(format!("final_test_acc_seed{seed}"), row.test_acc);
        }
        manifest
            .metrics
            .insert(format!("diverged_seed{seed}"), if trace.diverged { 1.0 } else { 0.0 });
    }
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    let mpath = dir.join("manifest.json");
    manifest.save(&mpath)?;
    Ok(mpath)
}

/// `eval`: corruption curve, FGSM/PGD curves, and (when configured) the
/// domain-shift accuracy, for a trained checkpoint.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<PathBuf> {
    let started = Instant::now();
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let spec = build_network(cfg)?;
    let params = load_checkpoint(&spec, checkpoint)?;
    let data = make_datasets(cfg, DATA_SEED)?;
    let mut manifest = RunManifest::new("eval", cfg.clone());
    let seed = cfg.seeds[0];

    let corr = corruption_curve(
        &spec,
        &params,
        &data.test,
        &cfg.corruption_sigmas,
        cfg.corruption_repeats,
        &RngStream::new(seed),
    )?;
    let corr_path = dir.join("corruption.csv");
    write_report_csv(&corr_path, "sigma_noise", &corr)?;
    manifest.record(seed, &rel(&dir, "corruption.csv"));

    for (kind, name) in [(AttackKind::Fgsm, "fgsm.csv"), (AttackKind::Pgd, "pgd.csv")] {
        let attack = AttackSpec {
            kind,
            delta: 0.0,
            k: cfg.attack_k,
            step: 0.0,
            clip: None,
        };
        let report = attack_curve(&spec, &params, &data.test, &attack, &cfg.attack_deltas)?;
        let path = dir.join(name);
        write_report_csv(&path, "delta", &report)?;
        manifest.record(seed, &rel(&dir, name));
    }

    if let Some(target) = &data.target {
        let report = domain_shift_eval(&spec, &params, target)?;
        let path = dir.join("domain_shift.csv");
        write_report_csv(&path, "shift", &report)?;
        manifest.record(seed, &rel(&dir, "domain_shift.csv"));
        manifest.metrics.insert("target_domain_acc".into(), report.points[0].acc_mean);
    }

    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    let mpath = dir.join("manifest.json");
    manifest.save(&mpath)?;
    Ok(mpath)
}

/// Phase label for one toy trajectory, by direct inspection of the loss and
/// |wNI| series (the closed-form model needs no trained-network thresholds).
fn toy_label(s0: &LinearToyState, steps: usize) -> &'static str {
    if s0.sigma_eps == 0.0 {
        return "decoupled";
    }
    let mut s = s0.clone();
    let l0 = toy_loss(&s, None).unwrap_or(f64::INFINITY);
    let mut peak = l0;
    for _ in 0..steps {
        s = toy_step(&s);
        let l = toy_loss(&s, None).unwrap_or(f64::INFINITY);
        if !l.is_finite() || l > TOY_DIVERGENCE_CAP {
            return "divergent";
        }
        peak = peak.max(l);
    }
    let l_end = toy_loss(&s, None).unwrap_or(f64::INFINITY);
    if peak >= 2.0 * l0 && l_end < l0 {
        "catapult"
    } else if s.w_ni.abs() < 0.5 * s0.w_ni.abs() {
        "decay"
    } else {
        "decoupled"
    }
}

/// `toy`: trajectory CSV, (η, σ_ε²) sweep CSV, and the bisected divergence
/// boundary σ_ε²*.
pub fn cmd_toy(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let started = Instant::now();
    let toy = cfg
        .toy
        .as_ref()
        .ok_or_else(|| Error::Config("toy command requires toy settings (linear-toy preset)".into()))?;
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new("toy", cfg.clone());
    let seed = cfg.seeds[0];

    // Trajectory at the configured σ_ε.
    let mut s = toy.state(toy.sigma_eps);
    let mut w = csv::Writer::from_path(dir.join("trajectory.csv"))?;
    w.write_record(["step", "w1", "w_ni", "loss", "r1", "r2"])?;
    for step in 0..=toy.steps {
        let loss = toy_loss(&s, None)?;
        let (r1, r2) = crate::lineartoy::toy_r1_r2(&s, None)?;
        w.write_record([
            step.to_string(),
            s.w1.to_string(),
            s.w_ni.to_string(),
            loss.to_string(),
            r1.to_string(),
            r2.to_string(),
        ])?;
        if !loss.is_finite() || loss > TOY_DIVERGENCE_CAP {
            break;
        }
        s = toy_step(&s);
    }
    w.flush()?;
    manifest.record(seed, &rel(&dir, "trajectory.csv"));

    // Phase sweep over the (η, σ_ε²) grid.
    if !toy.grid_etas.is_empty() && !toy.grid_sigma2.is_empty() {
        let mut w = csv::Writer::from_path(dir.join("sweep.csv"))?;
        w.write_record(["eta", "sigma_eps_sq", "label"])?;
        for &eta in &toy.grid_etas {
            for &s2 in &toy.grid_sigma2 {
                let mut s0 = toy.state(s2.max(0.0).sqrt());
                s0.eta = eta;
                let label = toy_label(&s0, toy.horizon);
                w.write_record([eta.to_string(), s2.to_string(), label.to_string()])?;
            }
        }
        w.flush()?;
        manifest.record(seed, &rel(&dir, "sweep.csv"));
    }

    // Boundary bisection at the configured η.
    let s0 = toy.state(1.0);
    let boundary = toy_phase_boundary(&s0, toy.horizon, 1e9)?;
    let mut w = csv::Writer::from_path(dir.join("boundary.csv"))?;
    w.write_record(["eta", "sigma_eps_sq_star", "bracket_rel_tol"])?;
    w.write_record([s0.eta.to_string(), boundary.to_string(), "0.01".to_string()])?;
    w.flush()?;
    manifest.record(seed, &rel(&dir, "boundary.csv"));
    manifest.metrics.insert("sigma_eps_sq_star".into(), boundary);

    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    let mpath = dir.join("manifest.json");
    manifest.save(&mpath)?;
    Ok(mpath)
}

/// `phases`: classify existing trace CSVs, or run the σ_ε² ladder and
/// classify the fresh traces.
pub fn cmd_phases(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let started = Instant::now();
    let dir = out_dir(cfg);
    std::fs::create_dir_all(&dir)?;
    let mut manifest = RunManifest::new("phases", cfg.clone());
    let th = PhaseThresholds::default();
    let seed = cfg.seeds[0];

    let mut labeled: Vec<(String, TrainTrace)> = Vec::new();
    if !cfg.traces.is_empty() {
        for path in &cfg.traces {
            let p = Path::new(path);
            if !p.exists() {
                return Err(Error::Invalid(format!("missing trace: {path}")));
            }
            labeled.push((path.clone(), read_trace_csv(p)?));
        }
    } else if !cfg.ladder_mults.is_empty() {
        for &mult in &cfg.ladder_mults {
            let mut rung = cfg.clone();
            rung.nin = if mult > 0.0 {
                Some(NinSettings::mult(NinTopology::InputOnly, mult))
            } else {
                None
            };
            let spec = build_network(&rung)?;
            let data = make_datasets(&rung, DATA_SEED)?;
            let (_, trace) = run_one_seed(&rung, &spec, &data, seed)?;
            let name = format!("trace_mult{mult}_seed{seed}.csv");
            write_trace_csv(&dir.join(&name), &trace)?;
            manifest.record(seed, &rel(&dir, &name));
            labeled.push((format!("sigma_mult={mult}"), trace));
        }
    } else {
        return Err(Error::Config(
            "phases requires `traces = ...` or a ladder preset (phase-ladder)".into(),
        ));
    }

    let mut w = csv::Writer::from_path(dir.join("phases.csv"))?;
    w.write_record([
        "run",
        "phase",
        "spike_ratio",
        "recovered",
        "decay_ratio",
        "final_train_acc",
        "diverged_flag",
    ])?;
    for (name, trace) in &labeled {
        let label = classify_phase(trace, &th)?;
        w.write_record([
            name.clone(),
            label.phase.as_str().to_string(),
            label.spike_ratio.to_string(),
            (label.recovered as u8).to_string(),
            label.decay_ratio.to_string(),
            label.final_train_acc.to_string(),
            (label.diverged_flag as u8).to_string(),
        ])?;
    }
    w.flush()?;
    manifest.record(seed, &rel(&dir, "phases.csv"));

    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    let mpath = dir.join("manifest.json");
    manifest.save(&mpath)?;
    Ok(mpath)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let trace = TrainTrace {
            rows: vec![
                TrainTraceRow {
                    epoch: 0,
                    train_loss: 2.302,
                    train_acc: 0.1,
                    clean_train_loss: 2.302,
                    clean_train_acc: 0.1,
                    test_loss: 2.31,
                    test_acc: 0.09,
                    wni_norms: vec![1.5],
                    weight_norms: vec![3.0, 2.0],
                    wall_clock_s: 9.0,
                },
                TrainTraceRow {
                    epoch: 1,
                    train_loss: 1.0,
                    train_acc: 0.7,
                    clean_train_loss: 0.9,
                    clean_train_acc: 0.72,
                    test_loss: 1.1,
                    test_acc: 0.68,
                    wni_norms: vec![1.2],
                    weight_norms: vec![3.1, 2.1],
                    wall_clock_s: 9.0,
                },
            ],
            diverged: true,
        };
        let path = dir.path().join("t.csv");
        write_trace_csv(&path, &trace).unwrap();
        let back = read_trace_csv(&path).unwrap();
        assert!(back.diverged);
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[1].clean_train_acc, 0.72);
        assert_eq!(back.rows[0].weight_norms, vec![3.0, 2.0]);
    }

    #[test]
    fn toy_label_sigma_zero_is_decoupled() {
        let toy = crate::presets::ToySettings::default();
        assert_eq!(toy_label(&toy.state(0.0), 100), "decoupled");
    }

    #[test]
    fn missing_trace_is_an_error() {
        let mut cfg = crate::presets::resolve_preset("phase-ladder").unwrap();
        cfg.ladder_mults.clear();
        cfg.traces = vec!["/nonexistent/trace.csv".into()];
        cfg.out_dir = tempfile::tempdir().unwrap().path().to_string_lossy().into_owned();
        assert!(cmd_phases(&cfg).is_err());
    }
}
