//! Batch command-line front end.
//!
//! Subcommands: `gen-data`, `train`, `eval-open`, `simulate`, `bench`,
//! `selftest`. Every run is reproducible from the config and seed; all
//! outputs are JSON/CSV files under the output directory plus a one-line
//! summary on stdout. Exit codes: 0 success, 2 validation error, 1 runtime
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use redsplan::data::{generate_dataset, write_manifest, Dataset, SampleRanges};
use redsplan::miqp::{build_miqp, solve_bnb, BnbOptions, MiqpStatus, MiqpWeights};
use redsplan::model::ModelParams;
use redsplan::net::deepset::RedsParams;
use redsplan::net::{
    baselines, load_model, save_model, train, train_baseline, NetModel, TrainConfig,
};
use redsplan::planner::{eval_open_loop, Ensemble};
use redsplan::projector::FpSettings;
use redsplan::sim::{run_episode, svg::time_space_svg, EpisodeConfig, PlannerKind};
use redsplan::soft_qp::solve_soft_qp;

mod config;
use config::{ConfigError, RunConfig};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" {
        print_usage();
        return ExitCode::from(if args.is_empty() { 2 } else { 0 });
    }
    let subcommand = args[0].clone();
    let cfg = match RunConfig::parse(&subcommand, &args[1..]) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };

    let result = match subcommand.as_str() {
        "gen-data" => run_gen_data(&cfg),
        "train" => run_train(&cfg),
        "eval-open" => run_eval_open(&cfg),
        "simulate" => run_simulate(&cfg),
        "bench" => run_bench(&cfg),
        "selftest" => run_selftest(&cfg),
        other => {
            eprintln!("error: unknown subcommand `{other}`");
            print_usage();
            return ExitCode::from(2);
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliFailure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliFailure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn print_usage() {
    println!(
        "usage: redsplan <subcommand> [--config FILE] [--seed N] [--out DIR] [--jobs N] \
         [--set key=value ...]\n\
         subcommands:\n\
         \x20 gen-data   sample scenarios and label them with the expert\n\
         \x20 train      train one or more predictors on a dataset\n\
         \x20 eval-open  open-loop evaluation of an ensemble against expert labels\n\
         \x20 simulate   closed-loop episodes with the expert or a learned ensemble\n\
         \x20 bench      timing comparison of expert vs learned pipeline\n\
         \x20 selftest   run the oracle and property checks\n\
         environment: REDSPLAN_LOG=1 enables progress logging"
    );
}

enum CliFailure {
    Validation(String),
    Runtime(String),
}

impl From<ConfigError> for CliFailure {
    fn from(e: ConfigError) -> Self {
        CliFailure::Validation(e.to_string())
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> CliFailure {
    CliFailure::Runtime(e.to_string())
}

fn log_enabled() -> bool {
    std::env::var_os("REDSPLAN_LOG").is_some_and(|v| v != "0")
}

fn progress(msg: &str) {
    if log_enabled() {
        eprintln!("[redsplan] {msg}");
    }
}

/// Tracks files written by a subcommand; on failure everything uncommitted
/// is removed so no partial outputs survive.
struct OutputGuard {
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    fn new() -> Self {
        Self {
            files: Vec::new(),
            committed: false,
        }
    }

    fn track(&mut self, p: PathBuf) -> PathBuf {
        self.files.push(p.clone());
        p
    }

    fn commit(&mut self) {
        self.committed = true;
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if !self.committed {
            for f in &self.files {
                let _ = std::fs::remove_file(f);
            }
        }
    }
}

fn ensure_out(cfg: &RunConfig) -> Result<PathBuf, CliFailure> {
    let dir = PathBuf::from(cfg.str_or("out", "out"));
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliFailure::Validation(format!("cannot create output directory: {e}")))?;
    Ok(dir)
}

fn model_params(cfg: &RunConfig) -> ModelParams {
    ModelParams {
        horizon: cfg.usize_or("horizon", 20),
        ..ModelParams::default()
    }
}

fn run_gen_data(cfg: &RunConfig) -> Result<(), CliFailure> {
    let out = ensure_out(cfg)?;
    let mut guard = OutputGuard::new();
    let n = cfg.usize_or("n", 1000);
    let seed = cfg.u64_or("seed", 0);
    let jobs = cfg.jobs();
    let m = model_params(cfg);
    let ranges = SampleRanges {
        n_obs: (cfg.usize_or("n-obs-min", 1), cfg.usize_or("n-obs-max", 5)),
        ..SampleRanges::default()
    };
    progress(&format!("labeling {n} scenarios at horizon {}", m.horizon));
    let (ds, manifest) = generate_dataset(
        n,
        &ranges,
        &m,
        &MiqpWeights::default(),
        &BnbOptions::labeling(),
        seed,
        jobs,
    )
    .map_err(runtime)?;
    let data_path = guard.track(out.join("dataset.jsonl"));
    ds.write_jsonl(&data_path).map_err(runtime)?;
    if cfg.bool_or("binary", false) {
        let bin_path = guard.track(out.join("dataset.bin"));
        ds.write_binary(&bin_path).map_err(runtime)?;
    }
    let man_path = guard.track(out.join("manifest.json"));
    write_manifest(&manifest, &man_path).map_err(runtime)?;
    guard.commit();
    println!(
        "gen-data: {} records (attempted {}) -> {} hash {}",
        manifest.produced,
        manifest.attempted,
        data_path.display(),
        manifest.content_hash
    );
    Ok(())
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig, CliFailure> {
    let mut tc = match cfg.str_or("preset", "desk").as_str() {
        "desk" => TrainConfig::desk(),
        "full-scale" => TrainConfig::full_scale(),
        "full-scale-large-batch" => TrainConfig::full_scale_large_batch(),
        other => {
            return Err(CliFailure::Validation(format!(
                "unknown training preset `{other}`"
            )))
        }
    };
    if let Some(v) = cfg.get_f64("lr")? {
        tc.lr = v;
    }
    if let Some(v) = cfg.get_usize("epochs")? {
        tc.epochs = v;
    }
    if let Some(v) = cfg.get_usize("batch")? {
        tc.batch_size = v;
    }
    if let Some(v) = cfg.get_f64("weight-decay")? {
        tc.weight_decay = v;
    }
    Ok(tc)
}

fn run_train(cfg: &RunConfig) -> Result<(), CliFailure> {
    let out = ensure_out(cfg)?;
    let mut guard = OutputGuard::new();
    let data_path = cfg
        .get_str("data")
        .ok_or_else(|| CliFailure::Validation("train requires --data".into()))?;
    let ds = Dataset::read_jsonl(Path::new(&data_path)).map_err(runtime)?;
    if ds.records.is_empty() {
        return Err(CliFailure::Validation("dataset is empty".into()));
    }
    let horizon = ds.records[0].horizon;
    let members = cfg.usize_or("members", 1);
    let seed = cfg.u64_or("seed", 0);
    let arch = cfg.str_or("arch", "reds");
    let m_h = cfg.usize_or("m-h", 32);
    let layers = cfg.usize_or("layers", 2);
    let n_obs_max = cfg.usize_or("n-obs-max", 5);
    let tc = train_config(cfg)?;

    let mut summaries = Vec::new();
    let mut log_csv = String::from("member,epoch,loss\n");
    for k in 0..members {
        let member_seed = redsplan::rng::derive_seed(seed, "train-member", k as u64);
        progress(&format!("training member {k} ({arch}), seed {member_seed}"));
        let (model, log) = match arch.as_str() {
            "reds" => {
                let init = RedsParams::new_recurrent(m_h, layers, member_seed);
                let (p, log) = train(init, &ds, &tc, member_seed).map_err(runtime)?;
                (NetModel::DeepSet(p), log)
            }
            "eds" => {
                let init = RedsParams::new_feedforward(m_h, layers, horizon, member_seed);
                let (p, log) = train(init, &ds, &tc, member_seed).map_err(runtime)?;
                (NetModel::DeepSet(p), log)
            }
            "ff" => {
                let init = baselines::new_ff(n_obs_max, horizon, layers, m_h, member_seed);
                let (p, log) = train_baseline(
                    redsplan::net::BaselineParams::FeedForward(init),
                    &ds,
                    &tc,
                    member_seed,
                )
                .map_err(runtime)?;
                (NetModel::Baseline(p), log)
            }
            "lstm" => {
                let init = baselines::new_lstm(n_obs_max, m_h, member_seed);
                let (p, log) = train_baseline(
                    redsplan::net::BaselineParams::Lstm(init),
                    &ds,
                    &tc,
                    member_seed,
                )
                .map_err(runtime)?;
                (NetModel::Baseline(p), log)
            }
            other => {
                return Err(CliFailure::Validation(format!(
                    "unknown arch `{other}` (reds, eds, ff, lstm)"
                )))
            }
        };
        let path = guard.track(out.join(format!("member_{k}.json")));
        save_model(&model, &path).map_err(runtime)?;
        for (e, l) in log.epoch_losses.iter().enumerate() {
            log_csv.push_str(&format!("{k},{e},{l}\n"));
        }
        summaries.push(serde_json::json!({
            "member": k,
            "arch": arch,
            "seed": member_seed,
            "params": model.param_count(),
            "final_loss": log.epoch_losses.last().copied().unwrap_or(f64::NAN),
            "file": path.display().to_string(),
        }));
    }
    let log_path = guard.track(out.join("training_log.csv"));
    std::fs::write(&log_path, log_csv).map_err(runtime)?;
    let report_path = guard.track(out.join("report.json"));
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "subcommand": "train",
            "dataset": data_path,
            "records": ds.records.len(),
            "horizon": horizon,
            "config": tc,
            "members": summaries,
        }))
        .map_err(runtime)?,
    )
    .map_err(runtime)?;
    guard.commit();
    println!(
        "train: {members} member(s) trained on {} records -> {}",
        ds.records.len(),
        out.display()
    );
    Ok(())
}

fn load_ensemble(cfg: &RunConfig) -> Result<Ensemble, CliFailure> {
    let models_arg = cfg
        .get_str("models")
        .ok_or_else(|| CliFailure::Validation("missing --models (file, dir or comma list)".into()))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for part in models_arg.split(',') {
        let p = PathBuf::from(part.trim());
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&p)
                .map_err(runtime)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.extension().is_some_and(|x| x == "json"))
                .filter(|e| {
                    e.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("member_"))
                })
                .collect();
            entries.sort();
            paths.extend(entries);
        } else {
            paths.push(p);
        }
    }
    if paths.is_empty() {
        return Err(CliFailure::Validation("no model files found".into()));
    }
    let mut members = Vec::new();
    for p in &paths {
        members.push(load_model(p).map_err(runtime)?);
    }
    let seeds = (0..members.len() as u64).collect();
    Ok(Ensemble::new(members, seeds))
}

fn run_eval_open(cfg: &RunConfig) -> Result<(), CliFailure> {
    let out = ensure_out(cfg)?;
    let mut guard = OutputGuard::new();
    let data_path = cfg
        .get_str("data")
        .ok_or_else(|| CliFailure::Validation("eval-open requires --data".into()))?;
    let ds = Dataset::read_jsonl(Path::new(&data_path)).map_err(runtime)?;
    if ds.records.is_empty() {
        return Err(CliFailure::Validation("dataset is empty".into()));
    }
    let ens = load_ensemble(cfg)?;
    let m = ModelParams {
        horizon: ds.records[0].horizon,
        ..ModelParams::default()
    };
    progress(&format!(
        "evaluating {} members on {} samples",
        ens.len(),
        ds.records.len()
    ));
    let report = eval_open_loop(
        &ds,
        &ens,
        &MiqpWeights::default(),
        &m,
        &FpSettings::default(),
        cfg.jobs(),
    )
    .map_err(runtime)?;
    let report_path = guard.track(out.join("report.json"));
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&report).map_err(runtime)?,
    )
    .map_err(runtime)?;
    let csv_path = guard.track(out.join("samples.csv"));
    std::fs::write(&csv_path, report.to_csv()).map_err(runtime)?;
    guard.commit();
    println!(
        "eval-open: {} samples, selected infeasibility {:.3} -> post-projection uncertified {:.3} \
         (cumulative misclassification {:.3})",
        report.n_samples,
        report.selected_infeasibility,
        report.post_projection_uncertified,
        report.cumulative_misclassification
    );
    Ok(())
}

fn run_simulate(cfg: &RunConfig) -> Result<(), CliFailure> {
    let out = ensure_out(cfg)?;
    let mut guard = OutputGuard::new();
    let episodes = cfg.usize_or("episodes", 10);
    let seed = cfg.u64_or("seed", 0);
    let preset = cfg.str_or("preset", "sparse");
    let planner_name = cfg.str_or("planner", "expert");
    let duration = cfg.f64_or("duration", 30.0);
    let write_svg = cfg.bool_or("svg", false);

    let ensemble = if planner_name == "ensemble" {
        Some(load_ensemble(cfg)?)
    } else {
        None
    };
    let planner = match planner_name.as_str() {
        "expert" => PlannerKind::Expert {
            opts: BnbOptions::labeling(),
        },
        "ensemble" => PlannerKind::Learned {
            ensemble: ensemble.as_ref().unwrap(),
            fp: FpSettings::default(),
        },
        other => {
            return Err(CliFailure::Validation(format!(
                "unknown planner `{other}` (expert, ensemble)"
            )))
        }
    };

    let mut all_metrics = Vec::new();
    let mut traj_csv = String::from("episode,t,vehicle,lane,s,n,v,flag\n");
    for k in 0..episodes {
        let episode_seed = redsplan::rng::derive_seed(seed, "sim-episode", k as u64);
        let mut ecfg = match preset.as_str() {
            "sparse" => EpisodeConfig::sparse(episode_seed),
            "dense" => EpisodeConfig::dense(episode_seed),
            other => {
                return Err(CliFailure::Validation(format!(
                    "unknown preset `{other}` (sparse, dense)"
                )))
            }
        };
        ecfg.duration = duration;
        progress(&format!("episode {k} ({preset}, planner {planner_name})"));
        let log = run_episode(&ecfg, &planner).map_err(runtime)?;
        for r in &log.rows {
            traj_csv.push_str(&format!(
                "{k},{},{},{},{},{},{},{}\n",
                r.t, r.vehicle, r.lane, r.s, r.n, r.v, r.flag
            ));
        }
        if write_svg {
            let svg_path = guard.track(out.join(format!("episode_{k}.svg")));
            std::fs::write(&svg_path, time_space_svg(&log.rows, 900.0, 500.0))
                .map_err(runtime)?;
        }
        all_metrics.push(log.metrics);
    }
    let collisions: usize = all_metrics.iter().map(|m| m.collisions).sum();
    let mean_cost =
        all_metrics.iter().map(|m| m.cost_per_second).sum::<f64>() / episodes.max(1) as f64;
    let metrics_path = guard.track(out.join("metrics.json"));
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "subcommand": "simulate",
            "preset": preset,
            "planner": planner_name,
            "episodes": all_metrics,
            "total_collisions": collisions,
            "mean_cost_per_second": mean_cost,
        }))
        .map_err(runtime)?,
    )
    .map_err(runtime)?;
    let traj_path = guard.track(out.join("trajectory.csv"));
    std::fs::write(&traj_path, traj_csv).map_err(runtime)?;
    guard.commit();
    println!(
        "simulate: {episodes} {preset} episode(s) with {planner_name}: {collisions} collision(s), \
         mean cost {mean_cost:.2}/s -> {}",
        out.display()
    );
    Ok(())
}

fn run_bench(cfg: &RunConfig) -> Result<(), CliFailure> {
    let out = ensure_out(cfg)?;
    let mut guard = OutputGuard::new();
    let n = cfg.usize_or("n", 50);
    let seed = cfg.u64_or("seed", 0);
    let m = ModelParams {
        horizon: cfg.usize_or("horizon", 50),
        ..ModelParams::default()
    };
    let n_obs = cfg.usize_or("n-obs", 5);
    let ens = match cfg.get_str("models") {
        Some(_) => Some(load_ensemble(cfg)?),
        None => None,
    };
    let w = MiqpWeights::default();
    let bnb_opts = BnbOptions {
        max_nodes: cfg.usize_or("max-nodes", 400),
        ..BnbOptions::default()
    };
    let ranges = SampleRanges {
        n_obs: (n_obs, n_obs),
        ..SampleRanges::default()
    };

    let mut csv = String::from("instance,t_miqp,t_nn,t_qp,t_fp,t_serial,t_parallel\n");
    let mut t_miqp_all = Vec::new();
    let mut t_qp_all = Vec::new();
    let mut produced = 0usize;
    let mut idx = 0u64;
    while produced < n && idx < 10 * n as u64 + 100 {
        let mut rng = redsplan::rng::substream(seed, "bench", idx);
        idx += 1;
        let Some(pi) = redsplan::data::sample_parameters(&mut rng, &ranges, &m) else {
            continue;
        };
        let Ok(inst) = build_miqp(&pi, &w, &m) else {
            continue;
        };
        if inst.infeasible_root {
            continue;
        }
        let t0 = std::time::Instant::now();
        let Ok(expert) = solve_bnb(&inst, &bnb_opts) else {
            continue;
        };
        let t_miqp = t0.elapsed().as_secs_f64();
        if expert.status == MiqpStatus::Infeasible {
            continue;
        }

        // learned pipeline timing: ensemble when given, otherwise the
        // expert labels play the prediction role for the soft QP + FP path
        let (t_nn, t_qp, t_fp, t_serial, t_parallel) = match &ens {
            Some(ens) => {
                match redsplan::planner::plan(&pi, ens, &w, &m, &FpSettings::default()) {
                    Ok(res) => (
                        res.timing.t_nn.iter().sum::<f64>(),
                        res.timing.t_qp.iter().sum::<f64>(),
                        res.timing.t_fp,
                        res.timing.t_serial,
                        res.timing.t_parallel,
                    ),
                    Err(_) => continue,
                }
            }
            None => {
                let t1 = std::time::Instant::now();
                let Ok(soft) = solve_soft_qp(&inst, &expert.binaries) else {
                    continue;
                };
                let t_qp = t1.elapsed().as_secs_f64();
                let t2 = std::time::Instant::now();
                let ellipses = redsplan::planner::ellipse_tracks(&pi, m.horizon)
                    .map_err(runtime)?;
                let _ = redsplan::projector::sqp_project(
                    &soft.states,
                    &soft.controls,
                    &ellipses,
                    &m,
                    &FpSettings::default(),
                )
                .map_err(runtime)?;
                let t_fp = t2.elapsed().as_secs_f64();
                (0.0, t_qp, t_fp, t_qp + t_fp, t_qp + t_fp)
            }
        };
        csv.push_str(&format!(
            "{produced},{t_miqp},{t_nn},{t_qp},{t_fp},{t_serial},{t_parallel}\n"
        ));
        t_miqp_all.push(t_miqp);
        t_qp_all.push(t_qp);
        produced += 1;
        progress(&format!("bench instance {produced}/{n}"));
    }
    if produced == 0 {
        return Err(CliFailure::Runtime("no feasible bench instances".into()));
    }
    let median = |v: &mut Vec<f64>| -> f64 {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v[v.len() / 2]
    };
    let med_miqp = median(&mut t_miqp_all);
    let med_qp = median(&mut t_qp_all);
    let csv_path = guard.track(out.join("timings.csv"));
    std::fs::write(&csv_path, csv).map_err(runtime)?;
    let report_path = guard.track(out.join("report.json"));
    std::fs::write(
        &report_path,
        serde_json::to_string_pretty(&serde_json::json!({
            "subcommand": "bench",
            "instances": produced,
            "horizon": m.horizon,
            "n_obs": n_obs,
            "median_t_miqp": med_miqp,
            "median_t_qp": med_qp,
            "speedup_median": med_miqp / med_qp.max(1e-12),
        }))
        .map_err(runtime)?,
    )
    .map_err(runtime)?;
    guard.commit();
    println!(
        "bench: {produced} instances, median expert {:.3}s vs soft QP {:.4}s ({:.0}x)",
        med_miqp,
        med_qp,
        med_miqp / med_qp.max(1e-12)
    );
    Ok(())
}

fn run_selftest(cfg: &RunConfig) -> Result<(), CliFailure> {
    let seed = cfg.u64_or("seed", 0);
    let checks = redsplan::selftest::run(seed);
    let mut all_ok = true;
    for c in &checks {
        println!(
            "{} {:<24} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
        all_ok &= c.passed;
    }
    if all_ok {
        println!("selftest: {} checks passed", checks.len());
        Ok(())
    } else {
        Err(CliFailure::Runtime("selftest failed".into()))
    }
}

