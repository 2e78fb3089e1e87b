//! Experiment front end: runs configured training, sweeps, verification
//! commands, and bound evaluation. All outputs are deterministic under a
//! fixed seed.
//!
//! Exit codes: 0 success, 1 invalid config, 2 runtime error, 3 verification
//! failure.

use clap::{Parser, Subcommand, ValueEnum};
use csefsl::algo::{run, write_metrics_csv, RunTrace, WorldState};
use csefsl::bounds::{
    bound_report, estimate_grad_bound, estimate_smoothness, lr_from_theory, track_grad_norms,
    BoundInputs, GradNormTrace, LrRole,
};
use csefsl::config::ExperimentConfig;
use csefsl::data::batches;
use csefsl::ledger::{analytic_comm, analytic_storage, reconcile, Method};
use csefsl::nn::{grad_check, init_params, LrSchedule};
use csefsl::split::{
    build_cifar10_arch, build_femnist_arch, concat_client_server, AuxKind, Batch,
    SplitArchitecture,
};
use csefsl::{Error, Result};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "csefsl", version, about = "Split federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configured experiment; writes metrics.csv, ledger.csv,
    /// trace.jsonl, and reconcile.json into the output directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Check the built-in architectures against the reference parameter counts.
    VerifyCounts {
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Run one epoch per method on a small synthetic world and reconcile the
    /// message ledger against the closed-form cost model.
    VerifyTable2 {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Run the base config once per value of a swept parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',')]
        values: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Paired runs with ordered vs randomly permuted client delays; reports
    /// the mean absolute test-accuracy delta.
    ArrivalStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "5")]
        seeds: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Finite-difference gradient verification over a battery of stacks.
    Gradcheck {
        #[arg(long, default_value = "0")]
        seed: u64,
        #[arg(long, default_value = "5")]
        trials: usize,
        #[arg(long, value_enum, default_value = "csv")]
        format: Format,
    },
    /// Evaluate the convergence-bound formulas on a configured run, with
    /// empirically estimated constants; writes bounds.json.
    Bounds {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "json")]
        format: Format,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SweepParam {
    H,
    N,
    AuxChannels,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_) | Error::Config { .. } | Error::Plan(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run { config, seed, out, format } => cmd_run(&config, seed, &out, format),
        Command::VerifyCounts { format } => cmd_verify_counts(format),
        Command::VerifyTable2 { seed, format } => cmd_verify_table2(seed.unwrap_or(11), format),
        Command::Sweep { config, param, values, seed, out, format } => {
            cmd_sweep(&config, param, &values, seed, &out, format)
        }
        Command::ArrivalStudy { config, seed, seeds, out, format } => {
            cmd_arrival_study(&config, seed, seeds, &out, format)
        }
        Command::Gradcheck { seed, trials, format } => cmd_gradcheck(seed, trials, format),
        Command::Bounds { config, seed, out, format } => cmd_bounds(&config, seed, &out, format),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_path(path)?;
    if let Some(s) = seed {
        cfg.run.seed = s;
    }
    Ok(cfg)
}

fn execute(cfg: &ExperimentConfig) -> Result<RunTrace> {
    let run_cfg = cfg.run_config()?;
    let arch = cfg.architecture();
    let (train, test) = cfg.load_datasets()?;
    let shards = cfg.shards(&train)?;
    let mut profiles = cfg.client_profiles(run_cfg.seed)?;
    let mut world = WorldState::init(arch, &run_cfg)?;
    run(&mut world, &run_cfg, &shards, &train, &test, &mut profiles)
}

fn cmd_run(config: &Path, seed: Option<u64>, out: &Path, format: Format) -> Result<ExitCode> {
    let cfg = load_config(config, seed)?;
    let trace = execute(&cfg)?;
    fs::create_dir_all(out)?;

    let mut metrics = Vec::new();
    write_metrics_csv(&trace.metrics, &mut metrics)?;
    fs::write(out.join("metrics.csv"), &metrics)?;

    let mut ledger_csv = Vec::new();
    trace.ledger.export_csv(&mut ledger_csv)?;
    fs::write(out.join("ledger.csv"), &ledger_csv)?;

    let mut events = Vec::new();
    trace.export_events(&mut events)?;
    fs::write(out.join("trace.jsonl"), &events)?;

    let report = reconcile(&trace.ledger, cfg.run.method, &trace.cost_model, cfg.run.t_rounds, false)?;
    fs::write(out.join("reconcile.json"), to_json_pretty(&report)?)?;

    let last = trace.metrics.last().expect("at least one round");
    match format {
        Format::Json => println!(
            "{}",
            serde_json::json!({
                "rounds": trace.metrics.len(),
                "final_top1": last.test_top1,
                "comm_cumulative_units": last.comm_cumulative_units,
                "peak_storage_units": trace.peak_storage_units,
            })
        ),
        Format::Csv => {
            println!("rounds,final_top1,comm_cumulative_units,peak_storage_units");
            println!(
                "{},{:.6},{},{}",
                trace.metrics.len(),
                last.test_top1,
                last.comm_cumulative_units,
                trace.peak_storage_units
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

struct CountCheck {
    name: &'static str,
    expected: usize,
    actual: usize,
}

fn reference_counts() -> Vec<CountCheck> {
    let mut checks = Vec::new();
    let cifar = build_cifar10_arch(AuxKind::Mlp);
    checks.push(CountCheck { name: "cifar10_client", expected: 107_328, actual: cifar.client_params() });
    checks.push(CountCheck { name: "cifar10_server", expected: 960_970, actual: cifar.server_params() });
    for (label, aux, expected) in [
        ("cifar10_aux_mlp", AuxKind::Mlp, 23_050),
        ("cifar10_aux_cnn54", AuxKind::CnnMlp { channels: 54 }, 22_960),
        ("cifar10_aux_cnn27", AuxKind::CnnMlp { channels: 27 }, 11_485),
        ("cifar10_aux_cnn14", AuxKind::CnnMlp { channels: 14 }, 5_960),
        ("cifar10_aux_cnn7", AuxKind::CnnMlp { channels: 7 }, 2_985),
    ] {
        let arch = build_cifar10_arch(aux);
        checks.push(CountCheck { name: label, expected, actual: arch.aux_params() });
    }
    let femnist = build_femnist_arch(AuxKind::Mlp);
    checks.push(CountCheck { name: "femnist_client", expected: 18_816, actual: femnist.client_params() });
    checks.push(CountCheck { name: "femnist_server", expected: 1_187_774, actual: femnist.server_params() });
    for (label, aux, expected) in [
        ("femnist_aux_mlp", AuxKind::Mlp, 571_454),
        ("femnist_aux_cnn64", AuxKind::CnnMlp { channels: 64 }, 575_614),
        ("femnist_aux_cnn32", AuxKind::CnnMlp { channels: 32 }, 287_838),
        ("femnist_aux_cnn8", AuxKind::CnnMlp { channels: 8 }, 72_006),
        ("femnist_aux_cnn2", AuxKind::CnnMlp { channels: 2 }, 18_048),
    ] {
        let arch = build_femnist_arch(aux);
        checks.push(CountCheck { name: label, expected, actual: arch.aux_params() });
    }
    checks
}

fn cmd_verify_counts(format: Format) -> Result<ExitCode> {
    let checks = reference_counts();
    let mut all_ok = true;
    let mut rows = String::new();
    let mut json_rows = Vec::new();
    for c in &checks {
        let ok = c.expected == c.actual;
        all_ok &= ok;
        writeln!(
            rows,
            "{},{},{},{}",
            c.name,
            c.expected,
            c.actual,
            if ok { "PASS" } else { "FAIL" }
        )
        .expect("string write");
        json_rows.push(serde_json::json!({
            "name": c.name, "expected": c.expected, "actual": c.actual, "pass": ok,
        }));
    }
    match format {
        Format::Csv => {
            println!("name,expected,actual,status");
            print!("{rows}");
        }
        Format::Json => println!("{}", serde_json::json!({ "checks": json_rows, "pass": all_ok })),
    }
    Ok(verdict(all_ok))
}

fn cmd_verify_table2(seed: u64, format: Format) -> Result<ExitCode> {
    use csefsl::algo::RunConfig;
    use csefsl::data::{partition, synth_dataset, PartitionPlan};
    use csefsl::sched::{ClientProfile, DelayModel};

    let mut all_ok = true;
    let mut rows = String::new();
    let mut json_rows = Vec::new();
    let mut check = |label: String, measured: f64, analytic: f64| {
        let ok = (measured - analytic).abs() < 1e-9;
        all_ok &= ok;
        writeln!(
            rows,
            "{label},{measured},{analytic},{}",
            if ok { "PASS" } else { "FAIL" }
        )
        .expect("string write");
        json_rows.push(serde_json::json!({
            "case": label, "measured": measured, "analytic": analytic, "pass": ok,
        }));
    };

    let run_one = |method: Method, n: usize, h: usize| -> Result<RunTrace> {
        let cfg = RunConfig {
            method,
            n,
            k: n,
            h,
            c: None,
            t_rounds: 1,
            batch_size: 4,
            lr: LrSchedule::constant(0.05),
            server_lr: None,
            clip_threshold: if method == Method::FslOc { Some(1.0) } else { None },
            seed,
            eval_replica_zero: false,
        };
        let train = synth_dataset(7, n * 8, 6, 3, 3.0);
        let test = synth_dataset(8, 30, 6, 3, 3.0);
        let shards = partition(&train, PartitionPlan::Iid, n, 5)?;
        let arch = csefsl::split::build_dense_arch(6, 8, 10, 3);
        let mut world = WorldState::init(arch, &cfg)?;
        let mut profiles: Vec<ClientProfile> = (0..n)
            .map(|i| ClientProfile::new(i, DelayModel::Fixed { value: 0.0 }, 0.0, 0.0, seed))
            .collect::<Result<_>>()?;
        run(&mut world, &cfg, &shards, &train, &test, &mut profiles)
    };

    for n in [2usize, 5] {
        for (method, hs) in [
            (Method::FslMc, vec![1usize]),
            (Method::FslOc, vec![1]),
            (Method::FslAn, vec![1]),
            (Method::CseFsl, vec![1, 2]),
        ] {
            for h in hs {
                let trace = run_one(method, n, h)?;
                let report = reconcile(&trace.ledger, method, &trace.cost_model, 1, false)?;
                check(format!("comm_{}_n{}_h{}", method.as_str(), n, h), report.measured, report.analytic);
                check(
                    format!("storage_{}_n{}_h{}", method.as_str(), n, h),
                    trace.peak_storage_units as f64,
                    analytic_storage(method, &trace.cost_model)?,
                );
            }
        }
    }

    // Single-model storage must not grow with the client count.
    let s2 = run_one(Method::CseFsl, 2, 1)?.peak_storage_units;
    let s8 = run_one(Method::CseFsl, 8, 1)?.peak_storage_units;
    check("storage_cse_fsl_n_invariance".into(), s2 as f64, s8 as f64);

    // Halving the upload frequency halves smashed traffic relative to the
    // per-batch aux baseline.
    let an = run_one(Method::FslAn, 2, 1)?;
    let cse2 = run_one(Method::CseFsl, 2, 2)?;
    let an_sm = an.ledger.total(csefsl::ledger::MessageKind::SmashedUpload);
    let cse_sm = cse2.ledger.total(csefsl::ledger::MessageKind::SmashedUpload);
    check("smashed_ratio_an_vs_cse_h2".into(), an_sm, 2.0 * cse_sm);

    match format {
        Format::Csv => {
            println!("case,measured,analytic,status");
            print!("{rows}");
        }
        Format::Json => println!("{}", serde_json::json!({ "checks": json_rows, "pass": all_ok })),
    }
    Ok(verdict(all_ok))
}

fn cmd_sweep(
    config: &Path,
    param: SweepParam,
    values: &[usize],
    seed: Option<u64>,
    out: &Path,
    format: Format,
) -> Result<ExitCode> {
    let base = load_config(config, seed)?;
    fs::create_dir_all(out)?;
    let mut summary = String::from(
        "value,final_top1,comm_cumulative_units,peak_storage_units,analytic_comm_per_epoch,analytic_storage\n",
    );
    let mut json_rows = Vec::new();
    for &v in values {
        let mut cfg = base.clone();
        match param {
            SweepParam::H => cfg.run.h = v,
            SweepParam::N => {
                cfg.run.n = v;
                cfg.run.k = None;
            }
            SweepParam::AuxChannels => {
                set_aux(&mut cfg, AuxKind::CnnMlp { channels: v })?;
            }
        }
        cfg.validate()?;
        let trace = execute(&cfg)?;
        let last = trace.metrics.last().expect("rounds >= 1");
        let ac = analytic_comm(cfg.run.method, &trace.cost_model)?;
        let st = analytic_storage(cfg.run.method, &trace.cost_model)?;
        writeln!(
            summary,
            "{v},{:.6},{},{},{},{}",
            last.test_top1, last.comm_cumulative_units, trace.peak_storage_units, ac, st
        )
        .expect("string write");
        json_rows.push(serde_json::json!({
            "value": v,
            "final_top1": last.test_top1,
            "comm_cumulative_units": last.comm_cumulative_units,
            "peak_storage_units": trace.peak_storage_units,
            "analytic_comm_per_epoch": ac,
            "analytic_storage": st,
        }));
        let mut metrics = Vec::new();
        write_metrics_csv(&trace.metrics, &mut metrics)?;
        fs::write(out.join(format!("metrics_{}.csv", v)), &metrics)?;
    }
    fs::write(out.join("sweep_summary.csv"), &summary)?;
    match format {
        Format::Csv => print!("{summary}"),
        Format::Json => println!("{}", serde_json::json!({ "sweep": json_rows })),
    }
    Ok(ExitCode::SUCCESS)
}

fn set_aux(cfg: &mut ExperimentConfig, aux: AuxKind) -> Result<()> {
    use csefsl::config::ArchConfig;
    match &mut cfg.arch {
        ArchConfig::Dense { aux: a, .. }
        | ArchConfig::Cifar10 { aux: a }
        | ArchConfig::Femnist { aux: a } => *a = aux,
    }
    Ok(())
}

fn cmd_arrival_study(
    config: &Path,
    seed: Option<u64>,
    seeds: usize,
    out: &Path,
    format: Format,
) -> Result<ExitCode> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let base = load_config(config, seed)?;
    fs::create_dir_all(out)?;
    if seeds == 0 {
        return Err(Error::InvalidConfig("seeds must be >= 1".into()));
    }
    let n = base.run.n;
    let base_delays: Vec<f64> = match &base.profiles.per_client_delays {
        Some(d) => d.clone(),
        // Default stagger: client i computes each batch in 0.1*(i+1).
        None => (0..n).map(|i| 0.1 * (i + 1) as f64).collect(),
    };

    let mut rows = String::from("seed,acc_ordered,acc_random,delta\n");
    let mut deltas = Vec::new();
    for s in 0..seeds {
        let run_seed = base.run.seed.wrapping_add(s as u64);
        let mut ordered_cfg = base.clone();
        ordered_cfg.run.seed = run_seed;
        ordered_cfg.profiles.per_client_delays = Some(base_delays.clone());
        let ordered = execute(&ordered_cfg)?;

        let mut permuted = base_delays.clone();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(run_seed ^ 0x5DEE_CE66);
        permuted.shuffle(&mut rng);
        let mut random_cfg = base.clone();
        random_cfg.run.seed = run_seed;
        random_cfg.profiles.per_client_delays = Some(permuted);
        let random = execute(&random_cfg)?;

        let a = ordered.final_accuracy();
        let b = random.final_accuracy();
        let delta = (a - b).abs();
        writeln!(rows, "{run_seed},{a:.6},{b:.6},{delta:.6}").expect("string write");
        deltas.push(delta);
    }
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    fs::write(out.join("arrival_study.csv"), &rows)?;
    match format {
        Format::Csv => {
            print!("{rows}");
            println!("mean_delta,{mean_delta:.6}");
        }
        Format::Json => println!(
            "{}",
            serde_json::json!({ "mean_delta": mean_delta, "deltas": deltas })
        ),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, trials: usize, format: Format) -> Result<ExitCode> {
    use csefsl::data::synth_dataset;

    let arch = csefsl::split::build_dense_arch(6, 8, 10, 3);
    let mut worst: f64 = 0.0;
    let mut rows = String::from("case,seed,max_rel_err\n");
    let mut json_rows = Vec::new();
    for k in 0..trials {
        let s = seed.wrapping_add(k as u64);
        let data = synth_dataset(s, 6, 6, 3, 2.0);
        let input = data.features.clone();
        let labels = data.labels.clone();
        for (label, stack) in composite_stacks(&arch) {
            let params = init_params(&stack, s);
            let err = grad_check(&stack, &params, &input, &labels, 1e-5, s)?;
            worst = worst.max(err);
            writeln!(rows, "{label},{s},{err:.3e}").expect("string write");
            json_rows.push(serde_json::json!({ "case": label, "seed": s, "max_rel_err": err }));
        }
        // small conv/pool/lrn battery on image-shaped input
        let conv_stack = conv_battery();
        let imgs = synth_dataset(s.wrapping_add(99), 2, 2 * 6 * 6, 2, 1.0);
        let input = csefsl::Tensor::new(vec![2, 2, 6, 6], imgs.features.data().to_vec());
        let params = init_params(&conv_stack, s);
        let err = grad_check(&conv_stack, &params, &input, &imgs.labels, 1e-5, s)?;
        worst = worst.max(err);
        writeln!(rows, "conv_battery,{s},{err:.3e}").expect("string write");
        json_rows.push(serde_json::json!({ "case": "conv_battery", "seed": s, "max_rel_err": err }));
    }
    let pass = worst < 1e-4;
    match format {
        Format::Csv => {
            print!("{rows}");
            println!("worst,{worst:.3e},{}", if pass { "PASS" } else { "FAIL" });
        }
        Format::Json => println!(
            "{}",
            serde_json::json!({ "checks": json_rows, "worst": worst, "pass": pass })
        ),
    }
    Ok(verdict(pass))
}

fn composite_stacks(arch: &SplitArchitecture) -> Vec<(&'static str, Vec<csefsl::nn::LayerSpec>)> {
    let client_aux = {
        let mut s = arch.client_stack.clone();
        s.extend(arch.aux_stack.iter().cloned());
        s
    };
    let dummy_client = init_params(&arch.client_stack, 0);
    let dummy_server = init_params(&arch.server_stack, 0);
    let (client_server, _) = concat_client_server(arch, &dummy_client, &dummy_server);
    vec![("client_aux", client_aux), ("client_server", client_server)]
}

fn conv_battery() -> Vec<csefsl::nn::LayerSpec> {
    use csefsl::nn::{LayerSpec, Padding};
    vec![
        LayerSpec::Conv2D {
            kh: 3,
            kw: 3,
            in_ch: 2,
            out_ch: 3,
            padding: Padding::Same,
            stride: 1,
            bias: true,
        },
        LayerSpec::ReLU,
        LayerSpec::MaxPool2D { k: 2, stride: 2 },
        csefsl::nn::lrn_default(),
        LayerSpec::Flatten,
        LayerSpec::Dense { in_dim: 3 * 3 * 3, out_dim: 2, bias: true },
    ]
}

fn cmd_bounds(config: &Path, seed: Option<u64>, out: &Path, format: Format) -> Result<ExitCode> {
    let cfg = load_config(config, seed)?;
    let mut run_cfg = cfg.run_config()?;
    let arch = cfg.architecture();
    let (train, test) = cfg.load_datasets()?;
    let shards = cfg.shards(&train)?;

    // Estimate the assumption constants at the initial point.
    let world0 = WorldState::init(arch.clone(), &run_cfg)?;
    let bounds_cfg = cfg.bounds.clone().unwrap_or(csefsl::config::BoundsConfig {
        bins: 100,
        trials: 8,
        radius: 1e-3,
        use_theory_lr: false,
    });
    let probe: Vec<Batch> = batches(&shards[0], &train, run_cfg.batch_size, run_cfg.seed)
        .into_iter()
        .map(|mb| Batch { features: mb.features, labels: mb.labels, batch_index: mb.batch_index })
        .collect();
    if probe.is_empty() {
        return Err(Error::InvalidConfig("shard 0 yields no batches".into()));
    }
    let l = estimate_smoothness(
        &arch,
        &world0.client_params[0],
        &world0.aux_params[0],
        &probe[0],
        bounds_cfg.trials,
        bounds_cfg.radius,
        run_cfg.seed,
    )?;
    let g = estimate_grad_bound(&arch, &world0.client_params[0], &world0.aux_params[0], &probe)?;

    if bounds_cfg.use_theory_lr {
        let t = run_cfg.t_rounds as f64;
        run_cfg.lr = LrSchedule::constant(lr_from_theory(LrRole::Client, l, run_cfg.h as f64, t)?);
        run_cfg.server_lr =
            Some(LrSchedule::constant(lr_from_theory(LrRole::Server, l, run_cfg.n as f64, t)?));
    }

    // Train while tracking full-batch gradient norms each round.
    let mut world = WorldState::init(arch.clone(), &run_cfg)?;
    let mut trace = GradNormTrace::default();
    let mut profiles = cfg.client_profiles(run_cfg.seed)?;
    let mut per_round_cfg = run_cfg.clone();
    per_round_cfg.t_rounds = 1;
    let mut initial_loss_c = None;
    let mut best_loss_c = f64::INFINITY;
    let mut initial_loss_s = None;
    let mut best_loss_s = f64::INFINITY;
    let mut dct_series = String::from("round,client,dct\n");
    let mut d_sum = 0.0;
    let ref_hists: Vec<_> = shard_histograms(&arch, &world, &shards, &train, bounds_cfg.bins)?;
    for t in 0..run_cfg.t_rounds {
        let server_eval = world.server.eval_params(run_cfg.eval_replica_zero);
        track_grad_norms(
            &arch,
            &world.client_params,
            &world.aux_params,
            &server_eval,
            &shards,
            &train,
            &mut trace,
        )?;
        let hists = shard_histograms(&arch, &world, &shards, &train, bounds_cfg.bins)?;
        for (i, (h, r)) in hists.iter().zip(&ref_hists).enumerate() {
            let d = csefsl::bounds::estimate_dct(h, r)?;
            d_sum += d;
            writeln!(dct_series, "{t},{i},{d:.6}").expect("string write");
        }
        let rt = run(&mut world, &per_round_cfg, &shards, &train, &test, &mut profiles)?;
        let m = &rt.metrics[0];
        initial_loss_c.get_or_insert(m.train_loss_c);
        initial_loss_s.get_or_insert(m.train_loss_s);
        best_loss_c = best_loss_c.min(m.train_loss_c);
        best_loss_s = best_loss_s.min(m.train_loss_s);
    }

    let bi = BoundInputs {
        l,
        g1: g,
        g2: g,
        h: run_cfg.h as f64,
        n: run_cfg.n as f64,
        t: run_cfg.t_rounds as f64,
        delta_c: (initial_loss_c.unwrap_or(0.0) - best_loss_c).max(0.0),
        delta_s: (initial_loss_s.unwrap_or(0.0) - best_loss_s).max(0.0),
        d_sum,
    };
    let report = bound_report(&bi, Some(&trace))?;
    fs::create_dir_all(out)?;
    fs::write(out.join("bounds.json"), to_json_pretty(&report)?)?;
    fs::write(out.join("dct_series.csv"), &dct_series)?;
    match format {
        Format::Json => println!("{}", serde_json::to_string(&report).expect("serializable")),
        Format::Csv => {
            println!("client_bound,server_bound,measured_client_mean_sq,consistent");
            println!(
                "{},{},{},{}",
                report.client_bound,
                report.server_bound,
                report.measured_client_mean_sq.unwrap_or(f64::NAN),
                report.client_consistent.unwrap_or(false)
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn shard_histograms(
    arch: &SplitArchitecture,
    world: &WorldState,
    shards: &[csefsl::data::ClientShard],
    train: &csefsl::data::Dataset,
    bins: usize,
) -> Result<Vec<csefsl::bounds::ActivationHistogram>> {
    use csefsl::bounds::{ActivationHistogram, DctMode};
    shards
        .iter()
        .enumerate()
        .map(|(i, shard)| {
            let features = train.features.select_rows(&shard.indices);
            let (_, cut) = csefsl::nn::forward(&arch.client_stack, &world.client_params[i], &features, false, 0)?;
            // ReLU cut activations live in [0, inf); a fixed shared range
            // keeps every histogram comparable.
            ActivationHistogram::build(&cut, 0.0, 4.0, bins, DctMode::PerDimension)
        })
        .collect()
}

fn verdict(pass: bool) -> ExitCode {
    if pass {
        println!("VERIFY PASS");
        ExitCode::SUCCESS
    } else {
        println!("VERIFY FAIL");
        ExitCode::from(3)
    }
}

fn to_json_pretty<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Internal(e.to_string()))
}
