//! Subcommand implementations. Each artifact-producing command writes a
//! `manifest.json` next to its outputs.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adapref::bandit::{self, AlignStudyConfig, BanditConfig, GridSpec};
use adapref::data::{self, Dataset, DatasetConfig, GroundTruth};
use adapref::dpo::{self, DpoConfig, DpoDataConfig, DpoDataset, TabularPolicy};
use adapref::loss::{self, LossConfig, LossKind};
use adapref::model::{Activation, Architecture};
use adapref::optim::OptimizerConfig;
use adapref::tau::{self, TauSolverConfig};
use adapref::train::{self, CheckpointPolicy, TrainConfig, TrainReport};
use adapref::verify;
use serde::Serialize;

use crate::manifest::{hash_inputs, RunManifest};
use crate::svg::{emit_svg, CsvTable, SvgKind};
use crate::*;

pub fn dispatch(command: Command, argv: &[String]) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => gen_data(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Verify(a) => verify_cmd(a),
        Command::Analyze(a) => analyze(a, argv),
        Command::Dpo(a) => dpo_cmd(a, argv),
        Command::AlignStudy(a) => align_study(a, argv),
        Command::SweepRho(a) => sweep_rho(a, argv),
    }
}

/// Collects outputs of one invocation and writes its manifest.
struct Run {
    command: &'static str,
    dir: PathBuf,
    started: Instant,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn start(command: &'static str, dir: PathBuf) -> Result<Self, CliError> {
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        Ok(Self {
            command,
            dir,
            started: Instant::now(),
            outputs: Vec::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        let text = serde_json::to_string_pretty(value).map_err(adapref::Error::from)?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(path.clone());
        Ok(path)
    }

    fn csv(&mut self, name: &str, table: &CsvTable) -> Result<(), CliError> {
        let path = self.path(name);
        table.write(&path)?;
        self.outputs.push(path);
        Ok(())
    }

    fn svg(
        &mut self,
        name: &str,
        table: &CsvTable,
        kind: SvgKind,
        title: &str,
    ) -> Result<(), CliError> {
        let path = self.path(name);
        fs::write(&path, emit_svg(table, kind, title)?).map_err(|e| CliError::io(&path, e))?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish<C: Serialize>(
        self,
        argv: &[String],
        config: &C,
        seed: Option<u64>,
        inputs: &[PathBuf],
    ) -> Result<(), CliError> {
        let (inputs, input_hash) = hash_inputs(inputs)?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: argv.to_vec(),
            config: serde_json::to_value(config).map_err(adapref::Error::from)?,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs,
            outputs: self.outputs,
            wall_clock_secs: self.started.elapsed().as_secs_f64(),
            input_hash,
        };
        let path = manifest.write(&self.dir)?;
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn require_file(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ))
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

pub fn loss_config(a: &LossArgs) -> Result<LossConfig, CliError> {
    let cfg = match a.loss {
        LossArg::Ce => LossConfig::cross_entropy(),
        LossArg::AdaLin => {
            LossConfig::adaptive_linear(a.tau0, a.tau_max.unwrap_or(loss::DEFAULT_TAU_MAX), a.rho0)
        }
        LossArg::AdaQuad => {
            if a.tau_max.is_some() {
                return Err(usage(
                    "--tau-max does not apply to ada-quad, whose scaling factor is unbounded above",
                ));
            }
            LossConfig::adaptive_quadratic(a.tau0, a.rho0)
        }
        LossArg::Hinge => LossConfig::hinge(a.hinge_margin),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn solver_config(a: &LossArgs) -> TauSolverConfig {
    TauSolverConfig {
        warm_start: a.warm_start,
        ..TauSolverConfig::with_iters(a.newton_iters)
    }
}

fn optimizer_config(kind: OptimizerArg, lr: f64) -> OptimizerConfig {
    match kind {
        OptimizerArg::Sgd => OptimizerConfig::sgd(lr),
        OptimizerArg::Adam => OptimizerConfig::adam(lr),
    }
}

fn architecture(arch: ArchArg, hidden: usize) -> Architecture {
    match arch {
        ArchArg::Linear => Architecture::Linear,
        ArchArg::Mlp2 => Architecture::Mlp2 { hidden },
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn gen_data(a: GenDataArgs, argv: &[String]) -> Result<(), CliError> {
    let cfg = DatasetConfig {
        n_pairs: a.pairs,
        input_dim: a.dim,
        segment_length: a.seg_len,
        gamma: a.gamma,
        label_mode: a.label_mode.into(),
        noise_scale: a.noise_scale,
        seed: a.seed,
        train_fraction: a.train_fraction,
        ..DatasetConfig::default()
    };
    cfg.validate()?;
    let gt_seed = a.gt_seed.unwrap_or(a.seed);
    let gt = match a.gt_hidden {
        Some(0) => return Err(usage("--gt-hidden must be positive")),
        Some(h) => GroundTruth::random_mlp2(a.dim, h, a.gamma, gt_seed),
        None => GroundTruth::random_linear(a.dim, a.gamma, gt_seed),
    };
    let splits = data::generate(&cfg, &gt)?;
    let mut run = Run::start("gen-data", output_dir(a.out.as_deref(), "data"))?;
    for (name, set) in [("train.jsonl", &splits.train), ("test.jsonl", &splits.test)] {
        let path = run.path(name);
        set.save(&path)?;
        run.outputs.push(path);
    }
    println!(
        "generated {} train and {} test pairs in {}",
        splits.train.len(),
        splits.test.len(),
        run.dir.display()
    );
    #[derive(Serialize)]
    struct GenConfig<'a> {
        dataset: &'a DatasetConfig,
        ground_truth_hidden: Option<usize>,
        ground_truth_seed: u64,
    }
    let config = GenConfig {
        dataset: &cfg,
        ground_truth_hidden: a.gt_hidden,
        ground_truth_seed: gt_seed,
    };
    run.finish(argv, &config, Some(a.seed), &[])
}

/// Training split plus optional test split, and the files they came from.
fn load_data(path: &Path) -> Result<(Dataset, Option<Dataset>, Vec<PathBuf>), CliError> {
    if path.is_dir() {
        let train = path.join("train.jsonl");
        require_file(&train)?;
        let test = path.join("test.jsonl");
        let mut inputs = vec![train.clone()];
        let test_set = if test.is_file() {
            inputs.push(test.clone());
            Some(Dataset::load(&test)?)
        } else {
            None
        };
        Ok((Dataset::load(&train)?, test_set, inputs))
    } else {
        require_file(path)?;
        Ok((Dataset::load(path)?, None, vec![path.to_path_buf()]))
    }
}

fn train_cmd(a: TrainArgs, argv: &[String]) -> Result<(), CliError> {
    let cfg = TrainConfig {
        loss: loss_config(&a.loss)?,
        solver: solver_config(&a.loss),
        optimizer: optimizer_config(a.loss.optimizer, a.lr),
        architecture: architecture(a.arch, a.hidden),
        activation: match a.activation {
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Relu => Activation::Relu,
        },
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        eval_every: 1,
        checkpoints: CheckpointPolicy::EveryEpoch,
    };
    cfg.validate()?;
    let (train_set, test_set, inputs) = load_data(&a.data)?;
    let mut run = Run::start("train", output_dir(a.out.as_deref(), "train"))?;
    let ckpt_dir = run.path("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;

    let mut written = Vec::new();
    let outcome = train::train_with_hook(&train_set, test_set.as_ref(), &cfg, |stats, model| {
        let name = format!("checkpoints/epoch_{:04}.json", stats.epoch);
        let path = run.dir.join(&name);
        model.save(BufWriter::new(fs::File::create(&path)?))?;
        written.push(path);
        println!(
            "epoch {:>4}  loss {:.6}  test acc {}",
            stats.epoch,
            stats.mean_loss,
            stats
                .test_accuracy
                .map_or("-".into(), |v| format!("{v:.4}"))
        );
        Ok(Some(name))
    })?;
    run.outputs.extend(written);

    let ckpt = run.path("checkpoint.json");
    outcome.model.save(BufWriter::new(
        fs::File::create(&ckpt).map_err(|e| CliError::io(&ckpt, e))?,
    ))?;
    run.outputs.push(ckpt);
    run.json("report.json", &outcome.report)?;
    run.finish(argv, &cfg, Some(a.seed), &inputs)
}

fn verify_cmd(a: VerifyArgs) -> Result<(), CliError> {
    let reports = verify::run(a.suite.into(), a.seed)?;
    println!(
        "{:<10} {:<40} {:>12} {:>12}  result",
        "suite", "check", "value", "tolerance"
    );
    let mut failed = 0;
    for r in &reports {
        for c in &r.checks {
            println!(
                "{:<10} {:<40} {:>12.3e} {:>12.3e}  {}",
                c.suite.as_str(),
                c.name,
                c.value,
                c.tolerance,
                if c.passed { "PASS" } else { "FAIL" }
            );
            failed += usize::from(!c.passed);
        }
        println!("{:<10} {:.2}s", r.suite.as_str(), r.wall_clock_secs);
    }
    if let Some(path) = &a.json {
        let text = serde_json::to_string_pretty(&reports).map_err(adapref::Error::from)?;
        fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))?;
    }
    if failed > 0 {
        return Err(CliError::Tolerance(format!(
            "{failed} check(s) outside tolerance"
        )));
    }
    println!("all checks passed");
    Ok(())
}

/// Samples of the effective loss (adaptive kinds) or plain loss against `Δ`,
/// next to the cross-entropy for comparison.
pub fn effective_loss_table(cfg: &LossConfig) -> Result<CsvTable, CliError> {
    let mut t = CsvTable::new(&[
        "delta",
        "effective_loss",
        "tau",
        "envelope_grad",
        "ce_loss",
        "ce_grad",
    ]);
    for i in -100..=100 {
        let delta = i as f64 * 0.1;
        let (value, tau, grad) = if cfg.kind.is_adaptive() {
            let e = tau::effective_loss(delta, cfg)?;
            (e.value, e.tau, e.envelope_grad)
        } else {
            (cfg.value(delta, 1.0), f64::NAN, cfg.grad_delta(delta, 1.0))
        };
        t.push(vec![
            delta,
            value,
            tau,
            grad,
            loss::ce_loss(delta),
            loss::grad_delta(delta, 1.0),
        ]);
    }
    Ok(t)
}

fn analyze(a: AnalyzeArgs, argv: &[String]) -> Result<(), CliError> {
    require_file(&a.report)?;
    if a.bins == 0 {
        return Err(usage("--bins must be at least 1"));
    }
    let text = fs::read_to_string(&a.report).map_err(|e| CliError::io(&a.report, e))?;
    let report: TrainReport = serde_json::from_str(&text).map_err(adapref::Error::from)?;
    let dir = match a.out_dir {
        Some(d) => d,
        None => a.report.parent().unwrap_or(Path::new(".")).join("analysis"),
    };
    let mut run = Run::start("analyze", dir)?;

    let mut curve = CsvTable::new(&[
        "epoch",
        "mean_loss",
        "train_accuracy",
        "test_accuracy",
        "mean_tau",
    ]);
    for e in &report.epochs {
        curve.push(vec![
            e.epoch as f64,
            e.mean_loss,
            e.train_accuracy.unwrap_or(f64::NAN),
            e.test_accuracy.unwrap_or(f64::NAN),
            e.mean_tau.unwrap_or(f64::NAN),
        ]);
    }
    run.csv("loss_curve.csv", &curve)?;
    run.svg("loss_curve.svg", &curve, SvgKind::Line, "training loss")?;

    let eff = effective_loss_table(&report.config.loss)?;
    run.csv("effective_loss_curve.csv", &eff)?;
    run.svg(
        "effective_loss_curve.svg",
        &eff,
        SvgKind::Line,
        "effective loss",
    )?;

    if let Some(bins) = &report.strength_bins {
        let mut t = CsvTable::new(&["bin", "mean_abs_delta", "mean_strength"]);
        for (i, (d, s)) in bins
            .mean_abs_delta
            .iter()
            .zip(&bins.mean_strength)
            .enumerate()
        {
            t.push(vec![i as f64, *d, *s]);
        }
        run.csv("delta_by_strength.csv", &t)?;
        run.svg(
            "delta_by_strength.svg",
            &t,
            SvgKind::Line,
            "learned |delta| by strength bin",
        )?;
    }

    if report.config.loss.kind.is_adaptive() {
        let an = train::tau_analytics(&report, a.bins)?;
        let mut hist = CsvTable::new(&["lo", "hi", "count"]);
        for b in &an.histogram {
            hist.push(vec![b.lo, b.hi, b.count as f64]);
        }
        run.csv("tau_histogram.csv", &hist)?;
        run.svg(
            "tau_histogram.svg",
            &hist,
            SvgKind::Histogram,
            "scaling factors",
        )?;

        let mut by = CsvTable::new(&["bin", "mean_tau", "mean_strength"]);
        for (i, (t, s)) in an
            .bin_means_tau
            .iter()
            .zip(&an.bin_mean_strength)
            .enumerate()
        {
            by.push(vec![i as f64, *t, *s]);
        }
        run.csv("tau_by_strength.csv", &by)?;
        run.svg(
            "tau_by_strength.svg",
            &by,
            SvgKind::Line,
            "mean scaling factor by strength bin",
        )?;
        if an.degenerate {
            println!("all preference strengths are equal; strength bins collapsed to one");
        }
    }
    println!("wrote {} files to {}", run.outputs.len(), run.dir.display());

    #[derive(Serialize)]
    struct AnalyzeConfig {
        bins: usize,
    }
    run.finish(
        argv,
        &AnalyzeConfig { bins: a.bins },
        None,
        std::slice::from_ref(&a.report),
    )
}

fn dpo_cmd(a: DpoArgs, argv: &[String]) -> Result<(), CliError> {
    let cfg = DpoConfig {
        beta: a.beta,
        loss: loss_config(&a.loss)?,
        solver: solver_config(&a.loss),
        optimizer: optimizer_config(a.loss.optimizer, a.lr),
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
    };
    cfg.validate()?;
    let mut inputs = Vec::new();
    let mut run_dir = output_dir(a.out.as_deref(), "dpo");
    let dataset = match &a.data {
        Some(p) => {
            require_file(p)?;
            inputs.push(p.clone());
            DpoDataset::load(p)?
        }
        None => DpoDataset::generate(&DpoDataConfig {
            n_states: a.states,
            n_actions: a.actions,
            n_pairs: a.pairs,
            label_mode: a.label_mode.into(),
            noise_scale: a.noise_scale,
            seed: a.data_seed,
        })?,
    };
    let reference = match &a.reference {
        Some(p) => {
            require_file(p)?;
            inputs.push(p.clone());
            TabularPolicy::load(fs::File::open(p).map_err(|e| CliError::io(p, e))?)?
        }
        None => TabularPolicy::uniform(dataset.header.n_states, dataset.header.n_actions),
    };
    if (reference.n_states, reference.n_actions)
        != (dataset.header.n_states, dataset.header.n_actions)
    {
        return Err(CliError::Format(format!(
            "reference policy is {}x{} but the dataset is {}x{}",
            reference.n_states,
            reference.n_actions,
            dataset.header.n_states,
            dataset.header.n_actions
        )));
    }

    let strengths = dataset.strengths();
    let outcome = dpo::train_dpo(&dataset.pairs, &reference, &cfg, strengths.as_deref())?;
    let mut run = Run::start("dpo", std::mem::take(&mut run_dir))?;
    if a.data.is_none() {
        let path = run.path("dataset.jsonl");
        dataset.save(&path)?;
        run.outputs.push(path);
    }
    let policy_path = run.path("policy.json");
    outcome.policy.save(BufWriter::new(
        fs::File::create(&policy_path).map_err(|e| CliError::io(&policy_path, e))?,
    ))?;
    run.outputs.push(policy_path);
    run.json("report.json", &outcome.report)?;
    println!(
        "{} on {} pairs: final loss {:.6}, preference accuracy {:.4}",
        cfg.loss.kind,
        dataset.pairs.len(),
        outcome
            .report
            .epochs
            .last()
            .map_or(f64::NAN, |e| e.mean_loss),
        outcome.report.final_accuracy()
    );
    run.finish(argv, &cfg, Some(a.seed), &inputs)
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    oracle_max: f64,
    oracle_min: f64,
    gaps: Vec<f64>,
    selections: Vec<[bandit::SelectionOutcome; 2]>,
    failures: usize,
}

#[derive(Serialize)]
struct StudySummary {
    losses: Vec<LossKind>,
    mean_gaps: Vec<f64>,
    /// `sign_wins[a][b]`: seeds where loss `a`'s gap is no larger than loss `b`'s.
    sign_wins: Vec<Vec<usize>>,
    per_seed: Vec<SeedSummary>,
}

fn align_study(a: AlignStudyArgs, argv: &[String]) -> Result<(), CliError> {
    let mut inputs = Vec::new();
    let grid = match &a.grid {
        Some(p) => {
            require_file(p)?;
            inputs.push(p.clone());
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str::<GridSpec>(&text).map_err(adapref::Error::from)?
        }
        None => AlignStudyConfig::standard(0).grid,
    };
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let cfg = AlignStudyConfig {
        grid,
        bandit: BanditConfig {
            input_dim: a.dim,
            n_candidates: a.candidates,
            n_eval_contexts: a.eval_contexts,
            seed: a.env_seed,
        },
        ground_truth_hidden: (a.gt_hidden > 0).then_some(a.gt_hidden),
        data: DatasetConfig {
            n_pairs: a.pairs,
            input_dim: a.dim,
            label_mode: a.label_mode.into(),
            noise_scale: a.noise_scale,
            seed: a.env_seed,
            ..DatasetConfig::default()
        },
        seeds: (a.first_seed..a.first_seed + a.seeds).collect(),
    };
    cfg.data.validate()?;
    let report = bandit::run_align_study(&cfg)?;

    let mut run = Run::start("align-study", output_dir(a.out.as_deref(), "align-study"))?;
    let csv_path = run.path("study.csv");
    let file = fs::File::create(&csv_path).map_err(|e| CliError::io(&csv_path, e))?;
    bandit::write_study_csv(&report, BufWriter::new(file))?;
    run.outputs.push(csv_path);

    let n = cfg.grid.losses.len();
    let summary = StudySummary {
        losses: cfg.grid.losses.iter().map(|l| l.kind).collect(),
        mean_gaps: report.mean_gaps.clone(),
        sign_wins: (0..n)
            .map(|i| (0..n).map(|j| report.sign_wins(i, j)).collect())
            .collect(),
        per_seed: report
            .per_seed
            .iter()
            .map(|s| SeedSummary {
                seed: s.seed,
                oracle_max: s.oracle_max,
                oracle_min: s.oracle_min,
                gaps: s.studies.iter().map(|st| st.gap).collect(),
                selections: s
                    .studies
                    .iter()
                    .map(|st| [st.by_return, st.by_accuracy])
                    .collect(),
                failures: s.studies.iter().map(|st| st.failures.len()).sum(),
            })
            .collect(),
    };
    run.json("summary.json", &summary)?;
    for (l, g) in summary.losses.iter().zip(&summary.mean_gaps) {
        println!("{l:<20} mean selection gap {g:.6}");
    }
    if n == 2 {
        println!(
            "{} gap <= {} gap on {}/{} seeds",
            summary.losses[1],
            summary.losses[0],
            summary.sign_wins[1][0],
            cfg.seeds.len()
        );
    }
    run.finish(argv, &cfg, Some(a.env_seed), &inputs)
}

fn sweep_rho(a: SweepRhoArgs, argv: &[String]) -> Result<(), CliError> {
    let (train_set, test_set, inputs) = load_data(&a.data)?;
    let base = TrainConfig {
        loss: LossConfig::adaptive_linear(a.tau0, a.tau_max, loss::DEFAULT_RHO0),
        solver: TauSolverConfig::with_iters(a.newton_iters),
        optimizer: OptimizerConfig::adam(a.lr),
        architecture: architecture(a.arch, a.hidden),
        activation: Activation::Tanh,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        eval_every: a.epochs.max(1),
        checkpoints: CheckpointPolicy::None,
    };
    let configs: Vec<TrainConfig> = a
        .rho0_list
        .iter()
        .map(|&rho0| {
            let cfg = TrainConfig {
                loss: LossConfig { rho0, ..base.loss },
                ..base.clone()
            };
            cfg.validate().map(|_| cfg)
        })
        .collect::<Result<_, _>>()?;

    let mut table = CsvTable::new(&[
        "rho0",
        "test_accuracy",
        "train_accuracy",
        "mean_tau",
        "final_loss",
    ]);
    for cfg in &configs {
        let out = train::train(&train_set, test_set.as_ref(), cfg)?;
        let last = out.report.final_epoch();
        let row = vec![
            cfg.loss.rho0,
            last.test_accuracy.unwrap_or(f64::NAN),
            last.train_accuracy.unwrap_or(f64::NAN),
            out.report.final_taus.as_deref().map_or(f64::NAN, mean),
            last.mean_loss,
        ];
        println!(
            "rho0 {:<8} test acc {:.4}  mean tau {:.4}",
            row[0], row[1], row[3]
        );
        table.push(row);
    }
    let mut run = Run::start("sweep-rho", output_dir(a.out.as_deref(), "sweep-rho"))?;
    run.csv("sweep_rho.csv", &table)?;
    if table.rows.iter().any(|r| r[1].is_finite()) {
        run.svg(
            "sweep_rho.svg",
            &table,
            SvgKind::Line,
            "test accuracy against rho0",
        )?;
    }
    run.finish(argv, &configs, Some(a.seed), &inputs)
}
