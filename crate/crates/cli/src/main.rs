use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use adala_core::bench::{self, Metric};
use adala_core::config::RunConfig;
use adala_core::data::{gen_synthetic, load_raw, write_raw, Sample};
use adala_core::model::{load_checkpoint, save_checkpoint, ForwardMode, ViTModel};
use adala_core::pipeline::{
    attention_align_eval, evaluate, stage1_attention_align, stage2_feature_align, stage3_sft, train_teacher, TrainLog,
};
use adala_core::{verify, Error, Result};

type Model = ViTModel<f32>;

/// Softmax-to-linear attention alignment for small vision transformers.
#[derive(Parser, Debug)]
#[command(name = "adala", version)]
struct Cli {
    /// Run configuration (key=value); defaults apply to omitted keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for every artifact.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Overwrite artifacts that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic train and test sets.
    GenData,
    /// Train the softmax teacher with supervision.
    TrainTeacher,
    /// Align each student attention block to the teacher's.
    Stage1,
    /// Align final-layer features to the teacher's.
    Stage2 {
        /// Start from a freshly linearized teacher instead of the stage-1 output.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Supervised fine-tuning of the aligned student.
    Stage3,
    /// Test accuracy of every checkpoint present in the run directory.
    Eval,
    /// FLOP, memory and wall-clock sweep over sequence lengths.
    Bench,
    /// PCA false-color images of patch features.
    PcaViz {
        #[arg(long, value_enum, default_value_t = Which::Stage3)]
        model: Which,
    },
    /// Run the bundled oracle suites.
    Verify,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Which {
    Teacher,
    Stage1,
    Stage2,
    Stage3,
}

impl Which {
    fn file(self) -> &'static str {
        match self {
            Which::Teacher => "teacher.ckpt",
            Which::Stage1 => "stage1.ckpt",
            Which::Stage2 => "stage2.ckpt",
            Which::Stage3 => "stage3.ckpt",
        }
    }

    fn name(self) -> &'static str {
        self.file().trim_end_matches(".ckpt")
    }
}

struct RunDir {
    root: PathBuf,
    force: bool,
}

impl RunDir {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Destination for a new artifact; refuses to clobber without `--force`.
    fn fresh(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() && !self.force {
            return Err(Error::Exists(p));
        }
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(p)
    }

    /// Check every output slot before doing any work.
    fn claim(&self, rels: &[&str]) -> Result<()> {
        rels.iter().try_for_each(|r| self.fresh(r).map(|_| ()))
    }

    fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.fresh(rel)?;
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    /// Echo the resolved config. A run directory holds one configuration:
    /// a different one is only accepted with `--force`.
    fn record_config(&self, cfg: &RunConfig) -> Result<()> {
        let p = self.path("config.resolved.cfg");
        let text = cfg.to_text();
        if p.exists() && !self.force {
            let old = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            if old != text {
                return Err(Error::Exists(p));
            }
            return Ok(());
        }
        std::fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }

    fn load_model(&self, which: Which) -> Result<Model> {
        load_checkpoint(&self.path(which.file()))
    }

    fn train(&self) -> Result<Vec<Sample>> {
        Ok(load_raw(&self.path("data/train.vads"))?.0)
    }

    fn test(&self) -> Result<Vec<Sample>> {
        Ok(load_raw(&self.path("data/test.vads"))?.0)
    }

    fn save_model(&self, rel: &str, m: &Model) -> Result<PathBuf> {
        let p = self.fresh(rel)?;
        save_checkpoint(m, &p)?;
        Ok(p)
    }

    fn save_log(&self, stem: &str, log: &TrainLog) -> Result<()> {
        self.write(&format!("{stem}_log.csv"), log.to_csv())?;
        self.write(&format!("{stem}_epochs.csv"), log.epochs_csv())?;
        Ok(())
    }
}

/// Machine-readable summary line.
fn emit(key: &str, value: impl std::fmt::Display) {
    println!("{key}={value}");
}

fn cmd_gen_data(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    run.claim(&["data/train.vads", "data/test.vads"])?;
    for (rel, spec) in [("data/train.vads", cfg.train_spec()), ("data/test.vads", cfg.test_spec())] {
        let p = run.fresh(rel)?;
        let samples = gen_synthetic(&spec)?;
        write_raw(&p, &samples, spec.num_classes)?;
        log::info!("wrote {} samples to {}", samples.len(), p.display());
        emit(rel.trim_start_matches("data/").trim_end_matches(".vads"), p.display());
    }
    Ok(())
}

fn cmd_train_teacher(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let train = run.train()?;
    run.claim(&["teacher.ckpt", "teacher_log.csv", "teacher_epochs.csv"])?;
    let init = ViTModel::<f32>::init(cfg.teacher_config(), cfg.model.seed)?;
    let (teacher, log) = train_teacher(&init, &train, &cfg.teacher)?;
    let p = run.save_model("teacher.ckpt", &teacher)?;
    run.save_log("teacher", &log)?;
    emit("train_accuracy", evaluate(&teacher, &train, cfg.data.eval_batch_size)?);
    emit("checkpoint", p.display());
    Ok(())
}

/// Samples used to report stage-1 loss before and after training.
const PROBE_SAMPLES: usize = 256;

fn cmd_stage1(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let teacher = run.load_model(Which::Teacher)?;
    let train = run.train()?;
    run.claim(&["stage1.ckpt", "stage1_log.csv", "stage1_epochs.csv"])?;
    let student = teacher.linearize(&cfg.student_spec())?;
    let probe = &train[..PROBE_SAMPLES.min(train.len())];
    let (bs, red) = (cfg.data.eval_batch_size, cfg.stage1.layer_reduction);
    let before = attention_align_eval(&teacher, &student, probe, bs, red)?;
    let (aligned, log) = stage1_attention_align(&teacher, &student, &train, &cfg.stage1)?;
    let after = attention_align_eval(&teacher, &aligned, probe, bs, red)?;
    let p = run.save_model("stage1.ckpt", &aligned)?;
    run.save_log("stage1", &log)?;
    emit("attention_loss_initial", before);
    emit("attention_loss_final", after);
    emit("checkpoint", p.display());
    Ok(())
}

fn cmd_stage2(cfg: &RunConfig, run: &RunDir, from_scratch: bool) -> Result<()> {
    let teacher = run.load_model(Which::Teacher)?;
    let train = run.train()?;
    let (student, stem) = if from_scratch {
        (teacher.linearize(&cfg.student_spec())?, "stage2_scratch")
    } else {
        (run.load_model(Which::Stage1)?, "stage2")
    };
    let outputs = [format!("{stem}.ckpt"), format!("{stem}_log.csv"), format!("{stem}_epochs.csv")];
    run.claim(&outputs.iter().map(String::as_str).collect::<Vec<_>>())?;
    let out = stage2_feature_align(&teacher, &student, &train, &cfg.stage2)?;
    let p = run.save_model(&format!("{stem}.ckpt"), &out.model)?;
    run.save_log(stem, &out.log)?;
    emit("feature_loss_initial", out.initial_val);
    emit("feature_loss_best", out.best_val);
    emit("best_epoch", out.best_epoch);
    emit("stopped_early", out.stopped_early);
    emit("checkpoint", p.display());
    Ok(())
}

fn cmd_stage3(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let student = run.load_model(Which::Stage2)?;
    let train = run.train()?;
    run.claim(&["stage3.ckpt", "stage3_log.csv", "stage3_epochs.csv"])?;
    let (tuned, log) = stage3_sft(&student, &train, &cfg.stage3)?;
    let p = run.save_model("stage3.ckpt", &tuned)?;
    run.save_log("stage3", &log)?;
    emit("checkpoint", p.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let test = run.test()?;
    run.claim(&["eval.csv"])?;
    let mut csv = String::from("model,test_accuracy\n");
    let mut found = 0;
    for which in [Which::Teacher, Which::Stage1, Which::Stage2, Which::Stage3] {
        if !run.path(which.file()).exists() {
            continue;
        }
        let m = run.load_model(which)?;
        if m.head.is_none() {
            continue;
        }
        let acc = evaluate(&m, &test, cfg.data.eval_batch_size)?;
        log::info!("{} test accuracy {:.4}", which.name(), acc);
        emit(&format!("accuracy_{}", which.name()), acc);
        csv.push_str(&format!("{},{acc}\n", which.name()));
        found += 1;
    }
    if found == 0 {
        return Err(Error::Missing(run.path(Which::Teacher.file())));
    }
    run.write("eval.csv", csv)?;
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, run: &RunDir) -> Result<()> {
    let svgs: Vec<String> = Metric::ALL.iter().map(|m| format!("bench/{}.svg", m.name())).collect();
    run.claim(&svgs.iter().map(String::as_str).chain(["bench/bench.csv"]).collect::<Vec<_>>())?;
    let mut records = Vec::new();
    for &v in &cfg.bench.variants {
        records.extend(bench::sweep(&cfg.bench_spec(v), &cfg.bench.lengths, cfg.bench.reps, cfg.bench.seed)?);
    }
    let p = run.write("bench/bench.csv", bench::records_csv(&records))?;
    for metric in Metric::ALL {
        let svg = run.fresh(&format!("bench/{}.svg", metric.name()))?;
        bench::write_svg(&records, metric, &svg)?;
    }
    let ns: Vec<f64> = cfg.bench.lengths.iter().map(|&n| n as f64).collect();
    if ns.len() >= 2 {
        for &v in &cfg.bench.variants {
            let walls: Vec<f64> = records.iter().filter(|r| r.variant == v).map(|r| r.wall_seconds).collect();
            emit(&format!("wall_exponent_{v}"), format!("{:.3}", bench::loglog_slope(&ns, &walls)));
        }
    }
    emit("csv", p.display());
    Ok(())
}

fn cmd_pca_viz(cfg: &RunConfig, run: &RunDir, which: Which) -> Result<()> {
    let m = run.load_model(which)?;
    let test = run.test()?;
    let grid = m.config.grid();
    let skip = usize::from(m.config.use_cls_token);
    for (i, s) in test.iter().take(cfg.bench.pca_images).enumerate() {
        let feats = m.forward(&s.image, ForwardMode::Features)?.features;
        let (n, d) = (feats.shape()[1], feats.shape()[2]);
        let patches = feats.reshape(&[n, d])?.slice_outer(skip, n - skip)?;
        let img = bench::pca_rgb(&patches, grid, grid)?;
        let p = run.fresh(&format!("pca/{}_{i}.ppm", which.name()))?;
        img.write_ppm(&p)?;
        emit(&format!("image_{i}"), p.display());
    }
    Ok(())
}

fn cmd_verify() -> Result<bool> {
    let mut all = true;
    for r in verify::run_all() {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{status} {} {}", r.name, r.detail);
        all &= r.passed;
    }
    Ok(all)
}

fn run(cli: Cli) -> Result<bool> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Command::Verify = cli.command {
        return cmd_verify();
    }
    let run = RunDir {
        root: cli.out.clone(),
        force: cli.force,
    };
    run.record_config(&cfg)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&cfg, &run)?,
        Command::TrainTeacher => cmd_train_teacher(&cfg, &run)?,
        Command::Stage1 => cmd_stage1(&cfg, &run)?,
        Command::Stage2 { from_scratch } => cmd_stage2(&cfg, &run, from_scratch)?,
        Command::Stage3 => cmd_stage3(&cfg, &run)?,
        Command::Eval => cmd_eval(&cfg, &run)?,
        Command::Bench => cmd_bench(&cfg, &run)?,
        Command::PcaViz { model } => cmd_pca_viz(&cfg, &run, model)?,
        Command::Verify => unreachable!("handled above"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
