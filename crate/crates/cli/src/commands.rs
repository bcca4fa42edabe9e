use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use cfgcd_consistency::{CurveRow, GuidanceMode};
use cfgcd_metrics::{read_metrics_csv, write_metrics_csv, write_metrics_json, MetricsReport};
use cfgcd_nets::{Condition, InitMode};
use cfgcd_teacher::SolverKind;
use clap::{Args, Parser, Subcommand};

use crate::config::{parse_mode, RunConfig};
use crate::error::{CliError, Result};
use crate::pipeline::{default_student_w, Evaluator, Generator, StudentSampler, TeacherSampler, Workspace};

#[derive(Debug, Parser)]
#[command(name = "cfgcd", about = "Guided consistency distillation on a toy latent world")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: Common,
}

/// Flags shared by every command. List-valued flags take comma lists.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML run configuration; missing sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Guidance strength, or a comma list for `sweep-w`.
    #[arg(long, global = true)]
    pub w: Option<String>,
    /// Guidance mode: unguided, direct, fixed or variable.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Solver name, or a comma list for `bench-solvers`.
    #[arg(long, global = true)]
    pub solver: Option<String>,
    /// Step count (training steps, iterations or solver steps depending on
    /// the command), or a comma list for `bench-solvers`.
    #[arg(long, global = true)]
    pub steps: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the frozen embedder and train the diffusion teacher.
    TrainTeacher,
    /// Distill a student from a teacher checkpoint.
    Distill {
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Student initialization: unguided (copy the teacher) or guided.
        #[arg(long)]
        init: Option<String>,
    },
    /// Continue a student with the similarity-score terms.
    Finetune {
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        embedder: Option<PathBuf>,
    },
    /// Write generated latents for a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: Option<PathBuf>,
    },
    /// Score checkpoints and append their rows to `metrics.csv`.
    Evaluate {
        /// Checkpoint paths (repeat the flag or give a comma list).
        #[arg(long, value_delimiter = ',')]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        embedder: Option<PathBuf>,
    },
    /// Score teacher solvers at several step counts.
    BenchSolvers {
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        embedder: Option<PathBuf>,
    },
    /// Score a checkpoint over a list of guidance strengths.
    SweepW {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        embedder: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::TrainTeacher => "train-teacher",
            Command::Distill { .. } => "distill",
            Command::Finetune { .. } => "finetune",
            Command::Sample { .. } => "sample",
            Command::Evaluate { .. } => "evaluate",
            Command::BenchSolvers { .. } => "bench-solvers",
            Command::SweepW { .. } => "sweep-w",
        }
    }
}

pub fn parse_solver(name: &str) -> Result<SolverKind> {
    match name.trim() {
        "ddpm" | "ddpm_ancestral" => Ok(SolverKind::DdpmAncestral),
        "ddim" => Ok(SolverKind::Ddim),
        "euler" => Ok(SolverKind::Euler),
        "heun" => Ok(SolverKind::Heun),
        "dpmpp" | "dpmpp_2s" => Ok(SolverKind::Dpmpp2s),
        other => Err(CliError::Usage(format!("unknown solver `{other}`"))),
    }
}

fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>> {
    let out: Vec<T> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("--{flag}: cannot parse `{s}`"))))
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(CliError::Usage(format!("--{flag} is empty")));
    }
    Ok(out)
}

fn single<T: Copy>(flag: &str, v: &[T]) -> Result<T> {
    match v {
        [x] => Ok(*x),
        _ => Err(CliError::Usage(format!("--{flag} takes one value for this command"))),
    }
}

/// Loads the config and applies the command-line overrides.
pub fn resolve(command: &Command, common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Command::Distill { init: Some(i), .. } = command {
        c.distill.init = match i.as_str() {
            "unguided" => InitMode::Unguided,
            "guided" => InitMode::Guided,
            other => return Err(CliError::Usage(format!("unknown init `{other}` (expected unguided or guided)"))),
        };
    }
    let ws: Option<Vec<f64>> = common.w.as_deref().map(|t| parse_list("w", t)).transpose()?;
    let steps: Option<Vec<usize>> = common.steps.as_deref().map(|t| parse_list("steps", t)).transpose()?;
    let solvers: Option<Vec<SolverKind>> =
        common.solver.as_deref().map(|t| t.split(',').map(parse_solver).collect()).transpose()?;
    let is_sweep = matches!(command, Command::SweepW { .. });
    let is_bench = matches!(command, Command::BenchSolvers { .. });
    if let Some(w) = &ws {
        if is_sweep {
            c.eval.w_list = w.clone();
        } else {
            let w = single("w", w)?;
            c.eval.w = w;
            c.guidance = match c.guidance {
                GuidanceMode::Direct { .. } => GuidanceMode::Direct { w },
                GuidanceMode::Fixed { .. } => GuidanceMode::Fixed { w },
                other => other,
            };
        }
    }
    if let Some(m) = &common.mode {
        c.guidance = parse_mode(m, ws.as_ref().and_then(|w| w.first().copied()))?;
    }
    if let Some(s) = solvers {
        match command {
            Command::BenchSolvers { .. } => c.eval.bench_solvers = s,
            Command::Distill { .. } | Command::Finetune { .. } => c.distill.teacher_solver = single("solver", &s)?,
            _ => c.eval.solver = single("solver", &s)?,
        }
    }
    if let Some(s) = steps {
        if is_bench {
            c.eval.bench_steps = s;
        } else {
            let n = single("steps", &s)?;
            match command {
                Command::TrainTeacher => c.teacher.steps = n,
                Command::Distill { .. } => c.distill.iterations = n,
                Command::Finetune { .. } => c.finetune.iterations = n,
                _ => c.eval.steps = n,
            }
        }
    }
    c.validate()?;
    Ok(c)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("");
            return Err(CliError::Usage(first.trim_start_matches("error: ").to_string()));
        }
    };
    execute(&cli.command, &cli.common)
}

pub fn execute(command: &Command, common: &Common) -> Result<()> {
    let config = resolve(command, common)?;
    let out = common.out.as_path();
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let resolved = out.join(format!("resolved_{}.toml", command.name()));
    std::fs::write(&resolved, config.to_toml()).map_err(|e| CliError::io(&resolved, e))?;
    let ws = Workspace::new(config)?;
    let or = |p: &Option<PathBuf>, file: &str| p.clone().unwrap_or_else(|| out.join(file));
    match command {
        Command::TrainTeacher => train_teacher(&ws, out),
        Command::Distill { teacher, .. } => distill(&ws, out, &or(teacher, "teacher.ckpt")),
        Command::Finetune { student, teacher, embedder } => finetune(
            &ws,
            out,
            &or(student, "student.ckpt"),
            &or(teacher, "teacher.ckpt"),
            &or(embedder, "embedder.ckpt"),
        ),
        Command::Sample { ckpt } => sample(&ws, out, &or(ckpt, "student.ckpt")),
        Command::Evaluate { ckpt, embedder } => {
            let ckpts = if ckpt.is_empty() { vec![out.join("student.ckpt")] } else { ckpt.clone() };
            evaluate(&ws, out, &ckpts, &or(embedder, "embedder.ckpt"))
        }
        Command::BenchSolvers { teacher, embedder } => {
            bench_solvers(&ws, out, &or(teacher, "teacher.ckpt"), &or(embedder, "embedder.ckpt"))
        }
        Command::SweepW { ckpt, embedder } => {
            sweep_w(&ws, out, &or(ckpt, "student.ckpt"), &or(embedder, "embedder.ckpt"))
        }
    }
}

fn csv_writer(path: &Path, append: bool) -> Result<(csv::Writer<std::fs::File>, bool)> {
    let fresh = !append || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| CliError::io(path, e))?;
    Ok((csv::Writer::from_writer(file), fresh))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::io(path, std::io::Error::other(e.to_string()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_curve(ws: &Workspace, path: &Path, stage: &str, rows: &[CurveRow], queries: u64, append: bool) -> Result<()> {
    let (mut w, fresh) = csv_writer(path, append)?;
    let e = |err| csv_err(path, err);
    if fresh {
        w.write_record([
            "stage",
            "epoch",
            "l_cd",
            "clap_a",
            "clap_t",
            "weighted_loss",
            "queries",
            "config_hash",
            "seed",
        ])
        .map_err(e)?;
    }
    for r in rows {
        w.write_record([
            stage.to_string(),
            r.epoch.to_string(),
            r.l_cd.to_string(),
            fmt_opt(r.clap_a),
            fmt_opt(r.clap_t),
            r.weighted_loss.to_string(),
            queries.to_string(),
            ws.hash.clone(),
            ws.config.seed.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| CliError::io(path, err))
}

fn train_teacher(ws: &Workspace, out: &Path) -> Result<()> {
    let embedder = ws.pretrain_embedder()?;
    let (net, log) = ws.train_teacher()?;
    ws.embedder_checkpoint(&embedder).save(&out.join("embedder.ckpt"))?;
    ws.teacher_checkpoint(&net, Some(&embedder)).save(&out.join("teacher.ckpt"))?;
    let path = out.join("teacher_curve.csv");
    let (mut w, _) = csv_writer(&path, false)?;
    let e = |err| csv_err(&path, err);
    w.write_record(["step", "loss", "queries", "config_hash", "seed"]).map_err(e)?;
    for (i, l) in log.losses.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            l.to_string(),
            (i + 1).to_string(),
            ws.hash.clone(),
            ws.config.seed.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| CliError::io(&path, err))?;
    println!("teacher final loss {:.6}", log.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn distill(ws: &Workspace, out: &Path, teacher: &Path) -> Result<()> {
    let (net, ck) = ws.load_teacher(teacher)?;
    let mode = ws.config.guidance;
    let (student, curve) = ws.distill(&net, mode)?;
    ws.student_checkpoint(&student, &ck.frozen).save(&out.join("student.ckpt"))?;
    write_curve(ws, &out.join("curve.csv"), "distill", &curve, student.mode.queries(), false)?;
    let last = curve.last().map(|r| r.l_cd).unwrap_or(f64::NAN);
    println!("distilled {} student, final l_cd {last:.6}", mode.name());
    Ok(())
}

fn finetune(ws: &Workspace, out: &Path, student: &Path, teacher: &Path, embedder: &Path) -> Result<()> {
    let (model, sck) = ws.load_student(student)?;
    let (net, _) = ws.load_teacher(teacher)?;
    let emb = ws.load_embedder(embedder)?;
    ws.audit_embedder(&sck, &emb)?;
    let (tuned, curve) = ws.finetune(model, &net, &emb)?;
    ws.student_checkpoint(&tuned, &sck.frozen).save(&out.join("finetuned.ckpt"))?;
    write_curve(ws, &out.join("curve.csv"), "finetune", &curve, tuned.mode.queries(), true)?;
    println!("finetuned {} student", tuned.mode.name());
    Ok(())
}

/// A checkpoint of either kind, ready to generate.
enum Loaded {
    Teacher(cfgcd_nets::DenoiserNet),
    Student(cfgcd_consistency::ConsistencyModel),
}

fn load_any(ws: &Workspace, path: &Path) -> Result<(Loaded, crate::checkpoint::Checkpoint)> {
    let ck = crate::checkpoint::Checkpoint::load(path)?;
    match ck.kind {
        crate::checkpoint::CheckpointKind::Teacher => {
            let (n, ck) = ws.load_teacher(path)?;
            Ok((Loaded::Teacher(n), ck))
        }
        crate::checkpoint::CheckpointKind::Student => {
            let (m, ck) = ws.load_student(path)?;
            Ok((Loaded::Student(m), ck))
        }
        crate::checkpoint::CheckpointKind::Embedder => {
            Err(CliError::Checkpoint("an embedder checkpoint cannot generate".into()))
        }
    }
}

fn model_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

/// The generator for `loaded` at strength `w`, with its mode label and the
/// strength reported for it.
fn generator<'a>(
    ws: &'a Workspace,
    loaded: &'a Loaded,
    w: Option<f64>,
) -> Result<(Box<dyn Generator + 'a>, String, f64)> {
    let e = &ws.config.eval;
    match loaded {
        Loaded::Teacher(net) => {
            let w = w.unwrap_or(e.w);
            let g =
                TeacherSampler { net, schedule: &ws.schedule, solver: e.solver, grid: ws.sampling_grid(e.steps)?, w };
            Ok((Box::new(g), format!("teacher_{}_{}", e.solver.name(), e.steps), w))
        }
        Loaded::Student(model) => {
            let (sw, reported) = match w {
                Some(w) => (Some(w), w),
                None => default_student_w(&model.mode, e.w),
            };
            Ok((Box::new(StudentSampler { model, w: sw }), model.mode.name().to_string(), reported))
        }
    }
}

fn sample(ws: &Workspace, out: &Path, ckpt: &Path) -> Result<()> {
    let (loaded, _) = load_any(ws, ckpt)?;
    let w_flag = ws_w_flag(ws, &loaded);
    let (g, mode, w) = generator(ws, &loaded, w_flag)?;
    let k = ws.world().classes();
    let cond: Vec<Condition> = (0..ws.config.eval.prompts).map(|i| Condition::Class(i % k)).collect();
    let path = out.join("samples.csv");
    let (mut wr, _) = csv_writer(&path, false)?;
    let e = |err| csv_err(&path, err);
    let dim = ws.world().dim();
    let mut header =
        vec!["model_id".to_string(), "mode".into(), "w".into(), "sample_seed".into(), "prompt".into(), "class".into()];
    header.extend((0..dim).map(|j| format!("z{j}")));
    header.extend(["queries".to_string(), "config_hash".into(), "seed".into()]);
    wr.write_record(&header).map_err(e)?;
    let id = model_id(ckpt);
    let mut queries = 0;
    for &s in &ws.config.eval.sample_seeds {
        let (z, q) = g.generate(&cond, s)?;
        queries = q;
        for (i, _) in cond.iter().enumerate() {
            let mut rec =
                vec![id.clone(), mode.clone(), w.to_string(), s.to_string(), i.to_string(), (i % k).to_string()];
            rec.extend(z.row(i).iter().map(|v| v.to_string()));
            rec.extend([q.to_string(), ws.hash.clone(), ws.config.seed.to_string()]);
            wr.write_record(&rec).map_err(e)?;
        }
    }
    wr.flush().map_err(|err| CliError::io(&path, err))?;
    println!("queries {queries}");
    Ok(())
}

/// The strength to sample at: the config's `eval.w` for teachers and
/// variable students, each other student's own strength.
fn ws_w_flag(ws: &Workspace, loaded: &Loaded) -> Option<f64> {
    match loaded {
        Loaded::Teacher(_) => Some(ws.config.eval.w),
        Loaded::Student(m) => match m.mode {
            GuidanceMode::Variable { .. } => Some(ws.config.eval.w),
            _ => None,
        },
    }
}

fn append_metrics(out: &Path, rows: &[MetricsReport]) -> Result<()> {
    let csv = out.join("metrics.csv");
    write_metrics_csv(&csv, rows)?;
    write_metrics_json(&out.join("metrics.json"), &read_metrics_csv(&csv)?)?;
    for r in rows {
        println!(
            "{} {} w={} queries={} fd={:.6} kld={:.6} clap_a={:.3} clap_t={:.3} is={:.4}",
            r.model_id, r.mode, r.w, r.queries, r.fd, r.kld, r.clap_a, r.clap_t, r.is
        );
    }
    Ok(())
}

fn score(ws: &Workspace, ev: &Evaluator, loaded: &Loaded, id: &str, w: Option<f64>) -> Result<MetricsReport> {
    let (g, mode, w) = generator(ws, loaded, w)?;
    let (m, q) = ev.evaluate(g.as_ref())?;
    let div = ev.diversity(g.as_ref())?;
    Ok(ev.report(id, &mode, w, q, &m, Some(div.value)))
}

fn evaluate(ws: &Workspace, out: &Path, ckpts: &[PathBuf], embedder: &Path) -> Result<()> {
    let emb = ws.load_embedder(embedder)?;
    let ev = Evaluator::new(ws, &emb)?;
    let mut rows = Vec::new();
    for path in ckpts {
        let (loaded, ck) = load_any(ws, path)?;
        ws.audit_embedder(&ck, &emb)?;
        rows.push(score(ws, &ev, &loaded, &model_id(path), ws_w_flag(ws, &loaded))?);
    }
    append_metrics(out, &rows)
}

fn sweep_w(ws: &Workspace, out: &Path, ckpt: &Path, embedder: &Path) -> Result<()> {
    let (loaded, ck) = load_any(ws, ckpt)?;
    if let Loaded::Student(m) = &loaded {
        if !matches!(m.mode, GuidanceMode::Variable { .. }) {
            return Err(CliError::Usage(format!(
                "sweep-w needs a teacher or a variable-guidance student, got a {} student",
                m.mode.name()
            )));
        }
    }
    let emb = ws.load_embedder(embedder)?;
    ws.audit_embedder(&ck, &emb)?;
    let ev = Evaluator::new(ws, &emb)?;
    let id = model_id(ckpt);
    let rows =
        ws.config.eval.w_list.iter().map(|&w| score(ws, &ev, &loaded, &id, Some(w))).collect::<Result<Vec<_>>>()?;
    append_metrics(out, &rows)
}

fn bench_solvers(ws: &Workspace, out: &Path, teacher: &Path, embedder: &Path) -> Result<()> {
    let (net, ck) = ws.load_teacher(teacher)?;
    let emb = ws.load_embedder(embedder)?;
    ws.audit_embedder(&ck, &emb)?;
    let ev = Evaluator::new(ws, &emb)?;
    let e = &ws.config.eval;
    let mut rows = Vec::new();
    for &solver in &e.bench_solvers {
        for &steps in &e.bench_steps {
            let g =
                TeacherSampler { net: &net, schedule: &ws.schedule, solver, grid: ws.sampling_grid(steps)?, w: e.w };
            let (m, q) = ev.evaluate(&g)?;
            rows.push(ev.report(&format!("teacher_{}_{steps}", solver.name()), "teacher", e.w, q, &m, None));
        }
    }
    let path = out.join("solvers.csv");
    if path.exists() {
        std::fs::remove_file(&path).map_err(|err| CliError::io(&path, err))?;
    }
    write_metrics_csv(&path, &rows)?;
    let mut stdout = std::io::stdout().lock();
    for r in &rows {
        writeln!(stdout, "{} queries={} fd={:.6} clap_t={:.3}", r.model_id, r.queries, r.fd, r.clap_t)
            .map_err(|err| CliError::io("stdout", err))?;
    }
    Ok(())
}
