use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use artihippo::experts::grid;
use artihippo::lifelong::{
    average_accuracy, average_forgetting, component_study, AccuracyMatrix, CiMode, Component, Learner,
};
use artihippo::nas::LogRecord;
use artihippo::numerics::{read_checkpoint, write_checkpoint, Seeds};
use artihippo::taskdata::{parse_manifest, TaskDataset, TaskSource};
use artihippo::Error;

use crate::config::RunConfig;
use crate::{Cli, Command};

/// A problem with how the tool was invoked.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<Usage>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Input(_) => 2,
                Error::Numeric(_) => 4,
                Error::Dimension(_) | Error::Integrity(_) | Error::Format(_) | Error::Io(_) => 3,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    2
}

struct Run {
    cfg: RunConfig,
    task: Option<usize>,
    mode: Option<String>,
}

pub fn run(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => {
            if !p.exists() {
                return Err(usage(format!("config file {} does not exist", p.display())));
            }
            RunConfig::from_file(p).map_err(|e| usage(format!("{e:#}")))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    let run = Run { cfg, task: cli.task, mode: cli.mode.clone() };
    match cli.command {
        Command::Pretrain => run.pretrain(),
        Command::Learn => run.learn(),
        Command::Eval => run.eval(),
        Command::Study => run.study(),
        Command::ExportArch => run.export_arch(),
        Command::InferCi => run.infer_ci(),
    }
}

impl Run {
    fn out(&self, rel: &str) -> PathBuf {
        self.cfg.out.join(rel)
    }

    fn sources(&self) -> anyhow::Result<Vec<TaskSource>> {
        let path = self.cfg.manifest.as_ref().ok_or_else(|| usage("config needs a `manifest` entry"))?;
        let text = fs::read_to_string(path).map_err(|e| usage(format!("manifest {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let sources = parse_manifest(&text, base)?;
        if sources.is_empty() {
            return Err(usage("manifest lists no tasks"));
        }
        Ok(sources)
    }

    fn load_task(&self, sources: &[TaskSource], i: usize) -> anyhow::Result<TaskDataset> {
        let src = sources.get(i).ok_or_else(|| usage(format!("manifest has no task {i}")))?;
        if let TaskSource::Idx { train_images, train_labels, test_images, test_labels, .. } = src {
            for p in [train_images, train_labels, test_images, test_labels] {
                if !p.exists() {
                    return Err(usage(format!("data file {} does not exist", p.display())));
                }
            }
        }
        let seeds = Seeds::new(self.cfg.seed).child("data");
        Ok(src.load(self.cfg.learner.val_fraction, &seeds).with_context(|| format!("loading task {i}"))?)
    }

    fn load_tasks(&self, n: usize) -> anyhow::Result<Vec<TaskDataset>> {
        let sources = self.sources()?;
        (0..n).map(|i| self.load_task(&sources, i)).collect()
    }

    fn checkpoint_name(task: usize) -> String {
        format!("checkpoints/task{task}.ahip")
    }

    fn read_learner(&self, rel: &str) -> anyhow::Result<Learner> {
        let path = self.out(rel);
        let mut f = fs::File::open(&path)
            .map_err(|e| usage(format!("{}: {e}; run `pretrain` and `learn` first", path.display())))?;
        let learner = Learner::from_checkpoint(&read_checkpoint(&mut f)?)?;
        if learner.config.model != self.cfg.learner.model {
            return Err(usage("checkpoint model does not match the configured model"));
        }
        Ok(learner)
    }

    /// The latest learner, or the one that finished `--task`.
    fn current(&self) -> anyhow::Result<Learner> {
        match self.task {
            Some(t) => self.read_learner(&Self::checkpoint_name(t)),
            None => self.read_learner("checkpoint.ahip"),
        }
    }

    fn save(&self, learner: &Learner, log: &[LogRecord]) -> anyhow::Result<()> {
        let t = learner.records.len() - 1;
        fs::create_dir_all(self.out("checkpoints"))?;
        fs::create_dir_all(self.out("logs"))?;
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &learner.to_checkpoint()?)?;
        fs::write(self.out(&Self::checkpoint_name(t)), &bytes)?;
        fs::write(self.out("checkpoint.ahip"), &bytes)?;
        fs::write(self.out("config.txt"), self.cfg.to_text())?;

        let started = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        let mut text = serde_json::json!({ "task": t, "phase": "header", "timestamp": started }).to_string() + "\n";
        for r in log {
            text += &r.to_json();
            text.push('\n');
        }
        fs::write(self.out(&format!("logs/task{t}.jsonl")), text)?;

        let mut curve = String::from("task\tphase\tepoch\tloss\tfitness_best\tfitness_mean\n");
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        for r in log.iter().filter(|r| r.loss.is_some() || r.fitness_best.is_some()) {
            curve += &format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                r.task,
                r.phase,
                r.epoch_or_gen,
                cell(r.loss),
                cell(r.fitness_best),
                cell(r.fitness_mean)
            );
        }
        fs::write(self.out(&format!("logs/task{t}.curve.tsv")), curve)?;
        if let Some(sim) = learner.similarity.last().filter(|_| t > 0) {
            fs::write(self.out(&format!("logs/task{t}.similarity.jsonl")), sim)?;
        }
        self.write_grid(learner)?;
        let mut params = String::from("task\tname\tparams_added\thead_params\ttoken_params\n");
        for r in &learner.records {
            params += &format!("{}\t{}\t{}\t{}\t{}\n", r.task, r.name, r.params_added, r.head_params, r.token_params);
        }
        fs::write(self.out("params.tsv"), params)?;
        Ok(())
    }

    fn write_grid(&self, learner: &Learner) -> anyhow::Result<()> {
        let paths: Vec<_> = learner.records.iter().map(|r| r.path.clone()).collect();
        fs::create_dir_all(&self.cfg.out)?;
        fs::write(self.out("grid.jsonl"), grid::to_jsonl(&paths))?;
        fs::write(self.out("grid.txt"), grid::to_ascii(&paths))?;
        Ok(())
    }

    fn pretrain(&self) -> anyhow::Result<()> {
        let data = self.load_tasks(1)?.remove(0);
        let learner = Learner::learn_first_task(self.cfg.learner.clone(), self.cfg.seed, &data)?;
        let log = learner.log.clone();
        self.save(&learner, &log)?;
        let r = &learner.records[0];
        println!("task 0 ({}): test accuracy {:.4}", r.name, r.test_accuracy);
        Ok(())
    }

    fn learn(&self) -> anyhow::Result<()> {
        let t = match self.task {
            Some(0) => return Err(usage("task 0 is learned by `pretrain`")),
            Some(t) => t,
            None => self.read_learner("checkpoint.ahip")?.records.len(),
        };
        let mut learner = self.read_learner(&Self::checkpoint_name(t - 1))?;
        if learner.seed != self.cfg.seed {
            return Err(usage(format!("checkpoint seed {} differs from configured seed {}", learner.seed, self.cfg.seed)));
        }
        learner.config = self.cfg.learner.clone();
        let sources = self.sources()?;
        let data = self.load_task(&sources, t)?;
        let rec = learner.learn_task(&data)?.clone();
        let log = learner.log.clone();
        self.save(&learner, &log)?;
        println!(
            "task {t} ({}): test accuracy {:.4}, added {} backbone parameters",
            rec.name, rec.test_accuracy, rec.params_added
        );
        println!("{}", grid::to_ascii(std::slice::from_ref(&rec.path)).lines().last().unwrap_or(""));
        Ok(())
    }

    fn eval(&self) -> anyhow::Result<()> {
        let class = match self.mode.as_deref() {
            None | Some("task") | Some("task-incremental") => self.cfg.class_incremental,
            Some("class") | Some("class-incremental") => true,
            Some(m) => return Err(usage(format!("unknown eval mode {m:?}; use task or class"))),
        };
        let learner = self.current()?;
        let n = learner.records.len();
        let tasks = self.load_tasks(n)?;
        let mut acc = Vec::with_capacity(n);
        for (i, data) in tasks.iter().enumerate() {
            let a = learner.evaluate(i, &data.test)?;
            if a != learner.records[i].test_accuracy || learner.probe_hash(i, &data.test)? != learner.records[i].probe_hash {
                return Err(Error::Integrity(format!("task {i} no longer replays its recorded outputs")).into());
            }
            acc.push(a);
        }
        // Frozen paths make every later row repeat the diagonal.
        let mut m = AccuracyMatrix::default();
        for k in 0..n {
            m.push_row(acc[..=k].to_vec())?;
        }
        let mut report = String::new();
        report += &format!("tasks {n}\n");
        report += "accuracy matrix (row: after task n, column: task i)\n";
        report += &m.to_text();
        report += &format!("average accuracy {:.4}\n", average_accuracy(&m, n));
        report += &format!("average forgetting {:.3}\n", average_forgetting(&m, n));
        report += "task\tname\taccuracy\tparams_added\n";
        for (r, a) in learner.records.iter().zip(&acc) {
            report += &format!("{}\t{}\t{a:.4}\t{}\n", r.task, r.name, r.params_added);
        }
        report += &format!("params added after the first task {}\n", learner.params_added_after_first());
        report += "grid\n";
        report += &grid::to_ascii(&learner.records.iter().map(|r| r.path.clone()).collect::<Vec<_>>());
        if class {
            report += "class-incremental\nmode\ttask_id_accuracy\taccuracy\n";
            for mode in [CiMode::Max, CiMode::MinEntropy] {
                let (tid, joint) = ci_scores(&learner, &tasks, mode)?;
                report += &format!("{}\t{tid:.4}\t{joint:.4}\n", mode_name(mode));
            }
        }
        fs::create_dir_all(&self.cfg.out)?;
        fs::write(self.out("metrics.txt"), &report)?;
        print!("{report}");
        Ok(())
    }

    fn study(&self) -> anyhow::Result<()> {
        let spec = self.mode.as_deref().unwrap_or("head;proj;mhsa+ln1");
        let mut rows = Vec::new();
        for set in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let comps = set
                .split(',')
                .map(|c| c.trim().parse::<Component>())
                .collect::<artihippo::Result<Vec<_>>>()
                .map_err(|e| usage(e.to_string()))?;
            rows.push((set.to_string(), comps));
        }
        let learner = self.read_learner(&Self::checkpoint_name(0))?;
        let n = self.sources()?.len();
        let tasks = self.load_tasks(n)?;
        let mut report = String::from("components\ttransfer_accuracy\tforgetting\n");
        for (name, comps) in &rows {
            let r = component_study(&learner, &tasks, comps)?;
            report += &format!("{name}\t{:.4}\t{:.4}\n", r.transfer, r.forgetting);
        }
        fs::create_dir_all(&self.cfg.out)?;
        fs::write(self.out("study.tsv"), &report)?;
        print!("{report}");
        Ok(())
    }

    fn export_arch(&self) -> anyhow::Result<()> {
        let learner = self.current()?;
        self.write_grid(&learner)?;
        print!("{}", fs::read_to_string(self.out("grid.txt"))?);
        Ok(())
    }

    fn infer_ci(&self) -> anyhow::Result<()> {
        let mode: CiMode = self.mode.as_deref().unwrap_or("min-entropy").parse().map_err(|e: Error| usage(e.to_string()))?;
        let learner = self.current()?;
        let tasks = self.load_tasks(learner.records.len())?;
        let mut out = String::from("true_task\tindex\tlabel\tpred_task\tpred_class\n");
        for (t, data) in tasks.iter().enumerate() {
            for (i, p) in learner.predict_class_incremental(&data.test, mode)?.iter().enumerate() {
                out += &format!("{t}\t{i}\t{}\t{}\t{}\n", data.test.labels[i], p.task, p.class);
            }
        }
        let (tid, joint) = ci_scores(&learner, &tasks, mode)?;
        fs::create_dir_all(&self.cfg.out)?;
        let name = mode_name(mode);
        fs::write(self.out(&format!("ci-{name}.tsv")), out)?;
        let mut f = fs::File::create(self.out(&format!("ci-{name}.txt")))?;
        writeln!(f, "mode {name}\ntask_id_accuracy {tid:.4}\naccuracy {joint:.4}")?;
        println!("mode {name}: task-id accuracy {tid:.4}, accuracy {joint:.4}");
        Ok(())
    }
}

fn mode_name(mode: CiMode) -> &'static str {
    match mode {
        CiMode::Max => "max",
        CiMode::MinEntropy => "min-entropy",
    }
}

/// Task-id accuracy and joint (task and class) accuracy over all test sets.
pub fn ci_scores(learner: &Learner, tasks: &[TaskDataset], mode: CiMode) -> anyhow::Result<(f64, f64)> {
    let (mut tid, mut joint, mut n) = (0usize, 0usize, 0usize);
    for (t, data) in tasks.iter().enumerate() {
        let preds = learner.predict_class_incremental(&data.test, mode)?;
        for (p, &y) in preds.iter().zip(&data.test.labels) {
            tid += (p.task == t) as usize;
            joint += (p.task == t && p.class == y) as usize;
        }
        n += preds.len();
    }
    if n == 0 {
        return Err(anyhow!("no test samples"));
    }
    Ok((tid as f64 / n as f64, joint as f64 / n as f64))
}
