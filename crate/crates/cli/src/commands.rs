use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use westar::eval::{emit_report, pool_reports, MetricsReport};
use westar::experiment::{ablate, ablation_csv, Benchmark};
use westar::model::{Checkpoint, StudentNet};
use westar::train::{evaluate, pretrain_on, run_adaptation, trajectory_csv};

use crate::config::ExperimentConfig;
use crate::dataset::{write_dataset, Dataset, INDEX_FILE};
use crate::error::CliError;
use crate::manifest::{Manifest, MANIFEST_FILE};

pub const BASE_CHECKPOINT: &str = "base.wstr";
pub const ADAPTED_CHECKPOINT: &str = "adapted.wstr";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const REPORT_FILE: &str = "report.json";

pub struct Run {
    pub cfg: ExperimentConfig,
    pub dry_run: bool,
    pub force: bool,
}

fn required<'a>(path: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Config(format!("no {what}: pass {flag} or set it in the config")))
}

fn is_empty_dir(dir: &Path) -> Result<bool, CliError> {
    Ok(!dir.exists() || std::fs::read_dir(dir)?.next().is_none())
}

impl Run {
    fn out(&self) -> Result<&Path, CliError> {
        required(&self.cfg.out, "output directory", "--out")
    }

    fn dataset(&self) -> Result<Dataset, CliError> {
        let ds = Dataset::open(required(&self.cfg.data_dir, "dataset directory", "--data")?)?;
        let d = &self.cfg.data;
        if (ds.index.height, ds.index.width) != (d.height, d.width) {
            return Err(CliError::Config(format!(
                "dataset images are {}x{} but the config asks for {}x{}",
                ds.index.height, ds.index.width, d.height, d.width
            )));
        }
        Ok(ds)
    }

    fn checkpoint(&self, ds: &Dataset) -> Result<StudentNet, CliError> {
        let path = required(&self.cfg.checkpoint, "checkpoint", "--checkpoint")?;
        let ckpt = Checkpoint::load(path).map_err(|e| match e {
            westar::Error::Io(io) => CliError::Data(format!("{}: {io}", path.display())),
            other => CliError::from(other),
        })?;
        let net = ckpt.student;
        if (net.config.height, net.config.width) != (ds.index.height, ds.index.width) {
            return Err(CliError::Config(format!(
                "checkpoint expects {}x{} images, dataset has {}x{}",
                net.config.height, net.config.width, ds.index.height, ds.index.width
            )));
        }
        Ok(net)
    }

    fn manifest(&self, command: &str) -> Manifest {
        Manifest::new(command, self.cfg.seed, self.cfg.settings_text())
    }

    fn create_out(&self) -> Result<&Path, CliError> {
        let out = self.out()?;
        std::fs::create_dir_all(out)?;
        Ok(out)
    }

    pub fn gen(&self) -> Result<(), CliError> {
        let out = self.out()?;
        if !is_empty_dir(out)? && !self.force {
            return Err(CliError::Data(format!(
                "{} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
        let d = &self.cfg.data;
        if self.dry_run {
            println!(
                "dry run: would write {} train, {} val, {} adapt and {} test scenes for {} task(s) to {}",
                d.n_train,
                d.n_val,
                d.n_adapt,
                d.n_test,
                d.tasks().len(),
                out.display()
            );
            return Ok(());
        }
        // Only ever remove what a previous run wrote.
        for stale in ["clean", "corrupted"] {
            if out.join(stale).exists() {
                std::fs::remove_dir_all(out.join(stale))?;
            }
        }
        std::fs::create_dir_all(out)?;
        let index = write_dataset(d, out, |what| eprintln!("wrote {what}"))?;
        let mut manifest = self.manifest("gen");
        manifest.counts = index.counts();
        manifest.add(out, INDEX_FILE)?;
        for split in index.ids.keys() {
            manifest.add(out, &format!("clean/{split}/"))?;
        }
        for task in &index.tasks {
            manifest.add(out, &format!("corrupted/{task}/"))?;
        }
        manifest.write(out)?;
        println!("seed {}", manifest.seed);
        for (split, n) in &manifest.counts {
            println!("{split}: {n}");
        }
        println!("manifest {}", out.join(MANIFEST_FILE).display());
        Ok(())
    }

    pub fn pretrain(&self) -> Result<(), CliError> {
        let out = self.out()?;
        let ds = self.dataset()?;
        if self.dry_run {
            println!(
                "dry run: would pretrain for {} epochs on {} scenes into {}",
                self.cfg.pretrain.epochs,
                ds.index.ids.get("train").map_or(0, Vec::len),
                out.display()
            );
            return Ok(());
        }
        let scenes = ds.train_scenes()?;
        eprintln!("pretraining on {} scenes", scenes.len());
        let (ckpt, losses) = pretrain_on(&scenes, &self.cfg.pretrain)?;
        if losses.iter().any(|l| !l.is_finite()) {
            return Err(CliError::Numeric(format!("pretraining loss diverged: {losses:?}")));
        }
        let out = self.create_out()?;
        ckpt.save(out.join(BASE_CHECKPOINT))?;
        let clean = evaluate(&ckpt.student, &ds.clean_test()?)?;
        println!("clean test: delta1 {:.2} absrel {:.2}", clean.delta1, clean.absrel);
        let report = BTreeMap::from([("test_clean".to_string(), clean)]);
        emit_report(&report, &out.join(REPORT_FILE))?;

        let mut manifest = self.manifest("pretrain");
        for f in [BASE_CHECKPOINT, REPORT_FILE, "report.csv"] {
            manifest.add(out, f)?;
        }
        manifest.write(out)
    }

    pub fn adapt(&self) -> Result<(), CliError> {
        let out = self.out()?;
        let ds = self.dataset()?;
        let base = self.checkpoint(&ds)?;
        let cfg = &self.cfg.adapt;
        if self.dry_run {
            println!(
                "dry run: would adapt ({}, {}) on {} task(s) into {}",
                cfg.components.name(),
                cfg.norm_mode.name(),
                ds.index.tasks.len(),
                out.display()
            );
            return Ok(());
        }
        let bench = ds.benchmark()?;
        let out = self.create_out()?;
        let mut manifest = self.manifest("adapt");
        let mut report = BTreeMap::new();
        let (mut pre_all, mut post_all) = (Vec::new(), Vec::new());
        for (task, splits) in &bench.tasks {
            eprintln!("adapting on {task}");
            let pre = evaluate(&base, &splits.test)?;
            let outcome = run_adaptation(&base, &splits.adapt, &splits.val, cfg)?;
            if outcome.trajectory.iter().any(|r| !r.loss_st.is_finite() || !r.loss_weak.is_finite()) {
                return Err(CliError::Numeric(format!("{task}: adaptation loss diverged")));
            }
            let post = evaluate(&outcome.best.student, &splits.test)?;
            println!(
                "{task}: delta1 {:.2} -> {:.2}, absrel {:.2} -> {:.2}, best epoch {}",
                pre.delta1, post.delta1, pre.absrel, post.absrel, outcome.best_epoch
            );
            std::fs::create_dir_all(out.join(task))?;
            std::fs::write(out.join(task).join(TRAJECTORY_FILE), trajectory_csv(&outcome.trajectory))?;
            outcome.best.save(out.join(task).join(ADAPTED_CHECKPOINT))?;
            manifest.add(out, &format!("{task}/{TRAJECTORY_FILE}"))?;
            manifest.add(out, &format!("{task}/{ADAPTED_CHECKPOINT}"))?;
            report.insert(format!("pre/{task}"), pre.clone());
            report.insert(format!("post/{task}"), post.clone());
            pre_all.push(pre);
            post_all.push(post);
        }
        insert_pooled(&mut report, "pre", &pre_all);
        insert_pooled(&mut report, "post", &post_all);
        if let (Some(pre), Some(post)) = (report.get("pre"), report.get("post")) {
            println!("pooled: delta1 {:.2} -> {:.2}", pre.delta1, post.delta1);
        }
        emit_report(&report, &out.join(REPORT_FILE))?;
        manifest.add(out, REPORT_FILE)?;
        manifest.add(out, "report.csv")?;
        manifest.write(out)
    }

    pub fn ablate(&self) -> Result<(), CliError> {
        let out = self.out()?;
        let ds = self.dataset()?;
        let base = self.checkpoint(&ds)?;
        let seeds: Vec<u64> = (0..self.cfg.n_seeds as u64).map(|i| self.cfg.seed + i).collect();
        if self.dry_run {
            for axis in &self.cfg.axes {
                let names: Vec<String> = axis.variants(&self.cfg.adapt).into_iter().map(|(n, _)| n).collect();
                println!(
                    "dry run: axis {} variants [{}] over seeds {seeds:?} into {}",
                    axis.name(),
                    names.join(", "),
                    out.display()
                );
            }
            return Ok(());
        }
        let bench: Benchmark = ds.benchmark()?;
        let out = self.create_out()?;
        let mut manifest = self.manifest("ablate");
        for &axis in &self.cfg.axes {
            let rows = ablate(&base, &bench, &self.cfg.adapt, axis, &seeds, |r| {
                eprintln!("{} {} seed {}: delta1 {:.2}", axis.name(), r.name, r.seed, r.test.delta1);
            })?;
            let file = format!("ablation_{}.csv", axis.name());
            let csv = ablation_csv(&rows);
            print!("{csv}");
            std::fs::write(out.join(&file), csv)?;
            manifest.add(out, &file)?;
        }
        manifest.write(out)
    }

    pub fn eval(&self) -> Result<(), CliError> {
        let out = self.out()?;
        let ds = self.dataset()?;
        let net = self.checkpoint(&ds)?;
        if self.dry_run {
            println!("dry run: would evaluate on {} task(s) into {}", ds.index.tasks.len(), out.display());
            return Ok(());
        }
        let bench = ds.benchmark()?;
        let out = self.create_out()?;
        let mut report = BTreeMap::new();
        report.insert("clean".to_string(), evaluate(&net, &ds.clean_test()?)?);
        let (pooled, per) = bench.evaluate(&net)?;
        for ((task, _), r) in bench.tasks.iter().zip(per) {
            report.insert(task.clone(), r);
        }
        report.insert("corrupted".to_string(), pooled);
        for (split, r) in &report {
            println!("{split}: delta1 {:.2} absrel {:.2}", r.delta1, r.absrel);
        }
        emit_report(&report, &out.join(REPORT_FILE))?;
        let mut manifest = self.manifest("eval");
        manifest.add(out, REPORT_FILE)?;
        manifest.add(out, "report.csv")?;
        manifest.write(out)
    }
}

fn insert_pooled(report: &mut BTreeMap<String, MetricsReport>, key: &str, parts: &[MetricsReport]) {
    if let Some(r) = pool_reports(parts) {
        report.insert(key.to_string(), r);
    }
}
