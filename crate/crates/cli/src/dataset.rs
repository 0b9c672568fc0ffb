//! On-disk dataset layout.
//!
//! ```text
//! dataset.json                       seed, size, tasks and scene ids
//! clean/{train,val,adapt,test}/NNNN/
//! corrupted/<task>/{val,adapt,test}/NNNN/
//! ```
//!
//! Every scene directory holds the image, depth, instance masks and the weak
//! labels drawn from its clean depth.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use westar::experiment::{Benchmark, DataConfig, Split, Splits};
use westar::synth::{read_scene_dir, write_scene_dir, Scene};
use westar::train::{AdaptSample, EvalSample};

use crate::error::CliError;

pub const INDEX_FILE: &str = "dataset.json";
const SPLITS: [Split; 4] = [Split::Train, Split::Val, Split::Adapt, Split::Test];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub corruption: String,
    pub severity: u8,
    pub tasks: Vec<String>,
    /// Scene ids per split, in directory order.
    pub ids: BTreeMap<String, Vec<u64>>,
}

impl DatasetIndex {
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> = self.ids.iter().map(|(k, v)| (format!("clean/{k}"), v.len())).collect();
        for task in &self.tasks {
            for split in [Split::Val, Split::Adapt, Split::Test] {
                let n = self.ids.get(split.name()).map_or(0, Vec::len);
                out.insert(format!("corrupted/{task}/{}", split.name()), n);
            }
        }
        out
    }
}

fn scene_dir(root: &Path, group: &str, split: Split, index: usize) -> PathBuf {
    root.join(group).join(split.name()).join(format!("{index:04}"))
}

/// Writes every split of `cfg` under `root` and returns the index.
pub fn write_dataset(cfg: &DataConfig, root: &Path, mut progress: impl FnMut(&str)) -> Result<DatasetIndex, CliError> {
    cfg.validate()?;
    let tasks = cfg.tasks();
    let mut ids = BTreeMap::new();
    for split in SPLITS {
        let mut split_ids = Vec::with_capacity(cfg.count(split));
        for (t, (task, tcfg)) in tasks.iter().enumerate() {
            if split == Split::Train && t > 0 {
                break;
            }
            for i in 0..tcfg.count(split) {
                let r = tcfg.record(split, i)?;
                // Clean scenes are shared by every task.
                if t == 0 {
                    write_scene_dir(&scene_dir(root, "clean", split, i), &r.clean, &r.labels)?;
                    split_ids.push(r.id);
                }
                if split != Split::Train {
                    let group = format!("corrupted/{task}");
                    write_scene_dir(&scene_dir(root, &group, split, i), &r.corrupted, &r.labels)?;
                }
            }
            if split != Split::Train {
                progress(&format!("corrupted/{task}/{}", split.name()));
            }
        }
        progress(&format!("clean/{}", split.name()));
        ids.insert(split.name().to_string(), split_ids);
    }
    let index = DatasetIndex {
        seed: cfg.seed,
        height: cfg.height,
        width: cfg.width,
        corruption: cfg.corruption.name().to_string(),
        severity: cfg.severity,
        tasks: tasks.into_iter().map(|(n, _)| n).collect(),
        ids,
    };
    std::fs::write(root.join(INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(index)
}

/// A dataset directory written by [`write_dataset`].
pub struct Dataset {
    pub root: PathBuf,
    pub index: DatasetIndex,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, CliError> {
        let path = root.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("no dataset at {}: {e}", root.display())))?;
        let index = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            index,
        })
    }

    fn ids(&self, split: Split) -> &[u64] {
        self.index.ids.get(split.name()).map_or(&[], Vec::as_slice)
    }

    fn read_group(&self, group: &str, split: Split) -> Result<Vec<(u64, Scene, Vec<westar::losses::WeakLabel>)>, CliError> {
        self.ids(split)
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let dir = scene_dir(&self.root, group, split, i);
                let (scene, labels) =
                    read_scene_dir(&dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
                if (scene.height(), scene.width()) != (self.index.height, self.index.width) {
                    return Err(CliError::Data(format!("{}: unexpected image size", dir.display())));
                }
                Ok((id, scene, labels))
            })
            .collect()
    }

    pub fn train_scenes(&self) -> Result<Vec<Scene>, CliError> {
        let scenes: Vec<Scene> = self.read_group("clean", Split::Train)?.into_iter().map(|(_, s, _)| s).collect();
        if scenes.is_empty() {
            return Err(CliError::Data("the clean train split is empty".into()));
        }
        Ok(scenes)
    }

    pub fn clean_test(&self) -> Result<Vec<EvalSample>, CliError> {
        Ok(self.read_group("clean", Split::Test)?.into_iter().map(eval_sample).collect())
    }

    pub fn benchmark(&self) -> Result<Benchmark, CliError> {
        let test_clean = self.clean_test()?;
        let mut tasks = Vec::with_capacity(self.index.tasks.len());
        for task in &self.index.tasks {
            let group = format!("corrupted/{task}");
            let adapt = self
                .read_group(&group, Split::Adapt)?
                .into_iter()
                .map(|(id, s, labels)| AdaptSample {
                    id,
                    rgb: s.rgb,
                    masks: s.masks,
                    valid: s.valid,
                    labels,
                })
                .collect();
            let val = self.read_group(&group, Split::Val)?.into_iter().map(eval_sample).collect();
            let test = self.read_group(&group, Split::Test)?.into_iter().map(eval_sample).collect();
            tasks.push((
                task.clone(),
                Splits {
                    adapt,
                    val,
                    test,
                    test_clean: test_clean.clone(),
                },
            ));
        }
        Ok(Benchmark { tasks })
    }
}

fn eval_sample((id, s, _): (u64, Scene, Vec<westar::losses::WeakLabel>)) -> EvalSample {
    EvalSample {
        id,
        rgb: s.rgb,
        depth: s.depth,
        valid: s.valid,
    }
}
