#![allow(dead_code)]

use std::path::{Path, PathBuf};

use biasscope_cli::args::{AtlasArgs, AuditArgs, DataArgs, ModelArgs, RunArgs};
use biasscope_core::corpus::write_custom_jsonl;
use biasscope_core::synthetic::{PlantedFixture, PlantedSpec};
use biasscope_core::{ComparativePrompt, DatasetKind, ModelBundle};
use tempfile::TempDir;

/// A planted-bias model bundle and a custom-schema dataset on disk.
pub struct Workspace {
    pub dir: TempDir,
    pub model_dir: PathBuf,
    pub dataset: PathBuf,
    pub fixture: PlantedFixture,
    pub prompts: Vec<ComparativePrompt>,
}

impl Workspace {
    pub fn planted(layers: usize, heads: usize, planted: usize, seed: u64, n_prompts: usize) -> Self {
        let fixture = PlantedFixture::build(&PlantedSpec::new(layers, heads, planted, seed)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let model_dir = dir.path().join("model");
        ModelBundle::save(&fixture.model, &fixture.tokenizer, &model_dir).unwrap();
        let prompts = fixture.prompts(n_prompts);
        let dataset = dir.path().join("prompts.jsonl");
        write_custom_jsonl(&prompts, std::fs::File::create(&dataset).unwrap()).unwrap();
        Workspace { dir, model_dir, dataset, fixture, prompts }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn model(&self) -> ModelArgs {
        ModelArgs { model_dir: Some(self.model_dir.clone()), config: None, weights: None, vocab: None, merges: None }
    }

    pub fn data(&self) -> DataArgs {
        data_at(&self.dataset)
    }

    pub fn audit(&self, out: &str, atlas: AtlasArgs, workers: usize) -> AuditArgs {
        AuditArgs {
            model: self.model(),
            data: self.data(),
            atlas,
            run: RunArgs { workers: Some(workers), out: self.path(out) },
        }
    }
}

pub fn data_at(path: &Path) -> DataArgs {
    DataArgs { dataset: path.to_path_buf(), kind: DatasetKind::Custom, category: None, limit: None }
}
