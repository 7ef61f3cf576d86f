//! A model directory: weights, config and tokenizer files side by side.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Transformer};
use crate::tokenizer::BpeTokenizer;

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";
pub const VOCAB_FILE: &str = "vocab.json";
pub const MERGES_FILE: &str = "merges.txt";

/// File locations of a model bundle. Each path defaults to the standard
/// name inside the directory and can be overridden.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundlePaths {
    pub config: PathBuf,
    pub weights: PathBuf,
    pub vocab: PathBuf,
    pub merges: PathBuf,
}

impl BundlePaths {
    pub fn in_dir(dir: &Path) -> Self {
        BundlePaths {
            config: dir.join(CONFIG_FILE),
            weights: dir.join(WEIGHTS_FILE),
            vocab: dir.join(VOCAB_FILE),
            merges: dir.join(MERGES_FILE),
        }
    }
}

pub struct ModelBundle {
    pub model: Transformer,
    pub tokenizer: BpeTokenizer,
}

impl ModelBundle {
    pub fn load(paths: &BundlePaths) -> Result<Self> {
        let config = ModelConfig::from_json_file(&paths.config)?;
        let tokenizer = BpeTokenizer::from_files(&paths.vocab, &paths.merges)?;
        if tokenizer.vocab_size() > config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} ids but the model vocabulary is {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let model = Transformer::load(&paths.weights, config)?;
        Ok(ModelBundle { model, tokenizer })
    }

    /// Writes the four standard files into `dir`, creating it if needed.
    pub fn save(model: &Transformer, tokenizer: &BpeTokenizer, dir: &Path) -> Result<BundlePaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = BundlePaths::in_dir(dir);
        let config = serde_json::to_string_pretty(model.config())?;
        std::fs::write(&paths.config, config).map_err(|e| Error::io(&paths.config, e))?;
        model.weights().to_store(model.config()).write(&paths.weights)?;
        tokenizer.write_files(&paths.vocab, &paths.merges)?;
        Ok(paths)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{PlantedFixture, PlantedSpec};

    #[test]
    fn save_then_load_is_lossless() {
        let f = PlantedFixture::build(&PlantedSpec::new(3, 2, 1, 7)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = ModelBundle::save(&f.model, &f.tokenizer, dir.path()).unwrap();
        let b = ModelBundle::load(&paths).unwrap();
        let text = f.prompts(1)[0].text();
        let ids = f.tokenizer.encode(&text).unwrap().token_ids;
        assert_eq!(b.tokenizer.encode(&text).unwrap().token_ids, ids);
        assert_eq!(
            b.model.forward(&ids, None, false).unwrap().logits,
            f.model.forward(&ids, None, false).unwrap().logits
        );
    }

    #[test]
    fn missing_file_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = ModelBundle::load(&BundlePaths::in_dir(dir.path())).err().unwrap();
        assert!(err.to_string().contains("config.json"), "{err}");
    }
}
