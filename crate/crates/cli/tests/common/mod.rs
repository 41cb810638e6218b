#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use probe_cli::{Pipeline, PipelineConfig};
use probe_core::synthetic::{
    generate_planted_dataset, save_tiny_model, tiny_network, train_tiny, write_planted_dataset, PlantConfig,
    TrainConfig,
};
use probe_core::Image;

/// Two classes of 24 training images each, a briefly trained tiny model and a
/// config that keeps the stages fast.
pub fn small_bench(dir: &Path) -> PathBuf {
    let plant = PlantConfig {
        num_classes: 2,
        images_per_class: 24,
        validation_per_class: 3,
        ..PlantConfig::default()
    };
    let dataset = generate_planted_dataset(&plant).unwrap();
    write_planted_dataset(&dataset, &dir.join("data")).unwrap();
    let examples: Vec<(&Image, usize)> = dataset.split("train").map(|s| (&s.image, s.label)).collect();
    let mut net = tiny_network(0, 32, 2);
    let train = TrainConfig {
        epochs: 2,
        ..TrainConfig::default()
    };
    train_tiny(&mut net, &examples, &train).unwrap();
    save_tiny_model(&dir.join("model.json"), "tiny-small", &net).unwrap();
    let config = dir.join("probe.toml");
    std::fs::write(
        &config,
        r#"
[model]
inspected = "model.json"

[dataset]
root = "data"

[selection]
top_features = 3
k = 12

[attack]
step_size = 40.0
iterations = 2
rho = 500.0

[evaluation]
sigmas = [0.0, 0.25, 1.0]
base_sigma = 0.25
match_grid = [0.25, 0.5, 1.0, 2.0, 4.0]
seed = 0
clip = false

[output]
root = "out"
"#,
    )
    .unwrap();
    config
}

pub fn pipeline(config: &Path) -> Pipeline {
    Pipeline::new(PipelineConfig::load(config).unwrap(), None)
}

pub fn with_config(config: &Path, edit: impl FnOnce(&mut PipelineConfig)) -> Pipeline {
    let mut c = PipelineConfig::load(config).unwrap();
    edit(&mut c);
    Pipeline::new(c, None)
}

/// Relative path -> bytes of every file under `root`.
pub fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    walkdir::WalkDir::new(root)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| (e.path().strip_prefix(root).unwrap().display().to_string(), std::fs::read(e.path()).unwrap()))
        .collect()
}
