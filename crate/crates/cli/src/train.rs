use std::path::Path;

use clap::Args;
use pii_core::models::data::{data_dir_from_env, load_dataset, Split};
use pii_core::models::toy::{default_name, train, Arch, TrainConfig};
use pii_core::models::weights::save_model;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// cnn_bn, tiny_attention or tiny_mixer.
    #[arg(long)]
    pub arch: String,
    /// shapes10 (generated) or cifar10 (read from the data directory).
    #[arg(long, default_value = "shapes10")]
    pub dataset: String,
    /// Model name; defaults to `<arch>_<dataset>_s<seed>`.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 3000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub test_size: usize,
}

pub fn run(models_dir: &Path, a: TrainArgs) -> anyhow::Result<()> {
    let arch: Arch = a.arch.parse()?;
    let data_dir = data_dir_from_env();
    // the generated dataset is shared by every model seed
    let train_set = load_dataset(&a.dataset, Split::Train, a.train_size, 0, data_dir.as_deref())?;
    let test_set = load_dataset(&a.dataset, Split::Test, a.test_size, 0, data_dir.as_deref())?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        flip: true,
    };
    let trained = train(arch, &train_set, &test_set, &cfg)?;
    let name = a.name.unwrap_or_else(|| default_name(arch, &a.dataset, a.seed));
    let manifest = save_model(models_dir, &name, &trained, &a.dataset, &train_set.class_names, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&manifest)?);
    Ok(())
}
