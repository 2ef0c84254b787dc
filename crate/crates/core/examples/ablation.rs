//! Four-arm ablation at reduced size; the CLI `ablate` runs the full version.
use tinydet::pipeline::{ablate, generate_synthetic, ModelConfig, SynthSpec, TrainConfig};

fn main() -> tinydet::Result<()> {
    let data = generate_synthetic(&SynthSpec { images: 16, image_size: 64, ..SynthSpec::default() })?;
    let base = ModelConfig { input_size: 64, ..ModelConfig::default() };
    let train = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let report = ablate(&data, &base, &train, &[1, 2])?;
    print!("{}", report.table());
    Ok(())
}
