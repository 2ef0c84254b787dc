//! Generates a small synthetic set and writes it to a temporary directory.
use tinydet::pipeline::{generate_synthetic, small_target_ratio, SynthSpec};

fn main() -> tinydet::Result<()> {
    let spec = SynthSpec { images: 12, ..SynthSpec::default() };
    let data = generate_synthetic(&spec)?;
    let (images, annotations, classes) = data.coco.counts();
    println!("{images} images, {annotations} targets, {classes} classes");
    println!("small-target ratio {:.3}", small_target_ratio(&data.coco));
    let dir = std::env::temp_dir().join("tinydet-synth-example");
    data.write(&dir)?;
    println!("written to {}", dir.display());
    Ok(())
}
