//! Short training run on synthetic data. Set RUST_LOG=debug for per-epoch lines.
use tinydet::pipeline::{generate_synthetic, train_demo, ModelConfig, SynthSpec, TrainConfig};

fn main() -> tinydet::Result<()> {
    env_logger::init();
    let data = generate_synthetic(&SynthSpec { images: 64, ..SynthSpec::default() })?;
    let model = ModelConfig::default();
    let train = TrainConfig { epochs: 30, eval_every: 10, ..TrainConfig::default() };
    let out = train_demo(&model, &data, &train)?;
    for r in &out.history {
        println!("epoch {:>2} lr {:.4} loss {:.4} (cls {:.4}, box {:.4})", r.epoch, r.lr, r.loss, r.cls_loss, r.box_loss);
    }
    println!("held-out mAP.5 {:.3}, mAP.5:.95 {:.3}", out.final_eval.map_50, out.final_eval.map_50_95);
    Ok(())
}
