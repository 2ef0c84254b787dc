//! Runs the cross-stage omni-kernel block and shows the bypass slice.
use rand::SeedableRng;
use tinydet::cspok::{cspok_block, CspokConfig, CspokParams};
use tinydet::{Tape, Tensor};

fn main() -> tinydet::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let cfg = CspokConfig::new(8, 8);
    let (bypass, processed) = cfg.split()?;
    let x0 = Tensor::uniform([1, 8, 16, 16], -1.0, 1.0, &mut rng);

    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let params = CspokParams::init(&cfg, &mut rng)?;
    let count: usize = params.named().iter().map(|(_, t)| t.len()).sum();
    let vars = params.register(&mut tape);
    let out = cspok_block(&mut tape, x, &cfg, &vars)?;
    println!("channels: {bypass} bypass + {processed} processed, {count} parameters");
    println!("output {}", tape.shape(out.output));
    let plane = 16 * 16;
    println!("bypass untouched: {}", tape.value(out.bypass).data() == &x0.data()[..bypass * plane]);

    let ident_cfg = CspokConfig { activation: false, ..cfg };
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let p = CspokParams::identity(&ident_cfg, &mut rng)?.register(&mut tape);
    let y = cspok_block(&mut tape, x, &ident_cfg, &p)?;
    println!("identity initialisation reproduces input: {}", tape.value(y.output).bit_eq(&x0));
    Ok(())
}
