//! Strided convolution versus space-to-depth convolution on a single bright pixel.
use rand::SeedableRng;
use tinydet::spd::{spd_conv, SpdConfig, SpdParams};
use tinydet::tensor::Conv2dSpec;
use tinydet::{Tape, Tensor};

fn main() -> tinydet::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    // A lone pixel at an odd coordinate: stride-2 sampling with a 1x1 kernel skips it.
    let mut x = Tensor::zeros([1, 1, 8, 8]);
    x.data_mut()[3 * 8 + 5] = 1.0;

    let mut tape = Tape::new();
    let input = tape.leaf(x);
    let w = tape.leaf(Tensor::full([1, 1, 1, 1], 1.0));
    let strided = tape.conv2d(input, w, None, Conv2dSpec::new(2, 0))?;
    println!("strided 1x1 conv energy: {}", tape.value(strided).data().iter().map(|v| v.abs()).sum::<f64>());

    let cfg = SpdConfig::new(1, 4);
    let params = SpdParams::init(&cfg, &mut rng).register(&mut tape);
    let out = spd_conv(&mut tape, input, &cfg, &params)?;
    println!("spd conv output {} energy: {:.4}", tape.shape(out), tape.value(out).data().iter().map(|v| v.abs()).sum::<f64>());
    Ok(())
}
