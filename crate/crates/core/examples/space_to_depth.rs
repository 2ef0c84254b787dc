//! Folds a 4x4 map into channels and back.
use tinydet::spd::{depth_to_space_tensor, space_to_depth_tensor};
use tinydet::Tensor;

fn main() -> tinydet::Result<()> {
    let x = Tensor::from_fn([1, 1, 4, 4], |i| i as f64);
    let folded = space_to_depth_tensor(&x, 2)?;
    println!("input  {}: {:?}", x.shape(), x.data());
    for c in 0..4 {
        let plane: Vec<f64> = (0..4).map(|p| folded.data()[c * 4 + p]).collect();
        println!("channel {c}: {plane:?}");
    }
    let back = depth_to_space_tensor(&folded, 2)?;
    println!("round trip exact: {}", back.bit_eq(&x));
    Ok(())
}
