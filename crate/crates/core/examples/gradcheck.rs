//! Finite-difference checks for every block; pass a block name to run one.
use tinydet::gradsuite::{run_suite, Block, DEFAULT_EPSILON, DEFAULT_TOLERANCE};

fn main() -> tinydet::Result<()> {
    let which = std::env::args().nth(1).unwrap_or_else(|| "all".into());
    for block in Block::parse_list(&which)? {
        let r = run_suite(block, 10, 0, DEFAULT_EPSILON, DEFAULT_TOLERANCE)?;
        println!("{:<6} {}/{} max rel err {:.2e}", block.name(), r.passed, r.instances, r.max_rel_err);
    }
    Ok(())
}
