//! Varifocal loss values next to focal loss and BCE.
use tinydet::losses::{bce_term, focal_loss, varifocal_term, VflParams};

fn main() {
    let params = VflParams::default();
    println!("{:>5} {:>5} {:>10} {:>10} {:>10}", "p", "q", "vfl", "focal", "bce");
    for (p, q) in [(0.5, 0.0), (0.1, 0.0), (0.9, 0.0), (0.8, 0.8), (0.3, 0.8), (0.95, 0.2)] {
        let vfl = varifocal_term(p, q, &params).0;
        let focal = focal_loss(p, q > 0.0, 0.75, 2.0, true).unwrap();
        let bce = bce_term(p, q, 1e-7).0;
        println!("{p:>5} {q:>5} {vfl:>10.6} {focal:>10.6} {bce:>10.6}");
    }
}
