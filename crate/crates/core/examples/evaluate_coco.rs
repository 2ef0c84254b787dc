//! COCO metrics for a handful of hand-made detections.
use tinydet::eval::{evaluate, BoxAnnotation, CocoCategory, Detection, EvalResult};
use tinydet::Bbox;

fn main() -> tinydet::Result<()> {
    let cats = vec![CocoCategory { id: 1, name: "moth".into(), supercategory: None }];
    let gts = vec![
        BoxAnnotation::new(1, 1, Bbox::new(10.0, 10.0, 20.0, 20.0)),
        BoxAnnotation::new(1, 1, Bbox::new(40.0, 40.0, 90.0, 90.0)),
    ];
    let det = |b: Bbox, score: f64| Detection { image_id: 1, category_id: 1, bbox: b, score };
    let dets = vec![
        det(Bbox::new(11.0, 10.0, 21.0, 20.0), 0.9),
        det(Bbox::new(60.0, 0.0, 70.0, 10.0), 0.8),
        det(Bbox::new(42.0, 41.0, 90.0, 92.0), 0.6),
    ];
    let r = evaluate(&dets, &gts, &cats)?;
    print!("{}", EvalResult::table([("example", &r)]));
    println!("tp {} fp {} fn {}", r.tp, r.fp, r.fn_);
    Ok(())
}
