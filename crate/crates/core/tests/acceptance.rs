//! Acceptance run: one PASS/FAIL line per criterion, written straight to
//! stdout so it shows up without `--nocapture`.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tinydet::cspok::{cspok_block, CspokConfig, CspokParams, OkmConfig};
use tinydet::eval::{evaluate, BoxAnnotation, Detection};
use tinydet::gradsuite::{run_suite, Block};
use tinydet::losses::{focal_loss, varifocal_term, VflParams};
use tinydet::pipeline::{ablate, generate_synthetic, single_target_dataset, small_target_ratio, train_demo, ModelConfig, SynthSpec, TrainConfig};
use tinydet::spd::{depth_to_space_tensor, space_to_depth_tensor};
use tinydet::{Bbox, Tape, Tensor};

use common::{as_oracle, categories, exhaustive_instances, oracle_evaluate, random_instance, random_large_instance};

const ROUND_TRIP_BUDGET: Duration = Duration::from_secs(5);
const GRAD_EPSILON: f64 = 1e-4;
const GRAD_TOLERANCE: f64 = 1e-3;
const GRAD_INSTANCES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const VFL_TOLERANCE: f64 = 1e-6;
const BRANCH_TOLERANCE: f64 = 1e-12;
const ABLATION_BUDGET: Duration = Duration::from_secs(15 * 60);
const ABLATION_EPOCHS: usize = 30;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const OVERFIT_RATIO: f64 = 0.5;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn report(n: usize, name: &str, o: &Outcome) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn lossless_round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut failures = 0;
    for i in 0..200 {
        let scale = if i % 2 == 0 { 2 } else { 4 };
        let shape = [
            rng.gen_range(1..=3),
            rng.gen_range(1..=5),
            scale * rng.gen_range(1..=6),
            scale * rng.gen_range(1..=6),
        ];
        let x = Tensor::from_fn(shape, |_| rng.gen_range(-1e3..1e3));
        let folded = space_to_depth_tensor(&x, scale).unwrap();
        let back = depth_to_space_tensor(&folded, scale).unwrap();
        failures += usize::from(!back.bit_eq(&x));
    }
    let took = start.elapsed();
    outcome(
        failures == 0 && took < ROUND_TRIP_BUDGET,
        format!("{failures}/200 mismatches, {:.3}s (budget {}s)", took.as_secs_f64(), ROUND_TRIP_BUDGET.as_secs()),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;
    for block in Block::ALL {
        match run_suite(block, GRAD_INSTANCES, 2024, GRAD_EPSILON, GRAD_TOLERANCE) {
            Ok(r) => {
                pass &= r.pass && r.instances >= GRAD_INSTANCES;
                parts.push(format!("{} {}/{} {:.1e}", block.name(), r.passed, r.instances, r.max_rel_err));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{} error {e}", block.name()));
            }
        }
    }
    let took = start.elapsed();
    pass &= took < GRAD_BUDGET;
    outcome(pass, format!("{}; {:.1}s", parts.join(", "), took.as_secs_f64()))
}

/// Direct evaluation of the varifocal definition.
fn vfl_reference(p: f64, q: f64, alpha: f64, gamma: f64) -> f64 {
    if q > 0.0 {
        -q * (q * p.ln() + (1.0 - q) * (1.0 - p).ln())
    } else {
        -alpha * p.powf(gamma) * (1.0 - p).ln()
    }
}

fn vfl_values() -> Outcome {
    let params = VflParams::default();
    let neg = varifocal_term(0.5, 0.0, &params).0;
    let pos = varifocal_term(0.8, 0.8, &params).0;
    let neg_ok = (neg - 0.129965).abs() <= VFL_TOLERANCE && (neg - vfl_reference(0.5, 0.0, 0.75, 2.0)).abs() <= VFL_TOLERANCE;
    let pos_ok = (pos - 0.400322).abs() <= VFL_TOLERANCE && (pos - vfl_reference(0.8, 0.8, 0.75, 2.0)).abs() <= VFL_TOLERANCE;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let p: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
        let v = varifocal_term(p, 0.0, &params).0;
        let f = focal_loss(p, false, 0.75, 2.0, true).unwrap();
        worst = worst.max((v - f).abs());
    }
    outcome(
        neg_ok && pos_ok && worst <= BRANCH_TOLERANCE,
        format!("negative {neg:.7}, positive {pos:.7}, focal branch gap {worst:.1e}"),
    )
}

fn cspok_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = CspokConfig { activation: false, ..CspokConfig::new(6, 6) };
    let x0 = Tensor::uniform([2, 6, 9, 7], -2.0, 2.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.leaf(x0.clone());
    let p = CspokParams::identity(&cfg, &mut rng).unwrap().register(&mut tape);
    let out = cspok_block(&mut tape, x, &cfg, &p).unwrap();
    let identity = tape.value(out.output).bit_eq(&x0);

    let mut bypass_failures = 0;
    for i in 0..100 {
        let c_in = rng.gen_range(2..=8);
        let ratio = [0.25, 0.5, 0.75][i % 3];
        let okm = (i % 4 != 3).then(|| OkmConfig { global: i % 2 == 0, ..OkmConfig::default() });
        let cfg = CspokConfig { split_ratio: ratio, activation: i % 5 != 0, okm, ..CspokConfig::new(c_in, rng.gen_range(1..=8)) };
        let Ok((bypass, _)) = cfg.split() else {
            continue;
        };
        let x0 = Tensor::uniform([1, c_in, rng.gen_range(1..=8), rng.gen_range(1..=8)], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let p = CspokParams::random(&cfg, &mut rng).unwrap().register(&mut tape);
        let out = cspok_block(&mut tape, x, &cfg, &p).unwrap();
        let plane = x0.shape().h * x0.shape().w;
        let expect = &x0.data()[..bypass * plane];
        let ok = tape.value(out.bypass).data() == expect && &tape.value(out.merged).data()[..bypass * plane] == expect;
        bypass_failures += usize::from(!ok);
    }
    outcome(
        identity && bypass_failures == 0,
        format!("identity bit-exact: {identity}, bypass mismatches {bypass_failures}/100"),
    )
}

fn evaluator_oracle() -> Outcome {
    let classes = categories(2);
    let mut cases = Vec::new();
    for (gts, dets) in [(1, 3), (2, 3), (3, 2), (4, 2)] {
        cases.extend(exhaustive_instances(gts, dets));
    }
    let exhaustive = cases.len();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    cases.extend((0..20_000).map(|_| random_instance(&mut rng, 6, 4)));
    let mismatches = cases
        .iter()
        .filter(|(d, g)| as_oracle(&evaluate(d, g, &classes).unwrap()) != oracle_evaluate(d, g, &classes))
        .count();

    let classes3 = categories(3);
    let mut conservation_failures = 0;
    for _ in 0..100 {
        let (dets, gts) = random_large_instance(&mut rng);
        let r = evaluate(&dets, &gts, &classes3).unwrap();
        conservation_failures += usize::from(r.tp + r.fn_ != gts.len() || r.tp + r.fp != dets.len());
    }
    outcome(
        mismatches == 0 && conservation_failures == 0,
        format!(
            "{mismatches} oracle mismatches over {} instances ({exhaustive} exhaustive), {conservation_failures}/100 conservation failures",
            cases.len()
        ),
    )
}

fn size_boundary() -> Outcome {
    let classes = categories(1);
    let probe = |w: f64, h: f64| {
        let gt = BoxAnnotation::new(1, 1, Bbox::new(0.0, 0.0, w, h));
        let det = Detection { image_id: 1, category_id: 1, bbox: gt.bbox, score: 0.9 };
        evaluate(&[det], &[gt], &classes).unwrap()
    };
    let below = probe(31.0, 33.0);
    let at = probe(32.0, 32.0);
    let pass = below.ap_small == Some(1.0) && below.ap_medium.is_none() && at.ap_small.is_none() && at.ap_medium == Some(1.0);
    outcome(
        pass,
        format!("area 1023 -> small {:?}; area 1024 -> small {:?}, medium {:?}", below.ap_small, at.ap_small, at.ap_medium),
    )
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn synthetic_contract() -> Outcome {
    let mut worst_ratio = f64::INFINITY;
    let mut identical = true;
    for seed in [0, 1, 2, 3, 4] {
        let spec = SynthSpec { seed, images: 64, ..SynthSpec::default() };
        let a = generate_synthetic(&spec).unwrap();
        worst_ratio = worst_ratio.min(small_target_ratio(&a.coco));
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.write(d1.path()).unwrap();
        generate_synthetic(&spec).unwrap().write(d2.path()).unwrap();
        identical &= dir_bytes(d1.path()) == dir_bytes(d2.path());
    }
    outcome(
        worst_ratio >= 0.70 && identical,
        format!("lowest small-target ratio {worst_ratio:.3} over 5 seeds, byte-identical regeneration: {identical}"),
    )
}

fn ablation_harness() -> Outcome {
    let start = Instant::now();
    let data = generate_synthetic(&SynthSpec { images: 64, ..SynthSpec::default() }).unwrap();
    let base = ModelConfig { num_classes: data.coco.categories.len(), ..ModelConfig::default() };
    let train = TrainConfig { epochs: ABLATION_EPOCHS, ..TrainConfig::default() };
    let report = match ablate(&data, &base, &train, &ABLATION_SEEDS) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let took = start.elapsed();
    let shaped = report.rows.len() == 4 && report.rows.iter().all(|r| r.per_seed.len() == ABLATION_SEEDS.len());
    let mut stdout = std::io::stdout().lock();
    let _ = write!(stdout, "{}", report.table());
    drop(stdout);

    let target = Bbox::new(44.0, 50.0, 84.0, 86.0);
    let one = single_target_dataset(128, target, 3, 0).unwrap();
    let overfit = TrainConfig { epochs: 50, batch_size: 1, ..TrainConfig::default() };
    let history = train_demo(&ModelConfig::default(), &one, &overfit).unwrap().history;
    let (first, last) = (history[0].loss, history[history.len() - 1].loss);
    let head: f64 = history[..5].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    let tail: f64 = history[history.len() - 5..].iter().map(|r| r.loss).sum::<f64>() / 5.0;
    let overfit_ok = last < OVERFIT_RATIO * first && tail < head;
    outcome(
        shaped && took < ABLATION_BUDGET && overfit_ok,
        format!(
            "{} arms x {} seeds in {:.0}s (budget {}s); overfit loss {first:.3} -> {last:.3}",
            report.rows.len(),
            ABLATION_SEEDS.len(),
            took.as_secs_f64(),
            ABLATION_BUDGET.as_secs()
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("space-to-depth losslessness", lossless_round_trip),
        ("gradient suite", gradient_suite),
        ("varifocal point values", vfl_values),
        ("cspok identity at initialisation", cspok_identity),
        ("evaluator oracle equivalence", evaluator_oracle),
        ("size-bucket boundary", size_boundary),
        ("synthetic-data contract", synthetic_contract),
        ("ablation harness", ablation_harness),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        report(i + 1, name, &o);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
