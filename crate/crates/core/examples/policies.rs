//! Builds a policy by hand, round-trips it through JSON, and samples a
//! RandAugment configuration.

use selfaugment::imageops::OpId;
use selfaugment::policy::{make_randaugment_policy, Augment, Policy, RandAugmentConfig, SubPolicy, TransformSpec};
use selfaugment::{dataio, rng};

fn main() -> selfaugment::Result<()> {
    let policy = Policy::new(
        "hand-made",
        vec![
            SubPolicy::new(vec![TransformSpec::new(OpId::Rotate, 0.8, 0.3)?, TransformSpec::new(OpId::Solarize, 0.5, 0.6)?])?,
            SubPolicy::new(vec![TransformSpec::new(OpId::Equalize, 1.0, 0.0)?, TransformSpec::new(OpId::Cutout, 0.4, 0.5)?])?,
        ],
    )?;
    let json = policy.to_canonical_json();
    println!("{json}");
    let back = Policy::from_json(json.as_bytes())?;
    assert_eq!(back.to_canonical_json(), json);
    println!("mean strength {:.3}", policy.mean_strength());

    let ra = make_randaugment_policy(&RandAugmentConfig::new(2, 9))?;
    let mut r = rng::stream(1, &[0]);
    for _ in 0..3 {
        let ops: Vec<_> = ra.sample(&mut r).iter().map(|t| t.op.name()).collect();
        println!("randaugment draw: {}", ops.join(" -> "));
    }

    let img = &dataio::gen_synthetic(2, 1, (16, 16), 0)?.images[0];
    let out = policy.augment(img, &mut r)?;
    println!("augmented {}x{} image via {}", out.width(), out.height(), policy.describe());
    Ok(())
}
