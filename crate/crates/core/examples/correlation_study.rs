//! Trains several models with different augmentations and correlates their
//! self-supervised probe accuracy with supervised accuracy.

use selfaugment::analytics::{render_reports, run_correlation_study, ModelSpec, ReportFormat, StudyConfig};
use selfaugment::contrastive::MocoConfig;
use selfaugment::dataio::gen_synthetic;
use selfaugment::imageops::OpId;
use selfaugment::policy::{Pipeline, Policy, RandAugmentConfig};

fn main() -> selfaugment::Result<()> {
    let data = gen_synthetic(4, 64, (16, 16), 11)?;
    let mut pipelines = vec![Pipeline::identity(), Pipeline::base()];
    pipelines.push(Pipeline::base().named("base+ra").with_randaugment(RandAugmentConfig::new(2, 9))?);
    for op in [OpId::Invert, OpId::Rotate] {
        pipelines.push(Pipeline::flip_only().named(format!("flip+{}", op.name())).with_policy(Policy::single_op(op)));
    }
    let specs: Vec<_> = pipelines.into_iter().map(|pipeline| ModelSpec { pipeline, epochs: 4 }).collect();
    let cfg = StudyConfig {
        moco: MocoConfig {
            queue_size: 64,
            batch_size: 32,
            ..MocoConfig::default()
        },
        ..StudyConfig::default()
    };
    let result = run_correlation_study(&specs, &data, &cfg, 0)?;
    print!("{}", render_reports(&result.reports, ReportFormat::Csv)?);
    println!("spearman rotation {:?} jigsaw {:?}", result.rho_rotation, result.rho_jigsaw);
    Ok(())
}
