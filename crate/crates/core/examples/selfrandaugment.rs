//! Chooses RandAugment's (n, m) by held-out rotation accuracy.

use selfaugment::contrastive::MocoConfig;
use selfaugment::dataio::gen_synthetic;
use selfaugment::policy::Pipeline;
use selfaugment::search::run_selfrandaugment;
use selfaugment::sseval::ProbeConfig;

fn main() -> selfaugment::Result<()> {
    let data = gen_synthetic(4, 64, (16, 16), 11)?;
    let moco = MocoConfig {
        queue_size: 64,
        batch_size: 32,
        epochs: 4,
        ..MocoConfig::default()
    };
    let grid = [(1, 4), (1, 9), (2, 5), (3, 11)];
    let out = run_selfrandaugment(&data, &grid, &Pipeline::base(), &moco, &ProbeConfig::default(), 0)?;
    for r in &out.results {
        println!("n={} m={:>2} rotation top1 {:.3}", r.config.n_tau, r.config.lambda_discrete, r.score);
    }
    println!("chosen n={} m={}", out.best.n_tau, out.best.lambda_discrete);
    Ok(())
}
