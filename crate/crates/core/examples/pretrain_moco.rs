//! Contrastive pretraining on synthetic data with flip and crop.

use selfaugment::contrastive::{train_moco, MocoConfig};
use selfaugment::dataio::gen_synthetic;
use selfaugment::policy::Pipeline;

fn main() -> selfaugment::Result<()> {
    let data = gen_synthetic(4, 64, (16, 16), 11)?;
    let cfg = MocoConfig {
        queue_size: 64,
        batch_size: 32,
        epochs: 5,
        ..MocoConfig::default()
    };
    let run = train_moco(&data, &Pipeline::base(), &cfg, 0, None)?;
    for e in &run.log {
        println!("epoch {:>2} loss {:.4} contrastive top1 {:.3}", e.epoch, e.loss, e.contrastive_top1);
    }
    let bytes = run.state.to_checkpoint();
    println!("checkpoint {} bytes", bytes.len());
    Ok(())
}
