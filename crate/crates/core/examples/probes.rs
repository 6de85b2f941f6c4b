//! Linear probes for rotation, jigsaw and class prediction on a pretrained
//! encoder.

use selfaugment::contrastive::{train_moco, MocoConfig};
use selfaugment::dataio::gen_synthetic;
use selfaugment::policy::Pipeline;
use selfaugment::sseval::{train_probe_split, ProbeConfig, ProbeTask};

fn main() -> selfaugment::Result<()> {
    let data = gen_synthetic(4, 64, (16, 16), 11)?;
    let moco = MocoConfig {
        queue_size: 64,
        batch_size: 32,
        epochs: 5,
        ..MocoConfig::default()
    };
    let run = train_moco(&data, &Pipeline::base(), &moco, 0, None)?;
    let (train, held) = data.split(0.25, 1);
    let probe = ProbeConfig::default();
    for task in [ProbeTask::rotation(), ProbeTask::jigsaw(), ProbeTask::supervised(data.num_classes)] {
        let r = train_probe_split(&run.state.query, task, &train, &held, &probe, 2)?;
        println!("{:<28} top1 {:.3} loss {:.4}", format!("{task:?}"), r.top1, r.eval_loss);
    }
    Ok(())
}
