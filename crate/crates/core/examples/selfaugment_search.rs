//! End-to-end policy search at toy scale: base policy selection, fold
//! training, and a minimax search.

use selfaugment::contrastive::MocoConfig;
use selfaugment::dataio::gen_synthetic;
use selfaugment::search::{run_selfaugment, LossKind, SearchConfig};

fn main() -> selfaugment::Result<()> {
    let data = gen_synthetic(4, 64, (16, 16), 11)?;
    let moco = MocoConfig {
        queue_size: 64,
        batch_size: 32,
        epochs: 4,
        ..MocoConfig::default()
    };
    let cfg = SearchConfig {
        k: 2,
        t: 1,
        b: 6,
        p: 2,
        loss_kind: LossKind::Minimax,
        ..SearchConfig::default()
    };
    let run = run_selfaugment(&data, &cfg, &moco, 0)?;
    println!("base policy: {}", run.prepared.base.name());
    println!("normalizer: {:?}", run.prepared.normalizer);
    for t in &run.outcome.trials {
        let ops: Vec<_> = t.candidate.iter().map(|s| format!("{}({:.2},{:.2})", s.op.name(), s.p, s.lambda)).collect();
        println!("fold {} trial {:>2} score {:>8.4} {}", t.fold_id, t.trial_idx, t.score, ops.join(" "));
    }
    println!("{}", run.outcome.policy.to_canonical_json());
    Ok(())
}
