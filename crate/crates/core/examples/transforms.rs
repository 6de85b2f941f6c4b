//! Applies every transform at weak, middle and strong magnitude and reports
//! how far each output moves from the input.

use selfaugment::dataio::gen_synthetic;
use selfaugment::imageops::{apply_transform, magnitude_to_param, OpId};
use selfaugment::rng;

fn main() -> selfaugment::Result<()> {
    let data = gen_synthetic(2, 1, (16, 16), 3)?;
    let img = &data.images[0];
    println!("{:<16} {:>8} {:>8} {:>8}", "op", "l=0", "l=0.5", "l=1");
    for op in OpId::ALL {
        let mut row = format!("{:<16}", op.name());
        for lambda in [0.0, 0.5, 1.0] {
            let param = magnitude_to_param(op, lambda)?;
            let out = apply_transform(img, op, param, &mut rng::stream(0, &[op as u64]))?;
            let diff: f32 = img.data().iter().zip(out.data()).map(|(a, b)| (a - b).abs()).sum::<f32>() / img.data().len() as f32;
            row.push_str(&format!(" {diff:>8.4}"));
        }
        println!("{row}");
    }
    Ok(())
}
