//! TPE against uniform random search on a mixed categorical and continuous
//! objective.

use selfaugment::rng;
use selfaugment::search::{minimize, Dim, Space, TpeConfig};

fn objective(x: &[f64]) -> f64 {
    let penalty = if x[0] as usize == 3 { 0.0 } else { 0.5 };
    (x[1] - 0.2).powi(2) + (x[2] - 0.7).powi(2) + penalty
}

fn main() -> selfaugment::Result<()> {
    let space = Space::new(vec![Dim::Categorical { n: 6 }, Dim::Unit, Dim::Unit])?;
    let tpe = minimize(objective, &space, &TpeConfig::default(), 60, &mut rng::stream(0, &[0]))?;
    let random = minimize(
        objective,
        &space,
        &TpeConfig {
            startup: usize::MAX,
            ..TpeConfig::default()
        },
        60,
        &mut rng::stream(0, &[1]),
    )?;
    let best = |h: &[selfaugment::search::Observation]| h.iter().map(|o| o.score).fold(f64::INFINITY, f64::min);
    println!("best after 60 trials: tpe {:.5} random {:.5}", best(&tpe), best(&random));
    Ok(())
}
