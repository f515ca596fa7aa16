//! Regenerates `fixtures/`: the seeded and trained models and a 250-sample
//! calibration set.

use qnet_cli::calib::{self, SampleSet};
use qnet_cli::container::{self, Container};
use qnet_cli::fixtures;
use qnet_core::netmodel::forward_fp;
use qnet_core::synthetic::argmax;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    std::fs::create_dir_all(fixtures::dir())?;
    container::save(&fixtures::seeded_path(), &Container::Model(fixtures::seeded_model()))?;

    let (model, losses) = fixtures::train()?;
    for (e, l) in losses.iter().enumerate() {
        println!("epoch {e} loss {l:.4}");
    }
    let (xs, ys) = fixtures::draws(fixtures::HELD_OUT_SEED, 1000);
    let hits = xs
        .iter()
        .zip(&ys)
        .filter(|(x, &y)| argmax(forward_fp(&model, x, false).unwrap().output.data()) == y)
        .count();
    println!("held-out accuracy {:.3}", hits as f64 / xs.len() as f64);
    container::save(&fixtures::trained_path(), &Container::Model(model))?;

    let (cal, _) = fixtures::draws(fixtures::CALIB_SEED, fixtures::CALIB_SAMPLES);
    calib::save(&fixtures::calib_path(), &SampleSet::from_samples(cal)?)?;
    Ok(())
}
