//! Trains the desk-scale comparison models (`ours`, `single_image`,
//! `direct_prediction`) into a results directory, resuming if interrupted.

use fnf_core::evaluation::Experiment;

fn main() {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "results/desk".into());
    for (v, w) in Experiment::default().train_all(&dir).unwrap() {
        println!("{} {}", v.as_str(), w.num_parameters());
    }
}
