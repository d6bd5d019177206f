//! Re-runs the facet preset calibration and prints the constants and achieved moments.

use causal_panel::synth::{calibrate_facet, FACET_TARGETS};

fn main() {
    let c = calibrate_facet(&FACET_TARGETS);
    println!("pub const FACET_RATIOS: [[f64; 2]; 2] = {:?};", c.ratios);
    println!("pub const FACET_TREAT_COEFS: [f64; 3] = {:?};", c.treat_coefs);
    println!("pub const FACET_BASE_COEFS: [f64; 3] = {:?};", c.base_coefs);
    println!("{}", serde_json::to_string_pretty(&c.achieved).expect("serializable"));
}
