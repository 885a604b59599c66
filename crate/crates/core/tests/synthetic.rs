use typhoon_core::data::{bayes_accuracy, SynthSpec};

// Reference values come from an independent numpy/scipy Monte Carlo of the
// same generating mixture with 30,000 draws (0.682, 0.894).
#[test]
fn default_bayes_bounds_match_reference() {
    let (env, comb) = bayes_accuracy(&SynthSpec::default()).unwrap();
    println!("env {env} combined {comb}");
    assert!((env - 0.682).abs() < 0.012, "{env}");
    assert!((comb - 0.894).abs() < 0.012, "{comb}");
}
