//! Adjoint, codec, metric and loss properties against independent oracles.

mod common;

use common::checks;

fn pass(result: checks::Check) {
    match result {
        Ok(summary) => println!("{summary}"),
        Err(why) => panic!("{why}"),
    }
}

#[test]
fn deconv_is_the_adjoint_of_conv() {
    pass(checks::deconv_adjoint());
}

#[test]
fn heatmap_codec_round_trip() {
    pass(checks::heatmap_codec());
}

#[test]
fn metrics_match_step_function_oracle() {
    pass(checks::metric_oracle(1000));
}

#[test]
fn loss_identities_and_invariances() {
    pass(checks::loss_identities(500));
}

#[test]
fn regularizers_stop_gradient_at_the_source() {
    pass(checks::stop_gradient(200));
}
