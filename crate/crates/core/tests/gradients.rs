mod common;

use common::gradsuite::{self, Report};
use common::REL_TOL;

fn assert_all_close(report: Report) {
    for (name, err) in report {
        assert!(err <= REL_TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn codec_layers() {
    assert_all_close(gradsuite::codec());
}

#[test]
fn four_networks_train_and_eval_norm() {
    assert_all_close(gradsuite::networks());
}

#[test]
fn train_mode_distortions() {
    assert_all_close(gradsuite::distortions());
}

#[test]
fn attention_and_losses() {
    assert_all_close(gradsuite::attention_and_losses());
}

#[test]
fn full_pipeline_wrt_cover() {
    assert_all_close(gradsuite::pipeline());
}
