//! Whole-model gradients against central finite differences.

mod support;

use prunetrack_core::zoo::Mode;
use support::fd::{check_model, GradCheck};

const ARCHS: [&str; 4] = ["mini_alex", "mini_resnet", "mini_vit", "mini_encdec"];

#[test]
fn toy_models_train_mode() {
    for arch in ARCHS {
        let mut total = GradCheck::default();
        for seed in 0..3 {
            total.merge(check_model(arch, seed, Mode::Train, 3));
        }
        assert!(total.worst < 1e-6, "{arch}: {total:?}");
    }
}

#[test]
fn toy_models_eval_mode() {
    for arch in ARCHS {
        let r = check_model(arch, 7, Mode::Eval, 3);
        assert!(r.worst < 1e-6, "{arch}: {r:?}");
    }
}
