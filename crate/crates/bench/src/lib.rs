//! Shared setup for the criterion benches.

use smoothcam::{build_fixture, random_input, FixtureKind, Model, Tensor};

/// The 1×16×16 random fixture with ten classes and a seeded input.
pub fn random_case() -> (Model, Tensor) {
    let model = build_fixture(&FixtureKind::Random {
        seed: 7,
        classes: 10,
    })
    .expect("fixture builds");
    let input = random_input(&model, 1);
    (model, input)
}
