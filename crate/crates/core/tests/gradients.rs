mod common;

#[test]
fn attend_gradients() {
    assert!(common::attend_gradients() >= 20);
}

#[test]
fn pairwise_cosine_corr_gradients() {
    assert!(common::pairwise_cosine_corr_gradients() >= 20);
}

#[test]
fn a2e_total_loss_gradients() {
    assert!(common::a2e_total_loss_gradients() >= 20);
}

#[test]
fn renderer_generator_loss_gradients() {
    assert!(common::renderer_generator_loss_gradients() >= 20);
}
