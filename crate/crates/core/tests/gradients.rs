#[allow(dead_code)]
mod gradcheck;

#[test]
fn fc_gradients() {
    gradcheck::fc_gradients();
}

#[test]
fn conv1d_gradients_and_loop_oracle() {
    gradcheck::conv1d_gradients_and_loop_oracle();
}

#[test]
fn conv2d_gradients_and_loop_oracle() {
    gradcheck::conv2d_gradients_and_loop_oracle();
}

#[test]
fn batchnorm_gradients() {
    gradcheck::batchnorm_gradients();
}

#[test]
fn pooling_gradients() {
    gradcheck::pooling_gradients();
}

#[test]
fn activation_and_elementwise_gradients() {
    gradcheck::activation_and_elementwise_gradients();
}

#[test]
fn dropout_gradient_with_fixed_mask() {
    gradcheck::dropout_gradient_with_fixed_mask();
}

#[test]
fn softmax_cross_entropy_gradients() {
    gradcheck::softmax_cross_entropy_gradients();
}

#[test]
fn orthogonality_loss_gradients() {
    gradcheck::orthogonality_loss_gradients();
}

#[test]
fn gated_fusion_gradients() {
    gradcheck::gated_fusion_gradients();
}

#[test]
fn composed_model_gradients() {
    gradcheck::composed_model_gradients();
}

#[test]
fn backward_is_linear_in_the_loss() {
    gradcheck::backward_is_linear_in_the_loss();
}

#[test]
fn forward_and_backward_are_deterministic() {
    gradcheck::forward_and_backward_are_deterministic();
}
