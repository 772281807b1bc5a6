mod support {
    #[allow(dead_code)]
    pub mod gradient_suite;
}

use support::gradient_suite as suite;

#[test]
fn matmul_transpose_reshape() {
    suite::matmul_transpose_reshape();
}

#[test]
fn linear_and_row_bias() {
    suite::linear_and_row_bias();
}

#[test]
fn elementwise_arithmetic() {
    suite::elementwise_arithmetic();
}

#[test]
fn reductions() {
    suite::reductions();
}

#[test]
fn elementwise_maximum() {
    suite::elementwise_maximum();
}

#[test]
fn slicing_and_concatenation() {
    suite::slicing_and_concatenation();
}

#[test]
fn spatial_gating() {
    suite::spatial_gating();
}

#[test]
fn pointwise_convolution() {
    suite::pointwise_convolution();
}

#[test]
fn convolution_3x3_both_strides() {
    suite::convolution_3x3_both_strides();
}

#[test]
fn depthwise_convolution() {
    suite::depthwise_convolution();
}

#[test]
fn group_normalization() {
    suite::group_normalization();
}

#[test]
fn layer_normalization() {
    suite::layer_normalization();
}

#[test]
fn activations() {
    suite::activations();
}

#[test]
fn pixel_shuffle_and_resize() {
    suite::pixel_shuffle_and_resize();
}

#[test]
fn soft_box_gate_wrt_box() {
    suite::soft_box_gate_wrt_box();
}

#[test]
fn bce_with_logits() {
    suite::bce_with_logits();
}

#[test]
fn bce_dice_objective() {
    suite::bce_dice_objective();
}

#[test]
fn multi_head_attention_block() {
    suite::multi_head_attention_block();
}

#[test]
fn transformer_decoder_layer() {
    suite::transformer_decoder_layer();
}

#[test]
fn end_to_end_decoder_objective() {
    suite::end_to_end_decoder_objective();
}
