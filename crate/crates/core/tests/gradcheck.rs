// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients against 64-bit central differences.

mod common;

#[test]
fn elementwise_and_matmul() {
    common::gradcheck::elementwise_and_matmul();
}

#[test]
fn normalisation_and_softmax() {
    common::gradcheck::normalisation_and_softmax();
}

#[test]
fn row_plumbing() {
    common::gradcheck::row_plumbing();
}

#[test]
fn causal_attention() {
    common::gradcheck::causal_attention();
}

#[test]
fn steer_primitive_wrt_hidden_and_projection() {
    common::gradcheck::steer_primitive_wrt_hidden_and_projection();
}

#[test]
fn full_model_loss_wrt_backbone_and_steering() {
    common::gradcheck::full_model_loss_wrt_backbone_and_steering();
}
