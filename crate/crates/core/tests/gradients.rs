//! Reverse-mode gradients against central finite differences.

#[path = "support/gradcheck.rs"]
mod gradcheck;

use fewshot::peft::Strategy;

#[test]
fn elementwise_and_linear_ops() {
    gradcheck::elementwise_and_linear_ops();
}

#[test]
fn nonlinear_ops() {
    gradcheck::nonlinear_ops();
}

#[test]
fn stage_one_loss_layernorm() {
    gradcheck::check_stage_one(Strategy::LayerNorm);
}

#[test]
fn stage_one_loss_lora() {
    gradcheck::check_stage_one(Strategy::Lora);
}

#[test]
fn stage_one_loss_bitfit() {
    gradcheck::check_stage_one(Strategy::BitFit);
}

#[test]
fn stage_one_loss_prompt() {
    gradcheck::check_stage_one(Strategy::Prompt);
}

#[test]
fn stage_two_loss() {
    gradcheck::stage_two_loss_matches_differences();
}
