//! Central finite-difference checks for every differentiable component:
//! modality encoders, fusion, alignment losses, the graph-attention
//! localizer with both heads, and the quantizer commitment loss.

mod common;

const SEEDS: u64 = 20;

#[test]
fn encoders_and_fusion_match_finite_differences() {
    common::family_encoders(SEEDS);
}

#[test]
fn alignment_losses_match_finite_differences() {
    common::family_alignment(SEEDS);
}

#[test]
fn localizer_joint_loss_matches_finite_differences() {
    common::family_localizer(SEEDS);
}

#[test]
fn vq_commitment_loss_matches_finite_differences() {
    common::family_vq(SEEDS);
}
