//! Independent checks: an exact solver for small edit MDPs, naive metric
//! implementations, and finite-difference gradients.

mod checks;
mod finite_diff;
mod mdp;
mod naive;

pub use checks::{
    check_gradients, check_metrics, check_normalization, check_telescoping,
    normalization_low_spread, random_tokens, small_dims, small_world, CheckReport, SmallWorld,
    NORMALIZATION_MIN_SPREAD,
};
pub use finite_diff::{finite_diff_grad, max_relative_error, relative_error};
pub use mdp::{
    check_instance, planted_instance, random_instance, verify_theorem, InstanceReport, MdpAction,
    Mutation, RewardScheme, Solution, TheoremReport, TinyMdp, MAX_HORIZON, MAX_UNIVERSE, TIE_TOL,
};
pub use naive::{
    brute_force_reward, naive_ddi, naive_f1, naive_jaccard, naive_refusal, NaiveWorld,
};
