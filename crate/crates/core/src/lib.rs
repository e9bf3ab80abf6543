//! Neural density imitation: learn a density model of an expert's
//! state-action occupancy measure, then run reinforcement learning that
//! rewards matching it while maximizing a lower bound on the imitator's own
//! occupancy entropy.
//!
//! The crate has three layers:
//!
//! * [`mdp`], [`occupancy`] and [`envs`] hold finite MDPs and the exact
//!   quantities (occupancy measures, entropies, mutual information, the
//!   entropy lower bound and its policy gradient) used to check the theory.
//! * [`autodiff`], [`nn`] and [`density`] are the numerical substrate for
//!   the learned density models.
//! * [`imitation`] assembles the augmented reward and the two learners:
//!   exact soft policy iteration for tabular problems and a small soft
//!   actor-critic for the continuous point mass.

pub mod autodiff;
pub mod density;
pub mod envs;
pub mod imitation;
pub mod mdp;
pub mod nn;
pub mod occupancy;
