//! Sequential stopping designs for adaptive trials.
//!
//! Two stylized trial environments (a binary-hypothesis trial and an Emax
//! dose-finding trial) are posed as episodic stopping problems over a
//! low-dimensional posterior summary, then solved four ways:
//!
//! - constrained backward induction on a grid over the summary statistic,
//!   driven by reusable no-stopping forward simulations ([`dp`]);
//! - parametric decision boundaries tuned by grid search plus a quadratic
//!   response surface ([`boundary`]);
//! - tabular Q-learning and a small DQN ([`qlearn`]);
//! - REINFORCE-style policy gradients with a softmax policy ([`pg`]).
//!
//! Exact small-instance solutions ([`example1::exact_dp`]) and closed-form
//! pivotal-trial numerics ([`pivotal`]) anchor every approximate method.

pub mod boundary;
pub mod dp;
pub mod env;
pub mod error;
pub mod example1;
pub mod example2;
pub mod forward;
pub mod grid;
pub mod nn;
pub mod pg;
pub mod pivotal;
pub mod qlearn;

pub use env::{Action, EnvId, SeedSpec, StoppingEnv, Summary, Transition};
pub use error::{Error, Result};
