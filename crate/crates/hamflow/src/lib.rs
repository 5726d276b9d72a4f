//! Simulation of small-diffusion perturbations of periodic 2-D Hamiltonian
//! flows: flow topology on the torus, separatrix Markov chains, level-set
//! coefficients, and effective-diffusivity estimators.

pub mod chain;
pub mod cli;
pub mod config;
pub mod estimator;
pub mod field;
pub mod geom;
pub mod levelcoeffs;
pub mod sde;
pub mod selfcheck;
pub mod topology;
