//! # jointmap
//!
//! Joint spatio-temporal disease mapping with shared latent components.
//!
//! The crate fits Bayesian hierarchical Poisson models to
//! area x period x disease count data. Relative risks decompose into
//! latent spatial and temporal fields shared by designated subsets of
//! diseases, weighted per disease, optionally with space-time interaction
//! and correlated per-cell heterogeneity. Inference runs by
//! Metropolis-within-Gibbs MCMC with conjugate precision updates, and
//! models are compared by DIC.
//!
//! Model variants:
//!
//! - `A`: shared spatial + temporal components only
//! - `B`: adds correlated per-cell heterogeneity (multivariate normal
//!   across diseases)
//! - `C`: adds an exchangeable space-time interaction shared by diseases
//! - `D`: both
//!
//! ## Quick start
//!
//! ```
//! use jointmap::dataset::ComponentMap;
//! use jointmap::graph::{rw1_structure, AdjacencyGraph};
//! use jointmap::mcmc::{McmcConfig, Sampler};
//! use jointmap::model::{HyperParameters, ModelSpec, Variant};
//! use jointmap::simulate::{draw_true_state, simulate_dataset, SimulationRecipe};
//! use ndarray::Array3;
//! use rand::SeedableRng;
//!
//! let graph = AdjacencyGraph::parse("A: B\nB: C\nC: D\nD: A").unwrap();
//! let map = ComponentMap::new(
//!     ndarray::arr2(&[[true, true, false], [false, true, true]]),
//!     vec!["one".into(), "two".into()],
//! )
//! .unwrap();
//! let spec = ModelSpec::new(Variant::A, map, 4, 3, 3).unwrap();
//! let hyper = HyperParameters::default_for(3).unwrap();
//!
//! let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
//! let truth = draw_true_state(&spec, &mut rng, 0.2).unwrap();
//! let recipe = SimulationRecipe::with_default_labels(
//!     spec.clone(),
//!     truth,
//!     Array3::from_elem((4, 3, 3), 80.0),
//!     7,
//! )
//! .unwrap();
//! let data = simulate_dataset(&recipe).unwrap();
//!
//! let config = McmcConfig {
//!     n_keep_iterations: 200,
//!     thin: 10,
//!     burn_in: 100,
//!     ..McmcConfig::default()
//! };
//! let q = graph.structure_matrix();
//! let r = rw1_structure(3).unwrap();
//! let chains = Sampler::new(&data, &spec, &hyper, &q, &r, config)
//!     .unwrap()
//!     .run_all()
//!     .unwrap();
//! assert_eq!(chains.len(), 2);
//! ```
//!
//! The `jointmap` binary wraps the same pipeline behind `fit`, `simulate`,
//! `compare`, `export-geojson` and `expected` subcommands; see the README
//! and the crate examples.

pub mod cli;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod mcmc;
pub mod model;
pub mod priors;
pub mod simulate;

pub use error::{Error, Result};
