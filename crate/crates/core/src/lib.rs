//! Linear-quadratic mean-field games over backward stochastic
//! large-population systems.
//!
//! Every agent steers a backward SDE `dxᵢ = (Axᵢ + Buᵢ) dt + Σⱼ zᵢⱼ dWⱼ`,
//! `xᵢ(T) = ξᵢ`, toward a target that depends on the population average. The
//! crate solves the finite-N centralized Nash strategy and the decentralized
//! mean-field strategy, simulates populations under both, and measures how
//! far the decentralized strategy is from a Nash equilibrium.
//!
//! The solvers are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix `f64`.
//!
//! ```no_run
//! use backward_mfg::Model;
//! use backward_mfg::paths::generate_paths;
//! use backward_mfg::population::{simulate_decentralized, DecentralizedPlan, SimulationOptions};
//!
//! let model = Model::reference_scalar().with_agents(50).validate()?;
//! let plan = DecentralizedPlan::new(&model)?;
//! let paths = generate_paths(model.grid(), 50, 16, 42)?;
//! let run = simulate_decentralized(&model, &plan, &paths, &SimulationOptions::default())?;
//! println!("mean cost {:.4}", run.mean_cost().mean);
//! # Ok::<(), backward_mfg::Error>(())
//! ```

pub mod bsde;
pub mod error;
pub mod fit;
pub mod flows;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod paths;
pub mod population;
pub mod riccati;
pub mod scalar;
pub mod verifier;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix = linalg::Mat<f64>;
pub type Model = model::ModelSpec<f64>;
pub type Validated = model::ValidatedModel<f64>;
pub type Grid = model::TimeGrid<f64>;
pub type Path = ode::MatrixPath<f64>;
pub type Riccatis = riccati::RiccatiSet<f64>;
pub type FiniteRiccatis = riccati::FiniteRiccati<f64>;
pub type MeanFlows = flows::MeanFlow<f64>;
pub type PopulationPaths = paths::PathBundle<f64>;
pub type Run = population::PopulationRun<f64>;
