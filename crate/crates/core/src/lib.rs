//! Evolutionary search for convolutional network architectures.
//!
//! Architectures are Cartesian genetic programming genotypes ([`genome`])
//! over a catalog of network blocks ([`catalog`]). [`phenotype`] decodes them
//! into shaped layer graphs, [`nn`] trains those graphs on the CPU, and
//! [`evolution`] runs a (1 + λ) search scored by an [`evaluator`].

pub mod catalog;
pub mod data;
pub mod evaluator;
pub mod evolution;
pub mod genome;
pub mod nn;
pub mod phenotype;
pub mod rng;

/// Guide chapters, compiled and run as doctests.
#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/genome.md")]
    struct Genome;
    #[doc = include_str!("../../../book/src/catalog.md")]
    struct Catalog;
    #[doc = include_str!("../../../book/src/phenotype.md")]
    struct Phenotype;
    #[doc = include_str!("../../../book/src/runtime.md")]
    struct Runtime;
    #[doc = include_str!("../../../book/src/evaluation.md")]
    struct Evaluation;
    #[doc = include_str!("../../../book/src/evolution.md")]
    struct Evolution;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}
