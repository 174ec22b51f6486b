//! Correlated nonparametric topic model with learned random-function
//! decoders: corpus handling, special functions, a small network engine,
//! variational inference, evaluation and samplers. The `prme` binary wraps
//! the library; see [`cli`].

pub mod cli;
pub mod corpus;
pub mod eval;
pub mod model;
pub mod nnet;
pub mod paintbox;
pub mod rng;
pub mod stats;

// Compiles every snippet in the guide as a doctest.
#[cfg(doctest)]
mod book {
    macro_rules! chapter {
        ($name:ident, $file:literal) => {
            #[doc = include_str!(concat!("../../../book/src/", $file))]
            mod $name {}
        };
    }
    chapter!(introduction, "introduction.md");
    chapter!(model, "model.md");
    chapter!(paintbox, "paintbox.md");
    chapter!(inference, "inference.md");
    chapter!(networks, "networks.md");
    chapter!(evaluation, "evaluation.md");
    chapter!(cli, "cli.md");
    chapter!(reproducibility, "reproducibility.md");

    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
