pub mod acquisition;
pub mod bench;
pub mod config;
pub mod engine;
pub mod error;
pub mod gp;
pub mod hyper;
pub mod problem;
pub mod qoi;
pub mod report;

pub use error::{Error, EvalError, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/gp.md")]
    mod gp {}
    #[doc = include_str!("../../../book/src/hyper.md")]
    mod hyper {}
    #[doc = include_str!("../../../book/src/qoi.md")]
    mod qoi {}
    #[doc = include_str!("../../../book/src/ekld.md")]
    mod ekld {}
    #[doc = include_str!("../../../book/src/bgo.md")]
    mod bgo {}
    #[doc = include_str!("../../../book/src/engine.md")]
    mod engine {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
