//! Run configuration and the end-to-end commands built on the library.

pub mod api;
mod commands;
mod config;
mod gradcheck;

pub use commands::{
    eval, finetune, gen_data, pretrain, ConventionReport, EvalOutput, FinetuneOutput,
    FinetuneRecord, FoldOutput, GenDataOutput, PretrainOutput, PretrainRecord,
};
pub use config::{
    Command, DataSection, EvalSection, FinetuneSection, GradcheckSection, Overrides,
    PretrainSection, RunConfig, TextPretrainSection,
};
pub use gradcheck::{run_gradcheck, GradcheckReport, GradcheckRow};
