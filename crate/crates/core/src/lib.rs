pub mod dataset;
pub mod decoder;
pub mod earley;
pub mod eval;
pub mod graph;
pub mod lm;
pub mod qcfg;
pub mod registry;
pub mod remote;
pub mod rules;
pub mod tokenizer;
pub mod transducer;
pub mod value;
