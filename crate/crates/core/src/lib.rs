pub mod sparse;
pub mod tensor;
pub mod molgraph;
pub mod eigensolver;
pub mod phi;
pub mod potential;
pub mod oracles;
pub mod datagen;
pub mod trainer;
pub mod md;
pub mod bench;
