pub mod fuzzy;
pub mod graph;
pub mod nn;
pub mod knowledge;
pub mod logic;
pub mod optim;
pub mod tape;
pub mod tensor;
