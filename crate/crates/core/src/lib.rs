pub mod tensor;
pub mod corpus;
pub mod encoder;
pub mod heads;
pub mod losses;
pub mod optim;
pub mod trainer;
pub mod eval;
pub mod selfcheck;
pub mod cli;
