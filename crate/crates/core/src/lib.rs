pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod evaluation;
pub mod flowwarp;
pub mod generator;
pub mod kernels;
pub mod nn;
pub mod objective;
pub mod persist;
pub mod report;
pub mod perturb;
pub mod tensor;
pub mod trainer;
