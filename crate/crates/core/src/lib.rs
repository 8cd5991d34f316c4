pub mod linalg;
pub mod system_model;
pub mod combinatorics;
pub mod davies;
pub mod model_file;
pub mod fock;
pub mod dilation;
