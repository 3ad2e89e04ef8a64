pub mod algebra;
pub mod conservation;
pub mod convergence;
pub mod dressing;
pub mod eds;
pub mod grid;
pub mod lax;
pub mod linalg;
