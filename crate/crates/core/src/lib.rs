pub mod core_math;
pub mod boundary;
pub mod parisi_pde;
pub mod parisi_opt;
pub mod finite_solver;
pub mod analysis;
pub mod sde_verify;
