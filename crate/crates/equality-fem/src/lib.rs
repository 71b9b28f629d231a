//! Functional a posteriori error equalities for conforming mixed
//! approximations of A* a2 A x + a1 x = f.

pub mod abstract_identity;
pub mod fem;
pub mod mesh;
pub mod quadrature;
pub mod sparse;
