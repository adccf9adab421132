pub mod geometry;
pub mod wrench;
pub mod kinematics;
pub mod proposal;
pub mod bilevel;
pub mod pipeline;
