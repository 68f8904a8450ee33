//! Simulation library for exact mixing/unmixing transport experiments:
//! dyadic chessboard data evolved by square-rotation flows, time truncations
//! that select distinct weak solutions, smooth perturbations conjugated
//! through numerically integrated flows, and mollified regularisations.

pub mod bump;
pub mod dyadic;
pub mod evolution;
pub mod fields;
pub mod flow;
pub mod fv;
pub mod perturbed;
pub mod regularize;
pub mod scenarios;
pub mod smooth;

pub use dyadic::{cell_average, chessboard, square_of, CellGrid, Dyadic, DyadicPoint, SquareFamily, SquareId};
pub use fields::{
    eval_b, eval_trunc, eval_u, eval_v, sup_norm, Conventions, FieldSampler, FieldSpec,
    Orientation, ReflectionSign, TruncKind, Vec2,
};
pub use flow::{flow_field, flow_u, flow_v, inverse_flow, ExactFlowSpec, FlowQuery};
pub use smooth::{
    estimate_checks, flow_w, inverse_flow_w, time_mollify, FlowResult, SmoothFieldDef,
    SmoothVectorField,
};
