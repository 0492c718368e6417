//! Clinician-in-the-loop drafting of Wisconsin Gait Scale reports.

pub mod agents;
pub mod evalharness;
pub mod gaitkin;
pub mod normbase;
pub mod pipeline;
pub mod plotgen;
pub mod synth;
pub mod wgs;
